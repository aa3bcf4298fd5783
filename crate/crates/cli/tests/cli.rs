mod support;

use std::path::{Path, PathBuf};

use nnfc_core::pipeline::{read_captions, write_captions, EvalReport};
use nnfc_core::scene::{load_dataset, Split};
use nnfc_core::ModelParams;
use support::{code, nnfc, ok, s, FAST};

fn gen(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let data = dir.join(format!("data_{n}_{seed}"));
    ok(&["gen-data", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", s(&data), "--ratios", "0.8,0.1,0.1"]);
    data
}

fn train_to(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--seed", "5"];
    args.extend_from_slice(FAST);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn gen_data_reports_the_default_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gen-data", "--n", "5317", "--seed", "3", "--out", s(&dir.path().join("d"))]);
    assert!(out.starts_with("train 4186 / val 474 / test 657, vocabulary "), "{out}");
}

#[test]
fn gen_data_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), 120, 9);
    let b = dir.path().join("again");
    ok(&["gen-data", "--n", "120", "--seed", "9", "--out", s(&b), "--ratios", "0.8,0.1,0.1"]);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn io_and_usage_problems_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    // a regular file where a directory is needed cannot be written into, even as root
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "x").unwrap();
    let res = nnfc(&["gen-data", "--n", "60", "--out", s(&blocker.join("sub"))]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!res.stderr.is_empty(), "a message should explain the failure");

    let missing = dir.path().join("nope");
    assert_eq!(code(&["train", "--data", s(&missing), "--out", s(&dir.path().join("w"))]), 2);
    assert_eq!(code(&["eval", "--captions", s(&missing), "--data", s(&missing)]), 2);
    assert_eq!(code(&["gen-data", "--n", "60", "--out", s(&missing), "--ratios", "0.8,0.2"]), 2);
    assert_eq!(code(&["train", "--bogus"]), 2);
    assert_eq!(code(&[]), 2);
}

#[test]
fn damaged_artifacts_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 60, 1);
    let weights = dir.path().join("m.weights");
    train_to(&data, &weights, &["--no-cam"]);
    let store = dir.path().join("m.nnds");
    ok(&["build-datastore", "--weights", s(&weights), "--data", s(&data), "--out", s(&store)]);
    let caps = dir.path().join("c.txt");

    let mut bad = std::fs::read(&store).unwrap();
    bad[0] ^= 0xff;
    let bad_store = dir.path().join("bad.nnds");
    std::fs::write(&bad_store, bad).unwrap();
    let args = ["generate", "--weights", s(&weights), "--datastore", s(&bad_store), "--data", s(&data), "--out", s(&caps)];
    assert_eq!(code(&args), 3);

    let mut bad = std::fs::read(&weights).unwrap();
    bad[1] = b'X';
    let bad_weights = dir.path().join("bad.weights");
    std::fs::write(&bad_weights, bad).unwrap();
    assert_eq!(code(&["build-datastore", "--weights", s(&bad_weights), "--data", s(&data), "--out", s(&store)]), 3);

    // a datastore is not a weights file and vice versa
    assert_eq!(code(&["build-datastore", "--weights", s(&store), "--data", s(&data), "--out", s(&bad_store)]), 3);

    std::fs::write(&caps, "no header\n0\ta b\n").unwrap();
    assert_eq!(code(&["eval", "--captions", s(&caps), "--data", s(&data)]), 3);
}

#[test]
fn full_pipeline_and_knn_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 100, 2);
    let ds = load_dataset(&data).unwrap();
    let weights = dir.path().join("m.weights");
    let out = train_to(&data, &weights, &[]);
    assert!(out.contains("cam: "), "{out}");
    assert!(dir.path().join("m.weights.log.jsonl").exists());

    let store = dir.path().join("m.nnds");
    let out = ok(&["build-datastore", "--weights", s(&weights), "--data", s(&data), "--out", s(&store)]);
    let entries: usize = ds.train.iter().map(|x| x.caption_train.len() - 1).sum();
    assert!(out.contains(&format!("datastore: {entries} entries of width 16")), "{out}");

    let plain = dir.path().join("plain.txt");
    let off = dir.path().join("off.txt");
    let on = dir.path().join("on.txt");
    ok(&["generate", "--weights", s(&weights), "--data", s(&data), "--out", s(&plain)]);
    let base = ["generate", "--weights", s(&weights), "--datastore", s(&store), "--data", s(&data)];
    ok(&[&base[..], &["--out", s(&off), "--lambda-knn", "0"]].concat());
    ok(&[&base[..], &["--out", s(&on)]].concat());
    assert_eq!(std::fs::read(&plain).unwrap(), std::fs::read(&off).unwrap());

    let caps = read_captions(&on).unwrap();
    assert_eq!(caps.len(), ds.test.len());
    for ((id, text), sample) in caps.iter().zip(&ds.test) {
        assert_eq!(*id, sample.id);
        assert!(!text.is_empty() && !text.contains("<eos>") && !text.contains("<bos>"), "{text:?}");
    }

    let report = dir.path().join("eval.json");
    let out = ok(&["eval", "--captions", s(&on), s(&plain), "--data", s(&data), "--out", s(&report)]);
    assert!(out.starts_with("BLEU-4 ") && out.contains("ROUGE-L") && out.contains("CIDEr-D"), "{out}");
    let r = EvalReport::load(&report).unwrap();
    assert_eq!((r.split, r.samples, r.runs.len()), (Split::Test, ds.test.len(), 2));
    for m in [&r.bleu4, &r.rouge_l, &r.cider_d] {
        assert!(m.mean.is_finite() && m.std >= 0.0);
    }
}

#[test]
fn references_scored_against_themselves_get_full_bleu() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 80, 4);
    let ds = load_dataset(&data).unwrap();
    let caps: Vec<(usize, String)> =
        ds.test.iter().map(|x| (x.id, ds.vocab.decode(&x.captions_eval[0]).join(" "))).collect();
    let file = dir.path().join("refs.txt");
    write_captions(&file, &caps).unwrap();
    let report = dir.path().join("r.json");
    ok(&["eval", "--captions", s(&file), "--data", s(&data), "--out", s(&report)]);
    let r = EvalReport::load(&report).unwrap();
    assert_eq!(r.bleu4.mean, 1.0);
    assert_eq!(r.rouge_l.mean, 1.0);
    assert_eq!(r.bleu4.std, 0.0);
}

#[test]
fn config_file_values_apply_and_flags_override_them() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 60, 6);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\nd_model = 8\nepochs = 1\nenc_layers = 1\ndec_layers = 1\nno_cam = true\n").unwrap();

    let w1 = dir.path().join("a.weights");
    ok(&["train", "--data", s(&data), "--out", s(&w1), "--config", s(&cfg)]);
    let p = ModelParams::<f32>::load(&w1).unwrap();
    assert_eq!((p.config.d_model, p.config.use_cam), (8, false));
    let log = std::fs::read_to_string(dir.path().join("a.weights.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let w2 = dir.path().join("b.weights");
    ok(&["train", "--data", s(&data), "--out", s(&w2), "--config", s(&cfg), "--d-model", "12"]);
    assert_eq!(ModelParams::<f32>::load(&w2).unwrap().config.d_model, 12);

    std::fs::write(&cfg, "d_modle = 8\n").unwrap();
    assert_eq!(code(&["train", "--data", s(&data), "--out", s(&w2), "--config", s(&cfg)]), 2);
}

#[test]
fn ablate_emits_a_table_with_every_condition() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 60, 8);
    let report = dir.path().join("table.md");
    let arts = dir.path().join("runs");
    let mut args = vec!["ablate", "--data", s(&data), "--out", s(&report), "--seeds", "1,2", "--artifacts", s(&arts)];
    args.extend_from_slice(FAST);
    let out = ok(&args);
    let md = std::fs::read_to_string(&report).unwrap();
    assert_eq!(out, md);
    for label in ["Ours |", "Ours (w/o NNCM)", "Ours (w/o CAM)", "Frequency baseline"] {
        assert!(md.contains(label), "{label} missing from\n{md}");
    }
    assert!(md.contains("**"), "best scores are bold");
    assert!(md.contains(" ± "));
    assert!(dir.path().join("table.json").exists());
    for stem in ["full_seed1", "full_seed2", "no_cam_seed1", "no_cam_seed2"] {
        assert!(arts.join(format!("{stem}.weights")).exists(), "{stem}");
        assert!(arts.join(format!("{stem}.nnds")).exists(), "{stem}");
    }
}
