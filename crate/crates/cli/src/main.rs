mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::ConfigFile;
use nnfc_core::metrics::evaluate;
use nnfc_core::nncm::Datastore;
use nnfc_core::pipeline::{
    caption_text, datastore_for, eval_corpus, generate_all, read_captions, run_ablation, write_captions, AblationConfig,
    Condition, EvalReport, KnnConfig,
};
use nnfc_core::scene::{build_dataset, load_dataset, write_dataset, DatasetConfig, Split, DEFAULT_RATIOS};
use nnfc_core::training::{train, write_log, AdamConfig, TrainConfig};
use nnfc_core::{Error, ModelConfig, ModelParams};

/// Future captioning of robot placement outcomes.
#[derive(Parser)]
#[command(name = "nnfc", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/val/test JSONL and vocab.txt).
    GenData(GenDataArgs),
    /// Pre-train the CAM, train the captioner and write a weights file.
    Train(TrainArgs),
    /// Teacher-force the training split and write the kNN datastore.
    BuildDatastore(DatastoreArgs),
    /// Greedy-decode captions for a dataset split.
    Generate(GenerateArgs),
    /// Score caption files against a split's references.
    Eval(EvalArgs),
    /// Train and score every ablation condition over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Train,val,test fractions; defaults to 4186:474:657.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// Evaluate against the training caption only.
    #[arg(long)]
    single_reference: bool,
}

#[derive(Args, Default)]
struct ModelOpts {
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    gl_threshold: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda_ce: Option<f64>,
    #[arg(long)]
    lambda_nce: Option<f64>,
    #[arg(long)]
    cam_epochs: Option<usize>,
    #[arg(long)]
    cam_lr: Option<f64>,
    #[arg(long)]
    n_knn: Option<usize>,
    #[arg(long)]
    lambda_knn: Option<f64>,
}

const CONFIG_KEYS: &[&str] = &[
    "seed",
    "d_model",
    "enc_layers",
    "dec_layers",
    "lr",
    "batch_size",
    "epochs",
    "gl_threshold",
    "tau",
    "lambda_ce",
    "lambda_nce",
    "cam_epochs",
    "cam_lr",
    "n_knn",
    "lambda_knn",
    "no_cam",
    "no_nncm",
    "seeds",
];

struct Resolved {
    file: ConfigFile,
    train: TrainConfig,
    knn: KnnConfig,
    d_model: usize,
    enc_layers: usize,
    dec_layers: usize,
}

impl ModelOpts {
    fn resolve(&self) -> Result<Resolved> {
        let file = ConfigFile::load(self.config.as_deref())?;
        file.check_keys(CONFIG_KEYS)?;
        let d = TrainConfig::default();
        let train = TrainConfig {
            lambda_ce: file.pick("lambda_ce", self.lambda_ce, d.lambda_ce)?,
            lambda_nce: file.pick("lambda_nce", self.lambda_nce, d.lambda_nce)?,
            adam: AdamConfig {
                lr: file.pick("lr", self.lr, d.adam.lr)?,
                ..d.adam
            },
            batch_size: file.pick("batch_size", self.batch_size, d.batch_size)?,
            max_epochs: file.pick("epochs", self.epochs, d.max_epochs)?,
            gl_threshold: file.pick("gl_threshold", self.gl_threshold, d.gl_threshold)?,
            seed: file.pick("seed", self.seed, d.seed)?,
            tau: file.pick("tau", self.tau, d.tau)?,
            cam_epochs: file.pick("cam_epochs", self.cam_epochs, d.cam_epochs)?,
            cam_lr: file.pick("cam_lr", self.cam_lr, d.cam_lr)?,
        };
        train.validate()?;
        let k = KnnConfig::default();
        let knn = KnnConfig {
            k: file.pick("n_knn", self.n_knn, k.k)?,
            lambda: file.pick("lambda_knn", self.lambda_knn, k.lambda)?,
        };
        let m = ModelConfig::new(5);
        Ok(Resolved {
            d_model: file.pick("d_model", self.d_model, m.d_model)?,
            enc_layers: file.pick("enc_layers", self.enc_layers, m.enc_layers)?,
            dec_layers: file.pick("dec_layers", self.dec_layers, m.dec_layers)?,
            file,
            train,
            knn,
        })
    }
}

impl Resolved {
    fn model(&self, vocab_size: usize, use_cam: bool) -> Result<ModelConfig> {
        let m = ModelConfig {
            d_model: self.d_model,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            use_cam,
            ..ModelConfig::new(vocab_size)
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Weights file to write.
    #[arg(long)]
    out: PathBuf,
    /// Epoch log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Train without the collision attention module (attention channel all zeros).
    #[arg(long)]
    no_cam: bool,
    #[command(flatten)]
    opts: ModelOpts,
}

#[derive(Args)]
struct DatastoreArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    weights: PathBuf,
    /// kNN datastore; omit to decode from the model distribution alone.
    #[arg(long)]
    datastore: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda_knn: Option<f64>,
    #[arg(long)]
    n_knn: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// One caption file per run; several files are reported as mean ± std.
    #[arg(long, required = true, num_args = 1..)]
    captions: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// JSON report to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Markdown report to write; a JSON copy goes next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Directory for per-seed weights, datastores and logs.
    #[arg(long)]
    artifacts: Option<PathBuf>,
    #[command(flatten)]
    opts: ModelOpts,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let ratios = match a.ratios.as_deref() {
        Some(&[a, b, c]) => [a, b, c],
        Some(r) => return Err(Error::Config(format!("--ratios takes three fractions, got {}", r.len())).into()),
        None => DEFAULT_RATIOS,
    };
    let cfg = DatasetConfig {
        ratios,
        single_reference: a.single_reference,
        ..Default::default()
    };
    let ds = build_dataset(a.n, a.seed, &cfg)?;
    write_dataset(&a.out, &ds).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    let [tr, va, te] = ds.sizes();
    println!("train {tr} / val {va} / test {te}, vocabulary {} tokens", ds.vocab.len());
    Ok(())
}

fn log_path(out: &Path, log: Option<&PathBuf>) -> PathBuf {
    log.cloned().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    })
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let r = a.opts.resolve()?;
    let ds = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let no_cam = r.file.flag("no_cam", a.no_cam)?;
    let model = r.model(ds.vocab.len(), !no_cam)?;
    let t = Instant::now();
    let out = train(&ds, &model, &r.train)?;
    out.params.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let log = log_path(&a.out, a.log.as_ref());
    write_log(&log, &out.log)?;
    if let Some(cam) = &out.cam {
        println!("cam: {} epochs, bce {:.4}, train accuracy {:.3}", cam.epochs, cam.final_loss, cam.train_accuracy);
    }
    let last = out.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs in {:.1}s ({}), best epoch {} with val loss {:.4}; {} parameters",
        out.log.len(),
        t.elapsed().as_secs_f64(),
        if out.stopped_early { "early stop" } else { "epoch limit" },
        out.best_epoch,
        last.best_val_loss,
        out.params.num_scalars()
    );
    Ok(())
}

fn cmd_datastore(a: &DatastoreArgs) -> Result<()> {
    let params = ModelParams::load(&a.weights).with_context(|| format!("loading weights {}", a.weights.display()))?;
    let ds = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    check_vocab(&params, ds.vocab.len())?;
    let store = datastore_for(&params, &ds.train)?;
    store.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("datastore: {} entries of width {}", store.len(), store.d_model());
    Ok(())
}

fn check_vocab(params: &ModelParams, vocab: usize) -> Result<()> {
    if params.config.vocab_size != vocab {
        return Err(Error::Input(format!(
            "weights expect a {}-token vocabulary, the dataset has {vocab}",
            params.config.vocab_size
        ))
        .into());
    }
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    file.check_keys(CONFIG_KEYS)?;
    let d = KnnConfig::default();
    let knn = KnnConfig {
        k: file.pick("n_knn", a.n_knn, d.k)?,
        lambda: file.pick("lambda_knn", a.lambda_knn, d.lambda)?,
    };
    let params = ModelParams::load(&a.weights).with_context(|| format!("loading weights {}", a.weights.display()))?;
    let ds = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    check_vocab(&params, ds.vocab.len())?;
    let store = match &a.datastore {
        Some(p) => {
            let s = Datastore::load(p).with_context(|| format!("loading datastore {}", p.display()))?;
            if s.d_model() != params.config.d_model {
                return Err(Error::Input(format!(
                    "datastore keys have width {}, the model {}",
                    s.d_model(),
                    params.config.d_model
                ))
                .into());
            }
            s.check_vocab(ds.vocab.len())?;
            Some(s)
        }
        None => None,
    };
    let samples = ds.split(a.split);
    let t = Instant::now();
    let generated = generate_all(&params, samples, store.as_ref(), &knn)?;
    let secs = t.elapsed().as_secs_f64();
    let captions: Vec<(usize, String)> = samples
        .iter()
        .zip(&generated)
        .map(|(s, ids)| (s.id, caption_text(&ds.vocab, ids)))
        .collect();
    write_captions(&a.out, &captions).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{} captions in {secs:.1}s ({:.3}s per sample)",
        captions.len(),
        secs / captions.len().max(1) as f64
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let samples = ds.split(a.split);
    let mut runs = Vec::new();
    for path in &a.captions {
        let captions = read_captions(path).with_context(|| format!("reading {}", path.display()))?;
        runs.push(evaluate(&eval_corpus(samples, &captions, &ds.vocab)?)?);
    }
    let report = EvalReport::new(a.split, samples.len(), runs)?;
    println!(
        "BLEU-4 {:.4} ± {:.4}  ROUGE-L {:.4} ± {:.4}  CIDEr-D {:.4} ± {:.4}",
        report.bleu4.mean, report.bleu4.std, report.rouge_l.mean, report.rouge_l.std, report.cider_d.mean, report.cider_d.std
    );
    if let Some(out) = &a.out {
        report.save(out).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let r = a.opts.resolve()?;
    let seeds = match &a.seeds {
        Some(s) => s.clone(),
        None => r.file.pick::<String>("seeds", None, "1,2,3".into())?
            .split(',')
            .map(|s| s.trim().parse().map_err(|e| Error::Config(format!("seed `{s}`: {e}"))))
            .collect::<Result<Vec<u64>, Error>>()?,
    };
    let ds = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let cfg = AblationConfig {
        seeds,
        model: r.model(ds.vocab.len(), true)?,
        train: r.train.clone(),
        knn: r.knn,
        split: a.split,
        conditions: Condition::ALL.to_vec(),
    };
    if let Some(dir) = &a.artifacts {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut save_err = None;
    let report = run_ablation(&ds, &cfg, |c, run| {
        let Some(dir) = &a.artifacts else { return };
        let stem = format!("{}_seed{}", if c == Condition::NoCam { "no_cam" } else { "full" }, run.seed);
        let res = run
            .outcome
            .params
            .save(&dir.join(format!("{stem}.weights")))
            .and_then(|_| run.store.save(&dir.join(format!("{stem}.nnds"))))
            .and_then(|_| write_log(&dir.join(format!("{stem}.log.jsonl")), &run.outcome.log));
        if let Err(e) = res {
            save_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = save_err {
        return Err(e).context("saving ablation artifacts");
    }
    let md = report.to_markdown();
    std::fs::write(&a.out, &md).with_context(|| format!("writing {}", a.out.display()))?;
    let json = a.out.with_extension("json");
    std::fs::write(&json, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", json.display()))?;
    print!("{md}");
    Ok(())
}

/// 2 for usage and I/O problems, 3 for damaged or foreign files, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_) | Error::Config(_) => 2,
                e if e.is_format() => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let res = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::BuildDatastore(a) => cmd_datastore(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
