//! Independent reference implementations: a full-scan nearest-neighbour
//! search and step-by-step captioning metrics, written without the library.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::rng;
use nnfc_core::metrics::{tokenize, EvalCorpus};
use nnfc_core::nncm::Datastore;

/// Full scan, distances summed in key order, stable sort by (distance, index).
pub fn knn_oracle(keys: &[Vec<f32>], z: &[f32], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = keys
        .iter()
        .enumerate()
        .map(|(i, key)| {
            let mut d = 0.0f64;
            for j in 0..key.len() {
                let diff = key[j] as f64 - z[j] as f64;
                d += diff * diff;
            }
            (d, i)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn store_from(keys: &[Vec<f32>], values: &[u32]) -> Datastore {
    let mut ds = Datastore::new(keys[0].len());
    for (k, &v) in keys.iter().zip(values) {
        ds.push(k, v).unwrap();
    }
    ds
}

/// Half continuous keys, half coarse-lattice keys (many exact ties), plus duplicates.
pub fn tie_heavy_store(n: usize, d: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<u32>) {
    let mut r = rng(seed);
    let mut keys: Vec<Vec<f32>> = Vec::with_capacity(n);
    for i in 0..n {
        let key = match i % 4 {
            0 | 1 => (0..d).map(|_| r.random_range(-1.0f32..1.0)).collect(),
            2 => (0..d).map(|_| r.random_range(-1i32..=1) as f32 * 0.5).collect(),
            _ => keys[r.random_range(0..i)].clone(),
        };
        keys.push(key);
    }
    let values = (0..n).map(|_| r.random_range(4..60)).collect();
    (keys, values)
}

type Gram = Vec<String>;

fn grams(words: &[String], n: usize) -> BTreeMap<Gram, f64> {
    let mut out = BTreeMap::new();
    let mut i = 0;
    while i + n <= words.len() {
        *out.entry(words[i..i + n].to_vec()).or_insert(0.0) += 1.0;
        i += 1;
    }
    out
}

pub fn bleu(samples: &[(Vec<String>, Vec<Vec<String>>)]) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (mut hit, mut tot) = (0.0, 0.0);
        for (cand, refs) in samples {
            let c = grams(cand, n);
            for (g, cnt) in &c {
                let best = refs.iter().map(|r| grams(r, n).get(g).copied().unwrap_or(0.0)).fold(0.0, f64::max);
                hit += cnt.min(best);
                tot += cnt;
            }
        }
        if hit == 0.0 {
            hit = 1e-9;
        }
        log_sum += (hit / tot.max(1.0)).ln() * 0.25;
    }
    let cand_len: usize = samples.iter().map(|s| s.0.len()).sum();
    let mut ref_len = 0usize;
    for (cand, refs) in samples {
        let mut best = refs[0].len();
        for r in refs {
            let (dr, db) = (r.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
            if dr < db || (dr == db && r.len() < best) {
                best = r.len();
            }
        }
        ref_len += best;
    }
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    bp * log_sum.exp()
}

/// Plain recursive LCS with memo table.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if a[i] == b[j] { 1 + go(a, b, i + 1, j + 1, memo) } else { go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo)) };
        memo[i][j] = Some(v);
        v
    }
    go(a, b, 0, 0, &mut vec![vec![None; b.len()]; a.len()])
}

pub fn rouge(samples: &[(Vec<String>, Vec<Vec<String>>)]) -> f64 {
    let mut total = 0.0;
    for (cand, refs) in samples {
        let mut best: f64 = 0.0;
        for r in refs {
            let l = lcs(cand, r) as f64;
            if l > 0.0 {
                let p = l / cand.len() as f64;
                let rc = l / r.len() as f64;
                let beta2 = 1.2f64 * 1.2;
                best = best.max((1.0 + beta2) * p * rc / (rc + beta2 * p));
            }
        }
        total += best;
    }
    total / samples.len() as f64
}

pub fn cider(samples: &[(Vec<String>, Vec<Vec<String>>)]) -> f64 {
    let n_docs = samples.len() as f64;
    let mut df: BTreeMap<Gram, f64> = BTreeMap::new();
    for (_, refs) in samples {
        let mut seen = BTreeSet::new();
        for r in refs {
            for n in 1..=4 {
                seen.extend(grams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let vec_of = |words: &[String]| -> Vec<BTreeMap<Gram, f64>> {
        (1..=4)
            .map(|n| {
                grams(words, n)
                    .into_iter()
                    .map(|(g, tf)| {
                        let d = df.get(&g).copied().unwrap_or(0.0).max(1.0);
                        let w = tf * (n_docs.ln() - d.ln());
                        (g, w)
                    })
                    .collect()
            })
            .collect()
    };
    let norm = |v: &BTreeMap<Gram, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let mut score = 0.0;
    for (cand, refs) in samples {
        let h = vec_of(cand);
        let mut per_ref = 0.0;
        for r in refs {
            let rv = vec_of(r);
            let delta = cand.len() as f64 - r.len() as f64;
            let mut sim_sum = 0.0;
            for n in 0..4 {
                let mut dot = 0.0;
                for (g, hw) in &h[n] {
                    if let Some(rw) = rv[n].get(g) {
                        dot += hw.min(*rw) * rw;
                    }
                }
                let (nh, nr) = (norm(&h[n]), norm(&rv[n]));
                if nh != 0.0 && nr != 0.0 {
                    dot /= nh * nr;
                }
                sim_sum += dot * (-(delta * delta) / 72.0).exp();
            }
            per_ref += sim_sum / 4.0;
        }
        score += per_ref / refs.len() as f64 * 10.0;
    }
    score / samples.len() as f64
}

pub type Pairs = Vec<(Vec<String>, Vec<Vec<String>>)>;

pub fn pairs(raw: &[(&str, &[&str])]) -> Pairs {
    raw.iter().map(|(c, rs)| (tokenize(c), rs.iter().map(|r| tokenize(r)).collect())).collect()
}

pub fn corpus(p: &Pairs) -> EvalCorpus {
    let mut c = EvalCorpus::new();
    for (cand, refs) in p {
        c.push(cand.clone(), refs.clone()).unwrap();
    }
    c
}

pub fn toy_corpus() -> Pairs {
    pairs(&[
        ("the cup is placed safely on the table", &["the cup is placed safely on the table", "the cup rests safely on the table"]),
        ("the bottle hits the toy_car and falls over", &["the bottle falls over after hitting the toy_car", "the bottle knocks the toy_car and falls over"]),
        ("the ball rolls off the shelf", &["the ball hits the can and rolls away", "the ball rolls after touching the can"]),
        ("a box is pushed by the mug", &["the mug pushes the box aside", "the box gets pushed by the mug"]),
        ("the vase falls off the edge of the desk", &["the vase falls off the desk edge", "the vase drops off the edge of the desk"]),
        ("the cup is placed safely", &["the cup sits safely on the shelf"]),
        ("the can falls over", &["the can hits the lamp and falls over", "the can tips over against the lamp", "the lamp makes the can fall over"]),
        ("toy_car pushed", &["the toy_car is pushed by the bowl"]),
        ("the bowl rolls rolls rolls", &["the bowl rolls off", "the bowl rolls away from the plate"]),
        ("nothing happens here at all", &["the plate is placed safely on the counter"]),
    ])
}
