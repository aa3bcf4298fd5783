#![allow(dead_code)]

pub mod grad;
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nnfc_core::scene::{build_dataset, Dataset, DatasetConfig};
use nnfc_core::{ModelConfig, ModelParams, Real, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>()).unwrap()
}

/// A model small enough for finite differences over every weight.
pub fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        enc_layers: 1,
        dec_layers: 1,
        conv_channels: 4,
        cam_channels: 4,
        cam_hidden: 4,
        ..ModelConfig::new(vocab)
    }
}

/// Seeded init with every tensor then overwritten by O(1) noise, so that no
/// branch is degenerate (zero-initialised heads would hide gradient bugs).
pub fn noisy_params(config: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f32>::init(config, seed).unwrap().cast::<f64>();
    let mut r = rng(seed ^ 0x5eed);
    for (name, t) in p.iter_mut() {
        let gain = name.ends_with(".g");
        for v in t.data_mut() {
            *v = if gain { 1.0 + r.random_range(-0.3..0.3) } else { r.random_range(-0.4..0.4) };
        }
    }
    p
}

pub fn small_dataset(n: usize, seed: u64) -> Dataset {
    build_dataset(
        n,
        seed,
        &DatasetConfig {
            ratios: [0.8, 0.1, 0.1],
            ..Default::default()
        },
    )
    .unwrap()
}

pub fn to_f64<T: Real>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|v| v.as_f64()).collect()
}
