//! Finite-difference checks for every tape primitive and the model's composite blocks.

mod common;

use std::time::Instant;

use rand::Rng;

use common::grad::{self, primitive_sweep, Pair, COMPOSITE_F32, EPS, PRIM_F32, PRIM_F64, TRIALS};
use common::{rng, uniform};
use nnfc_core::tensor::{grad_check, ScalarFn};
use nnfc_core::{Real, Result, Tape, Var};

#[test]
fn every_primitive_matches_finite_differences() {
    let start = Instant::now();
    let reports = primitive_sweep(TRIALS, 11);
    assert_eq!(reports.len(), grad::KINDS);
    for r in &reports {
        println!("{:2} {:<12} worst rel err f32 {:.2e}, f64 {:.2e}", r.kind, r.op, r.worst32, r.worst64);
        assert!(r.worst32 < PRIM_F32, "{} f32: {:.2e}", r.op, r.worst32);
        assert!(r.worst64 < PRIM_F64, "{} f64: {:.2e}", r.op, r.worst64);
        assert!(r.checked > 0);
    }
    println!("primitive checks took {:?}", start.elapsed());
}

#[test]
fn softmax_cross_entropy_composite() {
    struct SoftmaxCe(Vec<Option<usize>>);
    impl ScalarFn for SoftmaxCe {
        fn eval<'t, T: Real>(&self, _: &'t Tape<T>, v: &[Var<'t, T>]) -> Result<Var<'t, T>> {
            v[0].matmul(&v[1])?.cross_entropy(&self.0)
        }
    }
    let mut r = rng(12);
    for _ in 0..TRIALS {
        let x = uniform(&mut r, &[3, 5], -1.0, 1.0);
        let w = uniform(&mut r, &[5, 7], -1.0, 1.0);
        let f = SoftmaxCe((0..3).map(|_| Some(r.random_range(0..7))).collect());
        let c = grad_check(&f, &[x.cast::<f32>(), w.cast::<f32>()], EPS).unwrap();
        assert!(c.max_rel_err < PRIM_F32, "{c:?}");
    }
}

fn assert_composite(label: &str, (c32, c64): Pair) {
    println!("{label}: {} elements, rel err f32 {:.2e}, f64 {:.2e}", c64.checked, c32.max_rel_err, c64.max_rel_err);
    assert!(c32.max_rel_err < COMPOSITE_F32, "{label} f32: {c32:?}");
    assert!(c64.max_rel_err < PRIM_F64, "{label} f64: {c64:?}");
}

#[test]
fn obstacle_embedding_gradients() {
    assert_composite("embed_obstacle", grad::obstacle_embedding());
}

#[test]
fn cam_gradients() {
    assert_composite("cam", grad::cam());
}

#[test]
fn destination_and_target_encoder_gradients() {
    assert_composite("encode_destination", grad::destination_encoder());
    assert_composite("encode_target", grad::target_encoder());
}

#[test]
fn caie_layer_gradients() {
    assert_composite("caie_layer", grad::caie());
}

#[test]
fn fusion_gradients() {
    assert_composite("fuse_multimodal", grad::fusion());
}

#[test]
fn decoder_gradients_on_four_token_vocabulary() {
    assert_composite("decode", grad::camd());
}

#[test]
fn total_loss_gradient_on_two_sample_batch() {
    let start = Instant::now();
    assert_composite("total loss", grad::total_loss());
    println!("total loss check took {:?}", start.elapsed());
}
