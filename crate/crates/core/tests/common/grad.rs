//! Finite-difference cases shared by the gradient tests and the acceptance run:
//! every tape primitive with random shapes, and the model's composite blocks.

use rand::Rng;

use super::{noisy_params, rng, small_dataset, tiny_config, uniform};
use nnfc_core::caie::{caie_layer, EncodedImage, EncoderState};
use nnfc_core::camd::{decode, fuse_multimodal};
use nnfc_core::features_cam::{cam_forward, embed_obstacle, encode_destination, encode_target, AttentionMap, ModelInput, RegionFeature};
use nnfc_core::params::Bound;
use nnfc_core::tensor::{grad_check, GradCheck, ScalarFn};
use nnfc_core::training::{batch_loss, Example, TrainConfig};
use nnfc_core::{ModelParams, Real, Result, Tape, Tensor, Var};

pub const TRIALS: usize = 100;
pub const EPS: f64 = 1e-5;
pub const PRIM_F32: f64 = 1e-4;
pub const PRIM_F64: f64 = 1e-6;
pub const COMPOSITE_F32: f64 = 1e-3;

/// Fixed non-uniform weights so that `sum(w * y)` exercises every output element differently.
pub fn weighted_sum<'t, T: Real>(y: &Var<'t, T>) -> Result<Var<'t, T>> {
    let n: usize = y.shape().iter().product();
    let w: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    let w = y.tape().constant(&Tensor::<T>::from_f64(&y.shape(), &w)?);
    Ok(y.mul(&w)?.sum())
}

#[derive(Clone, Debug)]
pub enum Prim {
    Matmul,
    MatmulT,
    Transpose,
    Reshape(Vec<usize>),
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddBias,
    Relu,
    Sigmoid,
    Softmax(usize),
    LayerNorm,
    MeanRows,
    Sum,
    Mean,
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    MaskedFill(Vec<bool>),
    L2Normalize,
    Conv2d { stride: usize, pad: usize },
    CrossEntropy(Vec<Option<usize>>),
    Bce(Vec<f64>),
    Embedding(Vec<usize>),
    Concat(usize),
}

impl ScalarFn for Prim {
    fn eval<'t, T: Real>(&self, tape: &'t Tape<T>, v: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let y = match self {
            Prim::Matmul => v[0].matmul(&v[1])?,
            Prim::MatmulT => v[0].matmul_t(&v[1])?,
            Prim::Transpose => v[0].transpose()?,
            Prim::Reshape(s) => v[0].reshape(s)?,
            Prim::Add => v[0].add(&v[1])?,
            Prim::Sub => v[0].sub(&v[1])?,
            Prim::Mul => v[0].mul(&v[1])?,
            Prim::Scale(s) => v[0].scale(T::lit(*s)),
            Prim::AddBias => v[0].add_bias(&v[1])?,
            Prim::Relu => v[0].relu(),
            Prim::Sigmoid => v[0].sigmoid(),
            Prim::Softmax(axis) => v[0].softmax(*axis)?,
            Prim::LayerNorm => v[0].layernorm(&v[1], &v[2])?,
            Prim::MeanRows => v[0].mean_rows()?,
            Prim::Sum => v[0].sum(),
            Prim::Mean => v[0].mean(),
            Prim::SliceRows(a, b) => v[0].slice_rows(*a, *b)?,
            Prim::SliceCols(a, b) => v[0].slice_cols(*a, *b)?,
            Prim::MaskedFill(m) => v[0].masked_fill(m, T::lit(-3.0))?,
            Prim::L2Normalize => v[0].l2_normalize_rows()?,
            Prim::Conv2d { stride, pad } => v[0].conv2d(&v[1], &v[2], *stride, *pad)?,
            Prim::CrossEntropy(t) => return v[0].cross_entropy(t),
            Prim::Bce(t) => {
                let t: Vec<T> = t.iter().map(|&x| T::lit(x)).collect();
                return v[0].bce_with_logits(&t);
            }
            Prim::Embedding(ids) => tape.embedding(v[0], ids)?,
            Prim::Concat(axis) => tape.concat(&v[..], *axis)?,
        };
        weighted_sum(&y)
    }
}

/// A random instance of primitive `kind`: the op plus its inputs.
pub fn instance(kind: usize, r: &mut impl Rng) -> (Prim, Vec<Tensor<f64>>) {
    let m = r.random_range(1..5);
    let n = r.random_range(2..6);
    let k = r.random_range(1..5);
    let u = |r: &mut _, s: &[usize]| uniform(r, s, -1.5, 1.5);
    match kind {
        0 => (Prim::Matmul, vec![u(r, &[m, k]), u(r, &[k, n])]),
        1 => (Prim::MatmulT, vec![u(r, &[m, k]), u(r, &[n, k])]),
        2 => (Prim::Transpose, vec![u(r, &[m, n])]),
        3 => (Prim::Reshape(vec![n, m]), vec![u(r, &[m, n])]),
        4 => (Prim::Add, vec![u(r, &[m, n]), u(r, &[m, n])]),
        5 => (Prim::Sub, vec![u(r, &[m, n]), u(r, &[m, n])]),
        6 => (Prim::Mul, vec![u(r, &[m, n]), u(r, &[m, n])]),
        7 => (Prim::Scale(r.random_range(-2.0..2.0)), vec![u(r, &[m, n])]),
        8 => (Prim::AddBias, vec![u(r, &[m, n]), u(r, &[n])]),
        9 => {
            // keep inputs away from the kink so central differences stay one-sided-free
            let mut x = u(r, &[m, n]);
            for v in x.data_mut() {
                if v.abs() < 0.05 {
                    *v = 0.1;
                }
            }
            (Prim::Relu, vec![x])
        }
        10 => (Prim::Sigmoid, vec![u(r, &[m, n])]),
        11 => (Prim::Softmax(r.random_range(0..2)), vec![uniform(r, &[m, n], -3.0, 3.0)]),
        12 => (
            Prim::LayerNorm,
            vec![uniform(r, &[m, n], -2.0, 2.0), uniform(r, &[n], 0.5, 1.5), u(r, &[n])],
        ),
        13 => (Prim::MeanRows, vec![u(r, &[m, n])]),
        14 => (Prim::Sum, vec![u(r, &[m, n])]),
        15 => (Prim::Mean, vec![u(r, &[m, n])]),
        16 => {
            let a = r.random_range(0..m);
            (Prim::SliceRows(a, r.random_range(a + 1..=m)), vec![u(r, &[m, n])])
        }
        17 => {
            let a = r.random_range(0..n);
            (Prim::SliceCols(a, r.random_range(a + 1..=n)), vec![u(r, &[m, n])])
        }
        18 => (Prim::MaskedFill((0..m * n).map(|_| r.random_bool(0.3)).collect()), vec![u(r, &[m, n])]),
        19 => (Prim::L2Normalize, vec![uniform(r, &[m, n], 0.2, 1.5)]),
        20 => {
            let (c, o, ks) = (r.random_range(1..3), r.random_range(1..3), r.random_range(1..4));
            let stride = r.random_range(1..3);
            let pad = r.random_range(0..2);
            let hw = r.random_range(ks.max(2)..6);
            (
                Prim::Conv2d { stride, pad },
                vec![u(r, &[c, hw, hw]), u(r, &[o, c, ks, ks]), u(r, &[o])],
            )
        }
        21 => {
            let mut t: Vec<Option<usize>> = (0..m).map(|_| r.random_bool(0.8).then(|| r.random_range(0..n))).collect();
            t[0] = Some(r.random_range(0..n));
            (Prim::CrossEntropy(t), vec![uniform(r, &[m, n], -3.0, 3.0)])
        }
        22 => (
            Prim::Bce((0..n).map(|_| r.random_range(0.0..1.0)).collect()),
            vec![uniform(r, &[n], -4.0, 4.0)],
        ),
        23 => (
            Prim::Embedding((0..k + 2).map(|_| r.random_range(0..m)).collect()),
            vec![u(r, &[m, n])],
        ),
        24 => (Prim::Concat(0), vec![u(r, &[m, n]), u(r, &[k, n]), u(r, &[1, n])]),
        25 => (Prim::Concat(1), vec![u(r, &[m, n]), u(r, &[m, k])]),
        _ => unreachable!(),
    }
}

pub const KINDS: usize = 26;

pub fn cast_all<T: Real>(xs: &[Tensor<f64>]) -> Vec<Tensor<T>> {
    xs.iter().map(|x| x.cast()).collect()
}

/// Worst relative error of one primitive over `trials` random instances.
pub struct PrimReport {
    pub kind: usize,
    pub op: String,
    pub worst32: f64,
    pub worst64: f64,
    pub checked: usize,
}

pub fn primitive_sweep(trials: usize, seed: u64) -> Vec<PrimReport> {
    let mut r = rng(seed);
    (0..KINDS)
        .map(|kind| {
            let mut rep = PrimReport { kind, op: String::new(), worst32: 0.0, worst64: 0.0, checked: usize::MAX };
            for _ in 0..trials {
                let (prim, inputs) = instance(kind, &mut r);
                let c32 = grad_check(&prim, &cast_all::<f32>(&inputs), EPS).unwrap();
                let c64 = grad_check(&prim, &inputs, EPS).unwrap();
                rep.worst32 = rep.worst32.max(c32.max_rel_err);
                rep.worst64 = rep.worst64.max(c64.max_rel_err);
                rep.checked = rep.checked.min(c64.checked);
                if rep.op.is_empty() {
                    rep.op = format!("{prim:?}").split(['(', ' ']).next().unwrap().to_string();
                }
            }
            rep
        })
        .collect()
}

/// A model block checked with respect to every parameter under `prefixes`
/// plus any extra (non-parameter) inputs the block takes.
pub struct Block<F> {
    params: ModelParams<f64>,
    names: Vec<String>,
    body: F,
}

pub trait BlockBody {
    fn run<'t, T: Real>(&self, p: &Bound<'t, T>, extra: &[Var<'t, T>]) -> Result<Var<'t, T>>;
}

impl<F: BlockBody> ScalarFn for Block<F> {
    fn eval<'t, T: Real>(&self, tape: &'t Tape<T>, v: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let mut p = self.params.cast::<T>().bind(tape, |_| false);
        for (name, var) in self.names.iter().zip(v) {
            p.set(name, *var)?;
        }
        self.body.run(&p, &v[self.names.len()..])
    }
}

pub fn check_block<F: BlockBody>(params: &ModelParams<f64>, prefixes: &[&str], extra: &[Tensor<f64>], body: F) -> (GradCheck, GradCheck) {
    let names: Vec<String> = params
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .map(str::to_string)
        .collect();
    assert!(!names.is_empty(), "no parameters under {prefixes:?}");
    let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    inputs.extend(extra.iter().cloned());
    let block = Block {
        params: params.clone(),
        names,
        body,
    };
    let c32 = grad_check(&block, &cast_all::<f32>(&inputs), EPS).unwrap();
    let c64 = grad_check(&block, &inputs, EPS).unwrap();
    (c32, c64)
}

pub fn regions(r: &mut impl Rng, n: usize) -> Vec<RegionFeature> {
    (0..n)
        .map(|_| {
            let x = r.random_range(0..12) as f64;
            let y = r.random_range(0..12) as f64;
            let visual = (0..32).map(|_| r.random_range(0.0..1.0)).collect();
            RegionFeature::new(visual, [x, y, x + r.random_range(1..4) as f64, y + r.random_range(1..4) as f64], 16.0).unwrap()
        })
        .collect()
}

pub type Pair = (GradCheck, GradCheck);

pub fn obstacle_embedding() -> Pair {
    struct Body(RegionFeature);
    impl BlockBody for Body {
        fn run<'t, T: Real>(&self, p: &Bound<'t, T>, _: &[Var<'t, T>]) -> Result<Var<'t, T>> {
            weighted_sum(&embed_obstacle(&self.0, p)?)
        }
    }
    let params = noisy_params(&tiny_config(6), 1);
    let rf = regions(&mut rng(2), 1).remove(0);
    check_block(&params, &["obst."], &[], Body(rf))
}

pub fn cam() -> Pair {
    struct Body(Vec<RegionFeature>);
    impl BlockBody for Body {
        fn run<'t, T: Real>(&self, p: &Bound<'t, T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
            let out = cam_forward(&x[0], &x[1], &self.0, p)?;
            let bce = out.logit.bce_with_logits(&[T::lit(1.0)])?;
            bce.add(&weighted_sum(&out.att)?)
        }
    }
    let mut r = rng(3);
    let params = noisy_params(&tiny_config(6), 3);
    let dest = uniform(&mut r, &[4, 16, 16], 0.0, 1.0);
    let targ = uniform(&mut r, &[4, 16, 16], 0.0, 1.0);
    let regs = regions(&mut r, 3);
    check_block(&params, &["cam."], &[dest, targ], Body(regs))
}

pub fn destination_encoder() -> Pair {
    struct Dest;
    impl BlockBody for Dest {
        fn run<'t, T: Real>(&self, p: &Bound<'t, T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
            weighted_sum(&encode_destination(&x[0], &x[1], p)?)
        }
    }
    let mut r = rng(4);
    let params = noisy_params(&tiny_config(6), 4);
    let dest = uniform(&mut r, &[4, 16, 16], 0.0, 1.0);
    let att = uniform(&mut r, &[1, 16, 16], 0.0, 1.0);
    check_block(&params, &["dest."], &[dest, att], Dest)
}

pub fn target_encoder() -> Pair {
    struct Targ;
    impl BlockBody for Targ {
        fn run<'t, T: Real>(&self, p: &Bound<'t, T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
            weighted_sum(&encode_target(&x[0], p)?)
        }
    }
    let params = noisy_params(&tiny_config(6), 4);
    let targ = uniform(&mut rng(40), &[4, 16, 16], 0.0, 1.0);
    check_block(&params, &["targ."], &[targ], Targ)
}

pub fn caie() -> Pair {
    struct Body(Vec<bool>);
    impl BlockBody for Body {
        fn run<'t, T: Real>(&self, p: &Bound<'t, T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
            let state = EncoderState {
                h_img: x[0],
                h_obst: x[1],
                obst_mask: self.0.clone(),
                layer_index: 0,
            };
            let out = caie_layer(state, &x[2], p)?;
            weighted_sum(&out.h_img)?.add(&weighted_sum(&out.h_obst)?)
        }
    }
    let mut r = rng(5);
    let params = noisy_params(&tiny_config(6), 5);
    let h_img = uniform(&mut r, &[16, 8], -1.0, 1.0);
    let h_obst = uniform(&mut r, &[4, 8], -1.0, 1.0);
    let h_targ = uniform(&mut r, &[5, 8], -1.0, 1.0);
    let mask = vec![false, false, false, true];
    check_block(&params, &["enc.0."], &[h_img, h_obst, h_targ], Body(mask))
}

pub fn fusion() -> Pair {
    struct Body(Vec<u32>);
    impl BlockBody for Body {
        fn run<'t, T: Real>(&self, p: &Bound<'t, T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
            let f = fuse_multimodal(&x[0], &self.0, p)?;
            weighted_sum(&f.h_mul)?.add(&weighted_sum(&f.h_txt)?)
        }
    }
    let params = noisy_params(&tiny_config(6), 6);
    let pooled = uniform(&mut rng(6), &[1, 8], -1.0, 1.0);
    check_block(&params, &["fuse."], &[pooled], Body(vec![1, 4, 5, 4]))
}

/// Decoder stack and output head on a four-token vocabulary.
pub fn camd() -> Pair {
    struct Body(Vec<bool>, Vec<Option<usize>>);
    impl BlockBody for Body {
        fn run<'t, T: Real>(&self, p: &Bound<'t, T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
            let image = EncodedImage {
                h_imgs: x[1],
                mask: self.0.clone(),
            };
            let out = decode(&x[0], &image, p)?;
            out.logits.cross_entropy(&self.1)?.add(&weighted_sum(&out.z)?)
        }
    }
    let mut r = rng(7);
    let params = noisy_params(&tiny_config(4), 7);
    let h_mul = uniform(&mut r, &[3, 8], -1.0, 1.0);
    let h_imgs = uniform(&mut r, &[6, 8], -1.0, 1.0);
    let mask = vec![false, false, false, false, true, true];
    let targets = vec![Some(2), Some(3), Some(2)];
    check_block(&params, &["dec.", "out."], &[h_mul, h_imgs], Body(mask, targets))
}

/// Full objective on a two-sample batch, with respect to every non-CAM weight.
pub fn total_loss() -> Pair {
    struct Body {
        inputs64: Vec<ModelInput<f64>>,
        att: Vec<AttentionMap>,
        captions: Vec<Vec<u32>>,
    }
    impl BlockBody for Body {
        fn run<'t, T: Real>(&self, p: &Bound<'t, T>, _: &[Var<'t, T>]) -> Result<Var<'t, T>> {
            // both precisions see the same grids
            let inputs: Vec<ModelInput<T>> = self
                .inputs64
                .iter()
                .map(|x| ModelInput {
                    dest: x.dest.cast(),
                    targ: x.targ.cast(),
                    regions: x.regions.clone(),
                })
                .collect();
            let batch: Vec<_> = inputs
                .iter()
                .zip(&self.att)
                .zip(&self.captions)
                .map(|((input, att), caption)| Example { input, att, caption })
                .collect();
            Ok(batch_loss(p, &batch, &TrainConfig::default())?.total)
        }
    }
    let ds = small_dataset(60, 8);
    let samples = &ds.train[..2];
    let mut config = tiny_config(ds.vocab.len());
    config.use_cam = true;
    let params = noisy_params(&config, 8);
    let inputs64: Vec<ModelInput<f64>> = samples.iter().map(|s| ModelInput::from_sample(s).unwrap()).collect();
    let inputs32: Vec<ModelInput<f32>> = samples.iter().map(|s| ModelInput::from_sample(s).unwrap()).collect();
    let att = inputs32
        .iter()
        .map(|x| nnfc_core::model::attention_for(&params.cast::<f32>(), x).unwrap())
        .collect();
    let body = Body {
        inputs64,
        att,
        captions: samples.iter().map(|s| s.caption_train.clone()).collect(),
    };
    check_block(&params, &["enc.", "fuse.", "dec.", "out.", "nce.", "obst.", "dest.", "targ."], &[], body)
}

pub const COMPOSITES: [(&str, fn() -> Pair); 8] = [
    ("embed_obstacle", obstacle_embedding),
    ("cam", cam),
    ("encode_destination", destination_encoder),
    ("encode_target", target_encoder),
    ("caie_layer", caie),
    ("fuse_multimodal", fusion),
    ("decode", camd),
    ("total loss", total_loss),
];
