//! Losses, optimiser, early stopping and the seeded training loop.

mod adam;
mod loss;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, adam_update_slice, AdamConfig, AdamState};
pub use loss::{info_nce, loss_total, LossParts};

use crate::error::{Error, Result};
use crate::features_cam::{cam_forward, collision_attention, AttentionMap, ModelInput};
use crate::model::{attention_for, teacher_forced};
use crate::params::{ModelConfig, ModelParams};
use crate::scene::dataset::{child_seed, Dataset, Sample};
use crate::tensor::{Real, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_ce: f64,
    pub lambda_nce: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub gl_threshold: f64,
    pub seed: u64,
    pub tau: f64,
    pub cam_epochs: usize,
    pub cam_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 0.9,
            lambda_nce: 5.0,
            adam: AdamConfig::default(),
            batch_size: 16,
            max_epochs: 30,
            gl_threshold: 5.0,
            seed: 0,
            tau: 0.07,
            cam_epochs: 10,
            cam_lr: 3e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda_ce", self.lambda_ce),
            ("lambda_nce", self.lambda_nce),
            ("lr", self.adam.lr),
            ("tau", self.tau),
            ("gl_threshold", self.gl_threshold),
            ("cam_lr", self.cam_lr),
        ];
        for (name, v) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Generalization loss `100 · (E_va / E_opt − 1)`.
pub fn gl(e_va: f64, e_opt: f64) -> Result<f64> {
    if !(e_opt > 0.0) {
        return Err(Error::Contract(format!("E_opt = {e_opt} must be positive")));
    }
    Ok(100.0 * (e_va / e_opt - 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_nce: f64,
    /// E_va(k)
    pub val_loss: f64,
    /// E_opt(k)
    pub best_val_loss: f64,
    pub gl: f64,
}

pub fn write_log(path: &std::path::Path, log: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in log {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub params: ModelParams<f32>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub cam: Option<CamReport>,
}

fn inputs(samples: &[Sample]) -> Result<Vec<ModelInput<f32>>> {
    samples.iter().map(ModelInput::from_sample).collect()
}

fn labels(samples: &[Sample]) -> Vec<f32> {
    samples.iter().map(|s| s.collision_label as u8 as f32).collect()
}

fn gradients<T: Real>(
    bound: &crate::params::Bound<'_, T>,
    grads: &crate::tensor::Gradients<T>,
    trainable: impl Fn(&str) -> bool,
) -> BTreeMap<String, Vec<T>> {
    bound
        .vars()
        .filter(|(name, _)| trainable(name))
        .map(|(name, var)| {
            let g = grads
                .raw(var)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); var.value().numel()]);
            (name.to_string(), g)
        })
        .collect()
}

fn is_cam(name: &str) -> bool {
    name.starts_with("cam.")
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Fits the CAM alone with binary cross-entropy on the collision label; the
/// rest of the model is untouched.
pub fn pretrain_cam(
    params: &mut ModelParams<f32>,
    inputs: &[ModelInput<f32>],
    labels: &[f32],
    cfg: &TrainConfig,
) -> Result<CamReport> {
    if !params.config.use_cam {
        return Err(Error::Contract("model has no CAM to pre-train".into()));
    }
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::Input(format!("{} inputs for {} labels", inputs.len(), labels.len())));
    }
    let adam = AdamConfig { lr: cfg.cam_lr, ..cfg.adam };
    // collisions are the minority class; weight both classes to equal total mass
    let positives = labels.iter().filter(|&&y| y >= 0.5).count().clamp(1, labels.len() - 1) as f64;
    let n = labels.len() as f64;
    let class_weight = [n / (2.0 * (n - positives)), n / (2.0 * positives)];
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, 0xCA));
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.cam_epochs {
        let mut sum = 0.0;
        let order = shuffled(inputs.len(), &mut rng);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let tape = Tape::new();
            let p = params.bind(&tape, is_cam);
            let logits = batch
                .iter()
                .map(|&i| {
                    let x = &inputs[i];
                    cam_forward(&tape.constant(&x.dest), &tape.constant(&x.targ), &x.regions, &p).map(|o| o.logit)
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = balanced_bce(&tape, batch, &logits, labels, class_weight)?;
            let l = loss.item() as f64;
            if !l.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            sum += l * batch.len() as f64;
            let grads = tape.backward(loss)?;
            adam_step(params, &gradients(&p, &grads, is_cam), &mut state, &adam)?;
        }
        final_loss = sum / inputs.len() as f64;
        log::info!("cam epoch {epoch}: bce {final_loss:.4}");
    }
    let train_accuracy = cam_accuracy(params, inputs, labels)?;
    Ok(CamReport {
        epochs: cfg.cam_epochs,
        final_loss,
        train_accuracy,
    })
}

/// Class-weighted mean binary cross-entropy of one batch.
fn balanced_bce<'t>(
    tape: &'t Tape<f32>,
    batch: &[usize],
    logits: &[crate::tensor::Var<'t, f32>],
    labels: &[f32],
    class_weight: [f64; 2],
) -> Result<crate::tensor::Var<'t, f32>> {
    let mut total: Option<crate::tensor::Var<'t, f32>> = None;
    for class in [0, 1] {
        let idx: Vec<usize> = (0..batch.len()).filter(|&j| (labels[batch[j]] >= 0.5) as usize == class).collect();
        if idx.is_empty() {
            continue;
        }
        let y: Vec<f32> = idx.iter().map(|&j| labels[batch[j]]).collect();
        let group = tape.concat(&idx.iter().map(|&j| logits[j]).collect::<Vec<_>>(), 0)?;
        let w = class_weight[class] * idx.len() as f64 / batch.len() as f64;
        let term = group.bce_with_logits(&y)?.scale(w as f32);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Input("empty CAM batch".into()))
}

/// Fraction of samples whose thresholded collision probability matches the label.
pub fn cam_accuracy<T: Real>(params: &ModelParams<T>, inputs: &[ModelInput<T>], labels: &[f32]) -> Result<f64> {
    let mut correct = 0usize;
    for (x, &y) in inputs.iter().zip(labels) {
        let (p, _) = collision_attention(params, x)?;
        if (p >= 0.5) == (y >= 0.5) {
            correct += 1;
        }
    }
    Ok(correct as f64 / inputs.len().max(1) as f64)
}

/// A prepared caption-training example.
#[derive(Clone, Copy)]
pub struct Example<'a, T: Real = f32> {
    pub input: &'a ModelInput<T>,
    pub att: &'a AttentionMap,
    pub caption: &'a [u32],
}

pub fn examples<'a, T: Real>(inputs: &'a [ModelInput<T>], att: &'a [AttentionMap], samples: &'a [Sample]) -> Vec<Example<'a, T>> {
    inputs
        .iter()
        .zip(att)
        .zip(samples)
        .map(|((input, att), s)| Example {
            input,
            att,
            caption: &s.caption_train,
        })
        .collect()
}

/// Forward pass and losses over one batch.
pub fn batch_loss<'t, T: Real>(
    p: &crate::params::Bound<'t, T>,
    batch: &[Example<'_, T>],
    cfg: &TrainConfig,
) -> Result<LossParts<'t, T>> {
    let tape = p.tape;
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut img = Vec::with_capacity(batch.len());
    let mut txt = Vec::with_capacity(batch.len());
    for ex in batch {
        let out = teacher_forced(ex.input, ex.att, ex.caption, p)?;
        logits.push(out.logits);
        targets.extend(out.targets.iter().map(|&t| Some(t as usize)));
        img.push(out.h_img);
        txt.push(out.h_txt);
    }
    let img = tape.concat(&img, 0)?.matmul(&p.p("nce.img.w")?)?;
    let txt = tape.concat(&txt, 0)?.matmul(&p.p("nce.txt.w")?)?;
    loss_total(&tape.concat(&logits, 0)?, &targets, &img, &txt, cfg.lambda_ce, cfg.lambda_nce, cfg.tau)
}

/// Mean total loss over fixed-order batches, weighted by batch size.
pub fn evaluate_loss(params: &ModelParams<f32>, examples: &[Example<'_>], cfg: &TrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    for batch in examples.chunks(cfg.batch_size) {
        let tape = Tape::new();
        let p = params.bind(&tape, |_| false);
        sum += batch_loss(&p, batch, cfg)?.total.item() as f64 * batch.len() as f64;
    }
    Ok(sum / examples.len() as f64)
}

/// Pre-trains and freezes the CAM (if configured), then trains the captioner
/// with Adam until the GL criterion fires or `max_epochs` pass.
pub fn train(ds: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::Dataset("training needs non-empty train and val splits".into()));
    }
    let mut params = ModelParams::<f32>::init(model, cfg.seed)?;
    let train_in = inputs(&ds.train)?;
    let val_in = inputs(&ds.val)?;
    let cam = if model.use_cam {
        Some(pretrain_cam(&mut params, &train_in, &labels(&ds.train), cfg)?)
    } else {
        None
    };
    let att = |xs: &[ModelInput<f32>]| xs.iter().map(|x| attention_for(&params, x)).collect::<Result<Vec<_>>>();
    let (train_att, val_att) = (att(&train_in)?, att(&val_in)?);
    let train_ex = examples(&train_in, &train_att, &ds.train);
    let val_ex = examples(&val_in, &val_att, &ds.val);
    let (log, best, best_epoch, stopped_early) = fit(params, &train_ex, &val_ex, cfg)?;
    Ok(TrainOutcome {
        params: best,
        log,
        best_epoch,
        stopped_early,
        cam,
    })
}

/// The captioning stage on prepared examples; CAM parameters stay frozen.
pub fn fit(
    mut params: ModelParams<f32>,
    train: &[Example<'_>],
    val: &[Example<'_>],
    cfg: &TrainConfig,
) -> Result<(Vec<EpochRecord>, ModelParams<f32>, usize, bool)> {
    let trainable = |n: &str| !is_cam(n);
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, 0xDA7A));
    let mut log = Vec::new();
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut e_opt = f64::INFINITY;
    for epoch in 0..cfg.max_epochs {
        let order = shuffled(train.len(), &mut rng);
        let (mut sum, mut ce, mut nce) = (0.0, 0.0, 0.0);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example<'_>> = idx.iter().map(|&i| train[i]).collect();
            let tape = Tape::new();
            let p = params.bind(&tape, trainable);
            let parts = batch_loss(&p, &batch, cfg)?;
            let total = parts.total.item() as f64;
            if !total.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            let w = batch.len() as f64;
            sum += total * w;
            ce += parts.ce.item() as f64 * w;
            nce += parts.nce.item() as f64 * w;
            let grads = tape.backward(parts.total)?;
            adam_step(&mut params, &gradients(&p, &grads, trainable), &mut state, &cfg.adam)?;
        }
        let n = train.len() as f64;
        let e_va = evaluate_loss(&params, val, cfg)?;
        if !e_va.is_finite() {
            return Err(Error::Divergence { epoch, step: usize::MAX });
        }
        if e_va < e_opt {
            e_opt = e_va;
            best = params.clone();
            best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            train_loss: sum / n,
            train_ce: ce / n,
            train_nce: nce / n,
            val_loss: e_va,
            best_val_loss: e_opt,
            gl: gl(e_va, e_opt)?,
        };
        log::info!(
            "epoch {epoch}: train {:.4} (ce {:.4}, nce {:.4}) val {:.4} gl {:.2}",
            record.train_loss,
            record.train_ce,
            record.train_nce,
            e_va,
            record.gl
        );
        let stop = record.gl > cfg.gl_threshold;
        log.push(record);
        if stop {
            return Ok((log, best, best_epoch, true));
        }
    }
    Ok((log, best, best_epoch, false))
}
