//! Nearest-neighbour captioning: a datastore of decoder latents and the tokens
//! that followed them, queried at decode time to rescore the model distribution.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features_cam::{AttentionMap, ModelInput};
use crate::model::teacher_forced;
use crate::params::{ModelParams, Reader};
use crate::scene::dataset::Sample;
use crate::tensor::{Real, Tape};

pub const DATASTORE_MAGIC: &[u8; 4] = b"NNDS";
pub const DATASTORE_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 64;
pub const DEFAULT_LAMBDA: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct Datastore {
    d_model: usize,
    keys: Vec<f32>,
    values: Vec<u32>,
}

impl Datastore {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &[f32], value: u32) -> Result<()> {
        if key.len() != self.d_model {
            return Err(Error::shape("datastore key", &[self.d_model], &[key.len()]));
        }
        self.keys.extend_from_slice(key);
        self.values.push(value);
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.values.iter().position(|&v| v as usize >= vocab_size) {
            Some(i) => Err(Error::Input(format!(
                "datastore entry {i} holds token {} outside a {vocab_size}-token vocabulary",
                self.values[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.keys.len() * 4 + self.values.len() * 4);
        out.extend_from_slice(DATASTORE_MAGIC);
        out.extend_from_slice(&DATASTORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d_model as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        self.keys.iter().for_each(|k| out.extend_from_slice(&k.to_le_bytes()));
        self.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != DATASTORE_MAGIC {
            return Err(Error::Format("not a datastore file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DATASTORE_VERSION {
            return Err(Error::Format(format!("unsupported datastore version {version}")));
        }
        let d_model = r.u32()? as usize;
        let count = usize::try_from(r.u64()?).map_err(|_| Error::Format("entry count overflows".into()))?;
        let key_bytes = count
            .checked_mul(d_model)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("datastore size overflows".into()))?;
        let keys = r.take(key_bytes)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let values = r.take(count * 4)?.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after datastore", bytes.len() - r.pos)));
        }
        Ok(Self { d_model, keys, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// One teacher-forced pass per training caption; entry `t` pairs the latent
/// after reading `y[..=t]` with `y[t+1]`.
pub fn build_datastore<T: Real>(
    train: &[Sample],
    attention: &[AttentionMap],
    params: &ModelParams<T>,
) -> Result<Datastore> {
    if train.is_empty() {
        return Err(Error::Dataset("cannot build a datastore from an empty training set".into()));
    }
    if attention.len() != train.len() {
        return Err(Error::shape("attention maps", &[train.len()], &[attention.len()]));
    }
    let d = params.config.d_model;
    let mut ds = Datastore::new(d);
    for (s, att) in train.iter().zip(attention) {
        let input = ModelInput::<T>::from_sample(s)?;
        let tape = Tape::new();
        let p = params.bind(&tape, |_| false);
        let out = teacher_forced(&input, att, &s.caption_train, &p)?;
        let z: Vec<f32> = out.z.data().iter().map(|v| v.as_f32()).collect();
        for (row, &next) in z.chunks_exact(d).zip(&out.targets) {
            ds.push(row, next)?;
        }
    }
    ds.check_vocab(params.config.vocab_size)?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    /// Datastore entry indices, nearest first.
    pub indices: Vec<usize>,
    pub values: Vec<u32>,
    /// Squared Euclidean distances, ascending.
    pub distances: Vec<f64>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Exact k nearest entries by squared Euclidean distance, ties to the lower index.
pub fn knn_query(ds: &Datastore, z: &[f32], k: usize) -> Result<NeighborSet> {
    if ds.is_empty() {
        return Err(Error::Contract("query against an empty datastore".into()));
    }
    if k == 0 {
        return Err(Error::Config("N_knn must be at least 1".into()));
    }
    if z.len() != ds.d_model {
        return Err(Error::shape("knn query", &[ds.d_model], &[z.len()]));
    }
    let mut scored: Vec<(f64, usize)> = (0..ds.len()).map(|i| (squared_distance(ds.key(i), z), i)).collect();
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_distance_then_index);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_distance_then_index);
    Ok(NeighborSet {
        values: scored.iter().map(|&(_, i)| ds.values[i]).collect(),
        distances: scored.iter().map(|&(d, _)| d).collect(),
        indices: scored.into_iter().map(|(_, i)| i).collect(),
    })
}

/// `p_knn[v] ∝ Σ softmax(−distances)` over neighbours with value `v`.
pub fn aggregate(ns: &NeighborSet, vocab_size: usize) -> Result<Vec<f64>> {
    if ns.is_empty() {
        return Err(Error::Contract("cannot aggregate an empty neighbour set".into()));
    }
    let min = ns.distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut p = vec![0.0; vocab_size];
    for (&v, &d) in ns.values.iter().zip(&ns.distances) {
        let slot = p
            .get_mut(v as usize)
            .ok_or_else(|| Error::Input(format!("neighbour value {v} outside a {vocab_size}-token vocabulary")))?;
        *slot += (min - d).exp();
    }
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// `λ·p_knn + (1−λ)·p_model`
pub fn interpolate(p_knn: &[f64], p_model: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("λ_knn = {lambda} outside [0, 1]")));
    }
    if p_knn.len() != p_model.len() {
        return Err(Error::shape("interpolate", &[p_knn.len()], &[p_model.len()]));
    }
    if lambda == 0.0 {
        return Ok(p_model.to_vec());
    }
    if lambda == 1.0 {
        return Ok(p_knn.to_vec());
    }
    Ok(p_knn.iter().zip(p_model).map(|(&a, &b)| lambda * a + (1.0 - lambda) * b).collect())
}

/// Datastore plus retrieval settings, applied at each decoding step.
#[derive(Clone, Copy, Debug)]
pub struct Nncm<'a> {
    pub store: &'a Datastore,
    pub k: usize,
    pub lambda: f64,
}

impl<'a> Nncm<'a> {
    pub fn new(store: &'a Datastore, k: usize, lambda: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("N_knn must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("λ_knn = {lambda} outside [0, 1]")));
        }
        if store.is_empty() {
            return Err(Error::Contract("empty datastore".into()));
        }
        Ok(Self { store, k, lambda })
    }

    pub fn rescore(&self, z: &[f32], p_model: &[f64]) -> Result<Vec<f64>> {
        if self.lambda == 0.0 {
            return Ok(p_model.to_vec());
        }
        let ns = knn_query(self.store, z, self.k)?;
        interpolate(&aggregate(&ns, p_model.len())?, p_model, self.lambda)
    }
}
