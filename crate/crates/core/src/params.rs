//! Named model parameters, their initialisation and the `NNFC` weights file.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::dataset::{child_seed, CHANNELS, REGION_DIM};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"NNFC";
pub const WEIGHTS_VERSION: u32 = 1;

pub const HEADS: usize = 4;
pub const FFN_MULT: usize = 4;
pub const MAX_CAPTION_LEN: usize = 26;
pub const DEST_TOKENS: usize = 16;
pub const TARG_TOKENS: usize = 5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    /// CAIE layers (N_I).
    pub enc_layers: usize,
    /// Decoder layers (N_d).
    pub dec_layers: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub conv_channels: usize,
    pub cam_channels: usize,
    pub cam_hidden: usize,
    pub use_cam: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            d_model: 128,
            enc_layers: 2,
            dec_layers: 2,
            vocab_size,
            max_len: MAX_CAPTION_LEN,
            conv_channels: 32,
            cam_channels: 16,
            cam_hidden: 32,
            use_cam: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % HEADS != 0 {
            return Err(Error::Config(format!("d_model {} must be a positive multiple of {HEADS}", self.d_model)));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!("vocabulary of {} tokens cannot hold the 4 reserved ids", self.vocab_size)));
        }
        if self.max_len < 2 || self.conv_channels == 0 || self.cam_channels == 0 || self.cam_hidden == 0 {
            return Err(Error::Config("max_len, conv and CAM widths must be positive".into()));
        }
        Ok(())
    }

    pub fn cam_feature_dim(&self) -> usize {
        self.cam_channels + CHANNELS + REGION_DIM
    }

    /// Every parameter the configuration calls for, with its shape and initialiser.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.d_model;
        let c = self.conv_channels;
        let mut out = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));

        if self.use_cam {
            let cc = self.cam_channels;
            add("cam.conv1.w".into(), vec![cc, 2 * CHANNELS, 3, 3], Init::He);
            add("cam.conv1.b".into(), vec![cc], Init::Zeros);
            add("cam.conv2.w".into(), vec![cc, cc, 3, 3], Init::He);
            add("cam.conv2.b".into(), vec![cc], Init::Zeros);
            add("cam.att.w".into(), vec![1, cc, 1, 1], Init::Zeros);
            add("cam.att.b".into(), vec![1], Init::Zeros);
            add("cam.hid.w".into(), vec![self.cam_feature_dim(), self.cam_hidden], Init::He);
            add("cam.hid.b".into(), vec![self.cam_hidden], Init::Zeros);
            add("cam.out.w".into(), vec![self.cam_hidden, 1], Init::Zeros);
            add("cam.out.b".into(), vec![1], Init::Zeros);
        }
        for (p, c_in) in [("dest", CHANNELS + 1), ("targ", CHANNELS)] {
            add(format!("{p}.conv1.w"), vec![c, c_in, 3, 3], Init::Normal);
            add(format!("{p}.conv1.b"), vec![c], Init::Zeros);
            add(format!("{p}.conv2.w"), vec![c, c, 3, 3], Init::Normal);
            add(format!("{p}.conv2.b"), vec![c], Init::Zeros);
            add(format!("{p}.conv3.w"), vec![d, c, 3, 3], Init::Normal);
            add(format!("{p}.conv3.b"), vec![d], Init::Zeros);
        }
        add("dest.pos".into(), vec![DEST_TOKENS, d], Init::Normal);
        add("targ.pos".into(), vec![TARG_TOKENS, d], Init::Normal);
        add("obst.w".into(), vec![REGION_DIM + 7, d], Init::Normal);
        add("obst.b".into(), vec![d], Init::Zeros);
        layernorm(&mut add, "obst.ln", d);

        for l in 0..self.enc_layers {
            for s in ["img", "obst"] {
                let p = format!("enc.{l}.{s}");
                projections(&mut add, &format!("{p}.ca"), d, false);
                layernorm(&mut add, &format!("{p}.ln1"), d);
                ffn(&mut add, &format!("{p}.ffn1"), d);
                layernorm(&mut add, &format!("{p}.ln2"), d);
                projections(&mut add, &format!("{p}.mha"), d, true);
                layernorm(&mut add, &format!("{p}.ln3"), d);
                ffn(&mut add, &format!("{p}.ffn2"), d);
                layernorm(&mut add, &format!("{p}.ln4"), d);
            }
        }

        add("fuse.tok".into(), vec![self.vocab_size, d], Init::Normal);
        add("fuse.pos".into(), vec![self.max_len + 1, d], Init::Normal);
        projections(&mut add, "fuse.mha", d, true);
        layernorm(&mut add, "fuse.ln1", d);
        ffn(&mut add, "fuse.ffn", d);
        layernorm(&mut add, "fuse.ln2", d);
        add("nce.img.w".into(), vec![d, d], Init::Normal);
        add("nce.txt.w".into(), vec![d, d], Init::Normal);

        for l in 0..self.dec_layers {
            let p = format!("dec.{l}");
            projections(&mut add, &format!("{p}.ca"), d, false);
            layernorm(&mut add, &format!("{p}.ln1"), d);
            ffn(&mut add, &format!("{p}.ffn"), d);
            layernorm(&mut add, &format!("{p}.ln2"), d);
        }
        add("out.w".into(), vec![d, self.vocab_size], Init::Normal);
        add("out.b".into(), vec![self.vocab_size], Init::Zeros);
        out
    }

    /// Recovers the configuration from a parameter set's names and shapes.
    pub fn infer<T: Real>(tensors: &BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let shape = |name: &str| {
            tensors
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::Format(format!("weights lack parameter `{name}`")))
        };
        let count_layers = |prefix: &str| {
            (0..)
                .take_while(|l| tensors.contains_key(&format!("{prefix}.{l}.ln1.g")) || tensors.contains_key(&format!("{prefix}.{l}.img.ln1.g")))
                .count()
        };
        let use_cam = tensors.contains_key("cam.conv1.w");
        let cam = if use_cam {
            (shape("cam.conv1.w")?[0], shape("cam.hid.w")?[1])
        } else {
            (16, 32)
        };
        let cfg = Self {
            d_model: shape("dest.pos")?[1],
            enc_layers: count_layers("enc"),
            dec_layers: count_layers("dec"),
            vocab_size: shape("out.b")?[0],
            max_len: shape("fuse.pos")?[0].saturating_sub(1),
            conv_channels: shape("dest.conv1.w")?[0],
            cam_channels: cam.0,
            cam_hidden: cam.1,
            use_cam,
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        let layout = cfg.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Format(format!(
                "weights hold {} parameters, the inferred architecture has {}",
                tensors.len(),
                layout.len()
            )));
        }
        for (name, shape, _) in &layout {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!("parameter `{name}` has shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(Error::Format(format!("weights lack parameter `{name}`"))),
            }
        }
        Ok(cfg)
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    /// Normal with std `sqrt(2 / fan_in)`; the CAM's ReLU stack trains too slowly at 0.02.
    He,
    Zeros,
    Ones,
}

fn layernorm(add: &mut impl FnMut(String, Vec<usize>, Init), p: &str, d: usize) {
    add(format!("{p}.g"), vec![d], Init::Ones);
    add(format!("{p}.b"), vec![d], Init::Zeros);
}

fn ffn(add: &mut impl FnMut(String, Vec<usize>, Init), p: &str, d: usize) {
    add(format!("{p}.w1"), vec![d, FFN_MULT * d], Init::Normal);
    add(format!("{p}.b1"), vec![FFN_MULT * d], Init::Zeros);
    add(format!("{p}.w2"), vec![FFN_MULT * d, d], Init::Normal);
    add(format!("{p}.b2"), vec![d], Init::Zeros);
}

fn projections(add: &mut impl FnMut(String, Vec<usize>, Init), p: &str, d: usize, output: bool) {
    for w in ["wq", "wk", "wv"] {
        add(format!("{p}.{w}"), vec![d, d], Init::Normal);
    }
    if output {
        add(format!("{p}.wo"), vec![d, d], Init::Normal);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Normal(0, 0.02) weights (He-scaled in the CAM), zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape, init)| {
                // per-name streams: configurations that share a parameter share its initial value
                let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, fnv1a(&name)));
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect(),
                    Init::He => {
                        let fan_in: usize = if shape.len() == 2 { shape[0] } else { shape[1..].iter().product() };
                        let he = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                        (0..n).map(|_| T::lit(he.sample(&mut rng))).collect()
                    }
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                };
                (name, Tensor::new(&shape, data).expect("layout shape"))
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let config = ModelConfig::infer(&tensors)?;
        Ok(Self { config, tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every parameter on `tape`; those rejected by `trainable` become constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) { tape.param(v) } else { tape.constant(v) };
                (k.clone(), var)
            })
            .collect();
        Bound {
            tape,
            vars,
            config: self.config.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.num_scalars() * 4);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }
}

impl ModelParams<f32> {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err(Error::Format("not a weights file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!("unsupported weights version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(4).ok_or_else(|| Error::Format("parameter too large".into()))?)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
                return Err(Error::Format(format!("duplicate parameter `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after weights", bytes.len() - r.pos)));
        }
        Self::from_tensors(tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parameters recorded on one tape, looked up by name.
pub struct Bound<'t, T: Real> {
    pub tape: &'t Tape<T>,
    pub config: ModelConfig,
    vars: HashMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn p(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))
    }

    /// Rebinds an existing parameter name to another variable on the same tape.
    pub fn set(&mut self, name: &str, var: Var<'t, T>) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(v) => {
                *v = var;
                Ok(())
            }
            None => Err(Error::Contract(format!("no parameter named `{name}`"))),
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
