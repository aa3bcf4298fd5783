//! Sample rendering, stratified splitting and the line-delimited dataset files.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::captions::{make_captions, Caption, TemplateBank};
use super::catalog::{DestinationKind, ObstacleClass, GRID, MAX_HEIGHT};
use super::layout::{generate_scene, simulate_placement, Outcome, Scene, SceneConfig};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const CHANNELS: usize = 4;
pub const REGION_DIM: usize = 32;

pub const DATASET_MAGIC: &str = "NNFC-DATASET";
pub const DATASET_VERSION: u32 = 1;
pub const VOCAB_FILE: &str = "vocab.txt";

/// Split shares of the reference corpus: 4186 / 474 / 657 of 5317.
pub const DEFAULT_RATIOS: [f64; 3] = [4186.0 / 5317.0, 474.0 / 5317.0, 657.0 / 5317.0];

/// SplitMix64 finalizer; derives independent per-sample seeds.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (expected train, val or test)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionDescriptor {
    /// Class one-hot (25) followed by height, round, tall, near_edge, centre x, centre y, area.
    pub visual: Vec<f32>,
    /// (x1, y1, x2, y2) in grid cells.
    pub bbox: [u32; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub scene: Scene,
    pub outcome: Outcome,
    #[serde(with = "nested_grid")]
    pub dest_grid: Vec<f32>,
    #[serde(with = "nested_grid")]
    pub targ_grid: Vec<f32>,
    pub regions: Vec<RegionDescriptor>,
    pub collision_label: bool,
    pub caption_train: Vec<u32>,
    pub captions_eval: Vec<Vec<u32>>,
}

mod nested_grid {
    use super::{CHANNELS, GRID};
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(flat: &[f32], s: S) -> Result<S::Ok, S::Error> {
        let nested: Vec<Vec<&[f32]>> = flat.chunks(GRID * GRID).map(|ch| ch.chunks(GRID).collect()).collect();
        serde::Serialize::serialize(&nested, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f32>, D::Error> {
        let nested = Vec::<Vec<Vec<f32>>>::deserialize(d)?;
        if nested.len() != CHANNELS || nested.iter().any(|c| c.len() != GRID || c.iter().any(|r| r.len() != GRID)) {
            return Err(D::Error::custom(format!("grid must be {CHANNELS}x{GRID}x{GRID}")));
        }
        Ok(nested.into_iter().flatten().flatten().collect())
    }
}

/// RGB + pseudo-depth rendering of the destination surface and its obstacles.
pub fn render_destination(scene: &Scene) -> Vec<f32> {
    let mut grid = vec![0f32; CHANNELS * GRID * GRID];
    let bg = scene.destination_kind.color();
    for cell in 0..GRID * GRID {
        for ch in 0..3 {
            grid[ch * GRID * GRID + cell] = bg[ch];
        }
    }
    for o in &scene.obstacles {
        let color = o.class.color();
        for (r, c) in o.footprint.cells() {
            let cell = r * GRID + c;
            for ch in 0..3 {
                grid[ch * GRID * GRID + cell] = color[ch];
            }
            grid[3 * GRID * GRID + cell] = o.height as f32 / MAX_HEIGHT as f32;
        }
    }
    grid
}

/// The held target drawn at its intended footprint on an empty frame.
pub fn render_target(scene: &Scene) -> Vec<f32> {
    let mut grid = vec![0f32; CHANNELS * GRID * GRID];
    let color = scene.target.color();
    let depth = scene.target.height() as f32 / MAX_HEIGHT as f32;
    for (r, c) in scene.target_footprint().cells() {
        let cell = r * GRID + c;
        for ch in 0..3 {
            grid[ch * GRID * GRID + cell] = color[ch];
        }
        grid[3 * GRID * GRID + cell] = depth;
    }
    grid
}

pub fn region_descriptors(scene: &Scene) -> Vec<RegionDescriptor> {
    let g = GRID as f32;
    scene
        .obstacles
        .iter()
        .map(|o| {
            let f = o.footprint;
            let mut visual = vec![0f32; REGION_DIM];
            visual[o.class.index()] = 1.0;
            let geo = [
                o.height as f32 / MAX_HEIGHT as f32,
                o.traits.round as u8 as f32,
                o.traits.tall as u8 as f32,
                o.traits.near_edge as u8 as f32,
                (f.col as f32 + f.cols as f32 / 2.0) / g,
                (f.row as f32 + f.rows as f32 / 2.0) / g,
                f.area() as f32 / (g * g),
            ];
            visual[ObstacleClass::COUNT..].copy_from_slice(&geo);
            RegionDescriptor {
                visual,
                bbox: [f.col as u32, f.row as u32, (f.col + f.cols) as u32, (f.row + f.rows) as u32],
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub ratios: [f64; 3],
    /// Evaluate against the training caption only instead of the whole paraphrase family.
    pub single_reference: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            ratios: DEFAULT_RATIOS,
            single_reference: false,
        }
    }
}

/// A scene with its outcome and word-level captions, before vocabulary encoding.
#[derive(Clone, Debug)]
pub struct RawSample {
    pub scene: Scene,
    pub outcome: Outcome,
    pub caption_train: Caption,
    pub captions_eval: Vec<Caption>,
}

pub fn generate_raw(seed: u64, index: u64, config: &DatasetConfig, bank: &TemplateBank) -> Result<RawSample> {
    let scene_seed = child_seed(seed, index);
    let scene = generate_scene(scene_seed, &config.scene)?;
    let outcome = simulate_placement(&scene);
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(scene_seed, u64::MAX));
    let (caption_train, mut captions_eval) = make_captions(&scene, &outcome, bank, &mut rng)?;
    if config.single_reference {
        captions_eval = vec![caption_train.clone()];
    }
    Ok(RawSample {
        scene,
        outcome,
        caption_train,
        captions_eval,
    })
}

impl RawSample {
    pub fn encode(&self, id: usize, vocab: &Vocabulary) -> Sample {
        Sample {
            id,
            dest_grid: render_destination(&self.scene),
            targ_grid: render_target(&self.scene),
            regions: region_descriptors(&self.scene),
            collision_label: self.outcome.collided,
            caption_train: vocab.encode_sentence(&self.caption_train),
            captions_eval: self.captions_eval.iter().map(|c| vocab.encode_sentence(c)).collect(),
            scene: self.scene.clone(),
            outcome: self.outcome,
        }
    }
}

fn split_counts(n: usize, ratios: &[f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let train = (n as f64 * ratios[0]).round() as usize;
    let val = ((n as f64 * ratios[1]).round() as usize).min(n - train);
    Ok([train, val, n - train - val])
}

/// Assigns each sample a split so that every destination kind is spread over
/// the splits in proportion: within a stratum samples are shuffled and ranked,
/// then all samples are ordered by relative rank and cut at the global counts.
pub fn stratified_split(kinds: &[DestinationKind], ratios: &[f64; 3], seed: u64) -> Result<Vec<Split>> {
    let n = kinds.len();
    let counts = split_counts(n, ratios)?;
    let needed = ratios.iter().filter(|&&r| r > 0.0).count();
    let mut strata: BTreeMap<DestinationKind, Vec<usize>> = BTreeMap::new();
    for (i, &k) in kinds.iter().enumerate() {
        strata.entry(k).or_default().push(i);
    }
    for (kind, members) in &strata {
        if members.len() < needed {
            return Err(Error::Dataset(format!(
                "stratum `{kind}` has {} samples, fewer than the {needed} splits it must cover",
                members.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, u64::MAX - 1));
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for (kind, members) in strata.iter_mut() {
        members.shuffle(&mut rng);
        let len = members.len() as f64;
        for (rank, &i) in members.iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / len, kind.index(), i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![Split::Test; n];
    for (pos, &(_, _, i)) in keyed.iter().enumerate() {
        out[i] = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }
}

/// Generates `n` samples, splits them by destination kind and encodes the
/// captions with a vocabulary built from the training split only.
pub fn build_dataset(n: usize, seed: u64, config: &DatasetConfig) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Dataset("cannot build an empty dataset".into()));
    }
    let bank = TemplateBank::default();
    bank.validate()?;
    let raw = (0..n)
        .map(|i| generate_raw(seed, i as u64, config, &bank))
        .collect::<Result<Vec<_>>>()?;
    let kinds: Vec<_> = raw.iter().map(|r| r.scene.destination_kind).collect();
    let assignment = stratified_split(&kinds, &config.ratios, seed)?;

    let vocab = Vocabulary::build(
        raw.iter()
            .zip(&assignment)
            .filter(|(_, &s)| s == Split::Train)
            .flat_map(|(r, _)| r.captions_eval.iter().chain(std::iter::once(&r.caption_train)))
            .flatten(),
    );
    let mut ds = Dataset {
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        vocab,
    };
    for (i, (r, split)) in raw.iter().zip(assignment).enumerate() {
        let sample = r.encode(i, &ds.vocab);
        match split {
            Split::Train => ds.train.push(sample),
            Split::Val => ds.val.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    Ok(ds)
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitHeader {
    magic: String,
    version: u32,
    split: Split,
    count: usize,
    seed: u64,
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for split in Split::ALL {
        let samples = ds.split(split);
        let mut f = BufWriter::new(std::fs::File::create(dir.join(split.file_name()))?);
        let header = SplitHeader {
            magic: DATASET_MAGIC.into(),
            version: DATASET_VERSION,
            split,
            count: samples.len(),
            seed: ds.seed,
        };
        serde_json::to_writer(&mut f, &header)?;
        f.write_all(b"\n")?;
        for s in samples {
            serde_json::to_writer(&mut f, s)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    ds.vocab.save(&dir.join(VOCAB_FILE))
}

pub fn read_split(dir: &Path, split: Split) -> Result<(u64, Vec<Sample>)> {
    let path = dir.join(split.file_name());
    let f = std::io::BufReader::new(std::fs::File::open(&path)?);
    let mut lines = f.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))??;
    let header: SplitHeader = serde_json::from_str(&first)
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    if header.magic != DATASET_MAGIC || header.version != DATASET_VERSION || header.split != split {
        return Err(Error::Format(format!(
            "{}: expected {DATASET_MAGIC} v{DATASET_VERSION} `{split}`, found {} v{} `{}`",
            path.display(),
            header.magic,
            header.version,
            header.split
        )));
    }
    let samples = lines
        .map(|l| Ok(serde_json::from_str::<Sample>(&l?)?))
        .collect::<Result<Vec<_>>>()?;
    if samples.len() != header.count {
        return Err(Error::Format(format!(
            "{}: header promises {} samples, found {}",
            path.display(),
            header.count,
            samples.len()
        )));
    }
    Ok((header.seed, samples))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let (seed, train) = read_split(dir, Split::Train)?;
    let (_, val) = read_split(dir, Split::Val)?;
    let (_, test) = read_split(dir, Split::Test)?;
    let ds = Dataset { seed, train, val, test, vocab };
    let v = ds.vocab.len() as u32;
    for s in Split::ALL.iter().flat_map(|&sp| ds.split(sp)) {
        if s.caption_train.iter().chain(s.captions_eval.iter().flatten()).any(|&t| t >= v) {
            return Err(Error::Format(format!("sample {} has token ids outside the vocabulary", s.id)));
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::vocab::UNK;

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_counts(100, &[0.8, 0.1, 0.1]).unwrap(), [80, 10, 10]);
        assert_eq!(split_counts(5317, &DEFAULT_RATIOS).unwrap(), [4186, 474, 657]);
        assert!(split_counts(10, &[0.5, 0.2, 0.2]).is_err());
    }

    #[test]
    fn hundred_samples_split_80_10_10() {
        let cfg = DatasetConfig {
            ratios: [0.8, 0.1, 0.1],
            ..Default::default()
        };
        let ds = build_dataset(100, 7, &cfg).unwrap();
        assert_eq!(ds.sizes(), [80, 10, 10]);
    }

    #[test]
    fn thin_stratum_is_named() {
        let kinds = vec![DestinationKind::Desk, DestinationKind::Desk, DestinationKind::Desk, DestinationKind::Shelf];
        let err = stratified_split(&kinds, &[0.5, 0.25, 0.25], 0).unwrap_err();
        assert!(err.to_string().contains("shelf"), "{err}");
    }

    #[test]
    fn vocabulary_comes_from_training_split() {
        let cfg = DatasetConfig {
            ratios: [0.8, 0.1, 0.1],
            ..Default::default()
        };
        let ds = build_dataset(60, 11, &cfg).unwrap();
        let bank = TemplateBank::default();
        for s in &ds.test {
            let raw = generate_raw(11, s.id as u64, &cfg, &bank).unwrap();
            for (w, &id) in raw.caption_train.iter().zip(&s.caption_train[1..]) {
                if ds.vocab.token(id) != Some(w.as_str()) {
                    assert_eq!(id, UNK);
                }
            }
        }
    }

    #[test]
    fn channel_values_in_unit_range() {
        let ds = build_dataset(120, 3, &DatasetConfig { ratios: [0.8, 0.1, 0.1], ..Default::default() }).unwrap();
        for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            assert!(s.dest_grid.iter().chain(&s.targ_grid).all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.regions.len(), s.scene.obstacles.len());
            assert!(s.captions_eval.contains(&s.caption_train));
            assert_eq!(s.collision_label, s.outcome.collided);
        }
    }
}
