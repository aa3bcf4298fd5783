//! Experiment plumbing: attention caching, datastore building, caption
//! generation, caption files, evaluation reports and the ablation table.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::ngram_baseline;
use crate::camd::greedy_generate;
use crate::error::{Error, Result};
use crate::features_cam::{AttentionMap, ModelInput};
use crate::metrics::{evaluate, mean_std, EvalCorpus, MetricScores};
use crate::model::attention_for;
use crate::nncm::{build_datastore, Datastore, Nncm, DEFAULT_K, DEFAULT_LAMBDA};
use crate::params::{ModelConfig, ModelParams};
use crate::scene::dataset::{Dataset, Sample, Split};
use crate::scene::vocab::Vocabulary;
use crate::training::{train, TrainConfig, TrainOutcome};

pub const CAPTIONS_HEADER: &str = "#NNFC-CAPTIONS v1";
pub const EVAL_MAGIC: &str = "NNFC-EVAL";
pub const EVAL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub lambda: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

pub fn prepare(params: &ModelParams<f32>, samples: &[Sample]) -> Result<(Vec<ModelInput<f32>>, Vec<AttentionMap>)> {
    let inputs = samples.iter().map(ModelInput::from_sample).collect::<Result<Vec<_>>>()?;
    let att = inputs.iter().map(|x| attention_for(params, x)).collect::<Result<Vec<_>>>()?;
    Ok((inputs, att))
}

pub fn datastore_for(params: &ModelParams<f32>, train: &[Sample]) -> Result<Datastore> {
    let (_, att) = prepare(params, train)?;
    build_datastore(train, &att, params)
}

/// Greedy captions for `samples`, rescored by the datastore when one is given.
pub fn generate_all(
    params: &ModelParams<f32>,
    samples: &[Sample],
    store: Option<&Datastore>,
    knn: &KnnConfig,
) -> Result<Vec<Vec<u32>>> {
    let nncm = store.map(|s| Nncm::new(s, knn.k, knn.lambda)).transpose()?;
    let (inputs, att) = prepare(params, samples)?;
    inputs
        .iter()
        .zip(&att)
        .map(|(x, a)| greedy_generate(x, a, params, nncm.as_ref()))
        .collect()
}

/// Decoded caption text; an empty decode becomes `<unk>` so every line scores.
pub fn caption_text(vocab: &Vocabulary, ids: &[u32]) -> String {
    let words = vocab.decode(ids);
    if words.is_empty() {
        "<unk>".to_string()
    } else {
        words.join(" ")
    }
}

pub fn write_captions(path: &Path, captions: &[(usize, String)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{CAPTIONS_HEADER}")?;
    for (id, text) in captions {
        if text.contains(['\n', '\t']) {
            return Err(Error::Input(format!("caption {id} contains a tab or newline")));
        }
        writeln!(f, "{id}\t{text}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_captions(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    match lines.next().transpose()? {
        Some(h) if h == CAPTIONS_HEADER => {}
        _ => return Err(Error::Format(format!("{} lacks the `{CAPTIONS_HEADER}` header", path.display()))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let line = line?;
            let (id, text) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("{} line {}: expected `id<TAB>text`", path.display(), i + 2)))?;
            let id = id
                .parse()
                .map_err(|_| Error::Format(format!("{} line {}: bad sample id `{id}`", path.display(), i + 2)))?;
            Ok((id, text.to_string()))
        })
        .collect()
}

/// Pairs each caption with the sample's reference family.
pub fn eval_corpus(samples: &[Sample], captions: &[(usize, String)], vocab: &Vocabulary) -> Result<EvalCorpus> {
    let by_id: std::collections::HashMap<usize, &Sample> = samples.iter().map(|s| (s.id, s)).collect();
    let mut corpus = EvalCorpus::new();
    for (id, text) in captions {
        let s = by_id
            .get(id)
            .ok_or_else(|| Error::Input(format!("caption for sample {id}, which is not in the split")))?;
        let refs = s.captions_eval.iter().map(|r| vocab.decode(r)).collect();
        let mut cand = crate::metrics::tokenize(text);
        if cand.is_empty() {
            cand.push("<unk>".into());
        }
        corpus.push(cand, refs)?;
    }
    Ok(corpus)
}

pub fn score(samples: &[Sample], generated: &[Vec<u32>], vocab: &Vocabulary) -> Result<MetricScores> {
    let captions: Vec<(usize, String)> = samples
        .iter()
        .zip(generated)
        .map(|(s, ids)| (s.id, caption_text(vocab, ids)))
        .collect();
    evaluate(&eval_corpus(samples, &captions, vocab)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub magic: String,
    pub version: u32,
    pub split: Split,
    pub samples: usize,
    pub runs: Vec<MetricScores>,
    pub bleu4: MetricSummary,
    pub rouge_l: MetricSummary,
    pub cider_d: MetricSummary,
}

impl EvalReport {
    pub fn new(split: Split, samples: usize, runs: Vec<MetricScores>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Input("evaluation report needs at least one run".into()));
        }
        let summary = |f: fn(&MetricScores) -> f64| {
            let (mean, std) = mean_std(&runs.iter().map(f).collect::<Vec<_>>());
            MetricSummary { mean, std }
        };
        Ok(Self {
            magic: EVAL_MAGIC.into(),
            version: EVAL_VERSION,
            split,
            samples,
            bleu4: summary(|m| m.bleu4),
            rouge_l: summary(|m| m.rouge_l),
            cider_d: summary(|m| m.cider_d),
            runs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if r.magic != EVAL_MAGIC || r.version != EVAL_VERSION {
            return Err(Error::Format(format!("{} is not a v{EVAL_VERSION} evaluation report", path.display())));
        }
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Full,
    NoNncm,
    NoCam,
    Ngram,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Full, Condition::NoNncm, Condition::NoCam, Condition::Ngram];

    pub fn label(self) -> &'static str {
        match self {
            Condition::Full => "Ours",
            Condition::NoNncm => "Ours (w/o NNCM)",
            Condition::NoCam => "Ours (w/o CAM)",
            Condition::Ngram => "Frequency baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub knn: KnnConfig,
    pub split: Split,
    pub conditions: Vec<Condition>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: Condition,
    pub runs: Vec<MetricScores>,
}

impl AblationRow {
    pub fn mean_std(&self, f: fn(&MetricScores) -> f64) -> (f64, f64) {
        mean_std(&self.runs.iter().map(f).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub split: Split,
    pub rows: Vec<AblationRow>,
}

const COLUMNS: [(&str, fn(&MetricScores) -> f64); 3] = [
    ("BLEU-4", |m| m.bleu4),
    ("ROUGE-L", |m| m.rouge_l),
    ("CIDEr-D", |m| m.cider_d),
];

impl AblationReport {
    pub fn row(&self, c: Condition) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.condition == c)
    }

    /// Markdown table of mean ± std per metric; the best mean per column is bold.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Scores on the {} split, mean ± std over {} seed(s) ({:?}).\n",
            self.split,
            self.seeds.len(),
            self.seeds
        );
        let _ = writeln!(s, "| Method | {} |", COLUMNS.map(|c| c.0).join(" | "));
        let _ = writeln!(s, "|---|{}", "---:|".repeat(COLUMNS.len()));
        let best: Vec<f64> = COLUMNS
            .iter()
            .map(|(_, f)| self.rows.iter().map(|r| r.mean_std(*f).0).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for r in &self.rows {
            let cells: Vec<String> = COLUMNS
                .iter()
                .zip(&best)
                .map(|((_, f), &b)| {
                    let (m, sd) = r.mean_std(*f);
                    let cell = format!("{m:.4} ± {sd:.4}");
                    if m == b {
                        format!("**{cell}**")
                    } else {
                        cell
                    }
                })
                .collect();
            let _ = writeln!(s, "| {} | {} |", r.condition.label(), cells.join(" | "));
        }
        s
    }
}

/// Per-seed artifacts of a trained condition, exposed for callers that persist them.
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub store: Datastore,
}

/// Trains every needed model for every seed and scores each condition.
/// The full and no-NNCM conditions share one trained model per seed.
pub fn run_ablation(
    ds: &Dataset,
    cfg: &AblationConfig,
    mut on_run: impl FnMut(Condition, &SeedRun),
) -> Result<AblationReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let samples = ds.split(cfg.split);
    if samples.is_empty() {
        return Err(Error::Dataset(format!("split `{}` is empty", cfg.split)));
    }
    let wants = |c| cfg.conditions.contains(&c);
    let mut rows: Vec<AblationRow> = cfg
        .conditions
        .iter()
        .map(|&condition| AblationRow { condition, runs: Vec::new() })
        .collect();
    let mut push = |c: Condition, m: MetricScores| {
        if let Some(r) = rows.iter_mut().find(|r| r.condition == c) {
            r.runs.push(m);
        }
    };
    for &seed in &cfg.seeds {
        let tcfg = TrainConfig { seed, ..cfg.train.clone() };
        if wants(Condition::Full) || wants(Condition::NoNncm) {
            let model = ModelConfig { use_cam: true, ..cfg.model.clone() };
            let run = train_and_store(ds, &model, &tcfg)?;
            if wants(Condition::Full) {
                let gen = generate_all(&run.outcome.params, samples, Some(&run.store), &cfg.knn)?;
                push(Condition::Full, score(samples, &gen, &ds.vocab)?);
            }
            if wants(Condition::NoNncm) {
                let gen = generate_all(&run.outcome.params, samples, None, &cfg.knn)?;
                push(Condition::NoNncm, score(samples, &gen, &ds.vocab)?);
            }
            on_run(Condition::Full, &run);
        }
        if wants(Condition::NoCam) {
            let model = ModelConfig { use_cam: false, ..cfg.model.clone() };
            let run = train_and_store(ds, &model, &tcfg)?;
            let gen = generate_all(&run.outcome.params, samples, Some(&run.store), &cfg.knn)?;
            push(Condition::NoCam, score(samples, &gen, &ds.vocab)?);
            on_run(Condition::NoCam, &run);
        }
        if wants(Condition::Ngram) {
            let base = ngram_baseline(&ds.train)?;
            let gen: Vec<Vec<u32>> = samples.iter().map(|s| base.generate(s)).collect();
            push(Condition::Ngram, score(samples, &gen, &ds.vocab)?);
        }
    }
    Ok(AblationReport {
        seeds: cfg.seeds.clone(),
        split: cfg.split,
        rows,
    })
}

pub fn train_and_store(ds: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<SeedRun> {
    let outcome = train(ds, model, cfg)?;
    let store = datastore_for(&outcome.params, &ds.train)?;
    Ok(SeedRun {
        seed: cfg.seed,
        outcome,
        store,
    })
}
