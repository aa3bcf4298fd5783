//! Corpus-level BLEU-4, ROUGE-L and CIDEr-D over whitespace tokens.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
const MAX_N: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSample {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalCorpus {
    samples: Vec<EvalSample>,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

impl EvalCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, candidate: Vec<String>, references: Vec<Vec<String>>) -> Result<()> {
        if candidate.is_empty() {
            return Err(Error::Input(format!("sample {} has an empty candidate", self.samples.len())));
        }
        if references.is_empty() || references.iter().any(Vec::is_empty) {
            return Err(Error::Input(format!("sample {} needs non-empty references", self.samples.len())));
        }
        self.samples.push(EvalSample { candidate, references });
        Ok(())
    }

    pub fn from_text<S: AsRef<str>>(pairs: &[(S, Vec<S>)]) -> Result<Self> {
        let mut c = Self::new();
        for (cand, refs) in pairs {
            c.push(tokenize(cand.as_ref()), refs.iter().map(|r| tokenize(r.as_ref())).collect())?;
        }
        Ok(c)
    }

    pub fn samples(&self) -> &[EvalSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn non_empty(&self) -> Result<()> {
        if self.samples.is_empty() {
            Err(Error::Input("empty evaluation corpus".into()))
        } else {
            Ok(())
        }
    }
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut c = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *c.entry(w).or_insert(0) += 1;
        }
    }
    c
}

/// Clipped n-gram matches and candidate n-gram total for one sample.
pub fn clipped_counts(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let mut max_ref: Counts<'_> = HashMap::new();
    for r in references {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let clipped = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (clipped, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`, the shorter one on ties.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Geometric mean of clipped 1..4-gram precisions times the brevity penalty.
/// A zero match count is replaced by 1e-9.
pub fn bleu4(corpus: &EvalCorpus) -> Result<f64> {
    corpus.non_empty()?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for s in corpus.samples() {
        for n in 1..=MAX_N {
            let (m, t) = clipped_counts(&s.candidate, &s.references, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        c_len += s.candidate.len();
        r_len += closest_ref_len(s.candidate.len(), &s.references);
    }
    let log_p: f64 = (0..MAX_N)
        .map(|i| {
            let num = if matched[i] == 0 { BLEU_EPSILON } else { matched[i] as f64 };
            (num / total[i].max(1) as f64).ln()
        })
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_f(candidate: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over samples of the best LCS F-measure against any reference.
pub fn rouge_l(corpus: &EvalCorpus) -> Result<f64> {
    corpus.non_empty()?;
    let sum: f64 = corpus
        .samples()
        .iter()
        .map(|s| s.references.iter().map(|r| rouge_f(&s.candidate, r)).fold(0.0, f64::max))
        .sum();
    Ok(sum / corpus.len() as f64)
}

struct TfIdf<'a> {
    vec: [HashMap<&'a [String], f64>; MAX_N],
    norm: [f64; MAX_N],
    len: usize,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<&'a [String], usize>, log_n: f64) -> TfIdf<'a> {
    let mut vec: [HashMap<&[String], f64>; MAX_N] = Default::default();
    let mut norm = [0.0; MAX_N];
    for n in 1..=MAX_N {
        for (g, tf) in ngrams(tokens, n) {
            let w = tf as f64 * (log_n - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln());
            norm[n - 1] += w * w;
            vec[n - 1].insert(g, w);
        }
    }
    TfIdf {
        vec,
        norm: norm.map(f64::sqrt),
        len: tokens.len(),
    }
}

fn cider_sim(hyp: &TfIdf<'_>, r: &TfIdf<'_>) -> [f64; MAX_N] {
    let delta = hyp.len as f64 - r.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut val = [0.0; MAX_N];
    for n in 0..MAX_N {
        for (g, &h) in &hyp.vec[n] {
            if let Some(&rv) = r.vec[n].get(g) {
                val[n] += h.min(rv) * rv;
            }
        }
        if hyp.norm[n] != 0.0 && r.norm[n] != 0.0 {
            val[n] /= hyp.norm[n] * r.norm[n];
        }
        val[n] *= penalty;
    }
    val
}

/// CIDEr-D: TF-IDF n-gram vectors (IDF from the references), clipped cosine
/// with a Gaussian length penalty, averaged over references and n, times 10.
pub fn cider_d(corpus: &EvalCorpus) -> Result<f64> {
    corpus.non_empty()?;
    if corpus.len() == 1 {
        log::warn!("CIDEr-D on a single-sample corpus is degenerate (all IDF weights are 0)");
    }
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for s in corpus.samples() {
        let mut seen: HashSet<&[String]> = HashSet::new();
        for r in &s.references {
            for n in 1..=MAX_N {
                seen.extend(ngrams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    let mut total = 0.0;
    for s in corpus.samples() {
        let hyp = tfidf(&s.candidate, &df, log_n);
        let mut acc = [0.0; MAX_N];
        for r in &s.references {
            let v = cider_sim(&hyp, &tfidf(r, &df, log_n));
            for n in 0..MAX_N {
                acc[n] += v[n];
            }
        }
        let mean_n = acc.iter().sum::<f64>() / MAX_N as f64;
        total += mean_n / s.references.len() as f64 * 10.0;
    }
    Ok(total / corpus.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

pub fn evaluate(corpus: &EvalCorpus) -> Result<MetricScores> {
    Ok(MetricScores {
        bleu4: bleu4(corpus)?,
        rouge_l: rouge_l(corpus)?,
        cider_d: cider_d(corpus)?,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(pairs: &[(&str, &[&str])]) -> EvalCorpus {
        let owned: Vec<(&str, Vec<&str>)> = pairs.iter().map(|(c, r)| (*c, r.to_vec())).collect();
        EvalCorpus::from_text(&owned).unwrap()
    }

    #[test]
    fn identity_scores() {
        let c = corpus(&[("a b c d e", &["a b c d e"]), ("x y z w", &["x y z w"])]);
        assert!((bleu4(&c).unwrap() - 1.0).abs() < 1e-12);
        assert!((rouge_l(&c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_case() {
        let c = corpus(&[("a b c d", &["a b c d e"])]);
        let expected = (1.0f64 - 5.0 / 4.0).exp();
        assert!((bleu4(&c).unwrap() - expected).abs() < 1e-12);
        assert_eq!(format!("{:.4}", bleu4(&c).unwrap()), "0.7788");
    }

    #[test]
    fn rouge_symmetric_case() {
        let c = corpus(&[("a b c", &["a x c"])]);
        assert!((rouge_l(&c).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cider_degenerate_cases() {
        assert_eq!(cider_d(&corpus(&[("a b c", &["a b c"])])).unwrap(), 0.0);
        let c = corpus(&[("p q r", &["a b c"]), ("d e f", &["d e f"])]);
        let c0 = corpus(&[("p q r", &["a b c"])]);
        assert!(cider_d(&c).unwrap() > 0.0);
        assert_eq!(cider_d(&c0).unwrap(), 0.0);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(bleu4(&EvalCorpus::new()).is_err());
        assert!(EvalCorpus::new().push(vec![], vec![vec!["a".into()]]).is_err());
        assert!(EvalCorpus::new().push(vec!["a".into()], vec![]).is_err());
    }

    #[test]
    fn mean_std_sample_convention() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }
}
