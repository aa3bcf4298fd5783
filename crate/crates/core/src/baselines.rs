//! Vision-free frequency baseline.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::scene::catalog::DestinationKind;
use crate::scene::dataset::Sample;

/// Emits the most frequent training caption of the sample's destination kind,
/// or of the whole training split for kinds it never saw. Frequency ties go to
/// the lexicographically smallest token-id sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NgramBaseline {
    per_kind: BTreeMap<DestinationKind, Vec<u32>>,
    global: Vec<u32>,
}

fn most_frequent<'a>(captions: impl Iterator<Item = &'a Vec<u32>>) -> Option<Vec<u32>> {
    let mut counts: HashMap<&Vec<u32>, usize> = HashMap::new();
    for c in captions {
        *counts.entry(c).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(c, _)| c.clone())
}

pub fn ngram_baseline(train: &[Sample]) -> Result<NgramBaseline> {
    let global = most_frequent(train.iter().map(|s| &s.caption_train))
        .ok_or_else(|| Error::Dataset("baseline needs at least one training caption".into()))?;
    let per_kind = DestinationKind::ALL
        .into_iter()
        .filter_map(|k| {
            most_frequent(train.iter().filter(|s| s.scene.destination_kind == k).map(|s| &s.caption_train)).map(|c| (k, c))
        })
        .collect();
    Ok(NgramBaseline { per_kind, global })
}

impl NgramBaseline {
    pub fn caption_for(&self, kind: DestinationKind) -> &[u32] {
        self.per_kind.get(&kind).unwrap_or(&self.global)
    }

    /// The chosen caption's token ids, BOS and EOS included.
    pub fn generate(&self, sample: &Sample) -> Vec<u32> {
        self.caption_for(sample.scene.destination_kind).to_vec()
    }
}
