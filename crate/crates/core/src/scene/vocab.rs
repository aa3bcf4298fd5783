use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bidirectional token/id map. Ids 0..4 are PAD, BOS, EOS, UNK; the rest are
/// sorted lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build<'a, I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str> + 'a,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `[BOS, w_1, ..., w_n, EOS]`
    pub fn encode_sentence<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        std::iter::once(BOS)
            .chain(words.iter().map(|w| self.id(w.as_ref())))
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Words of `ids` with PAD/BOS/EOS removed; stops at the first EOS after content.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                PAD | BOS => continue,
                EOS => break,
                _ => out.push(self.token(id).unwrap_or("<unk>").to_string()),
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let tokens = f.lines().collect::<std::io::Result<Vec<String>>>()?;
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format(format!(
                "{} does not start with the reserved tokens {SPECIALS:?}",
                path.display()
            )));
        }
        let unique: BTreeSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(Error::Format(format!("{} has duplicate tokens", path.display())));
        }
        Ok(Self::from_tokens(tokens))
    }
}
