//! Flat `key = value` run configuration; command-line flags take precedence.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use nnfc_core::Error;

#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)).into());
            };
            let key = k.trim().replace('-', "_");
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: `{key}` set twice", i + 1)).into());
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text)
            }
        }
    }

    /// Flag value if given, else the file's value, else `default`.
    pub fn pick<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| Error::Config(format!("config key `{key}` = `{raw}`: {e}")).into()),
        }
    }

    pub fn flag(&self, key: &str, flag: bool) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        self.pick(key, None, false)
    }

    /// Rejects keys no command understands.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        for k in self.values.keys() {
            if !known.contains(&k.as_str()) {
                bail!(Error::Config(format!("unknown config key `{k}`")));
            }
        }
        Ok(())
    }
}
