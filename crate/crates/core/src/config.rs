//! Flat `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are either bare
//! training fields (`peak_lr=5e-4`) or namespaced with a dot
//! (`model.d_hidden=64`, `synth.seed=3`). Each consumer takes the keys it
//! understands; [`KeyValues::finish`] rejects whatever is left over.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    path: PathBuf,
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                path: path.clone(),
                msg: format!("line {}: expected key=value, got `{line}`", n + 1),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config {
                    path,
                    msg: format!("line {}: empty key", n + 1),
                });
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config {
                    path,
                    msg: format!("line {}: duplicate key `{k}`", n + 1),
                });
            }
        }
        Ok(Self { path, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    /// Removes and parses `key` into `slot` when present.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(raw) = self.entries.remove(key) {
            *slot = raw.parse().map_err(|e: T::Err| Error::Config {
                path: self.path.clone(),
                msg: format!("`{key}`: cannot parse `{raw}`: {e}"),
            })?;
        }
        Ok(())
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Splits off every `prefix.`-namespaced key, with the prefix stripped.
    pub fn section(&mut self, prefix: &str) -> KeyValues {
        let dotted = format!("{prefix}.");
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(&dotted)).cloned().collect();
        let entries = keys
            .into_iter()
            .map(|k| {
                let v = self.entries.remove(&k).unwrap();
                (k[dotted.len()..].to_string(), v)
            })
            .collect();
        KeyValues {
            path: self.path.clone(),
            entries,
        }
    }

    /// Drops every `prefix.` key; used by consumers that ignore other namespaces.
    pub fn discard_section(&mut self, prefix: &str) {
        self.section(prefix);
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Config {
                path: self.path,
                msg: format!("unknown key `{k}`"),
            }),
        }
    }
}

pub(crate) fn positive<T: PartialOrd + Default + std::fmt::Display>(path: &Path, key: &str, v: T) -> Result<()> {
    if v > T::default() {
        Ok(())
    } else {
        Err(Error::Config {
            path: path.to_path_buf(),
            msg: format!("`{key}` must be positive, got {v}"),
        })
    }
}
