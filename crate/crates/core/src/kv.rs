//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys must be unique.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KvFile {
    path: PathBuf,
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(parse_err("empty key".into()));
            }
            if entries.insert(k.to_string(), (v.to_string(), i + 1)).is_some() {
                return Err(parse_err(format!("duplicate key `{k}`")));
            }
        }
        Ok(KvFile {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| Error::Parse {
                path: self.path.clone(),
                line: *line,
                msg: format!("bad value for `{key}`: {e}"),
            }),
        }
    }

    /// Sets `slot` from `key` when present.
    pub fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for (k, (_, line)) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(Error::Parse {
                    path: self.path.clone(),
                    line: *line,
                    msg: format!("unknown key `{k}`"),
                });
            }
        }
        Ok(())
    }
}
