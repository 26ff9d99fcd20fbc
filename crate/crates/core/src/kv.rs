//! Flat `section.key = value` text files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys must be unique
//! within a file. Consumers `take` the keys they understand and call
//! [`KvMap::finish`], which rejects anything left over.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{RamError, Result};

#[derive(Debug, Clone, Default)]
pub struct KvMap {
    source: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl KvMap {
    pub fn new(source: impl Into<String>) -> Self {
        KvMap {
            source: source.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn parse(text: &str, source: impl Into<String>) -> Result<Self> {
        let mut map = KvMap::new(source);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(map.parse_error(i + 1, format!("expected `key = value`, got `{line}`")));
            };
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(map.parse_error(i + 1, format!("invalid key `{key}`")));
            }
            if map.entries.contains_key(key) {
                return Err(map.parse_error(i + 1, format!("duplicate key `{key}`")));
            }
            map.entries
                .insert(key.to_string(), (value.trim().to_string(), i + 1));
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RamError::io(path, e))?;
        Self::parse(&text, path.display().to_string())
    }

    fn parse_error(&self, line: usize, message: String) -> RamError {
        RamError::Parse {
            path: self.source.clone(),
            line,
            message,
        }
    }

    /// Sets or replaces a value (flag overrides).
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    pub fn take_parsed<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((value, line)) => value.parse().map(Some).map_err(|e| RamError::Parse {
                path: self.source.clone(),
                line,
                message: format!("`{key}`: cannot parse `{value}`: {e}"),
            }),
        }
    }

    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.take_parsed(key)?.unwrap_or(default))
    }

    /// Splits off every key under `prefix.` into its own map.
    pub fn take_section(&mut self, prefix: &str) -> KvMap {
        let dotted = format!("{prefix}.");
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(&dotted))
            .cloned()
            .collect();
        let mut section = KvMap::new(self.source.clone());
        for k in keys {
            let v = self.entries.remove(&k).expect("key listed above");
            section.entries.insert(k, v);
        }
        section
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (_, line))) => Err(RamError::Config(if line > 0 {
                format!("{}:{line}: unknown key `{key}`", self.source)
            } else {
                format!("unknown key `{key}`")
            })),
        }
    }
}

/// Renders ordered pairs back to the text format.
pub fn render(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}
