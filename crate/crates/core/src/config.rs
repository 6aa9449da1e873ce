//! Line-based `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! the first `=` on a line separates key from value.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValueConfig {
    entries: Vec<(String, String, usize)>,
}

impl KeyValueConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (k, raw) in text.lines().enumerate() {
            let line_no = k + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("line {line_no}: expected key = value")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Usage(format!("line {line_no}: empty key")));
            }
            if let Some((_, _, first)) = cfg.entries.iter().find(|(k, _, _)| k == key) {
                return Err(Error::Usage(format!(
                    "line {line_no}: duplicate key '{key}' (first set on line {first})"
                )));
            }
            cfg.entries.push((key.to_string(), value.trim().to_string(), line_no));
        }
        Ok(cfg)
    }

    /// Sets `key`, replacing any existing value.
    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value, 0)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _, _)| k.as_str())
    }

    fn location(&self, key: &str) -> String {
        match self.entries.iter().find(|(k, _, _)| k == key) {
            Some((_, _, line)) if *line > 0 => format!("line {line}, key '{key}'"),
            _ => format!("key '{key}'"),
        }
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Usage(format!("{}: cannot parse '{v}': {e}", self.location(key))))
            })
            .transpose()
    }

    pub fn required<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.parsed(key)?
            .ok_or_else(|| Error::Usage(format!("missing required key '{key}'")))
    }

    /// Comma-separated list of values.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|s| {
                let s = s.trim();
                s.parse::<T>()
                    .map_err(|e| Error::Usage(format!("{}: cannot parse '{s}': {e}", self.location(key))))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Rejects keys outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for (k, _, _) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(Error::Usage(format!("{}: unknown key", self.location(k))));
            }
        }
        Ok(())
    }
}

impl fmt::Display for KeyValueConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v, _) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
