//! Flat `key=value` configuration files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Each
//! consumer takes the keys it understands; [`KvMap::finish`] then rejects
//! anything left over so typos do not pass silently.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvMap {
    entries: Vec<(String, String)>,
    used: BTreeSet<String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "line {}: expected key=value, got `{raw}`",
                    lineno + 1
                ))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.iter().any(|(e, _)| e == k) {
                return Err(Error::config(format!(
                    "line {}: duplicate key `{k}`",
                    lineno + 1
                )));
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(KvMap {
            entries,
            used: BTreeSet::new(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.iter().any(|(k, _)| k == key)
    }

    /// Parses `key` if present and marks it consumed.
    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let Some((_, v)) = self.entries.iter().find(|(k, _)| k == key) else {
            return Ok(None);
        };
        self.used.insert(key.to_string());
        v.parse::<T>()
            .map(Some)
            .map_err(|e| Error::config(format!("{key}={v}: {e}")))
    }

    pub fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Overrides or inserts a value.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    /// Fails if any key was never consumed.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .entries
            .iter()
            .map(|(k, _)| k.as_str())
            .filter(|k| !self.used.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )))
        }
    }
}

/// Accumulates `key=value` lines.
#[derive(Clone, Debug, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(key);
        self.out.push('=');
        self.out.push_str(&value.to_string());
        self.out.push('\n');
        self
    }

    pub fn finish(self) -> String {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let mut kv = KvMap::parse("# header\n a = 3 \n\nb=x # trailing\n").unwrap();
        assert_eq!(kv.get::<usize>("a").unwrap(), Some(3));
        assert_eq!(kv.get::<String>("b").unwrap().as_deref(), Some("x"));
        assert_eq!(kv.get::<usize>("c").unwrap(), None);
        kv.finish().unwrap();
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(KvMap::parse("novalue\n").is_err());
        assert!(KvMap::parse("a=1\na=2\n").is_err());
        let mut kv = KvMap::parse("a=one\n").unwrap();
        assert!(kv.get::<usize>("a").is_err());
    }

    #[test]
    fn leftover_keys_are_reported() {
        let mut kv = KvMap::parse("a=1\ntypo=2\n").unwrap();
        kv.get::<usize>("a").unwrap();
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("typo"), "{err}");
    }
}
