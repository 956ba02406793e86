//! Line-oriented `key = value` text used for manifests, reports, config
//! files and checkpoint metadata.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are
//! `[A-Za-z0-9_.-]+`, unique within a document, and keep insertion order.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse { line: i + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let k = k.trim();
            if !valid_key(k) {
                return Err(err(format!("invalid key `{k}`")));
            }
            if doc.get(k).is_some() {
                return Err(err(format!("duplicate key `{k}`")));
            }
            doc.entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    /// Append an entry; panics on keys or values the format cannot carry.
    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) -> &mut Self {
        let key = key.into();
        let value = value.to_string();
        assert!(valid_key(&key), "invalid kv key `{key}`");
        assert!(
            !value.contains('\n') && !value.contains('\r'),
            "kv value for `{key}` spans lines"
        );
        assert!(self.get(&key).is_none(), "duplicate kv key `{key}`");
        self.entries.push((key, value.trim().to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("missing key `{key}`")))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|e| Error::config(format!("key `{key}`: cannot parse `{raw}`: {e}")))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.parse_value(key),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overlay `other` on top of `self`; keys in `other` win.
    pub fn merged(&self, other: &KvDoc) -> KvDoc {
        let mut out = KvDoc::new();
        for (k, v) in &self.entries {
            let v = other.get(k).unwrap_or(v);
            out.entries.push((k.clone(), v.to_string()));
        }
        for (k, v) in &other.entries {
            if self.get(k).is_none() {
                out.entries.push((k.clone(), v.clone()));
            }
        }
        out
    }
}

impl fmt::Display for KvDoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
