//! Flat `key = value` text blocks.
//!
//! Used for environment parameter blocks, run configuration files and the
//! source-pool manifest. Lines starting with `#` and blank lines are ignored;
//! keys may carry dotted section prefixes (`safeguard.eta = 0.08`).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// An ordered map of string keys to raw string values.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: "empty key".into(),
                });
            }
            map.entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(map)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Typed lookup; a missing key yields `Ok(None)`.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{v}`: {e}"))),
        }
    }

    /// Typed lookup of a key that must be present.
    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    /// Overwrites `slot` when `key` is present.
    pub fn read_into<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Entries whose key begins with `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvMap {
        let head = format!("{prefix}.");
        KvMap {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&head).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Copies every entry of `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Copies every entry of `other`, replacing existing keys.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Renders one `key = value` line per entry in key order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Parses a comma separated list such as `1, 2, 3`.
pub fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{s}`: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_sections() {
        let text = "# header\nenv.m = 1.5\n\nsafeguard.eta=0.08\nname = run a\n";
        let kv = KvMap::parse(text).unwrap();
        assert_eq!(kv.require::<f64>("env.m").unwrap(), 1.5);
        assert_eq!(kv.section("safeguard").require::<f64>("eta").unwrap(), 0.08);
        assert_eq!(kv.get_raw("name"), Some("run a"));
        assert!(kv.get::<f64>("missing").unwrap().is_none());
    }

    #[test]
    fn reports_line_of_malformed_entry() {
        let err = KvMap::parse("a = 1\nbroken\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_key_names_the_key() {
        let kv = KvMap::new();
        let msg = kv.require::<f64>("env.x_max").unwrap_err().to_string();
        assert!(msg.contains("env.x_max"), "{msg}");
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list::<u64>("k", "1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_list::<u64>("k", "1,x").is_err());
    }
}
