//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, keys are
//! lowercase_with_underscores. Typed getters fall back to defaults so
//! configs only need to state what they change.

use crate::error::{CoreError, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
    source: String,
}

impl Config {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::data(format!("{source}:{}: expected key = value", lineno + 1))
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Config {
            entries,
            source: source.to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Config::parse(&text, &path.display().to_string())
    }

    pub fn empty() -> Self {
        Config::default()
    }

    pub fn raw(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.entries
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                CoreError::data(format!(
                    "{}: key {key} = {v:?} is not an integer",
                    self.source
                ))
            }),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                CoreError::data(format!(
                    "{}: key {key} = {v:?} is not an integer",
                    self.source
                ))
            }),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                CoreError::data(format!(
                    "{}: key {key} = {v:?} is not a number",
                    self.source
                ))
            }),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.entries.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(CoreError::data(format!(
                "{}: key {key} = {v:?} is not a boolean",
                self.source
            ))),
        }
    }

    /// Rejects keys outside the documented set, so typos fail loudly.
    pub fn ensure_known(&self, known: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            if !known.contains(&key.as_str()) {
                return Err(CoreError::data(format!(
                    "{}: unknown configuration key {key:?}",
                    self.source
                )));
            }
        }
        Ok(())
    }

    /// Stable content hash used to stamp checkpoints.
    pub fn content_hash(&self) -> u64 {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::{Hash, Hasher};
        let mut h = DefaultHasher::new();
        for (k, v) in &self.entries {
            k.hash(&mut h);
            v.hash(&mut h);
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let c = Config::parse("# header\n lr = 0.5 # trailing\n\nseed=7\n", "test").unwrap();
        assert_eq!(c.get_f64("lr", 0.0).unwrap(), 0.5);
        assert_eq!(c.get_u64("seed", 0).unwrap(), 7);
        assert_eq!(c.get_usize("missing", 3).unwrap(), 3);
    }

    #[test]
    fn bad_number_reports_key() {
        let c = Config::parse("lr = fast\n", "test").unwrap();
        let e = c.get_f64("lr", 0.0).unwrap_err().to_string();
        assert!(e.contains("lr"), "{e}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let c = Config::parse("typo_key = 1\n", "test").unwrap();
        assert!(c.ensure_known(&["lr", "seed"]).is_err());
        assert!(c.ensure_known(&["typo_key"]).is_ok());
    }
}
