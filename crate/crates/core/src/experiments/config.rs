use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{config, Result};

/// Flat `key = value` settings. Blank lines and `#` comments are ignored;
/// list values are comma-separated. Keys that no experiment reads are
/// reported as errors.
#[derive(Clone, Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(config(format!("duplicate key '{k}'")));
            }
        }
        Ok(Self {
            entries,
            used: RefCell::default(),
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries
            .get(key)
            .map(|v| v.parse().map_err(|_| config(format!("bad value for '{key}': '{v}'"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list_or<T: FromStr + Clone>(&self, key: &str, default: &[T]) -> Result<Vec<T>> {
        self.used.borrow_mut().insert(key.to_string());
        match self.entries.get(key) {
            None => Ok(default.to_vec()),
            Some(v) if v.is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| config(format!("bad list item for '{key}': '{}'", s.trim())))
                })
                .collect(),
        }
    }

    /// Sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Hex SHA-256 of [`Config::canonical`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn check_all_used(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_and_lists() {
        let c = Config::parse("# comment\n\nn = 5\nws = 0, 0.5 ,1\nname = a=b\nempty =\n").unwrap();
        assert_eq!(c.get_or("n", 0usize).unwrap(), 5);
        assert_eq!(c.get_or("missing", 7usize).unwrap(), 7);
        assert_eq!(c.list_or::<f64>("ws", &[]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(c.get::<String>("name").unwrap().unwrap(), "a=b");
        assert!(c.list_or::<f64>("empty", &[1.0]).unwrap().is_empty());
        assert!(c.get::<usize>("ws").is_err());
        c.check_all_used().unwrap();
    }

    #[test]
    fn rejects_malformed() {
        assert!(Config::parse("novalue").is_err());
        assert!(Config::parse("= 3").is_err());
        assert!(Config::parse("a = 1\na = 2").is_err());
    }

    #[test]
    fn hash_ignores_layout_and_tracks_values() {
        let a = Config::parse("a = 1\nb = 2").unwrap();
        let b = Config::parse("# x\nb=2\n  a =1").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = a.clone();
        c.set("seed", 3);
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn reports_unused_keys() {
        let c = Config::parse("a = 1\nb = 2").unwrap();
        let _ = c.get::<u32>("a");
        assert!(c.check_all_used().unwrap_err().to_string().contains('b'));
    }
}
