//! `key=value` configuration with command-line overrides.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Values from an optional config file plus `--set key=value` overrides.
/// Every key must be consumed by the running command.
#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl Settings {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) =
                    split_pair(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
                values.insert(k, v);
            }
        }
        for o in overrides {
            let (k, v) = split_pair(o).with_context(|| format!("--set {o}"))?;
            values.insert(k, v);
        }
        Ok(Settings {
            values,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.values.get(key).map(String::as_str)
    }

    /// The flag value if given, else the config value, else `default`.
    pub fn pick<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let from_file = self.parsed(key)?;
        Ok(flag.or(from_file).unwrap_or(default))
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| anyhow!("config key {key}: cannot parse {v:?}")),
        }
    }

    /// Keys this command never looked at.
    pub fn check_consumed(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            bail!(
                "unknown config keys for this command: {}",
                unknown.join(", ")
            );
        }
        Ok(())
    }

    /// All pairs whose key starts with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, String)> {
        let mut used = self.used.borrow_mut();
        self.values
            .iter()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(prefix)?;
                used.insert(k.clone());
                Some((rest.to_string(), v.clone()))
            })
            .collect()
    }
}

fn split_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected key=value, got {s:?}"))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        bail!("empty key in {s:?}");
    }
    Ok((k.to_string(), v.to_string()))
}
