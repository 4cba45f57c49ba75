//! Flat `key = value` configuration with `[section]` headers.
//!
//! Keys before the first header apply to every subcommand; a `[name]`
//! section applies only to subcommand `name`. `#` starts a comment.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    pub global: BTreeMap<String, String>,
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

pub fn parse(text: &str) -> Result<ConfigFile, CliError> {
    let mut cfg = ConfigFile::default();
    let mut current: Option<String> = None;
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return Err(CliError::Config(format!("line {}: unterminated section header", no + 1)));
            };
            let name = name.trim().to_string();
            cfg.sections.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config(format!("line {}: expected key = value", no + 1)));
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(CliError::Config(format!("line {}: empty key", no + 1)));
        }
        let target = match &current {
            Some(s) => cfg.sections.get_mut(s).unwrap(),
            None => &mut cfg.global,
        };
        if target.insert(k.clone(), v).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key '{k}'", no + 1)));
        }
    }
    Ok(cfg)
}

/// Resolved parameters of one subcommand.
#[derive(Debug, Clone)]
pub struct Params {
    pub command: String,
    pub values: BTreeMap<String, String>,
}

impl Params {
    /// Merges global keys, the command's section and `overrides` (later wins).
    pub fn resolve(command: &str, file: &ConfigFile, overrides: &[(String, String)]) -> Result<Self, CliError> {
        for name in file.sections.keys() {
            if !crate::commands::COMMANDS.contains(&name.as_str()) {
                return Err(CliError::Config(format!("unknown section '[{name}]'")));
            }
        }
        let mut values = file.global.clone();
        if let Some(s) = file.sections.get(command) {
            values.extend(s.clone());
        }
        values.extend(overrides.iter().cloned());
        Ok(Self { command: command.to_string(), values })
    }

    /// Rejects keys outside `allowed`, naming the first offender.
    pub fn check(&self, allowed: &[&str]) -> Result<(), CliError> {
        match self.values.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(CliError::Config(format!("unknown key '{k}' for '{}'", self.command))),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| CliError::Config(format!("cannot parse '{key}' = '{v}'"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.raw(key).ok_or_else(|| CliError::Config(format!("missing key '{key}' for '{}'", self.command)))?;
        v.parse().map_err(|_| CliError::Config(format!("cannot parse '{key}' = '{v}'")))
    }

    pub fn list<T: FromStr>(&self, key: &str, default: &[T]) -> Result<Vec<T>, CliError>
    where
        T: Clone,
    {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| CliError::Config(format!("cannot parse '{key}' = '{v}'"))))
                .collect(),
        }
    }

    pub fn positive(&self, key: &str, default: f64) -> Result<f64, CliError> {
        let v: f64 = self.get(key, default)?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(CliError::Config(format!("'{key}' must be positive, got {v}")));
        }
        Ok(v)
    }

    pub fn nonnegative(&self, key: &str, default: f64) -> Result<f64, CliError> {
        let v: f64 = self.get(key, default)?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(CliError::Config(format!("'{key}' must be nonnegative, got {v}")));
        }
        Ok(v)
    }

    pub fn count(&self, key: &str, default: usize) -> Result<usize, CliError> {
        let v: usize = self.get(key, default)?;
        if v == 0 {
            return Err(CliError::Config(format!("'{key}' must be at least 1")));
        }
        Ok(v)
    }
}

pub fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got '{s}'"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
