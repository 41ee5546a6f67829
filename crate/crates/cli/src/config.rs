//! Flat `key = value` run configuration.
//!
//! Values resolve in order: built-in defaults, then the `--config` file, then
//! `--set key=value` overrides, then dedicated flags such as `--steps`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
    known: Vec<&'static str>,
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("config line {}: expected `key = value`, got {raw:?}", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(CliError::Config(format!("config line {}: empty key", n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    pub fn new(defaults: &[(&'static str, &str)]) -> Self {
        Settings {
            values: defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            known: defaults.iter().map(|(k, _)| *k).collect(),
        }
    }

    fn check_key(&self, key: &str) -> Result<(), CliError> {
        if self.known.contains(&key) {
            Ok(())
        } else {
            Err(CliError::Config(format!(
                "unknown setting {key:?}; known: {}",
                self.known.join(", ")
            )))
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        self.check_key(key)?;
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        for (k, v) in parse_config(&text)? {
            self.set(&k, v)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn merge_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set_opt<T: Display>(&mut self, key: &str, value: Option<T>) -> Result<(), CliError> {
        match value {
            Some(v) => self.set(key, v.to_string()),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Result<&str, CliError> {
        self.check_key(key)?;
        Ok(self.values.get(key).map(String::as_str).unwrap_or(""))
    }

    /// A value that must be present and non-empty.
    pub fn required(&self, key: &str) -> Result<&str, CliError> {
        let v = self.raw(key)?;
        if v.is_empty() {
            Err(CliError::Config(format!("setting {key:?} is required")))
        } else {
            Ok(v)
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = self.required(key)?;
        v.parse()
            .map_err(|e| CliError::Config(format!("setting {key} = {v:?}: {e}")))
    }

    /// Sorted `key = value` lines; feeding them back through `--config`
    /// reproduces the run.
    pub fn echo(&self, command: &str) -> String {
        let mut out = format!("# orbitmask {command}\n");
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
