//! Run directory bookkeeping: `config.echo` plus `manifest.txt` listing every
//! artifact written.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Settings;
use crate::error::CliError;

pub struct RunDir {
    root: PathBuf,
    artifacts: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path, settings: &Settings, command: &str) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let mut run = RunDir {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        };
        run.write("config.echo", settings.echo(command).as_bytes())?;
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Records an artifact some library call wrote at `rel`.
    pub fn record(&mut self, rel: &str) {
        if !self.artifacts.iter().any(|a| a == rel) {
            self.artifacts.push(rel.to_string());
        }
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        self.record(rel);
        Ok(p)
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.artifacts.sort();
        let mut text = String::from("manifest.txt\n");
        for a in &self.artifacts {
            text.push_str(a);
            text.push('\n');
        }
        let p = self.root.join("manifest.txt");
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }
}
