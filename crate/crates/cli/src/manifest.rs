//! `manifest.txt`: line-oriented `key = value` record of one command run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.txt";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Everything needed to re-run a command: its parameters, the effective
/// config, and checksums of what went in and came out. No timestamps or
/// absolute paths, so identical runs write identical manifests.
#[derive(Debug, Default)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set("command", command);
        m.set("version", concat!("v", env!("CARGO_PKG_VERSION")));
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn config(&mut self, cfg: &cmas_core::TrainConfig) {
        for (k, v) in cfg.entries() {
            self.set(&format!("config.{k}"), v);
        }
    }

    pub fn input(&mut self, path: &Path) {
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
    }

    /// Registers a file already written into the output directory.
    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let mut text = String::new();
        for (k, v) in &self.entries {
            text.push_str(&format!("{k} = {v}\n"));
        }
        for p in &self.inputs {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            text.push_str(&format!("input.{name} = {}\n", sha256_file(p)?));
        }
        for name in &self.outputs {
            text.push_str(&format!("output.{name} = {}\n", sha256_file(&out_dir.join(name))?));
        }
        let path = out_dir.join(FILE_NAME);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Parses a manifest back into ordered key/value pairs.
pub fn read(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l
                .split_once(" = ")
                .with_context(|| format!("{}: malformed line `{l}`", path.display()))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}
