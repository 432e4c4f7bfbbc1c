use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

/// Collects what a run read and wrote; `finish` writes `manifest.json`.
pub struct Manifest {
    command: String,
    dir: PathBuf,
    seed: u64,
    deterministic: bool,
    config: Value,
    inputs: Vec<FileHash>,
    outputs: Vec<String>,
    extra: serde_json::Map<String, Value>,
}

impl Manifest {
    pub fn new(command: &str, dir: &Path, seed: u64, deterministic: bool, config: Value) -> Self {
        Manifest {
            command: command.into(),
            dir: dir.to_path_buf(),
            seed,
            deterministic,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: Default::default(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        if path.is_dir() {
            let mut names: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "manifest.json"))
                .collect();
            names.sort();
            for p in names {
                self.input(&p)?;
            }
            return Ok(());
        }
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.extra
            .insert(key.into(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    /// Creates `name` in the output directory and records it.
    pub fn create(&mut self, name: &str) -> Result<std::io::BufWriter<fs::File>, CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
        }
        let f = fs::File::create(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        self.record(name);
        Ok(std::io::BufWriter::new(f))
    }

    pub fn record(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.into());
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn finish(self) -> Result<(), CliError> {
        let mut outputs = Vec::new();
        let mut names = self.outputs.clone();
        names.sort();
        for n in names {
            outputs.push(FileHash {
                sha256: sha256_file(&self.dir.join(&n))?,
                path: n,
            });
        }
        let doc = serde_json::json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "deterministic": self.deterministic,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": outputs,
            "results": self.extra,
        });
        let path = self.dir.join("manifest.json");
        let mut f = fs::File::create(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::to_writer_pretty(&mut f, &doc).map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(f).map_err(|e| CliError::Data(e.to_string()))?;
        Ok(())
    }
}
