use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use taskmod::{fsutil, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Provenance record written next to a command's outputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub versions: Versions,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub taskmod: &'static str,
    pub container_format: u32,
}

fn hash_file(path: &Path, label: String) -> Result<FileRecord> {
    let bytes = fsutil::read(path)?;
    Ok(FileRecord {
        path: label,
        sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
        bytes: bytes.len(),
    })
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            seed: None,
            config: None,
            versions: Versions {
                taskmod: env!("CARGO_PKG_VERSION"),
                container_format: taskmod::modulation::CONTAINER_VERSION,
            },
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let rec = hash_file(path, path.display().to_string())?;
        self.inputs.push(rec);
        Ok(())
    }

    /// Records an already-written output; `base` is stripped from the stored path.
    pub fn output(&mut self, base: &Path, path: &Path) -> Result<()> {
        let label = path.strip_prefix(base).unwrap_or(path).display().to_string();
        let rec = hash_file(path, label)?;
        self.outputs.push(rec);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fsutil::write_atomic(path, text.as_bytes())
    }
}

/// Collects outputs under one directory and writes the manifest there.
pub struct OutDir {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl OutDir {
    pub fn create(dir: &Path, command: &str) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| taskmod::Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest::new(command),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        fsutil::write_atomic(&p, bytes)?;
        self.manifest.output(&self.dir, &p)?;
        Ok(p)
    }

    /// Records a file some other writer already put in the directory.
    pub fn record(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        self.manifest.output(&self.dir, &p)?;
        Ok(p)
    }

    pub fn finish(self) -> Result<()> {
        self.manifest.write(&self.dir.join(MANIFEST_FILE))
    }
}
