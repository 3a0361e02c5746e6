//! Output directory handling: lock file, atomic writes, run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".lock";

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("{} is locked by another command (remove {} if stale)", dir.display(), path.display())
            }
            Err(e) => Err(e).with_context(|| format!("locking {}", dir.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).with_context(|| format!("writing {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub status: Status,
    pub started_at: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    pub seed: u64,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// Output file (relative to the directory) to its SHA-256.
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Manifest of one command, written when the command starts and finalized
/// when it ends.
pub struct Run {
    dir: PathBuf,
    manifest: Manifest,
    outputs: Vec<PathBuf>,
    _lock: DirLock,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl Run {
    pub fn start(command: &str, dir: &Path, config: &RunConfig, checkpoint: Option<&Path>) -> Result<Self> {
        let lock = DirLock::acquire(dir)?;
        let run = Self {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                status: Status::Running,
                started_at: now(),
                finished_at: None,
                seed: config.seed,
                config: config.clone(),
                checkpoint: checkpoint.map(|p| p.display().to_string()),
                outputs: BTreeMap::new(),
                error: None,
            },
            outputs: Vec::new(),
            _lock: lock,
        };
        run.write_manifest()?;
        Ok(run)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Registers `rel` to be hashed into the final manifest.
    pub fn record(&mut self, rel: &str) {
        let p = PathBuf::from(rel);
        if !self.outputs.contains(&p) {
            self.outputs.push(p);
        }
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(rel), bytes)?;
        self.record(rel);
        Ok(())
    }

    fn write_manifest(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&self.dir.join(MANIFEST), json.as_bytes())
    }

    pub fn finish(mut self, outcome: &Result<()>) -> Result<()> {
        for rel in &self.outputs {
            let path = self.dir.join(rel);
            if path.exists() {
                let key = rel.to_string_lossy().replace('\\', "/");
                self.manifest.outputs.insert(key, sha256_file(&path)?);
            }
        }
        self.manifest.finished_at = Some(now());
        match outcome {
            Ok(()) => self.manifest.status = Status::Complete,
            Err(e) => {
                self.manifest.status = Status::Failed;
                self.manifest.error = Some(format!("{e:#}"));
            }
        }
        self.write_manifest()
    }
}
