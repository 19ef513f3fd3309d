//! Per-invocation run manifests and atomic output writes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    #[default]
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    pub seed: Option<u64>,
    /// Flat `key = value` snapshot of the experiment config.
    pub config: Option<String>,
    /// Generator parameters of the corpus, if synthetic.
    pub corpus_spec: BTreeMap<String, String>,
    pub inputs: Vec<FileHash>,
    pub checkpoints: Vec<String>,
    pub logs: Vec<String>,
    pub outputs: Vec<FileHash>,
    pub status: RunStatus,
    /// Free-form results (summary metrics).
    pub summary: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            ..RunManifest::default()
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(hash_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(hash_file(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    }
}

/// Manifest location for an output that is a directory or a single file.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join(MANIFEST_FILE)
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

/// Errors if `manifest` records a completed run.
pub fn refuse_completed(manifest: &Path, hint: &str) -> Result<()> {
    if manifest.exists() {
        let m = RunManifest::load(manifest)?;
        if m.status == RunStatus::Complete {
            bail!("{} records a completed run; {hint}", manifest.display());
        }
    }
    Ok(())
}

pub fn hash_file(path: &Path) -> Result<FileHash> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: format!("{:x}", hasher.finalize()),
    })
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}
