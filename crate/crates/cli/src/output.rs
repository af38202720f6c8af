use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance of one command run, written as `manifest.json` next to the
/// outputs. The timestamps make it the only file that differs between
/// otherwise identical runs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub config_path: PathBuf,
    /// SHA-256 of the resolved configuration serialized as JSON.
    pub config_digest: String,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<PathBuf>,
}

pub fn config_digest<T: Serialize>(config: &T) -> anyhow::Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Output directory, created on demand.
pub struct OutDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(root)
            .with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn open(&mut self, name: &str) -> anyhow::Result<BufWriter<File>> {
        let path = self.root.join(name);
        let file =
            File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
        self.written.push(path);
        Ok(BufWriter::new(file))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut w = self.open(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn outputs(&self) -> Vec<PathBuf> {
        self.written.clone()
    }
}
