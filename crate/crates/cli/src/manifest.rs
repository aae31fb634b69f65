//! Run manifests: what a command read, what it wrote, and with which digests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use hardapt::Result;

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct ConfigDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub code_version: &'static str,
    pub config: Option<ConfigDigest>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    clock: Option<Instant>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_hex(&fs::read(path)?),
    })
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            code_version: env!("CARGO_PKG_VERSION"),
            config: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0.0,
            wall_clock_secs: 0.0,
            clock: Some(Instant::now()),
        }
    }

    pub fn config(&mut self, path: &Path, bytes: &[u8]) {
        self.config = Some(ConfigDigest {
            path: path.to_path_buf(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(path)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            entries.sort();
            for p in entries.into_iter().filter(|p| p.is_file()) {
                if p.file_name().is_some_and(|n| n != RUN_FILE) {
                    self.inputs.push(digest_file(&p)?);
                }
            }
        } else {
            self.inputs.push(digest_file(path)?);
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(digest_file(path)?);
        Ok(())
    }

    /// Stamp the end time and write `run.json` into `dir` via a rename.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix = unix_now();
        self.wall_clock_secs = self.clock.map_or(0.0, |c| c.elapsed().as_secs_f64());
        let text = serde_json::to_string_pretty(&self).map_err(hardapt::Error::contract)?;
        let dest = dir.join(RUN_FILE);
        write_atomic(&dest, (text + "\n").as_bytes())?;
        Ok(dest)
    }
}

/// Write through a sibling temp file so readers never see a partial file.
pub fn write_atomic(dest: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = dest.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, dest)?;
    Ok(())
}
