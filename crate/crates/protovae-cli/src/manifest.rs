//! Run manifests: resolved configuration, input hashes and output layout,
//! written before any computation starts.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use protovae::{Error, Result};

pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self { lines: Vec::new() };
        m.set("tool", format!("protovae {}", env!("CARGO_PKG_VERSION")));
        m.set("command", command);
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    /// Records an input file by SHA-256 so the run is reproducible from the
    /// manifest alone.
    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            let _ = write!(hex, "{b:02x}");
        }
        self.set(&format!("input.{label}"), format!("sha256:{hex}"));
        Ok(())
    }

    pub fn output(&mut self, label: &str, relative: &str) {
        self.set(&format!("output.{label}"), relative);
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("manifest.txt");
        let display = path.display().to_string();
        let mut text = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(text, "{k}={v}");
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&display, e))
    }
}

/// Creates the output directory (and parents) if needed.
pub fn ensure_out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// runs/<timestamp>-<seed> when no --out is given.
pub fn default_out_dir(seed: u64) -> std::path::PathBuf {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    std::path::PathBuf::from("runs").join(format!("{secs}-{seed}"))
}
