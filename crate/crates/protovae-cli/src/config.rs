//! Flat key=value config files and flag/file/default precedence.
//!
//! Precedence: command-line flags override config-file entries, which
//! override built-in defaults. The resolved values land in the run
//! manifest.

use std::collections::BTreeMap;
use std::path::Path;

use protovae::{Error, Result};

#[derive(Debug, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let display = path.display().to_string();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::InvalidArgument {
                op: "config",
                message: format!("{display}:{}: expected key=value, got {line:?}", lineno + 1),
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { entries })
    }

    /// Flag value, else file value, else default.
    pub fn resolve<T: Clone + std::str::FromStr>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.entries.get(key) {
            Some(raw) => raw.parse().map_err(|_| Error::InvalidArgument {
                op: "config",
                message: format!("key {key} has unparseable value {raw:?}"),
            }),
            None => Ok(default),
        }
    }

    /// Booleans: flags can only switch on; the file may say true/false.
    pub fn resolve_flag(&self, flag: bool, key: &str) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        match self.entries.get(key).map(String::as_str) {
            None => Ok(false),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(other) => Err(Error::InvalidArgument {
                op: "config",
                message: format!("key {key} must be true or false, got {other:?}"),
            }),
        }
    }

    pub fn resolve_path(
        &self,
        flag: Option<std::path::PathBuf>,
        key: &str,
    ) -> Option<std::path::PathBuf> {
        flag.or_else(|| self.entries.get(key).map(std::path::PathBuf::from))
    }
}
