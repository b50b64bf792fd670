//! Sidecar JSON recording how an artifact was produced.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use igvlm::export::write_text;
use igvlm::{Error, Result};

pub struct Manifest {
    pub command: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub fields: Map<String, Value>,
}

impl Manifest {
    pub fn new(command: &'static str, config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            command,
            config_hash: config_hash.into(),
            seed,
            fields: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.fields.insert(key.to_string(), value.into());
        self
    }

    pub fn to_json(&self) -> String {
        let mut v = json!({
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
        });
        let obj = v.as_object_mut().expect("object literal");
        for (k, x) in &self.fields {
            obj.insert(k.clone(), x.clone());
        }
        let mut s = serde_json::to_string_pretty(&v).expect("manifest serialises");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json())
    }
}

/// `<file>.manifest.json` next to `file`.
pub fn sidecar(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Same stem with a different suffix, e.g. `run.igvc` → `run.metrics.csv`.
pub fn sibling(file: &Path, suffix: &str) -> PathBuf {
    file.with_extension(suffix)
}

/// `(config_hash, seed)` of an artifact's sidecar.
pub fn read_provenance(file: &Path) -> Result<Option<(String, u64)>> {
    let p = sidecar(file);
    if !p.exists() {
        return Ok(None);
    }
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
    let hash = v["config_hash"]
        .as_str()
        .ok_or_else(|| Error::Format(format!("{}: no config_hash", p.display())))?;
    let seed = v["seed"]
        .as_u64()
        .ok_or_else(|| Error::Format(format!("{}: no seed", p.display())))?;
    Ok(Some((hash.to_string(), seed)))
}

pub fn path_str(p: &Path) -> String {
    p.display().to_string()
}
