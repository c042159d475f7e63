//! Run manifests: the fully resolved job of a run, written beside its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read, write_atomic};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// File name used when the output is a directory.
pub const MANIFEST_FILE: &str = "lodseg.manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Everything needed to re-run the command.
    pub job: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub outputs: Vec<PathBuf>,
    pub workers: Option<usize>,
    pub created_unix_s: u64,
}

impl Manifest {
    pub fn new(command: &str, job: &impl Serialize) -> Result<Self> {
        Ok(Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool: "lodseg".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            job: serde_json::to_value(job).map_err(|e| Error::Format(e.to_string()))?,
            seeds: BTreeMap::new(),
            outputs: Vec::new(),
            workers: None,
            created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        })
    }

    pub fn job_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.job.clone()).map_err(|e| Error::Config(format!("manifest job: {e}")))
    }

    /// `<dir>/lodseg.manifest.json` for a directory output, else `<file>.manifest.json`.
    pub fn path_for(output: &Path) -> PathBuf {
        if output.is_dir() {
            return output.join(MANIFEST_FILE);
        }
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }

    pub fn write_beside(&self, output: &Path) -> Result<PathBuf> {
        let path = Self::path_for(output);
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Format(format!("{}: manifest schema {} is not {MANIFEST_SCHEMA_VERSION}", path.display(), m.schema_version)));
        }
        Ok(m)
    }
}
