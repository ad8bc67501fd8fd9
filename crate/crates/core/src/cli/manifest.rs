use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulation::RNG_DESCRIPTION;

/// Everything needed to reproduce a run. Only `created_unix` varies between
/// a run and its replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The resolved config with every default filled in.
    pub config: serde_json::Value,
    /// sha256 of each input file, keyed by path.
    pub input_digests: BTreeMap<String, String>,
    pub seed: u64,
    pub version: String,
    pub rng: String,
    pub outputs: Vec<String>,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new<C: Serialize>(
        command: &str,
        config: &C,
        input_digests: BTreeMap<String, String>,
        seed: u64,
        outputs: Vec<String>,
    ) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            config: serde_json::to_value(config)?,
            input_digests,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            rng: RNG_DESCRIPTION.into(),
            outputs,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_vec_pretty(self)?;
        text.push(b'\n');
        std::fs::write(&path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}
