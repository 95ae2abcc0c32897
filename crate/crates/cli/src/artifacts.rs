//! Run directories: the manifest written before training starts and the
//! metrics, logits and summary files written after it ends.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedhe::config::ExperimentConfig;
use fedhe::orchestrator::{RunSummary, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<PathBuf>,
}

/// Everything needed to find a run's outputs and reproduce it bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub artifacts: Artifacts,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn new(dir: &Path, config: ExperimentConfig, with_logits: bool) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: config.seed,
            artifacts: Artifacts {
                metrics: dir.join("metrics.csv"),
                summary: dir.join("summary.toml"),
                logits: with_logits.then(|| dir.join("logits.csv")),
            },
            config,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// Writes `contents` to a sibling temp file and renames it into place, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

pub fn summary_to_toml(summary: &RunSummary) -> String {
    toml::to_string(summary).expect("summary serializes")
}
