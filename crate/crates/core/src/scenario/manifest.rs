use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scenario::config::ScenarioConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ScenarioConfig,
    pub inputs: Vec<InputDigest>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub tool_version: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn tool_version() -> String {
    format!("voltdual {}", env!("CARGO_PKG_VERSION"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    /// Digests every referenced input before anything is run.
    pub fn create(config: &ScenarioConfig, output_dir: &Path) -> Result<Self> {
        let inputs = config
            .input_files()
            .into_iter()
            .map(|(role, path)| {
                Ok(InputDigest {
                    role: role.to_string(),
                    path: path.to_path_buf(),
                    sha256: sha256_file(path)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunManifest {
            config: config.clone(),
            inputs,
            seed: config.seed,
            output_dir: output_dir.to_path_buf(),
            tool_version: tool_version(),
        })
    }

    /// Fails if any input changed since the manifest was written.
    pub fn verify_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = sha256_file(&input.path)?;
            if now != input.sha256 {
                return Err(Error::Config(format!(
                    "{} input {} changed since the manifest was written",
                    input.role,
                    input.path.display()
                )));
            }
        }
        Ok(())
    }

    /// The configuration to re-run, with the recorded seed.
    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            seed: self.seed,
            ..self.config.clone()
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}
