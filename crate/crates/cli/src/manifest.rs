//! Run manifests: the resolved configuration plus the SHA-256 of every
//! artifact, enough to replay a run and check it byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::{Artifacts, Experiment};
use crate::config::ExperimentConfig;
use crate::CliError;

pub const FILE_NAME: &str = "manifest.toml";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub subcommand: Experiment,
    pub seed: u64,
    pub backend: crate::config::Backend,
    pub tool_version: String,
    pub config: ExperimentConfig,
    /// File name to hex digest.
    pub artifacts: BTreeMap<String, String>,
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn new(subcommand: Experiment, config: &ExperimentConfig, artifacts: &Artifacts) -> Self {
        Self {
            format: FORMAT,
            subcommand,
            seed: config.seed,
            backend: config.backend,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            artifacts: artifacts
                .files
                .iter()
                .map(|(name, bytes)| (name.clone(), digest(bytes)))
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let m: Self = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if m.format != FORMAT {
            return Err(CliError::Config(format!("unsupported manifest format {}", m.format)));
        }
        Ok(m)
    }

    /// Names whose digest differs from `artifacts`, plus names present on one
    /// side only.
    pub fn mismatches(&self, artifacts: &Artifacts) -> Vec<String> {
        let fresh: BTreeMap<&str, String> = artifacts.files.iter().map(|(n, b)| (n.as_str(), digest(b))).collect();
        let mut bad: Vec<String> = self
            .artifacts
            .iter()
            .filter(|(n, d)| fresh.get(n.as_str()) != Some(d))
            .map(|(n, _)| n.clone())
            .collect();
        bad.extend(
            fresh
                .keys()
                .filter(|n| !self.artifacts.contains_key(**n))
                .map(|n| n.to_string()),
        );
        bad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn artifacts(body: &[u8]) -> Artifacts {
        Artifacts {
            files: vec![("a.csv".into(), body.to_vec())],
        }
    }

    #[test]
    fn digest_is_sha256_hex() {
        assert_eq!(
            digest(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn round_trip_and_mismatch_detection() {
        let cfg = ExperimentConfig::default();
        let m = Manifest::new(Experiment::Gheat, &cfg, &artifacts(b"1,2\n"));
        let back: Manifest = toml::from_str(&m.to_toml()).unwrap();
        assert_eq!(back.artifacts, m.artifacts);
        assert_eq!(back.config.to_toml(), cfg.to_toml());
        assert!(back.mismatches(&artifacts(b"1,2\n")).is_empty());
        assert_eq!(back.mismatches(&artifacts(b"1,3\n")), vec!["a.csv".to_string()]);
    }
}
