//! Provenance header stamped on every JSON artifact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::models::checkpoint::write_json_atomic;

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    /// The producing command line, without the program name.
    pub command: String,
    /// Short sha256 of the effective config JSON.
    pub config_digest: String,
    pub version: u32,
}

impl ArtifactHeader {
    pub fn new<C: Serialize>(command: impl Into<String>, config: &C) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            config_digest: config_digest(config)?,
            version: ARTIFACT_VERSION,
        })
    }
}

pub fn config_digest<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

/// Effective config of a run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveConfig<C> {
    pub header: ArtifactHeader,
    pub config: C,
}

pub fn write_effective_config<C: Serialize>(
    path: &std::path::Path,
    command: &str,
    config: &C,
) -> Result<ArtifactHeader> {
    let header = ArtifactHeader::new(command, config)?;
    write_json_atomic(
        path,
        &EffectiveConfig {
            header: header.clone(),
            config,
        },
    )?;
    Ok(header)
}
