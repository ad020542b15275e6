//! Versioned single-file model container.
//!
//! Layout: 8-byte magic `OOSDCONT`, little-endian `u32` format version,
//! then a bincode payload. Loading refuses any other version.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pipeline::{OosSystem, SystemConfig};

pub const MAGIC: &[u8; 8] = b"OOSDCONT";
pub const FORMAT_VERSION: u32 = 1;
/// Upper bound on a serialized container (70 MB).
pub const MAX_CONTAINER_BYTES: usize = 70_000_000;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("not a model container (bad magic bytes)")]
    BadMagic,
    #[error("container format version {found} is not supported (expected {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("corrupt container: {0}")]
    Decode(String),
    #[error("encoding failed: {0}")]
    Encode(String),
    #[error("container is {bytes} bytes, over the {limit} byte limit")]
    TooLarge { bytes: usize, limit: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Hex SHA-256 of the training config.
    pub config_digest: String,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` overrides the clock.
    pub built_at: u64,
    pub crate_version: String,
}

impl Provenance {
    pub fn new(config: &SystemConfig) -> Self {
        let built_at = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0));
        Self {
            config_digest: config_digest(config),
            built_at,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

pub fn config_digest(config: &SystemConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelContainer {
    pub provenance: Provenance,
    pub system: OosSystem,
}

impl ModelContainer {
    pub fn new(system: OosSystem, config: &SystemConfig) -> Self {
        Self {
            provenance: Provenance::new(config),
            system,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let mut out = Vec::with_capacity(MAGIC.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bincode::serialize_into(&mut out, self).map_err(|e| ContainerError::Encode(e.to_string()))?;
        if out.len() > MAX_CONTAINER_BYTES {
            return Err(ContainerError::TooLarge {
                bytes: out.len(),
                limit: MAX_CONTAINER_BYTES,
            });
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let header = MAGIC.len() + 4;
        if bytes.len() < header || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let found = u32::from_le_bytes(bytes[MAGIC.len()..header].try_into().expect("4 bytes"));
        if found != FORMAT_VERSION {
            return Err(ContainerError::UnsupportedVersion {
                found,
                supported: FORMAT_VERSION,
            });
        }
        let mut c: ModelContainer = bincode::deserialize(&bytes[header..]).map_err(|e| ContainerError::Decode(e.to_string()))?;
        c.system.prepare();
        Ok(c)
    }

    /// Writes the container; returns its size in bytes.
    pub fn save(&self, path: &Path) -> Result<usize, ContainerError> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| io_err(path, e))?;
        Ok(bytes.len())
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> ContainerError {
    ContainerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}
