//! Versioned single-file model container.
//!
//! Layout (little-endian):
//! `b"FRGCKPT\0"` | format version `u32` | header length `u64` | header JSON
//! | parameter count `u64` | parameters as `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};

pub const MAGIC: &[u8; 8] = b"FRGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Critic,
    Estimator,
    Saliency,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: serde_json::Value,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: ModelKind, config: &C, params: Vec<f64>) -> Result<Self> {
        Ok(Self {
            kind,
            config: serde_json::to_value(config)?,
            meta: serde_json::Value::Null,
            params,
        })
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(ForgeError::State(format!(
                "checkpoint holds a {:?} model, expected {:?}",
                self.kind, kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            kind: self.kind,
            config: self.config.clone(),
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(28 + header.len() + self.params.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| ForgeError::Input(format!("malformed checkpoint: {why}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).ok_or_else(|| bad("header length"))?;
        if bytes.len() < hend + 8 {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[20..hend])?;
        let n = u64::from_le_bytes(bytes[hend..hend + 8].try_into().expect("8 bytes")) as usize;
        let body = &bytes[hend + 8..];
        if body.len() != n * 8 {
            return Err(bad("parameter block length mismatch"));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            params,
        })
    }

    /// Writes through a temporary file and renames, so readers never see a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| ForgeError::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes).map_err(|e| ForgeError::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let ck = Checkpoint {
            kind: ModelKind::Critic,
            config: serde_json::json!({"width": 3}),
            meta: serde_json::json!({"epoch": 2}),
            params: vec![0.1, -2.5e-300, f64::MIN_POSITIVE, 7.0],
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint::new(ModelKind::Estimator, &serde_json::json!({}), vec![1.0]).unwrap();
        let mut bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = Checkpoint::load("/nonexistent/model.ckpt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.ckpt"));
    }
}
