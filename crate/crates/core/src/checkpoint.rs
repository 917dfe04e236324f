//! Single-file weight container.
//!
//! Layout: 8-byte magic `BMCKPT\0\0`, little-endian `u32` format version,
//! `u64` header length, a UTF-8 JSON header, then every tensor's entries as
//! little-endian `f64` in row-major order. The header carries the phase tag,
//! step counter, temperature, seed, config echo and the tensor index.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BMCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Full MAE training state (encoder and decoder).
    #[serde(rename = "mae")]
    Mae,
    /// Vision encoder exported after MAE pre-training.
    #[serde(rename = "mae-export")]
    MaeExport,
    #[serde(rename = "contrastive")]
    Contrastive,
    #[serde(rename = "gallery-index")]
    GalleryIndex,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Mae => "mae",
            Phase::MaeExport => "mae-export",
            Phase::Contrastive => "contrastive",
            Phase::GalleryIndex => "gallery-index",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub step: u64,
    pub seed: u64,
    pub temperature: Option<f64>,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Array2<f64>)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    phase: Phase,
    step: u64,
    seed: u64,
    temperature: Option<f64>,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

impl Checkpoint {
    pub fn new(phase: Phase, config: serde_json::Value, tensors: Vec<(String, Array2<f64>)>) -> Self {
        Self {
            phase,
            step: 0,
            seed: 0,
            temperature: None,
            config,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn expect_phase(&self, expected: Phase) -> Result<()> {
        if self.phase == expected {
            Ok(())
        } else {
            Err(Error::PhaseMismatch {
                expected: expected.as_str().into(),
                found: self.phase.as_str().into(),
            })
        }
    }

    /// Compare one entry of the config echo against the model being loaded into.
    pub fn expect_config<T: Serialize>(&self, key: &str, expected: &T) -> Result<()> {
        let want = serde_json::to_value(expected)?;
        match self.config.get(key) {
            Some(found) if *found == want => Ok(()),
            Some(found) => Err(Error::Checkpoint(format!(
                "config mismatch for `{key}`: checkpoint has {found}, model expects {want}"
            ))),
            None => Err(Error::Checkpoint(format!("checkpoint config lacks `{key}`"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            phase: self.phase,
            step: self.step,
            seed: self.seed,
            temperature: self.temperature,
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let data_len: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + header.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend])?;
        if header.format_version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        let mut offset = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.rows * e.cols;
            let end = offset + n * 8;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` truncated", e.name)));
            }
            let data: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset = end;
            let arr = Array2::from_shape_vec((e.rows, e.cols), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.push((e.name, arr));
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let ck = Self {
            phase: header.phase,
            step: header.step,
            seed: header.seed,
            temperature: header.temperature,
            config: header.config,
            tensors,
        };
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_bit_exact(vals in proptest::collection::vec(any::<f64>(), 1..40), cols in 1usize..5, step in any::<u64>()) {
            let rows = vals.len() / cols;
            prop_assume!(rows > 0);
            let arr = Array2::from_shape_vec((rows, cols), vals[..rows * cols].to_vec()).unwrap();
            let mut ck = Checkpoint::new(Phase::Contrastive, serde_json::json!({"a": 1}), vec![("w".into(), arr.clone())]);
            ck.step = step;
            ck.temperature = Some(0.07);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            let got = back.tensor("w").unwrap();
            prop_assert!(got.iter().zip(arr.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.step, step);
            prop_assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::from_bytes(b"hello").is_err());
        let ck = Checkpoint::new(Phase::Mae, serde_json::json!({}), vec![("w".into(), Array2::ones((2, 2)))]);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn phase_and_config_checks() {
        let ck = Checkpoint::new(Phase::MaeExport, serde_json::json!({"vision": {"width": 4}}), vec![]);
        assert!(ck.expect_phase(Phase::MaeExport).is_ok());
        assert!(matches!(ck.expect_phase(Phase::Contrastive), Err(Error::PhaseMismatch { .. })));
        assert!(ck.expect_config("vision", &serde_json::json!({"width": 4})).is_ok());
        assert!(ck.expect_config("vision", &serde_json::json!({"width": 5})).is_err());
    }
}
