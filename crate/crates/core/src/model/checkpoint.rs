//! Checkpoint directories: `manifest.json` plus `weights.bin`.
//!
//! `weights.bin` holds little-endian `f32` values, row-major, tensors
//! concatenated in manifest order. Offsets are in bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LoraConfig, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub tensors: Vec<TensorEntry>,
}

impl<T: Real> Model<T> {
    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(_, name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len() * 4;
                e
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            dtype: "f32".into(),
            config: self.config.clone(),
            lora: self.lora.clone(),
            tensors,
        }
    }

    fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.params.numel() * 4);
        for (_, _, t) in self.params.iter() {
            for &x in t.data() {
                out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))?;
        let wpath = dir.join(WEIGHTS);
        fs::write(&wpath, self.weight_bytes()).map_err(|e| Error::io(wpath.display().to_string(), e))?;
        Ok(())
    }

    /// Rebuilds the architecture described by the manifest and fills it
    /// from `weights.bin`. Any disagreement between manifest, weights file
    /// and architecture is an error.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        if manifest.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype `{}`", manifest.dtype)));
        }
        let wpath = dir.join(WEIGHTS);
        let bytes = fs::read(&wpath).map_err(|e| Error::io(wpath.display().to_string(), e))?;

        let mut model = Model::<T>::new(manifest.config.clone(), 0)?;
        if let Some(lora) = &manifest.lora {
            model.apply_lora(lora.clone(), 0)?;
        }
        if manifest.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} tensors, architecture has {}",
                manifest.tensors.len(),
                model.params.len()
            )));
        }
        let mut expected_offset = 0;
        for (entry, id) in manifest.tensors.iter().zip(model.params.ids().collect::<Vec<_>>()) {
            let name = model.params.name(id).to_string();
            if entry.name != name {
                return Err(Error::Checkpoint(format!("expected tensor `{name}`, manifest has `{}`", entry.name)));
            }
            let t = model.params.get_mut(id);
            if entry.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: manifest shape {:?}, architecture shape {:?}",
                    entry.shape,
                    t.shape()
                )));
            }
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: offset {} out of order (expected {expected_offset})",
                    entry.offset
                )));
            }
            let end = entry.offset + t.len() * 4;
            let Some(raw) = bytes.get(entry.offset..end) else {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: weights file too short ({} bytes, need {end})",
                    bytes.len()
                )));
            };
            for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = T::lit(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
            expected_offset = end;
        }
        if bytes.len() != expected_offset {
            return Err(Error::Checkpoint(format!(
                "weights file has {} bytes, manifest accounts for {expected_offset}",
                bytes.len()
            )));
        }
        Ok(model)
    }

    /// SHA-256 over the serialized manifest and weights, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest()).expect("manifest serializes"));
        h.update(self.weight_bytes());
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LoraTarget;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::<f32>::new(small(), 4).unwrap();
        m.apply_lora(
            LoraConfig {
                r: 2,
                targets: vec![LoraTarget::Q, LoraTarget::Down],
                ..Default::default()
            },
            1,
        )
        .unwrap();
        m.save(dir.path()).unwrap();
        let back = Model::<f32>::load(dir.path()).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.fingerprint(), back.fingerprint());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        Model::<f32>::new(small(), 0).unwrap().save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut man: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        man.tensors[1].shape = vec![4, 16];
        fs::write(&path, serde_json::to_string(&man).unwrap()).unwrap();
        let err = Model::<f32>::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("pos_emb"), "{err}");
    }

    #[test]
    fn rejects_truncated_weights() {
        let dir = tempfile::tempdir().unwrap();
        Model::<f32>::new(small(), 0).unwrap().save(dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Model::<f32>::load(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_config_disagreeing_with_weights() {
        let dir = tempfile::tempdir().unwrap();
        Model::<f32>::new(small(), 0).unwrap().save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut man: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        man.config.d_ff = 32;
        fs::write(&path, serde_json::to_string(&man).unwrap()).unwrap();
        assert!(Model::<f32>::load(dir.path()).is_err());
    }
}
