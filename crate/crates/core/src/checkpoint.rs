//! Checkpoint files: `IFCK`, a length-prefixed TOML header, then network
//! parameters and latent codes as little-endian `f64`.
//!
//! Parameters are written tensor by tensor in [`MlpModel::tensors`] order
//! (`v, g, b` per layer), followed by the latent table row by row.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::MlpModel;
use crate::scalar::Scalar;
use crate::train::{LatentTable, TrainConfig};
use crate::volume::write_atomic;

pub const MAGIC: &[u8; 4] = b"IFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub model: MlpModel<S>,
    pub latents: LatentTable<S>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    /// Scalar type the checkpoint was trained with.
    scalar: String,
    epoch: usize,
    latent_count: usize,
    latent_dim: usize,
    frequencies: usize,
    classes: usize,
    parameter_count: usize,
    seed: u64,
    train: TrainConfig,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(config: TrainConfig, epoch: usize, model: MlpModel<S>, latents: LatentTable<S>) -> Result<Self> {
        if model.arch != config.arch {
            return Err(Error::Dimension("model architecture differs from config".into()));
        }
        if latents.dim != config.arch.latent_dim || latents.codes.iter().any(|c| c.len() != latents.dim) {
            return Err(Error::Dimension(format!(
                "latent codes do not have dimension D = {}",
                config.arch.latent_dim
            )));
        }
        Ok(Checkpoint {
            config,
            epoch,
            model,
            latents,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arch = &self.config.arch;
        let header = Header {
            version: VERSION,
            scalar: S::NAME.to_string(),
            epoch: self.epoch,
            latent_count: self.latents.len(),
            latent_dim: arch.latent_dim,
            frequencies: arch.frequencies,
            classes: arch.classes,
            parameter_count: arch.parameter_count(),
            seed: self.config.seed,
            train: self.config.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::format("checkpoint header", e.to_string()))?;
        let values = arch.parameter_count() + self.latents.len() * arch.latent_dim;
        let mut out = Vec::with_capacity(8 + text.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let params = self.model.tensors().into_iter().flatten();
        for &x in params.chain(self.latents.codes.iter().flatten()) {
            out.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::format("checkpoint", reason);
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing IFCK magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = 8 + header_len;
        if bytes.len() < body {
            return Err(bad("truncated header".into()));
        }
        let text = std::str::from_utf8(&bytes[8..body]).map_err(|e| bad(e.to_string()))?;
        let header: Header = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        if header.version != VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let config = header.train;
        let arch = &config.arch;
        if header.latent_dim != arch.latent_dim
            || header.classes != arch.classes
            || header.frequencies != arch.frequencies
            || header.parameter_count != arch.parameter_count()
        {
            return Err(bad("header fields disagree with architecture".into()));
        }
        let values = arch.parameter_count() + header.latent_count * arch.latent_dim;
        if bytes.len() != body + 8 * values {
            return Err(bad(format!(
                "expected {} payload bytes, found {}",
                8 * values,
                bytes.len() - body
            )));
        }
        let mut floats = bytes[body..]
            .chunks_exact(8)
            .map(|c| S::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())));

        let mut model = MlpModel::<S>::zeros(arch.clone())?;
        for tensor in model.tensors_mut() {
            tensor.iter_mut().for_each(|x| *x = floats.next().unwrap());
        }
        let codes = (0..header.latent_count)
            .map(|_| floats.by_ref().take(arch.latent_dim).collect())
            .collect();
        let latents = LatentTable {
            dim: arch.latent_dim,
            codes,
        };
        Checkpoint::new(config, header.epoch, model, latents)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Architecture;
    use crate::train::init_latents;

    fn sample() -> Checkpoint<f64> {
        let config = TrainConfig {
            arch: Architecture {
                latent_dim: 3,
                frequencies: 2,
                hidden: 5,
                depth: 3,
                classes: 4,
                dropout: 0.1,
            },
            seed: 17,
            ..TrainConfig::default()
        };
        let model = MlpModel::init(config.arch.clone(), 17).unwrap();
        let latents = init_latents(4, 3, 0.01, 17).unwrap();
        Checkpoint::new(config, 12, model, latents).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ifck");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::<f64>::load(&path).unwrap(), ck);
        assert!(!dir.path().join("model.ifck.tmp").exists());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(b"VOL1xxxx").is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(Checkpoint::<f64>::from_bytes(&extra).is_err());
        let mut wrong_len = bytes;
        wrong_len[4] = wrong_len[4].wrapping_add(1);
        assert!(Checkpoint::<f64>::from_bytes(&wrong_len).is_err());
    }

    #[test]
    fn mismatched_latents_are_rejected() {
        let ck = sample();
        let latents = init_latents::<f64>(2, 5, 0.01, 1).unwrap();
        assert!(Checkpoint::new(ck.config, 0, ck.model, latents).is_err());
    }
}
