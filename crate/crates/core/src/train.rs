//! Joint optimization of network parameters and per-volume latent codes.
//!
//! The batch objective is the data term summed over sampled points plus
//! `(1/σ²)·‖zᵢ‖²` once per volume in the batch, i.e. the auto-decoder
//! objective restricted to the batch. Values and gradients are reported
//! divided by the number of points so magnitudes stay comparable across
//! batch sizes.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::coords::{sample_points, CoordEncoder, PointBatch};
use crate::error::{Error, Result};
use crate::mlp::{Architecture, BackwardOptions, Batch, Gradients, MlpModel, Mode};
use crate::rng::{self, domain};
use crate::scalar::{norm_sq, Scalar};
use crate::volume::{Dims, Role, Volume};

/// One latent code per training volume.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable<S> {
    pub dim: usize,
    pub codes: Vec<Vec<S>>,
}

impl<S: Scalar> LatentTable<S> {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn norms(&self) -> Vec<S> {
        self.codes.iter().map(|c| norm_sq(c).sqrt()).collect()
    }

    pub fn max_norm(&self) -> S {
        self.norms().into_iter().fold(S::zero(), S::max)
    }
}

/// `n` codes of dimension `d` with i.i.d. `N(0, std²)` entries.
pub fn init_latents<S: Scalar>(n: usize, d: usize, std: f64, seed: u64) -> Result<LatentTable<S>> {
    if n < 1 || d < 1 {
        return Err(Error::InvalidArgument(format!("latent table {n}x{d}")));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let codes = (0..n)
        .map(|i| {
            let mut rng = rng::stream(seed, &[domain::LATENT_INIT, i as u64]);
            (0..d).map(|_| S::from_f64_lossy(normal.sample(&mut rng))).collect()
        })
        .collect();
    Ok(LatentTable { dim: d, codes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub arch: Architecture,
    pub epochs: usize,
    pub points_per_volume: usize,
    pub volumes_per_batch: usize,
    /// Latent prior scale; the penalty weight is `1/σ²`.
    pub sigma: f64,
    pub latent_init_std: f64,
    pub lr_net: f64,
    pub lr_latent: f64,
    /// Learning rates are multiplied by `lr_decay_factor` this many times,
    /// evenly spaced over training.
    pub lr_decay_intervals: usize,
    pub lr_decay_factor: f64,
    /// Linear warm-up of the latent penalty over this many epochs; 0 = off.
    pub reg_ramp_epochs: usize,
    /// Write a checkpoint every this many epochs; 0 = only at the end.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub workers: usize,
    #[serde(flatten)]
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Architecture::default(),
            epochs: 2000,
            points_per_volume: 16_200,
            volumes_per_batch: 6,
            sigma: 0.01,
            latent_init_std: 0.01,
            lr_net: 5e-4,
            lr_latent: 1e-3,
            lr_decay_intervals: 4,
            lr_decay_factor: 0.5,
            reg_ramp_epochs: 0,
            checkpoint_every: 0,
            seed: 0,
            workers: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let positive = [
            ("epochs", self.epochs as f64),
            ("points_per_volume", self.points_per_volume as f64),
            ("volumes_per_batch", self.volumes_per_batch as f64),
            ("sigma", self.sigma),
            ("latent_init_std", self.latent_init_std),
            ("lr_net", self.lr_net),
            ("lr_latent", self.lr_latent),
            ("lr_decay_factor", self.lr_decay_factor),
            ("workers", self.workers as f64),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {value}")));
            }
        }
        Ok(())
    }

    /// Learning-rate multiplier at `epoch`.
    pub fn decay(&self, epoch: usize) -> f64 {
        if self.lr_decay_intervals == 0 {
            return 1.0;
        }
        let stage = epoch * self.lr_decay_intervals / self.epochs;
        self.lr_decay_factor.powi(stage as i32)
    }

    /// Latent penalty weight `1/σ²`, ramped when configured.
    pub fn reg_weight(&self, epoch: usize) -> f64 {
        let ramp = if self.reg_ramp_epochs == 0 {
            1.0
        } else {
            ((epoch + 1) as f64 / self.reg_ramp_epochs as f64).min(1.0)
        };
        ramp / (self.sigma * self.sigma)
    }
}

/// Batch objective split into its two terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective<S> {
    /// Cross-entropy summed over points.
    pub data_sum: S,
    /// `reg_weight · Σᵢ ‖zᵢ‖²` over the batch's distinct codes.
    pub regularizer: S,
    pub points: usize,
}

impl<S: Scalar> Objective<S> {
    pub fn total(&self) -> S {
        self.data_sum + self.regularizer
    }

    pub fn per_point(&self) -> S {
        self.total() / S::from_usize_lossy(self.points)
    }

    pub fn mean_data(&self) -> S {
        self.data_sum / S::from_usize_lossy(self.points)
    }
}

/// Forward-only evaluation of the batch objective.
pub fn objective_value<S: Scalar>(model: &MlpModel<S>, batch: &Batch<S>, reg_weight: S, mode: Mode) -> Result<Objective<S>> {
    let losses = model.point_losses(batch, mode)?;
    let regularizer = batch.codes.iter().map(|c| reg_weight * norm_sq(c)).sum();
    Ok(Objective {
        data_sum: losses.into_iter().sum(),
        regularizer,
        points: batch.len(),
    })
}

/// Objective value and gradients (of [`Objective::per_point`]) for a batch.
///
/// `reg_weight` is `1/σ²`. Every code in `batch.codes` is penalized once.
pub fn train_objective<S: Scalar>(
    model: &MlpModel<S>,
    batch: &Batch<S>,
    reg_weight: S,
    mode: Mode,
    options: BackwardOptions,
) -> Result<(Objective<S>, Gradients<S>)> {
    let (mut grads, mean_ce) = model.backward(batch, mode, options)?;
    let n = S::from_usize_lossy(batch.len());
    let mut regularizer = S::zero();
    for (code, grad) in batch.codes.iter().zip(grads.codes.iter_mut()) {
        regularizer += reg_weight * norm_sq(code);
        let scale = (reg_weight + reg_weight) / n;
        grad.iter_mut().zip(code).for_each(|(g, &z)| *g += scale * z);
    }
    let objective = Objective {
        data_sum: mean_ce * n,
        regularizer,
        points: batch.len(),
    };
    Ok((objective, grads))
}

/// Per-epoch training record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean over batches of the per-point objective.
    pub objective: Vec<f64>,
    /// Mean over batches of the per-point cross-entropy.
    pub data_loss: Vec<f64>,
    pub max_latent_norm: Vec<f64>,
}

pub struct TrainState<'a, S> {
    pub epoch: usize,
    pub model: &'a MlpModel<S>,
    pub latents: &'a LatentTable<S>,
    pub history: &'a TrainHistory,
}

/// Checks that every volume is a label volume with classes below `classes`.
pub fn validate_dataset(dataset: &[Volume], classes: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for (i, v) in dataset.iter().enumerate() {
        if v.role() != Role::Label {
            return Err(Error::InvalidArgument(format!("volume {i} is {:?}, not Label", v.role())));
        }
        if let Some(bad) = v.data().iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidArgument(format!(
                "volume {i} has label {bad} >= C = {classes}"
            )));
        }
    }
    Ok(())
}

pub fn train<S: Scalar>(
    dataset: &[Volume],
    config: &TrainConfig,
) -> Result<(MlpModel<S>, LatentTable<S>, TrainHistory)> {
    train_with(dataset, config, |_| Ok(()))
}

/// Trains from scratch, calling `observer` after every epoch.
pub fn train_with<S, F>(
    dataset: &[Volume],
    config: &TrainConfig,
    mut observer: F,
) -> Result<(MlpModel<S>, LatentTable<S>, TrainHistory)>
where
    S: Scalar,
    F: FnMut(&TrainState<S>) -> Result<()>,
{
    config.validate()?;
    validate_dataset(dataset, config.arch.classes)?;
    let arch = &config.arch;
    let mut model = MlpModel::<S>::init(arch.clone(), config.seed)?;
    let mut latents = init_latents::<S>(dataset.len(), arch.latent_dim, config.latent_init_std, config.seed)?;

    let mut encoders: HashMap<Dims, CoordEncoder<S>> = HashMap::new();
    for v in dataset {
        if let std::collections::hash_map::Entry::Vacant(e) = encoders.entry(v.dims()) {
            e.insert(CoordEncoder::new(v.dims(), arch.frequencies)?);
        }
    }

    let mut net_adam = AdamState::<S>::new(&model.tensor_sizes(), config.adam);
    let mut latent_adam: Vec<AdamState<S>> = (0..dataset.len())
        .map(|_| AdamState::new(&[arch.latent_dim], config.adam))
        .collect();
    let options = BackwardOptions {
        parameters: true,
        workers: config.workers,
    };
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let decay = config.decay(epoch);
        let lr_net = S::from_f64_lossy(config.lr_net * decay);
        let lr_latent = S::from_f64_lossy(config.lr_latent * decay);
        let reg_weight = S::from_f64_lossy(config.reg_weight(epoch));

        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, &[domain::PERMUTATION, epoch as u64]));

        let (mut objective_sum, mut data_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, members) in order.chunks(config.volumes_per_batch).enumerate() {
            let points: Vec<PointBatch<S>> = members
                .iter()
                .map(|&id| {
                    let mut r = rng::stream(config.seed, &[domain::TRAIN_POINTS, epoch as u64, id as u64]);
                    let volume = &dataset[id];
                    sample_points(volume, id, &encoders[&volume.dims()], config.points_per_volume, &mut r)
                })
                .collect::<Result<_>>()?;
            let codes = members.iter().map(|&id| latents.codes[id].clone()).collect();
            let batch = Batch::from_points(codes, &points)?;
            let key = rng::derive_seed(config.seed, &[domain::DROPOUT, epoch as u64, b as u64]);
            let (objective, grads) = train_objective(&model, &batch, reg_weight, Mode::Train(key), options)?;

            net_adam.step(&mut model.tensors_mut(), &grads.tensors(), lr_net)?;
            for (&id, grad) in members.iter().zip(&grads.codes) {
                latent_adam[id].step(&mut [latents.codes[id].as_mut_slice()], &[grad.as_slice()], lr_latent)?;
            }

            objective_sum += objective.per_point().to_f64_lossy();
            data_sum += objective.mean_data().to_f64_lossy();
            batches += 1;
        }
        history.objective.push(objective_sum / batches as f64);
        history.data_loss.push(data_sum / batches as f64);
        history.max_latent_norm.push(latents.max_norm().to_f64_lossy());
        if history.objective.last().is_some_and(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("training diverged at epoch {epoch}")));
        }

        observer(&TrainState {
            epoch,
            model: &model,
            latents: &latents,
            history: &history,
        })?;
    }
    Ok((model, latents, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(classes: usize) -> TrainConfig {
        TrainConfig {
            arch: Architecture {
                latent_dim: 4,
                frequencies: 2,
                hidden: 16,
                depth: 3,
                classes,
                dropout: 0.0,
            },
            epochs: 200,
            points_per_volume: 256,
            volumes_per_batch: 2,
            lr_net: 5e-3,
            lr_latent: 1e-2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn latent_init_statistics() {
        let t = init_latents::<f64>(1000, 256, 0.01, 42).unwrap();
        let all: Vec<f64> = t.codes.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.01).abs() / 0.01 < 0.02, "std {std}");
        assert!(mean.abs() < 1e-4);
        let mean_sq_norm = t.codes.iter().map(|c| norm_sq(c)).sum::<f64>() / 1000.0;
        assert!((mean_sq_norm - 256.0 * 1e-4).abs() / (256.0 * 1e-4) < 0.03);
        assert_eq!(t, init_latents::<f64>(1000, 256, 0.01, 42).unwrap());
        assert!(init_latents::<f64>(0, 4, 0.01, 1).is_err());
    }

    #[test]
    fn regularizer_terms() {
        let config = tiny_config(2);
        let model = MlpModel::<f64>::init(config.arch.clone(), 1).unwrap();
        let volume = Volume::from_labels(Dims::cube(2), &[0, 1, 0, 1, 1, 0, 1, 0]).unwrap();
        let enc = CoordEncoder::new(volume.dims(), 2).unwrap();
        let points = sample_points(&volume, 0, &enc, 10, &mut rng::stream(1, &[])).unwrap();

        let zero = Batch::single(vec![0.0; 4], &points);
        let (obj, _) = train_objective(&model, &zero, 1e4, Mode::Eval, BackwardOptions::default()).unwrap();
        assert_eq!(obj.regularizer, 0.0);

        // ‖z‖² = 1e-4 with σ = 0.01 contributes exactly 1
        let code = vec![0.01, 0.0, 0.0, 0.0];
        let batch = Batch::single(code, &points);
        let weight = config.reg_weight(0);
        assert_eq!(weight, 1e4);
        let (obj, _) = train_objective(&model, &batch, weight, Mode::Eval, BackwardOptions::default()).unwrap();
        assert!((obj.regularizer - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decay_schedule_halves_each_quarter() {
        let config = TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        };
        assert_eq!(config.decay(0), 1.0);
        assert_eq!(config.decay(24), 1.0);
        assert_eq!(config.decay(25), 0.5);
        assert_eq!(config.decay(99), 0.125);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let config = tiny_config(3);
        let bad = Volume::from_labels(Dims::cube(2), &[0, 1, 2, 3, 0, 0, 0, 0]).unwrap();
        let err = train::<f64>(&[bad], &config).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        assert!(train::<f64>(&[], &config).is_err());
    }

    #[test]
    fn constant_volume_is_learned() {
        let volume = Volume::from_labels(Dims::cube(8), &[1; 512]).unwrap();
        let (_, _, history) = train::<f64>(&[volume], &tiny_config(3)).unwrap();
        assert!(*history.objective.last().unwrap() < 0.01, "{:?}", history.objective.last());
    }

    #[test]
    fn distinct_volumes_get_distinct_codes() {
        let a = Volume::from_labels(Dims::cube(4), &[0; 64]).unwrap();
        let b = Volume::from_labels(Dims::cube(4), &[1; 64]).unwrap();
        let config = TrainConfig {
            sigma: 1.0,
            ..tiny_config(2)
        };
        let (_, latents, history) = train::<f64>(&[a, b], &config).unwrap();
        let dist: f64 = latents.codes[0]
            .iter()
            .zip(&latents.codes[1])
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0);
        assert!(*history.data_loss.last().unwrap() < 0.1);
    }

    #[test]
    fn training_is_reproducible() {
        let volume = Volume::from_labels(Dims::cube(4), &(0..64).map(|i| (i % 3) as u8).collect::<Vec<_>>()).unwrap();
        let config = TrainConfig {
            epochs: 5,
            arch: Architecture {
                dropout: 0.2,
                ..tiny_config(3).arch
            },
            ..tiny_config(3)
        };
        let a = train::<f64>(std::slice::from_ref(&volume), &config).unwrap();
        let b = train::<f64>(std::slice::from_ref(&volume), &config).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }
}
