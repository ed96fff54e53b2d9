//! Test-time latent retrieval, restoration and anomaly scoring.
//!
//! With the network frozen, a fresh latent code is optimized so the field
//! explains a test volume; the restoration is the per-voxel argmax of the
//! resulting posterior, and the anomaly score of a voxel is the
//! cross-entropy of its observed class.

use std::ops::Range;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::coords::{sample_points, CoordEncoder};
use crate::error::{Error, Result};
use crate::mlp::{BackwardOptions, Batch, MlpModel, Mode, BLOCK};
use crate::rng::{self, domain};
use crate::scalar::{norm_sq, Scalar};
use crate::train::{objective_value, train_objective, validate_dataset};
use crate::volume::{Dims, Role, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub steps: usize,
    /// Points sampled per optimization step.
    pub points: usize,
    pub lr_infer: f64,
    pub sigma: f64,
    pub init_std: f64,
    /// Size of the fixed point set used to compare the objective before
    /// and after optimization; 0 disables it.
    pub held_points: usize,
    pub seed: u64,
    pub workers: usize,
    #[serde(flatten)]
    pub adam: AdamConfig,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            steps: 700,
            points: 16_200,
            lr_infer: 1e-2,
            sigma: 0.01,
            init_std: 0.01,
            held_points: 16_200,
            seed: 0,
            workers: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps as f64),
            ("points", self.points as f64),
            ("lr_infer", self.lr_infer),
            ("sigma", self.sigma),
            ("init_std", self.init_std),
            ("workers", self.workers as f64),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {value}")));
            }
        }
        Ok(())
    }

    pub fn reg_weight(&self) -> f64 {
        1.0 / (self.sigma * self.sigma)
    }
}

/// Outcome of latent optimization on one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval<S> {
    pub z: Vec<S>,
    /// Per-point objective on each step's sampled points, before the update.
    pub trace: Vec<S>,
    /// Per-point objective on the held point set at the initial and final code.
    pub held: Option<(S, S)>,
}

/// Per-voxel anomaly scores of one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap<S> {
    pub dims: Dims,
    /// Layout order, `AS ≥ 0`.
    pub scores: Vec<S>,
    pub z: Vec<S>,
    /// Per-point objective over every voxel of the volume.
    pub objective: S,
}

impl<S: Scalar> AnomalyMap<S> {
    pub fn to_volume(&self) -> Result<Volume> {
        let data = self.scores.iter().map(|s| s.to_f64_lossy() as f32).collect();
        Volume::new(self.dims, Role::Score, data)
    }

    pub fn mean(&self) -> S {
        self.scores.iter().copied().sum::<S>() / S::from_usize_lossy(self.scores.len())
    }
}

fn check_volume<S: Scalar>(model: &MlpModel<S>, volume: &Volume) -> Result<()> {
    validate_dataset(std::slice::from_ref(volume), model.arch.classes)
}

fn check_code<S: Scalar>(model: &MlpModel<S>, z: &[S]) -> Result<()> {
    if z.len() != model.arch.latent_dim {
        return Err(Error::Dimension(format!(
            "latent of length {} for D = {}",
            z.len(),
            model.arch.latent_dim
        )));
    }
    Ok(())
}

/// Draws the initial code `N(0, init_std²)` for volume `key`.
pub fn initial_code<S: Scalar>(dim: usize, config: &InferConfig, key: u64) -> Result<Vec<S>> {
    let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = rng::stream(config.seed, &[domain::INFER_INIT, key]);
    Ok((0..dim).map(|_| S::from_f64_lossy(normal.sample(&mut rng))).collect())
}

/// Optimizes a code for `volume` starting from a random draw. `key`
/// identifies the volume in the random streams.
pub fn retrieve_latent<S: Scalar>(
    model: &MlpModel<S>,
    volume: &Volume,
    key: u64,
    config: &InferConfig,
) -> Result<Retrieval<S>> {
    let init = initial_code(model.arch.latent_dim, config, key)?;
    retrieve_latent_from(model, volume, key, config, init)
}

/// As [`retrieve_latent`], starting from `init`.
pub fn retrieve_latent_from<S: Scalar>(
    model: &MlpModel<S>,
    volume: &Volume,
    key: u64,
    config: &InferConfig,
    init: Vec<S>,
) -> Result<Retrieval<S>> {
    config.validate()?;
    check_volume(model, volume)?;
    check_code(model, &init)?;
    let encoder = CoordEncoder::<S>::new(volume.dims(), model.arch.frequencies)?;
    let reg_weight = S::from_f64_lossy(config.reg_weight());
    let lr = S::from_f64_lossy(config.lr_infer);
    let options = BackwardOptions {
        parameters: false,
        workers: config.workers,
    };

    let held_points = if config.held_points > 0 {
        let mut r = rng::stream(config.seed, &[domain::HELD_POINTS, key]);
        Some(sample_points(volume, 0, &encoder, config.held_points, &mut r)?)
    } else {
        None
    };
    let held_value = |z: &[S]| -> Result<Option<S>> {
        held_points
            .as_ref()
            .map(|p| objective_value(model, &Batch::single(z.to_vec(), p), reg_weight, Mode::Eval).map(|o| o.per_point()))
            .transpose()
    };
    let held_initial = held_value(&init)?;

    let mut z = init;
    let mut adam = AdamState::<S>::new(&[z.len()], config.adam);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut r = rng::stream(config.seed, &[domain::INFER_POINTS, key, step as u64]);
        let points = sample_points(volume, 0, &encoder, config.points, &mut r)?;
        let batch = Batch::single(z.clone(), &points);
        let (objective, grads) = train_objective(model, &batch, reg_weight, Mode::Eval, options)?;
        trace.push(objective.per_point());
        adam.step(&mut [z.as_mut_slice()], &[grads.codes[0].as_slice()], lr)?;
    }

    let held = match (held_initial, held_value(&z)?) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };
    Ok(Retrieval { z, trace, held })
}

/// Rows of `range` (flat voxel indices) conditioned on `z`.
fn dense_batch<S: Scalar>(encoder: &CoordEncoder<S>, z: &[S], targets: Option<&Volume>, range: Range<usize>) -> Batch<S> {
    let dims = encoder.dims();
    let n = range.len();
    let mut features = Vec::with_capacity(n * encoder.width());
    for flat in range.clone() {
        encoder.encode_voxel_into(dims.coords(flat), &mut features);
    }
    let targets = match targets {
        Some(v) => range.map(|flat| v.label(flat) as usize).collect(),
        None => vec![0; n],
    };
    Batch {
        codes: vec![z.to_vec()],
        code_of_point: vec![0; n],
        features,
        width: encoder.width(),
        targets,
    }
}

/// Voxel chunks aligned to [`BLOCK`], spread over up to `workers` threads,
/// with per-chunk results concatenated in voxel order.
fn dense_map<T: Send>(
    voxels: usize,
    workers: usize,
    f: impl Fn(Range<usize>) -> Result<Vec<T>> + Sync,
) -> Result<Vec<T>> {
    const CHUNK: usize = 64 * BLOCK;
    let chunks: Vec<Range<usize>> = (0..voxels.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(voxels))
        .collect();
    let workers = workers.clamp(1, chunks.len().max(1));
    let parts: Vec<Result<Vec<T>>> = if workers == 1 {
        chunks.into_iter().map(&f).collect()
    } else {
        let per = chunks.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| {
                    let f = &f;
                    scope.spawn(move || group.iter().cloned().map(f).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };
    let mut out = Vec::with_capacity(voxels);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// `AS(v) = −ln P(t_v | z, p_v)` at every voxel.
pub fn anomaly_score<S: Scalar>(
    model: &MlpModel<S>,
    z: &[S],
    volume: &Volume,
    workers: usize,
    sigma: f64,
) -> Result<AnomalyMap<S>> {
    check_volume(model, volume)?;
    check_code(model, z)?;
    let encoder = CoordEncoder::<S>::new(volume.dims(), model.arch.frequencies)?;
    let scores = dense_map(volume.len(), workers, |range| {
        model.point_losses(&dense_batch(&encoder, z, Some(volume), range), Mode::Eval)
    })?;
    let n = S::from_usize_lossy(scores.len());
    let reg = S::from_f64_lossy(1.0 / (sigma * sigma)) * norm_sq(z);
    let objective = (scores.iter().copied().sum::<S>() + reg) / n;
    Ok(AnomalyMap {
        dims: volume.dims(),
        scores,
        z: z.to_vec(),
        objective,
    })
}

/// Per-voxel argmax class of the posterior; ties go to the lowest class.
pub fn restore_volume<S: Scalar>(model: &MlpModel<S>, z: &[S], dims: Dims, workers: usize) -> Result<Volume> {
    check_code(model, z)?;
    if model.arch.classes > 256 {
        return Err(Error::InvalidArgument("label volumes hold at most 256 classes".into()));
    }
    let encoder = CoordEncoder::<S>::new(dims, model.arch.frequencies)?;
    let labels = dense_map(dims.len(), workers, |range| {
        let logits = model.logits(&dense_batch(&encoder, z, None, range), Mode::Eval)?;
        Ok(logits.iter().map(|l| argmax(l) as u8).collect())
    })?;
    Volume::from_labels(dims, &labels)
}

fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Stride-1 box filter along one axis with replicate padding.
fn filter_axis(data: &[f32], dims: Dims, axis: usize, size: usize, reduce: &impl Fn(&mut dyn Iterator<Item = f32>) -> f32) -> Vec<f32> {
    let radius = (size / 2) as isize;
    let n = dims.0[axis] as isize;
    let stride = match axis {
        0 => 1,
        1 => dims.0[0],
        _ => dims.0[0] * dims.0[1],
    };
    let mut out = vec![0.0; data.len()];
    for (flat, o) in out.iter_mut().enumerate() {
        let pos = dims.coords(flat)[axis] as isize;
        let base = flat - pos as usize * stride;
        let mut window = (pos - radius..=pos + radius).map(|p| data[base + p.clamp(0, n - 1) as usize * stride]);
        *o = reduce(&mut window);
    }
    out
}

fn check_filter_size(name: &str, size: usize) -> Result<()> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("{name} size must be odd, got {size}")));
    }
    Ok(())
}

/// Minimum over the `size³` window centred on each voxel.
pub fn min_filter(volume: &Volume, size: usize) -> Result<Volume> {
    check_filter_size("min filter", size)?;
    let dims = volume.dims();
    let min = |w: &mut dyn Iterator<Item = f32>| w.fold(f32::INFINITY, f32::min);
    let mut data = volume.data().to_vec();
    for axis in 0..3 {
        data = filter_axis(&data, dims, axis, size, &min);
    }
    Volume::new(dims, volume.role(), data)
}

/// Mean over the `size³` window centred on each voxel.
///
/// Window sums are accumulated in `f64`, so the result is exact whenever
/// the window sum is representable (e.g. inputs on a `2⁻²⁴` grid).
pub fn mean_filter(volume: &Volume, size: usize) -> Result<Volume> {
    check_filter_size("mean filter", size)?;
    let dims = volume.dims();
    let mut sums: Vec<f64> = volume.data().iter().map(|&x| x as f64).collect();
    for axis in 0..3 {
        sums = box_sum_axis(&sums, dims, axis, size);
    }
    let count = (size * size * size) as f64;
    let data = sums.iter().map(|&s| (s / count) as f32).collect();
    Volume::new(dims, volume.role(), data)
}

fn box_sum_axis(data: &[f64], dims: Dims, axis: usize, size: usize) -> Vec<f64> {
    let radius = (size / 2) as isize;
    let n = dims.0[axis] as isize;
    let stride = match axis {
        0 => 1,
        1 => dims.0[0],
        _ => dims.0[0] * dims.0[1],
    };
    (0..data.len())
        .map(|flat| {
            let pos = dims.coords(flat)[axis] as isize;
            let base = flat - pos as usize * stride;
            (pos - radius..=pos + radius)
                .map(|p| data[base + p.clamp(0, n - 1) as usize * stride])
                .sum()
        })
        .collect()
}

/// Minimum filter followed by mean filter, both stride 1 with replicate
/// padding, so the output stays voxel-aligned with the input.
pub fn postprocess_as(map: &Volume, min_size: usize, avg_size: usize) -> Result<Volume> {
    map.require_role(Role::Score, "postprocess_as")?;
    check_filter_size("min filter", min_size)?;
    check_filter_size("mean filter", avg_size)?;
    mean_filter(&min_filter(map, min_size)?, avg_size)
}
