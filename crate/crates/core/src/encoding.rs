//! Intensity-range encoding: a 1-D k-means codebook that quantizes voxel
//! intensities into `C` ordered classes, plus strided mode pooling of label
//! volumes.

use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::scalar::Scalar;
use crate::volume::{write_atomic, Dims, Role, Volume};

/// Ordered class centroids. Class `c` (0-based) is the `c`-th smallest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityCodebook {
    pub k: usize,
    pub centroids: Vec<f64>,
    pub sample_count: usize,
    pub seed: u64,
}

impl IntensityCodebook {
    pub fn new(centroids: Vec<f64>) -> Result<Self> {
        let cb = IntensityCodebook {
            k: centroids.len(),
            centroids,
            sample_count: 0,
            seed: 0,
        };
        cb.validate()?;
        Ok(cb)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k != self.centroids.len() {
            return Err(Error::format(
                "codebook",
                format!("k = {} but {} centroids", self.k, self.centroids.len()),
            ));
        }
        if self.k < 2 {
            return Err(Error::format("codebook", "needs at least two classes"));
        }
        if self.centroids.iter().any(|c| !c.is_finite())
            || self.centroids.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::format("codebook", "centroids must be finite and strictly ascending"));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    /// Index of the nearest centroid; ties go to the lower index.
    pub fn class_of(&self, value: f64) -> u8 {
        let mut best = 0;
        let mut best_dist = (value - self.centroids[0]).abs();
        for (j, &c) in self.centroids.iter().enumerate().skip(1) {
            let d = (value - c).abs();
            if d < best_dist {
                best = j;
                best_dist = d;
            }
        }
        best as u8
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cb: IntensityCodebook =
            toml::from_str(&text).map_err(|e| Error::format("codebook", e.to_string()))?;
        cb.validate()?;
        Ok(cb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Random subset size used when more samples are supplied.
    pub max_samples: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 10,
            seed: 0,
            max_iters: 300,
            max_samples: 2_000_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: IntensityCodebook,
    /// Within-cluster sum of squares after each centroid update.
    pub sse_trace: Vec<f64>,
    pub converged: bool,
}

/// Lloyd's algorithm on scalar samples.
///
/// Lloyd runs twice, once from `k` evenly spaced quantiles of the sorted
/// samples (nudged to distinct values) and once from `k` values evenly
/// spaced over the sample range; the run with the lower final SSE wins.
/// Since the data is one-dimensional, each assignment step is a set of
/// split points in the sorted sample array.
pub fn fit_codebook<S: Scalar>(samples: &[S], config: &KMeansConfig) -> Result<KMeansFit> {
    let k = config.k;
    if k < 2 {
        return Err(Error::KMeans(format!("k = {k}, need at least 2")));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::KMeans("non-finite sample".into()));
    }
    let mut sorted: Vec<S> = if samples.len() > config.max_samples {
        let mut rng = rng::stream(config.seed, &[domain::CODEBOOK_SAMPLE]);
        let mut picked: Vec<usize> = index::sample(&mut rng, samples.len(), config.max_samples).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| samples[i]).collect()
    } else {
        samples.to_vec()
    };
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::KMeans(format!(
            "{} distinct values for k = {k}",
            distinct.len()
        )));
    }

    let from_quantiles = lloyd(&sorted, initial_centroids(&sorted, &distinct, k), config.max_iters);
    let from_range = lloyd(&sorted, range_centroids(&sorted, k), config.max_iters);
    let (centroids, sse_trace, converged) = if from_range.1.last() < from_quantiles.1.last() {
        from_range
    } else {
        from_quantiles
    };

    let codebook = IntensityCodebook {
        k,
        centroids: centroids.iter().map(|c| c.to_f64_lossy()).collect(),
        sample_count: sorted.len(),
        seed: config.seed,
    };
    codebook
        .validate()
        .map_err(|e| Error::KMeans(format!("degenerate solution: {e}")))?;
    Ok(KMeansFit {
        codebook,
        sse_trace,
        converged,
    })
}

/// Lloyd iterations from `centroids` until the assignment stops changing.
fn lloyd<S: Scalar>(sorted: &[S], mut centroids: Vec<S>, max_iters: usize) -> (Vec<S>, Vec<f64>, bool) {
    let mut splits = assignment_splits(sorted, &centroids);
    let mut sse_trace = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters.max(1) {
        update_centroids(sorted, &splits, &mut centroids);
        sse_trace.push(sse(sorted, &splits, &centroids));
        let next = assignment_splits(sorted, &centroids);
        if next == splits {
            converged = true;
            break;
        }
        splits = next;
    }
    (centroids, sse_trace, converged)
}

/// `k` values evenly spaced from the smallest to the largest sample.
fn range_centroids<S: Scalar>(sorted: &[S], k: usize) -> Vec<S> {
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let steps = S::from_usize_lossy(k - 1);
    (0..k)
        .map(|i| lo + (hi - lo) * S::from_usize_lossy(i) / steps)
        .collect()
}

fn initial_centroids<S: Scalar>(sorted: &[S], distinct: &[S], k: usize) -> Vec<S> {
    let n = sorted.len();
    let m = distinct.len();
    let mut idx: Vec<usize> = (0..k)
        .map(|i| {
            let q = sorted[((2 * i + 1) * n / (2 * k)).min(n - 1)];
            distinct.partition_point(|&d| d < q)
        })
        .collect();
    for i in 1..k {
        idx[i] = idx[i].max(idx[i - 1] + 1);
    }
    for (i, x) in idx.iter_mut().enumerate() {
        *x = (*x).min(m - k + i);
    }
    idx.into_iter().map(|i| distinct[i]).collect()
}

/// `splits[j]` is the end (exclusive) of cluster `j` in the sorted samples.
fn assignment_splits<S: Scalar>(sorted: &[S], centroids: &[S]) -> Vec<usize> {
    let k = centroids.len();
    let mut splits: Vec<usize> = (0..k - 1)
        .map(|j| {
            let (lo, hi) = (centroids[j], centroids[j + 1]);
            sorted.partition_point(|&x| (x - lo).abs() <= (hi - x).abs())
        })
        .collect();
    splits.push(sorted.len());
    for j in 1..k {
        splits[j] = splits[j].max(splits[j - 1]);
    }
    splits
}

fn update_centroids<S: Scalar>(sorted: &[S], splits: &[usize], centroids: &mut [S]) {
    let mut start = 0;
    for (c, &end) in centroids.iter_mut().zip(splits) {
        if end > start {
            let sum: S = sorted[start..end].iter().copied().sum();
            *c = sum / S::from_usize_lossy(end - start);
        }
        start = end;
    }
}

fn sse<S: Scalar>(sorted: &[S], splits: &[usize], centroids: &[S]) -> f64 {
    let mut start = 0;
    let mut total = 0.0;
    for (&c, &end) in centroids.iter().zip(splits) {
        total += sorted[start..end]
            .iter()
            .map(|&x| {
                let d = (x - c).to_f64_lossy();
                d * d
            })
            .sum::<f64>();
        start = end;
    }
    total
}

/// Maps an intensity volume to class labels.
pub fn encode(volume: &Volume, codebook: &IntensityCodebook) -> Result<Volume> {
    volume.require_role(Role::Intensity, "encode")?;
    if codebook.k > 256 {
        return Err(Error::InvalidArgument(format!("{} classes exceed u8 labels", codebook.k)));
    }
    let data = volume
        .data()
        .iter()
        .map(|&v| codebook.class_of(v as f64) as f32)
        .collect();
    Volume::new(volume.dims(), Role::Label, data)
}

/// Replaces each label with its class centroid.
pub fn decode(volume: &Volume, codebook: &IntensityCodebook) -> Result<Volume> {
    volume.require_role(Role::Label, "decode")?;
    let data = volume
        .data()
        .iter()
        .map(|&l| {
            codebook
                .centroids
                .get(l as usize)
                .map(|&c| c as f32)
                .ok_or_else(|| Error::InvalidArgument(format!("label {l} >= {} classes", codebook.k)))
        })
        .collect::<Result<Vec<f32>>>()?;
    Volume::new(volume.dims(), Role::Intensity, data)
}

/// Strided mode pooling with non-overlapping `w³` windows.
///
/// Output dims are `ceil(dims / w)`; windows crossing the far boundary are
/// truncated. Count ties resolve to the lowest class. Works on Label and
/// Mask volumes and keeps the role.
pub fn mode_pool(volume: &Volume, window: usize) -> Result<Volume> {
    if !matches!(volume.role(), Role::Label | Role::Mask) {
        return Err(Error::InvalidArgument(format!(
            "mode_pool expects Label or Mask, got {:?}",
            volume.role()
        )));
    }
    if window < 1 {
        return Err(Error::InvalidArgument("mode_pool window must be >= 1".into()));
    }
    let src = volume.dims();
    let out_dims = Dims(src.0.map(|d| d.div_ceil(window)));
    let mut out = Vec::with_capacity(out_dims.len());
    let mut counts = [0u32; 256];
    for oz in 0..out_dims.0[2] {
        for oy in 0..out_dims.0[1] {
            for ox in 0..out_dims.0[0] {
                counts.fill(0);
                let range = |o: usize, a: usize| o * window..((o + 1) * window).min(src.0[a]);
                for z in range(oz, 2) {
                    for y in range(oy, 1) {
                        let row = src.index(0, y, z);
                        for x in range(ox, 0) {
                            counts[volume.label(row + x) as usize] += 1;
                        }
                    }
                }
                // first maximum wins, so ties take the lowest class
                let (mode, _) = counts
                    .iter()
                    .enumerate()
                    .fold((0, 0), |best, (c, &n)| if n > best.1 { (c, n) } else { best });
                out.push(mode as f32);
            }
        }
    }
    Volume::new(out_dims, volume.role(), out)
}
