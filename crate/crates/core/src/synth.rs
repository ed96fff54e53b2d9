//! Deterministic phantom volumes: nested ellipsoidal shells on a zero
//! background, and copies with inserted blobs of out-of-place intensity.
//!
//! Every volume is a pure function of the spec and an anatomy id. Split
//! membership maps to disjoint id ranges: training healthy, test anomalous,
//! validation healthy, validation anomalous.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain, Stream};
use crate::volume::{write_atomic, write_volume, Dims, Role, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub dims: Dims,
    pub n_healthy: usize,
    pub n_anomalous: usize,
    pub n_val_healthy: usize,
    pub n_val_anomalous: usize,
    /// Shell intensities from the outermost shell inwards.
    pub shell_levels: Vec<f64>,
    /// Nominal outer radius of each shell as a fraction of the outer surface.
    pub shell_radii: Vec<f64>,
    /// Per-shell uniform jitter of `shell_radii`.
    pub shell_radius_jitter: f64,
    /// Outer semi-axes as fractions of the volume size.
    pub axes: [f64; 3],
    /// Uniform scale range applied to all semi-axes.
    pub scale_range: [f64; 2],
    /// Independent per-axis stretch, `±aspect_jitter`.
    pub aspect_jitter: f64,
    /// Centre offset in voxels, `±center_jitter` per axis.
    pub center_jitter: f64,
    /// Peak amplitude of the smooth additive noise inside the anatomy.
    pub noise_amplitude: f64,
    pub blob_count: [usize; 2],
    /// Blob radius range in voxels.
    pub blob_radius: [f64; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dims: Dims::cube(32),
            n_healthy: 32,
            n_anomalous: 8,
            n_val_healthy: 2,
            n_val_anomalous: 2,
            shell_levels: vec![1.0, 0.45, 0.7, 0.25],
            shell_radii: vec![1.0, 0.78, 0.55, 0.3],
            shell_radius_jitter: 0.04,
            axes: [0.40, 0.36, 0.32],
            scale_range: [0.85, 1.0],
            aspect_jitter: 0.06,
            center_jitter: 1.5,
            noise_amplitude: 0.03,
            blob_count: [1, 3],
            blob_radius: [3.0, 5.0],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synth: {msg}")));
        if self.dims.0.iter().any(|&d| d < 8) {
            return bad(format!("dims {} below 8 per axis", self.dims));
        }
        if self.shell_levels.is_empty() || self.shell_levels.len() != self.shell_radii.len() {
            return bad("need one radius per shell level".into());
        }
        if self.shell_levels.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
            return bad("shell levels must lie in (0, 1]".into());
        }
        if self.shell_radii.windows(2).any(|w| w[1] >= w[0]) || self.shell_radii[0] > 1.0 {
            return bad("shell radii must decrease from at most 1".into());
        }
        if self.blob_radius[0] < 2.0 || self.blob_radius[1] < self.blob_radius[0] {
            return bad(format!("blob radius range {:?}", self.blob_radius));
        }
        if self.blob_count[0] < 1 || self.blob_count[1] < self.blob_count[0] {
            return bad(format!("blob count range {:?}", self.blob_count));
        }
        let mut sorted = self.palette();
        sorted.dedup();
        let min_gap = sorted.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if self.noise_amplitude < 0.0 || 2.0 * self.noise_amplitude >= min_gap {
            return bad(format!(
                "noise amplitude {} must stay below half the minimum level gap {min_gap}",
                self.noise_amplitude
            ));
        }
        Ok(())
    }

    /// Distinct intensity levels including the zero background, ascending.
    pub fn palette(&self) -> Vec<f64> {
        let mut levels = self.shell_levels.clone();
        levels.push(0.0);
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        levels
    }

    fn anatomy_id(&self, split: Split, anomalous: bool, index: usize) -> Result<usize> {
        let (offset, count) = match (split, anomalous) {
            (Split::Train, false) => (0, self.n_healthy),
            (Split::Test, true) => (self.n_healthy, self.n_anomalous),
            (Split::Val, false) => (self.n_healthy + self.n_anomalous, self.n_val_healthy),
            (Split::Val, true) => (
                self.n_healthy + self.n_anomalous + self.n_val_healthy,
                self.n_val_anomalous,
            ),
            _ => return Err(Error::InvalidArgument(format!("no {split:?} volumes with anomalous = {anomalous}"))),
        };
        if index >= count {
            return Err(Error::InvalidArgument(format!(
                "{split:?} index {index} >= {count}"
            )));
        }
        Ok(offset + index)
    }
}

/// Geometry and noise of one phantom.
struct Anatomy {
    center: [f64; 3],
    axes: [f64; 3],
    radii: Vec<f64>,
    waves: Vec<([f64; 3], f64)>,
}

impl Anatomy {
    fn new(spec: &SynthSpec, id: usize) -> Self {
        let mut r = rng::stream(spec.seed, &[domain::SYNTH_HEALTHY, id as u64]);
        let sym = |r: &mut Stream, a: f64| a * (2.0 * r.random::<f64>() - 1.0);
        let d = spec.dims.0;
        let center = [0, 1, 2].map(|a| (d[a] as f64 - 1.0) / 2.0 + sym(&mut r, spec.center_jitter));
        let scale = spec.scale_range[0] + (spec.scale_range[1] - spec.scale_range[0]) * r.random::<f64>();
        let axes = [0, 1, 2].map(|a| spec.axes[a] * d[a] as f64 * scale * (1.0 + sym(&mut r, spec.aspect_jitter)));
        let radii = spec
            .shell_radii
            .iter()
            .enumerate()
            .map(|(i, &rad)| if i == 0 { rad } else { rad + sym(&mut r, spec.shell_radius_jitter) })
            .collect();
        let waves = (0..3)
            .map(|_| {
                let freq = [0, 1, 2].map(|a| sym(&mut r, 2.0 * std::f64::consts::PI / d[a] as f64));
                (freq, r.random::<f64>() * 2.0 * std::f64::consts::PI)
            })
            .collect();
        Anatomy {
            center,
            axes,
            radii,
            waves,
        }
    }

    /// Normalized ellipsoidal radius; `≤ 1` inside the anatomy.
    fn radius(&self, p: [usize; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a]) / self.axes[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Index of the innermost shell containing `p`.
    fn shell(&self, p: [usize; 3]) -> Option<usize> {
        let r = self.radius(p);
        self.radii.iter().rposition(|&rad| r <= rad)
    }

    /// Smooth noise in `[-amplitude, amplitude]`.
    fn noise(&self, p: [usize; 3], amplitude: f64) -> f64 {
        let sum: f64 = self
            .waves
            .iter()
            .map(|(f, phase)| (f[0] * p[0] as f64 + f[1] * p[1] as f64 + f[2] * p[2] as f64 + phase).sin())
            .sum();
        amplitude * sum / self.waves.len() as f64
    }
}

fn render(spec: &SynthSpec, anatomy: &Anatomy, level_at: impl Fn(usize, [usize; 3]) -> Option<f64>) -> Result<Volume> {
    let dims = spec.dims;
    let data = (0..dims.len())
        .map(|flat| {
            let p = dims.coords(flat);
            match level_at(flat, p) {
                Some(level) => (level + anatomy.noise(p, spec.noise_amplitude)) as f32,
                None => 0.0,
            }
        })
        .collect();
    Volume::new(dims, Role::Intensity, data)
}

fn healthy_levels(spec: &SynthSpec, anatomy: &Anatomy) -> Vec<Option<usize>> {
    (0..spec.dims.len()).map(|flat| anatomy.shell(spec.dims.coords(flat))).collect()
}

fn healthy_from(spec: &SynthSpec, id: usize) -> Result<Volume> {
    let anatomy = Anatomy::new(spec, id);
    render(spec, &anatomy, |_, p| anatomy.shell(p).map(|s| spec.shell_levels[s]))
}

fn anomalous_from(spec: &SynthSpec, id: usize) -> Result<(Volume, Volume)> {
    let anatomy = Anatomy::new(spec, id);
    let shells = healthy_levels(spec, &anatomy);
    let dims = spec.dims;
    let mut r = rng::stream(spec.seed, &[domain::SYNTH_ANOMALY, id as u64]);
    let inside: Vec<usize> = (0..dims.len())
        .filter(|&f| anatomy.radius(dims.coords(f)) <= 0.65)
        .collect();
    if inside.is_empty() {
        return Err(Error::InvalidArgument("anatomy too small for anomalies".into()));
    }

    // altered level per voxel, None where healthy
    let mut altered: Vec<Option<f64>> = vec![None; dims.len()];
    let blobs = r.random_range(spec.blob_count[0]..=spec.blob_count[1]);
    let mut placed = 0;
    for _ in 0..100 * blobs {
        if placed == blobs {
            break;
        }
        let c = dims.coords(inside[r.random_range(0..inside.len())]);
        let radius = r.random_range(spec.blob_radius[0]..=spec.blob_radius[1]);
        let footprint: Vec<usize> = (0..dims.len())
            .filter(|&f| {
                let p = dims.coords(f);
                let dist2: f64 = (0..3).map(|a| (p[a] as f64 - c[a] as f64).powi(2)).sum();
                let interior = p.iter().zip(dims.0).all(|(&c, d)| c > 0 && c + 1 < d);
                dist2 <= radius * radius && shells[f].is_some() && interior
            })
            .collect();
        let present: Vec<f64> = footprint.iter().map(|&f| spec.shell_levels[shells[f].unwrap()]).collect();
        let mut candidates: Vec<f64> = spec.palette().into_iter().filter(|&l| l > 0.0 && !present.contains(&l)).collect();
        if candidates.is_empty() || footprint.is_empty() {
            continue;
        }
        candidates.sort_by(f64::total_cmp);
        let level = candidates[r.random_range(0..candidates.len())];
        for f in footprint {
            altered[f] = Some(level);
        }
        placed += 1;
    }
    if altered.iter().all(Option::is_none) {
        return Err(Error::InvalidArgument(format!("no anomaly could be placed in volume {id}")));
    }

    let image = render(spec, &anatomy, |flat, _| {
        altered[flat].or_else(|| shells[flat].map(|s| spec.shell_levels[s]))
    })?;
    let mask: Vec<bool> = altered.iter().map(Option::is_some).collect();
    Ok((image, Volume::from_mask(dims, &mask)?))
}

/// Training volume `index`.
pub fn generate_healthy(spec: &SynthSpec, index: usize) -> Result<Volume> {
    spec.validate()?;
    healthy_from(spec, spec.anatomy_id(Split::Train, false, index)?)
}

/// Test volume `index` and its anomaly mask.
pub fn generate_anomalous(spec: &SynthSpec, index: usize) -> Result<(Volume, Volume)> {
    spec.validate()?;
    anomalous_from(spec, spec.anatomy_id(Split::Test, true, index)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Path relative to the manifest's directory.
    pub image: PathBuf,
    /// Ground-truth mask; absent for training volumes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

/// Index of a dataset directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "volume", default)]
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format("manifest", e.to_string()))?;
        write_atomic(&dir.as_ref().join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))
    }
}

/// Writes every volume of the spec under `dir` and returns the manifest.
pub fn write_dataset(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    let groups = [
        (Split::Train, false, spec.n_healthy, "train"),
        (Split::Val, false, spec.n_val_healthy, "val-healthy"),
        (Split::Val, true, spec.n_val_anomalous, "val-anomalous"),
        (Split::Test, true, spec.n_anomalous, "test"),
    ];
    for (split, anomalous, count, prefix) in groups {
        for index in 0..count {
            let id = format!("{prefix}-{index:03}");
            let anatomy = spec.anatomy_id(split, anomalous, index)?;
            let image = PathBuf::from(format!("{id}.vol"));
            let mask_path = PathBuf::from(format!("{id}.mask.vol"));
            let mask = if anomalous {
                let (volume, mask) = anomalous_from(spec, anatomy)?;
                write_volume(&volume, dir.join(&image))?;
                Some(mask)
            } else {
                write_volume(&healthy_from(spec, anatomy)?, dir.join(&image))?;
                (split != Split::Train).then(|| Volume::filled(spec.dims, Role::Mask, 0.0)).transpose()?
            };
            let mask = match mask {
                Some(m) => {
                    write_volume(&m, dir.join(&mask_path))?;
                    Some(mask_path)
                }
                None => None,
            };
            manifest.entries.push(ManifestEntry {
                id,
                split,
                image,
                mask,
            });
        }
    }
    manifest.save(dir)?;
    Ok(manifest)
}
