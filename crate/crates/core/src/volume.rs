//! Dense 3D volumes, the VOL1 file format, and intensity preprocessing.
//!
//! A single [`Volume`] container holds intensities, class labels, anomaly
//! scores and binary masks; the [`Role`] tag says how to read the data.
//! Storage is `f32` for every role (labels and mask bits are exact small
//! integers). Layout is x-fastest: `index(x, y, z) = x + X·(y + Y·z)`.
//!
//! VOL1 layout (little-endian):
//!
//! | bytes | content                                        |
//! |-------|------------------------------------------------|
//! | 4     | magic `VOL1`                                   |
//! | 1     | role tag: 0 Intensity, 1 Label, 2 Score, 3 Mask |
//! | 12    | `u32` dims X, Y, Z                             |
//! | ...   | X·Y·Z elements: `f32` (Intensity/Score) or `u8` (Label/Mask) |

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VOL1";
const HEADER_LEN: usize = 4 + 1 + 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Intensity,
    Label,
    Score,
    Mask,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::Intensity => 0,
            Role::Label => 1,
            Role::Score => 2,
            Role::Mask => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Role> {
        match tag {
            0 => Some(Role::Intensity),
            1 => Some(Role::Label),
            2 => Some(Role::Score),
            3 => Some(Role::Mask),
            _ => None,
        }
    }

    /// Whether elements are stored as bytes in VOL1.
    pub fn is_integral(self) -> bool {
        matches!(self, Role::Label | Role::Mask)
    }
}

/// Grid extent `(X, Y, Z)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(x: usize, y: usize, z: usize) -> Self {
        Dims([x, y, z])
    }

    pub fn cube(n: usize) -> Self {
        Dims([n, n, n])
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.0;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    role: Role,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, role: Role, data: Vec<f32>) -> Result<Self> {
        if dims.0.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in {dims}")));
        }
        if data.len() != dims.len() {
            return Err(Error::Dimension(format!(
                "{} elements for a {dims} grid",
                data.len()
            )));
        }
        if role.is_integral() {
            let limit = if role == Role::Mask { 1.0 } else { 255.0 };
            if let Some(bad) = data
                .iter()
                .find(|v| !(v.fract() == 0.0 && **v >= 0.0 && **v <= limit))
            {
                return Err(Error::InvalidArgument(format!(
                    "{role:?} element {bad} is not an integer in [0, {limit}]"
                )));
            }
        }
        Ok(Volume { dims, role, data })
    }

    pub fn filled(dims: Dims, role: Role, value: f32) -> Result<Self> {
        Volume::new(dims, role, vec![value; dims.len()])
    }

    pub fn from_labels(dims: Dims, labels: &[u8]) -> Result<Self> {
        Volume::new(dims, Role::Label, labels.iter().map(|&l| l as f32).collect())
    }

    pub fn from_mask(dims: Dims, mask: &[bool]) -> Result<Self> {
        Volume::new(dims, Role::Mask, mask.iter().map(|&m| m as u8 as f32).collect())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Label (or mask bit) at a flat index.
    #[inline]
    pub fn label(&self, index: usize) -> u8 {
        self.data[index] as u8
    }

    pub fn labels(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v as u8).collect()
    }

    pub fn mask_bits(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v != 0.0).collect()
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    fn expect_role(&self, allowed: &[Role], op: &str) -> Result<()> {
        if allowed.contains(&self.role) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{op} expects {allowed:?}, got {:?}",
                self.role
            )))
        }
    }

    pub(crate) fn require_role(&self, role: Role, op: &str) -> Result<()> {
        self.expect_role(&[role], op)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let width = if self.role.is_integral() { 1 } else { 4 };
        let mut out = Vec::with_capacity(HEADER_LEN + width * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.role.tag());
        for d in self.dims.0 {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        if self.role.is_integral() {
            out.extend(self.data.iter().map(|&v| v as u8));
        } else {
            for v in &self.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |reason: String| Error::format("VOL1 volume", reason);
        if bytes.len() < HEADER_LEN {
            return Err(fail(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(format!("bad magic {:?}", &bytes[..4])));
        }
        let role = Role::from_tag(bytes[4]).ok_or_else(|| fail(format!("role tag {}", bytes[4])))?;
        let mut dims = [0usize; 3];
        for (i, d) in dims.iter_mut().enumerate() {
            let off = 5 + 4 * i;
            *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        }
        let dims = Dims(dims);
        let payload = &bytes[HEADER_LEN..];
        let width = if role.is_integral() { 1 } else { 4 };
        let expected = dims
            .0
            .iter()
            .try_fold(width, |acc: usize, &d| acc.checked_mul(d))
            .ok_or_else(|| fail(format!("dims {dims} overflow")))?;
        if payload.len() != expected {
            return Err(fail(format!(
                "header {dims} needs {expected} payload bytes, found {}",
                payload.len()
            )));
        }
        let data = if role.is_integral() {
            payload.iter().map(|&b| b as f32).collect()
        } else {
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        Volume::new(dims, role, data).map_err(|e| fail(e.to_string()))
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes)
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &volume.to_bytes())
}

/// Writes through a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSpec {
    pub clip_percentile: f64,
    pub target_dims: Option<Dims>,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            clip_percentile: 98.0,
            target_dims: None,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_percentile > 0.0 && self.clip_percentile <= 100.0) {
            return Err(Error::InvalidArgument(format!(
                "clip percentile {} outside (0, 100]",
                self.clip_percentile
            )));
        }
        Ok(())
    }
}

/// Nearest-rank percentile: the `ceil(p/100·n)`-th smallest value.
pub fn percentile_nearest_rank(values: &[f32], p: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of empty data".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidArgument(format!("percentile {p} outside (0, 100]")));
    }
    let n = values.len();
    let rank = ((p / 100.0) * n as f64).ceil().clamp(1.0, n as f64) as usize;
    let mut sorted = values.to_vec();
    let (_, nth, _) = sorted.select_nth_unstable_by(rank - 1, f32::total_cmp);
    Ok(*nth)
}

/// Clips at the volume's own `p`-th percentile and rescales to `[0, 1]`.
///
/// A zero percentile value maps the whole volume to zeros.
pub fn clip_normalize(volume: &Volume, spec: &PreprocessSpec) -> Result<Volume> {
    volume.require_role(Role::Intensity, "clip_normalize")?;
    spec.validate()?;
    let top = percentile_nearest_rank(&volume.data, spec.clip_percentile)?;
    let data = if top <= 0.0 {
        vec![0.0; volume.len()]
    } else {
        volume
            .data
            .iter()
            .map(|&v| v.clamp(0.0, top) / top)
            .collect()
    };
    Volume::new(volume.dims, Role::Intensity, data)
}

/// Resamples to `target` dims: block means when every axis divides evenly,
/// trilinear interpolation at target voxel centres otherwise.
pub fn downsample(volume: &Volume, target: Dims) -> Result<Volume> {
    volume.expect_role(&[Role::Intensity, Role::Score], "downsample")?;
    let src = volume.dims;
    if target.0.contains(&0) {
        return Err(Error::InvalidArgument(format!("target dims {target} contain zero")));
    }
    if target.0.iter().zip(src.0).any(|(&t, s)| t > s) {
        return Err(Error::InvalidArgument(format!(
            "target dims {target} exceed source {src}"
        )));
    }
    if target == src {
        return Ok(volume.clone());
    }
    let divisible = target.0.iter().zip(src.0).all(|(&t, s)| s % t == 0);
    let data = if divisible {
        block_mean(volume, target)
    } else {
        trilinear(volume, target)
    };
    Volume::new(target, volume.role, data)
}

fn block_mean(volume: &Volume, target: Dims) -> Vec<f32> {
    let src = volume.dims;
    let f = [src.0[0] / target.0[0], src.0[1] / target.0[1], src.0[2] / target.0[2]];
    let count = (f[0] * f[1] * f[2]) as f64;
    let mut out = Vec::with_capacity(target.len());
    for tz in 0..target.0[2] {
        for ty in 0..target.0[1] {
            for tx in 0..target.0[0] {
                let mut sum = 0.0f64;
                for z in tz * f[2]..(tz + 1) * f[2] {
                    for y in ty * f[1]..(ty + 1) * f[1] {
                        for x in tx * f[0]..(tx + 1) * f[0] {
                            sum += volume.get(x, y, z) as f64;
                        }
                    }
                }
                out.push((sum / count) as f32);
            }
        }
    }
    out
}

fn trilinear(volume: &Volume, target: Dims) -> Vec<f32> {
    let src = volume.dims;
    // per axis: (lower index, upper index, upper weight)
    let axis = |a: usize| -> Vec<(usize, usize, f64)> {
        let (s, t) = (src.0[a], target.0[a]);
        (0..t)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * s as f64 / t as f64 - 0.5).clamp(0.0, (s - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(s - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let mut out = Vec::with_capacity(target.len());
    for &(z0, z1, wz) in &az {
        for &(y0, y1, wy) in &ay {
            for &(x0, x1, wx) in &ax {
                let at = |x, y, z| volume.get(x, y, z) as f64;
                let c00 = at(x0, y0, z0) * (1.0 - wx) + at(x1, y0, z0) * wx;
                let c10 = at(x0, y1, z0) * (1.0 - wx) + at(x1, y1, z0) * wx;
                let c01 = at(x0, y0, z1) * (1.0 - wx) + at(x1, y0, z1) * wx;
                let c11 = at(x0, y1, z1) * (1.0 - wx) + at(x1, y1, z1) * wx;
                let c0 = c00 * (1.0 - wy) + c10 * wy;
                let c1 = c01 * (1.0 - wy) + c11 * wy;
                out.push((c0 * (1.0 - wz) + c1 * wz) as f32);
            }
        }
    }
    out
}
