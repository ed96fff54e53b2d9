//! Voxel coordinate normalization, sinusoidal positional encoding and point
//! sampling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Dims, Role, Volume};

/// Maps voxel index `i` on an axis of size `size` to `2i/(size-1) - 1`.
pub fn normalize_coord<S: Scalar>(i: usize, size: usize) -> Result<S> {
    if size < 2 {
        return Err(Error::InvalidArgument(format!("axis size {size} < 2")));
    }
    if i >= size {
        return Err(Error::InvalidArgument(format!("index {i} outside axis of {size}")));
    }
    let two = S::from_f64_lossy(2.0);
    Ok(two * S::from_usize_lossy(i) / S::from_usize_lossy(size - 1) - S::one())
}

/// `(sin 2⁰πx, cos 2⁰πx, …, sin 2^{L-1}πx, cos 2^{L-1}πx)`.
pub fn positional_encode<S: Scalar>(x: S, frequencies: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(2 * frequencies);
    encode_into(x, frequencies, &mut out);
    out
}

fn encode_into<S: Scalar>(x: S, frequencies: usize, out: &mut Vec<S>) {
    let mut scale = S::PI();
    for _ in 0..frequencies {
        let (s, c) = (scale * x).sin_cos();
        out.push(s);
        out.push(c);
        scale = scale + scale;
    }
}

/// A normalized 3D coordinate and its `6L` encoding (x block, y block, z block).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPoint<S> {
    pub raw: [S; 3],
    pub encoded: Vec<S>,
}

impl<S: Scalar> EncodedPoint<S> {
    pub fn new(raw: [S; 3], frequencies: usize) -> Self {
        let mut encoded = Vec::with_capacity(6 * frequencies);
        for &x in &raw {
            encode_into(x, frequencies, &mut encoded);
        }
        EncodedPoint { raw, encoded }
    }
}

/// Per-axis encoding tables for one grid size.
///
/// Singleton axes (size 1) sit at coordinate 0.
#[derive(Clone, Debug)]
pub struct CoordEncoder<S> {
    dims: Dims,
    frequencies: usize,
    raw: [Vec<S>; 3],
    tables: [Vec<S>; 3],
}

impl<S: Scalar> CoordEncoder<S> {
    pub fn new(dims: Dims, frequencies: usize) -> Result<Self> {
        if frequencies < 1 {
            return Err(Error::InvalidArgument("positional encoding needs L >= 1".into()));
        }
        let axis_raw = |size: usize| -> Result<Vec<S>> {
            if size == 1 {
                Ok(vec![S::zero()])
            } else {
                (0..size).map(|i| normalize_coord(i, size)).collect()
            }
        };
        let raw = [axis_raw(dims.0[0])?, axis_raw(dims.0[1])?, axis_raw(dims.0[2])?];
        let tables = raw.clone().map(|r| {
            let mut t = Vec::with_capacity(r.len() * 2 * frequencies);
            for x in r {
                encode_into(x, frequencies, &mut t);
            }
            t
        });
        Ok(CoordEncoder {
            dims,
            frequencies,
            raw,
            tables,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn frequencies(&self) -> usize {
        self.frequencies
    }

    /// Encoded width `6L`.
    pub fn width(&self) -> usize {
        6 * self.frequencies
    }

    pub fn raw(&self, voxel: [usize; 3]) -> [S; 3] {
        [self.raw[0][voxel[0]], self.raw[1][voxel[1]], self.raw[2][voxel[2]]]
    }

    pub fn encode_voxel_into(&self, voxel: [usize; 3], out: &mut Vec<S>) {
        let w = 2 * self.frequencies;
        for (axis, &i) in voxel.iter().enumerate() {
            out.extend_from_slice(&self.tables[axis][i * w..(i + 1) * w]);
        }
    }

    pub fn point(&self, voxel: [usize; 3]) -> EncodedPoint<S> {
        let mut encoded = Vec::with_capacity(self.width());
        self.encode_voxel_into(voxel, &mut encoded);
        EncodedPoint {
            raw: self.raw(voxel),
            encoded,
        }
    }
}

/// Sampled points from one label volume, stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct PointBatch<S> {
    pub volume_id: usize,
    pub voxels: Vec<[usize; 3]>,
    /// `len × width` row-major encodings.
    pub features: Vec<S>,
    pub width: usize,
    pub targets: Vec<usize>,
}

impl<S: Scalar> PointBatch<S> {
    fn with_capacity(volume_id: usize, width: usize, n: usize) -> Self {
        PointBatch {
            volume_id,
            voxels: Vec::with_capacity(n),
            features: Vec::with_capacity(n * width),
            width,
            targets: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, encoder: &CoordEncoder<S>, volume: &Volume, flat: usize) {
        let voxel = volume.dims().coords(flat);
        self.voxels.push(voxel);
        encoder.encode_voxel_into(voxel, &mut self.features);
        self.targets.push(volume.label(flat) as usize);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[S] {
        &self.features[i * self.width..(i + 1) * self.width]
    }
}

fn check_label_volume<S: Scalar>(volume: &Volume, encoder: &CoordEncoder<S>) -> Result<()> {
    volume.require_role(Role::Label, "point sampling")?;
    if volume.dims() != encoder.dims() {
        return Err(Error::Dimension(format!(
            "encoder built for {} used on {}",
            encoder.dims(),
            volume.dims()
        )));
    }
    Ok(())
}

/// Draws `count` voxels uniformly with replacement.
pub fn sample_points<S: Scalar, R: Rng>(
    volume: &Volume,
    volume_id: usize,
    encoder: &CoordEncoder<S>,
    count: usize,
    rng: &mut R,
) -> Result<PointBatch<S>> {
    check_label_volume(volume, encoder)?;
    if count < 1 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let n = volume.len();
    let mut batch = PointBatch::with_capacity(volume_id, encoder.width(), count);
    for _ in 0..count {
        batch.push(encoder, volume, rng.random_range(0..n));
    }
    Ok(batch)
}

/// Every voxel once, in layout order.
pub fn all_points<S: Scalar>(
    volume: &Volume,
    volume_id: usize,
    encoder: &CoordEncoder<S>,
) -> Result<PointBatch<S>> {
    check_label_volume(volume, encoder)?;
    let mut batch = PointBatch::with_capacity(volume_id, encoder.width(), volume.len());
    for flat in 0..volume.len() {
        batch.push(encoder, volume, flat);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn normalize_endpoints_and_midpoint() {
        for s in [2usize, 3, 7, 160] {
            assert_eq!(normalize_coord::<f64>(0, s).unwrap(), -1.0);
            assert_eq!(normalize_coord::<f64>(s - 1, s).unwrap(), 1.0);
        }
        assert_eq!(normalize_coord::<f64>(3, 7).unwrap(), 0.0);
        assert!(normalize_coord::<f64>(0, 1).is_err());
        assert!(normalize_coord::<f64>(5, 5).is_err());
    }

    #[test]
    fn encode_known_values() {
        let at_zero = positional_encode(0.0f64, 4);
        assert_eq!(at_zero, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);

        let at_one = positional_encode(1.0f64, 3);
        let expect = [0.0, -1.0, 0.0, 1.0, 0.0, 1.0];
        for (a, e) in at_one.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }

        let at_half = positional_encode(0.5f64, 2);
        let expect = [1.0, 0.0, 0.0, -1.0];
        for (a, e) in at_half.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn encoded_point_concatenates_axes() {
        let p = EncodedPoint::new([0.0f64, 1.0, 0.5], 2);
        assert_eq!(p.encoded.len(), 12);
        assert_eq!(&p.encoded[..4], positional_encode(0.0, 2).as_slice());
        assert_eq!(&p.encoded[4..8], positional_encode(1.0, 2).as_slice());
        assert_eq!(&p.encoded[8..], positional_encode(0.5, 2).as_slice());
    }

    #[test]
    fn sampling_single_voxel_volume() {
        let v = Volume::from_labels(Dims::cube(1), &[4]).unwrap();
        let enc = CoordEncoder::<f64>::new(v.dims(), 3).unwrap();
        let mut r = rng::stream(1, &[]);
        let b = sample_points(&v, 0, &enc, 50, &mut r).unwrap();
        assert_eq!(b.len(), 50);
        assert!(b.voxels.iter().all(|&p| p == [0, 0, 0]));
        assert!(b.targets.iter().all(|&t| t == 4));
        assert!(sample_points(&v, 0, &enc, 0, &mut r).is_err());
    }

    #[test]
    fn sampling_is_uniform_within_binomial_bounds() {
        let dims = Dims::cube(4);
        let labels: Vec<u8> = (0..64).map(|i| (i % 7) as u8).collect();
        let v = Volume::from_labels(dims, &labels).unwrap();
        let enc = CoordEncoder::<f64>::new(dims, 2).unwrap();
        let count = 64_000;
        let b = sample_points(&v, 0, &enc, count, &mut rng::stream(2024, &[])).unwrap();
        let mut hits = [0usize; 64];
        for (voxel, &t) in b.voxels.iter().zip(&b.targets) {
            let flat = dims.index(voxel[0], voxel[1], voxel[2]);
            assert_eq!(t, labels[flat] as usize);
            hits[flat] += 1;
        }
        let p = 1.0 / 64.0;
        let mean = count as f64 * p;
        let sd = (count as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - mean).abs() <= 3.0 * sd, "{h} vs {mean} ± 3·{sd}");
        }
    }

    #[test]
    fn all_points_enumerates_layout_order() {
        let dims = Dims::cube(2);
        let labels = [0u8, 1, 2, 3, 4, 5, 6, 7];
        let v = Volume::from_labels(dims, &labels).unwrap();
        let enc = CoordEncoder::<f64>::new(dims, 1).unwrap();
        let b = all_points(&v, 3, &enc).unwrap();
        assert_eq!(b.len(), 8);
        let unique: HashSet<_> = b.voxels.iter().collect();
        assert_eq!(unique.len(), 8);
        for (i, voxel) in b.voxels.iter().enumerate() {
            assert_eq!(dims.index(voxel[0], voxel[1], voxel[2]), i);
        }
        let rebuilt: Vec<u8> = b.targets.iter().map(|&t| t as u8).collect();
        assert_eq!(rebuilt, labels);
        assert_eq!(b.feature_row(7), enc.point([1, 1, 1]).encoded.as_slice());
    }

    #[test]
    fn encoding_is_injective_on_grids() {
        for n in [2usize, 5, 16] {
            let enc = CoordEncoder::<f64>::new(Dims::cube(n), 10).unwrap();
            let mut seen = HashSet::new();
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        let key: Vec<u64> = enc.point([x, y, z]).encoded.iter().map(|v| v.to_bits()).collect();
                        assert!(seen.insert(key), "collision at {x},{y},{z} on {n}^3");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn sin_cos_pairs_have_unit_norm(x in -1.0f64..=1.0, l in 1usize..12) {
            let e = positional_encode(x, l);
            prop_assert_eq!(e.len(), 2 * l);
            for pair in e.chunks(2) {
                prop_assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() <= 1e-12);
                prop_assert!(pair[0].abs() <= 1.0 && pair[1].abs() <= 1.0);
            }
        }

        #[test]
        fn normalize_is_strictly_increasing(size in 2usize..300) {
            let xs: Vec<f64> = (0..size).map(|i| normalize_coord(i, size).unwrap()).collect();
            prop_assert!(xs.windows(2).all(|w| w[0] < w[1]));
            // affine: constant step
            let step = 2.0 / (size - 1) as f64;
            for w in xs.windows(2) {
                prop_assert!((w[1] - w[0] - step).abs() < 1e-12);
            }
        }
    }
}
