//! Weight-normalized ReLU network mapping `[latent ; γ(p)]` to class logits,
//! with hand-derived backpropagation.
//!
//! Each linear layer stores a direction matrix `v`, a per-row scale `g` and
//! a bias `b`; the effective weight row is `wᵢ = gᵢ·vᵢ/‖vᵢ‖`. Hidden layers
//! apply ReLU followed (in training mode) by inverted dropout. The output
//! layer produces raw logits.
//!
//! Points are processed in fixed blocks of [`BLOCK`] rows so that dropout
//! masks and matrix shapes do not depend on how work is split across
//! workers.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coords::PointBatch;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::scalar::{dot, Scalar};

/// Rows per forward/backward block.
pub const BLOCK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    /// Latent code dimension `D`.
    pub latent_dim: usize,
    /// Positional-encoding frequencies `L` per axis.
    pub frequencies: usize,
    pub hidden: usize,
    /// Number of linear layers, output layer included.
    pub depth: usize,
    pub classes: usize,
    pub dropout: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            latent_dim: 256,
            frequencies: 10,
            hidden: 512,
            depth: 8,
            classes: 10,
            dropout: 0.2,
        }
    }
}

impl Architecture {
    pub fn encoding_dim(&self) -> usize {
        6 * self.frequencies
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim + self.encoding_dim()
    }

    /// `(fan_in, fan_out)` of each linear layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let fan_in = if l == 0 { self.input_dim() } else { self.hidden };
                let fan_out = if l + 1 == self.depth { self.classes } else { self.hidden };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(i, o)| o * i + 2 * o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("architecture: {msg}")));
        if self.depth < 1 {
            return bad("depth must be >= 1");
        }
        if self.depth > 1 && self.hidden < 1 {
            return bad("hidden width must be >= 1");
        }
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if self.frequencies < 1 {
            return bad("need at least one frequency");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<S> {
    pub fan_in: usize,
    pub fan_out: usize,
    /// `fan_out × fan_in`, row-major.
    pub v: Vec<S>,
    pub g: Vec<S>,
    pub b: Vec<S>,
}

impl<S: Scalar> Layer<S> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            fan_in,
            fan_out,
            v: vec![S::zero(); fan_in * fan_out],
            g: vec![S::zero(); fan_out],
            b: vec![S::zero(); fan_out],
        }
    }

    pub fn v_row(&self, i: usize) -> &[S] {
        &self.v[i * self.fan_in..(i + 1) * self.fan_in]
    }

    /// Effective weights `gᵢ·vᵢ/‖vᵢ‖`; a zero direction row yields a zero row.
    pub fn effective_weights(&self) -> Vec<S> {
        let mut w = Vec::with_capacity(self.v.len());
        for i in 0..self.fan_out {
            let row = self.v_row(i);
            let norm = dot(row, row).sqrt();
            let scale = if norm > S::zero() { self.g[i] / norm } else { S::zero() };
            w.extend(row.iter().map(|&x| x * scale));
        }
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks are keyed by this value and the block index.
    Train(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel<S> {
    pub arch: Architecture,
    pub layers: Vec<Layer<S>>,
}

impl<S: Scalar> MlpModel<S> {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Layer::zeros(i, o))
            .collect();
        Ok(MlpModel { arch, layers })
    }

    /// He-normal directions, `g = ‖v‖` (so initial effective weights equal
    /// `v`), zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let mut rng = rng::stream(seed, &[domain::NET_INIT, l as u64]);
            let std = (2.0 / layer.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            for x in layer.v.iter_mut() {
                *x = S::from_f64_lossy(normal.sample(&mut rng));
            }
            for i in 0..layer.fan_out {
                let row = layer.v_row(i);
                layer.g[i] = dot(row, row).sqrt();
            }
        }
        Ok(model)
    }

    /// Parameter tensors in declared order: `v, g, b` for each layer.
    pub fn tensors(&self) -> Vec<&[S]> {
        self.layers
            .iter()
            .flat_map(|l| [l.v.as_slice(), l.g.as_slice(), l.b.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.v.as_mut_slice(), l.g.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    /// Logits for one point.
    pub fn forward(&self, z: &[S], encoded_point: &[S], mode: Mode) -> Result<Vec<S>> {
        self.check_inputs(z, encoded_point.len())?;
        let batch = Batch {
            codes: vec![z.to_vec()],
            code_of_point: vec![0],
            features: encoded_point.to_vec(),
            width: encoded_point.len(),
            targets: vec![0],
        };
        Ok(self.logits(&batch, mode)?.pop().unwrap())
    }

    /// Logits for every point of a batch, in order.
    pub fn logits(&self, batch: &Batch<S>, mode: Mode) -> Result<Vec<Vec<S>>> {
        batch.check(&self.arch, false)?;
        let engine = Engine::new(self, mode);
        let mut out = Vec::with_capacity(batch.len());
        let mut ws = engine.workspace();
        for block in 0..batch.block_count() {
            let rows = engine.forward_block(batch, block, &mut ws);
            let c = self.arch.classes;
            out.extend((0..rows).map(|r| ws.logits[r * c..(r + 1) * c].to_vec()));
        }
        Ok(out)
    }

    /// Cross-entropy of every point against its target.
    pub fn point_losses(&self, batch: &Batch<S>, mode: Mode) -> Result<Vec<S>> {
        batch.check(&self.arch, true)?;
        let engine = Engine::new(self, mode);
        let mut ws = engine.workspace();
        let mut out = Vec::with_capacity(batch.len());
        let c = self.arch.classes;
        for block in 0..batch.block_count() {
            let rows = engine.forward_block(batch, block, &mut ws);
            let start = block * BLOCK;
            for r in 0..rows {
                let logits = &ws.logits[r * c..(r + 1) * c];
                out.push(log_sum_exp(logits) - logits[batch.targets[start + r]]);
            }
        }
        Ok(out)
    }

    /// Mean cross-entropy over the batch.
    pub fn mean_loss(&self, batch: &Batch<S>, mode: Mode) -> Result<S> {
        let losses = self.point_losses(batch, mode)?;
        Ok(losses.iter().copied().sum::<S>() / S::from_usize_lossy(losses.len()))
    }

    /// Analytic gradients of the mean cross-entropy.
    pub fn backward(&self, batch: &Batch<S>, mode: Mode, options: BackwardOptions) -> Result<(Gradients<S>, S)> {
        batch.check(&self.arch, true)?;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty batch".into()));
        }
        let engine = Engine::new(self, mode);
        let blocks = batch.block_count();
        let workers = options.workers.clamp(1, blocks);
        let per_worker = blocks.div_ceil(workers);
        let ranges: Vec<(usize, usize)> = (0..workers)
            .map(|w| (w * per_worker, ((w + 1) * per_worker).min(blocks)))
            .filter(|(a, b)| a < b)
            .collect();

        let partials: Vec<Accumulator<S>> = if ranges.len() == 1 {
            vec![engine.accumulate(batch, ranges[0], options.parameters)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = ranges
                    .iter()
                    .map(|&range| {
                        let engine = &engine;
                        scope.spawn(move || engine.accumulate(batch, range, options.parameters))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };

        let mut iter = partials.into_iter();
        let mut total = iter.next().unwrap();
        for part in iter {
            total.merge(&part);
        }
        let mean_loss = total.loss_sum / S::from_usize_lossy(batch.len());
        Ok((engine.finish(total, options.parameters), mean_loss))
    }

    fn check_inputs(&self, z: &[S], width: usize) -> Result<()> {
        if z.len() != self.arch.latent_dim {
            return Err(Error::Dimension(format!(
                "latent of length {} for D = {}",
                z.len(),
                self.arch.latent_dim
            )));
        }
        if width != self.arch.encoding_dim() {
            return Err(Error::Dimension(format!(
                "encoded point of length {width} for 6L = {}",
                self.arch.encoding_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackwardOptions {
    /// Compute parameter gradients (off when only latents are optimized).
    pub parameters: bool,
    pub workers: usize,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions {
            parameters: true,
            workers: 1,
        }
    }
}

/// Points together with the latent codes they are conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    /// Distinct latent codes referenced by the points.
    pub codes: Vec<Vec<S>>,
    pub code_of_point: Vec<usize>,
    /// `len × width` positional encodings.
    pub features: Vec<S>,
    pub width: usize,
    pub targets: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    /// One code per point batch, in the same order.
    pub fn from_points(codes: Vec<Vec<S>>, points: &[PointBatch<S>]) -> Result<Self> {
        if codes.len() != points.len() {
            return Err(Error::Dimension(format!(
                "{} codes for {} point sets",
                codes.len(),
                points.len()
            )));
        }
        let width = points.first().map_or(0, |p| p.width);
        let total: usize = points.iter().map(|p| p.len()).sum();
        let mut batch = Batch {
            codes,
            code_of_point: Vec::with_capacity(total),
            features: Vec::with_capacity(total * width),
            width,
            targets: Vec::with_capacity(total),
        };
        for (i, p) in points.iter().enumerate() {
            if p.width != width {
                return Err(Error::Dimension("point sets with different encodings".into()));
            }
            batch.code_of_point.extend(std::iter::repeat_n(i, p.len()));
            batch.features.extend_from_slice(&p.features);
            batch.targets.extend_from_slice(&p.targets);
        }
        Ok(batch)
    }

    pub fn single(code: Vec<S>, points: &PointBatch<S>) -> Self {
        Batch {
            codes: vec![code],
            code_of_point: vec![0; points.len()],
            features: points.features.clone(),
            width: points.width,
            targets: points.targets.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.code_of_point.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code_of_point.is_empty()
    }

    fn block_count(&self) -> usize {
        self.len().div_ceil(BLOCK)
    }

    fn check(&self, arch: &Architecture, with_targets: bool) -> Result<()> {
        if self.width != arch.encoding_dim() {
            return Err(Error::Dimension(format!(
                "encoding width {} for 6L = {}",
                self.width,
                arch.encoding_dim()
            )));
        }
        if self.features.len() != self.len() * self.width || self.targets.len() != self.len() {
            return Err(Error::Dimension("batch columns have different lengths".into()));
        }
        if let Some(code) = self.codes.iter().find(|c| c.len() != arch.latent_dim) {
            return Err(Error::Dimension(format!(
                "latent of length {} for D = {}",
                code.len(),
                arch.latent_dim
            )));
        }
        if self.code_of_point.iter().any(|&c| c >= self.codes.len()) {
            return Err(Error::Dimension("point refers to a missing latent".into()));
        }
        if with_targets {
            if let Some(&t) = self.targets.iter().find(|&&t| t >= arch.classes) {
                return Err(Error::InvalidArgument(format!(
                    "target class {t} >= C = {}",
                    arch.classes
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<S> {
    pub v: Vec<S>,
    pub g: Vec<S>,
    pub b: Vec<S>,
}

/// Gradients mirroring [`MlpModel`] plus one entry per batch latent.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S> {
    /// Empty when parameter gradients were not requested.
    pub layers: Vec<LayerGrads<S>>,
    pub codes: Vec<Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn tensors(&self) -> Vec<&[S]> {
        self.layers
            .iter()
            .flat_map(|l| [l.v.as_slice(), l.g.as_slice(), l.b.as_slice()])
            .collect()
    }
}

/// Numerically stable `log Σ exp`.
pub fn log_sum_exp<S: Scalar>(logits: &[S]) -> S {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let sum: S = logits.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax with max subtraction.
pub fn softmax_posterior<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy<S: Scalar>(logits: &[S], target: usize) -> Result<S> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[target])
}

struct Workspace<S> {
    /// `acts[l]` is the input of layer `l` for the current block.
    acts: Vec<Vec<S>>,
    logits: Vec<S>,
    delta: Vec<S>,
    delta_in: Vec<S>,
}

struct Accumulator<S> {
    weights: Vec<Vec<S>>,
    biases: Vec<Vec<S>>,
    codes: Vec<Vec<S>>,
    loss_sum: S,
}

impl<S: Scalar> Accumulator<S> {
    fn merge(&mut self, other: &Self) {
        let add = |a: &mut Vec<S>, b: &Vec<S>| a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        self.weights.iter_mut().zip(&other.weights).for_each(|(a, b)| add(a, b));
        self.biases.iter_mut().zip(&other.biases).for_each(|(a, b)| add(a, b));
        self.codes.iter_mut().zip(&other.codes).for_each(|(a, b)| add(a, b));
        self.loss_sum += other.loss_sum;
    }
}

struct Engine<'m, S> {
    model: &'m MlpModel<S>,
    weights: Vec<Vec<S>>,
    mode: Mode,
    keep: S,
}

impl<'m, S: Scalar> Engine<'m, S> {
    fn new(model: &'m MlpModel<S>, mode: Mode) -> Self {
        let weights = model.layers.iter().map(Layer::effective_weights).collect();
        Engine {
            model,
            weights,
            mode,
            keep: S::from_f64_lossy(1.0 - model.arch.dropout),
        }
    }

    fn workspace(&self) -> Workspace<S> {
        let arch = &self.model.arch;
        let widest = arch.input_dim().max(arch.hidden).max(arch.classes);
        Workspace {
            acts: arch
                .layer_shapes()
                .iter()
                .map(|&(fan_in, _)| vec![S::zero(); BLOCK * fan_in])
                .collect(),
            logits: vec![S::zero(); BLOCK * arch.classes],
            delta: vec![S::zero(); BLOCK * widest],
            delta_in: vec![S::zero(); BLOCK * widest],
        }
    }

    fn dropout_active(&self) -> Option<u64> {
        match self.mode {
            Mode::Train(key) if self.model.arch.dropout > 0.0 => Some(key),
            _ => None,
        }
    }

    /// Runs block `block` forward; returns the number of rows.
    fn forward_block(&self, batch: &Batch<S>, block: usize, ws: &mut Workspace<S>) -> usize {
        let arch = &self.model.arch;
        let start = block * BLOCK;
        let rows = (batch.len() - start).min(BLOCK);
        let d = arch.latent_dim;
        let in0 = arch.input_dim();
        let x0 = &mut ws.acts[0];
        for r in 0..rows {
            let row = &mut x0[r * in0..(r + 1) * in0];
            row[..d].copy_from_slice(&batch.codes[batch.code_of_point[start + r]]);
            row[d..].copy_from_slice(&batch.features[(start + r) * batch.width..(start + r + 1) * batch.width]);
        }

        let depth = self.model.layers.len();
        for (l, layer) in self.model.layers.iter().enumerate() {
            let (fan_in, fan_out) = (layer.fan_in, layer.fan_out);
            let (head, tail) = ws.acts.split_at_mut(l + 1);
            let x = &head[l][..rows * fan_in];
            let y: &mut [S] = if l + 1 == depth {
                &mut ws.logits[..rows * fan_out]
            } else {
                &mut tail[0][..rows * fan_out]
            };
            S::gemm(
                rows,
                fan_in,
                fan_out,
                S::one(),
                x,
                (fan_in as isize, 1),
                &self.weights[l],
                (1, fan_in as isize),
                S::zero(),
                y,
                (fan_out as isize, 1),
            );
            for row in y.chunks_exact_mut(fan_out) {
                row.iter_mut().zip(&layer.b).for_each(|(v, &b)| *v += b);
            }
            if l + 1 < depth {
                y.iter_mut().for_each(|v| *v = v.max(S::zero()));
                if let Some(key) = self.dropout_active() {
                    let mut rng = rng::stream(key, &[domain::DROPOUT, block as u64, l as u64]);
                    let keep = 1.0 - arch.dropout;
                    let scale = S::one() / self.keep;
                    for v in y.iter_mut() {
                        if rng.random::<f64>() < keep {
                            *v *= scale;
                        } else {
                            *v = S::zero();
                        }
                    }
                }
            }
        }
        rows
    }

    fn accumulate(&self, batch: &Batch<S>, (first, last): (usize, usize), parameters: bool) -> Accumulator<S> {
        let arch = &self.model.arch;
        let mut acc = Accumulator {
            weights: if parameters {
                self.weights.iter().map(|w| vec![S::zero(); w.len()]).collect()
            } else {
                Vec::new()
            },
            biases: if parameters {
                self.model.layers.iter().map(|l| vec![S::zero(); l.fan_out]).collect()
            } else {
                Vec::new()
            },
            codes: vec![vec![S::zero(); arch.latent_dim]; batch.codes.len()],
            loss_sum: S::zero(),
        };
        let inv_n = S::one() / S::from_usize_lossy(batch.len());
        let relu_scale = if self.dropout_active().is_some() { S::one() / self.keep } else { S::one() };
        let c = arch.classes;
        let mut ws = self.workspace();

        for block in first..last {
            let rows = self.forward_block(batch, block, &mut ws);
            let start = block * BLOCK;

            // dL/dlogits = (softmax − onehot) / n
            for r in 0..rows {
                let logits = &ws.logits[r * c..(r + 1) * c];
                let target = batch.targets[start + r];
                let lse = log_sum_exp(logits);
                acc.loss_sum += lse - logits[target];
                let delta = &mut ws.delta[r * c..(r + 1) * c];
                for (j, (d, &z)) in delta.iter_mut().zip(logits).enumerate() {
                    let p = (z - lse).exp();
                    *d = (if j == target { p - S::one() } else { p }) * inv_n;
                }
            }

            for l in (0..self.model.layers.len()).rev() {
                let layer = &self.model.layers[l];
                let (fan_in, fan_out) = (layer.fan_in, layer.fan_out);
                let x = &ws.acts[l][..rows * fan_in];
                let dy = &ws.delta[..rows * fan_out];
                if parameters {
                    // dW += dYᵀ X
                    S::gemm(
                        fan_out,
                        rows,
                        fan_in,
                        S::one(),
                        dy,
                        (1, fan_out as isize),
                        x,
                        (fan_in as isize, 1),
                        S::one(),
                        &mut acc.weights[l],
                        (fan_in as isize, 1),
                    );
                    let db = &mut acc.biases[l];
                    for row in dy.chunks_exact(fan_out) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                }
                // dX = dY W
                let dx = &mut ws.delta_in[..rows * fan_in];
                S::gemm(
                    rows,
                    fan_out,
                    fan_in,
                    S::one(),
                    dy,
                    (fan_out as isize, 1),
                    &self.weights[l],
                    (fan_in as isize, 1),
                    S::zero(),
                    dx,
                    (fan_in as isize, 1),
                );
                if l == 0 {
                    let d = arch.latent_dim;
                    for r in 0..rows {
                        let code = &mut acc.codes[batch.code_of_point[start + r]];
                        code.iter_mut()
                            .zip(&dx[r * fan_in..r * fan_in + d])
                            .for_each(|(a, &g)| *a += g);
                    }
                } else {
                    // through dropout and ReLU: the stored activation is
                    // positive exactly where the unit was kept and active
                    for (g, &a) in dx.iter_mut().zip(x) {
                        *g = if a > S::zero() { *g * relu_scale } else { S::zero() };
                    }
                    std::mem::swap(&mut ws.delta, &mut ws.delta_in);
                }
            }
        }
        acc
    }

    /// Maps effective-weight gradients onto `(v, g)` through the
    /// weight-norm chain rule.
    fn finish(&self, acc: Accumulator<S>, parameters: bool) -> Gradients<S> {
        let layers = if parameters {
            self.model
                .layers
                .iter()
                .zip(acc.weights)
                .zip(acc.biases)
                .map(|((layer, dw), db)| {
                    let mut dv = vec![S::zero(); dw.len()];
                    let mut dg = vec![S::zero(); layer.fan_out];
                    for (i, dgi) in dg.iter_mut().enumerate() {
                        let span = i * layer.fan_in..(i + 1) * layer.fan_in;
                        let v = &layer.v[span.clone()];
                        let norm = dot(v, v).sqrt();
                        if norm == S::zero() {
                            continue;
                        }
                        let dwi = &dw[span.clone()];
                        let proj = dot(dwi, v) / norm;
                        *dgi = proj;
                        let scale = layer.g[i] / norm;
                        for ((out, &d), &vv) in dv[span].iter_mut().zip(dwi).zip(v) {
                            *out = scale * (d - proj * vv / norm);
                        }
                    }
                    LayerGrads { v: dv, g: dg, b: db }
                })
                .collect()
        } else {
            Vec::new()
        };
        Gradients {
            layers,
            codes: acc.codes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coords::EncodedPoint;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_arch(depth: usize) -> Architecture {
        Architecture {
            latent_dim: 2,
            frequencies: 1,
            hidden: 5,
            depth,
            classes: 3,
            dropout: 0.2,
        }
    }

    fn random_batch(arch: &Architecture, n: usize, codes: usize, seed: u64) -> Batch<f64> {
        let mut rng = rng::stream(seed, &[99]);
        Batch {
            codes: (0..codes)
                .map(|_| (0..arch.latent_dim).map(|_| rng.random_range(-0.5..0.5)).collect())
                .collect(),
            code_of_point: (0..n).map(|i| i % codes).collect(),
            features: (0..n)
                .flat_map(|_| {
                    let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                    EncodedPoint::new(p, arch.frequencies).encoded
                })
                .collect(),
            width: arch.encoding_dim(),
            targets: (0..n).map(|_| rng.random_range(0..arch.classes)).collect(),
        }
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let model = MlpModel::<f64>::zeros(tiny_arch(3)).unwrap();
        let point = EncodedPoint::new([0.3, -0.2, 0.9], 1);
        let logits = model.forward(&[0.4, 1.0], &point.encoded, Mode::Eval).unwrap();
        assert_eq!(logits, vec![0.0; 3]);
        let logits = model.forward(&[0.4, 1.0], &point.encoded, Mode::Train(3)).unwrap();
        assert_eq!(logits, vec![0.0; 3]);
    }

    #[test]
    fn single_layer_is_affine_map() {
        // input = [z0, z1, sin πx, cos πx, sin πy, cos πy, sin πz, cos πz]
        let mut model = MlpModel::<f64>::zeros(Architecture { depth: 1, ..tiny_arch(1) }).unwrap();
        let layer = &mut model.layers[0];
        // row 0 picks z0 with scale 2, row 1 picks cos πx with scale 3,
        // row 2 direction (1, 1, 0, ...)/√2 with scale √2 -> z0 + z1
        layer.v[0] = 5.0;
        layer.g[0] = 2.0;
        layer.v[8 + 3] = 0.5;
        layer.g[1] = 3.0;
        layer.v[16] = 1.0;
        layer.v[17] = 1.0;
        layer.g[2] = 2f64.sqrt();
        layer.b = vec![0.5, -1.0, 0.25];
        let point = EncodedPoint::new([0.0, 0.5, 1.0], 1); // cos 0 = 1
        let logits = model.forward(&[0.7, -0.2], &point.encoded, Mode::Eval).unwrap();
        let expect = [2.0 * 0.7 + 0.5, 3.0 * 1.0 - 1.0, 0.7 - 0.2 + 0.25];
        for (a, e) in logits.iter().zip(expect) {
            assert!((a - e).abs() < 1e-14, "{logits:?}");
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = MlpModel::<f64>::init(tiny_arch(3), 5).unwrap();
        let point = EncodedPoint::new([0.1, 0.2, 0.3], 1);
        let a = model.forward(&[0.1, 0.2], &point.encoded, Mode::Eval).unwrap();
        let b = model.forward(&[0.1, 0.2], &point.encoded, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_bad_dimensions() {
        let model = MlpModel::<f64>::init(tiny_arch(2), 5).unwrap();
        assert!(model.forward(&[0.1], &[0.0; 6], Mode::Eval).is_err());
        assert!(model.forward(&[0.1, 0.2], &[0.0; 5], Mode::Eval).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_posterior(&[0.0f64; 10]);
        assert!(p.iter().all(|&x| (x - 0.1).abs() < 1e-15));

        let p = softmax_posterior(&[1000.0f64, 0.0]);
        assert!(p[0].is_finite() && (p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);

        let a = softmax_posterior(&[0.3f64, -1.2, 2.0]);
        let b = softmax_posterior(&[100.3f64, 98.8, 102.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&[0.0f64; 10], 3).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-15);

        assert_eq!(cross_entropy(&[0.0f64, -1e6], 0).unwrap(), 0.0);

        let ce = cross_entropy(&[2.0f64, 0.0], 0).unwrap();
        assert!((ce - (1.0 + (-2f64).exp()).ln()).abs() < 1e-15);
        assert!((ce - 0.126928).abs() < 1e-6);

        assert!(cross_entropy(&[0.0f64, 1.0], 2).is_err());
    }

    #[test]
    fn gradient_vanishes_at_convex_minimum() {
        // one layer, three copies of one point with targets spread evenly:
        // equal logits are optimal and zero scales and biases provide them
        let arch = Architecture { depth: 1, ..tiny_arch(1) };
        let mut model = MlpModel::<f64>::zeros(arch.clone()).unwrap();
        model.layers[0].v.iter_mut().for_each(|v| *v = 1.0);
        let mut batch = random_batch(&arch, 3, 1, 4);
        let row = batch.features[..batch.width].to_vec();
        batch.features = row.repeat(3);
        batch.targets = vec![0, 1, 2];
        let (grads, _) = model.backward(&batch, Mode::Eval, BackwardOptions::default()).unwrap();
        for t in grads.tensors() {
            assert!(t.iter().all(|x| x.abs() < 1e-8));
        }
        assert!(grads.codes[0].iter().all(|x| x.abs() < 1e-8));
    }

    #[test]
    fn shared_latent_gradient_is_sum_of_point_gradients() {
        let arch = tiny_arch(2);
        let model = MlpModel::<f64>::init(arch.clone(), 8).unwrap();
        let batch = random_batch(&arch, 2, 1, 9);
        let (joint, _) = model.backward(&batch, Mode::Eval, BackwardOptions::default()).unwrap();
        let mut summed = vec![0.0; arch.latent_dim];
        for i in 0..2 {
            let single = Batch {
                codes: batch.codes.clone(),
                code_of_point: vec![0],
                features: batch.features[i * batch.width..(i + 1) * batch.width].to_vec(),
                width: batch.width,
                targets: vec![batch.targets[i]],
            };
            let (g, _) = model.backward(&single, Mode::Eval, BackwardOptions::default()).unwrap();
            // mean over 2 points = half the sum of single-point gradients
            summed.iter_mut().zip(&g.codes[0]).for_each(|(a, b)| *a += b / 2.0);
        }
        for (a, b) in joint.codes[0].iter().zip(&summed) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn workers_do_not_change_losses_or_shapes() {
        let arch = Architecture { hidden: 16, ..tiny_arch(3) };
        let model = MlpModel::<f64>::init(arch.clone(), 1).unwrap();
        let batch = random_batch(&arch, 3 * BLOCK + 17, 4, 2);
        let one = model.backward(&batch, Mode::Train(5), BackwardOptions { parameters: true, workers: 1 }).unwrap();
        let three = model.backward(&batch, Mode::Train(5), BackwardOptions { parameters: true, workers: 3 }).unwrap();
        assert!((one.1 - three.1).abs() < 1e-13);
        for (a, b) in one.0.tensors().iter().zip(three.0.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-13);
            }
        }
        let again = model.backward(&batch, Mode::Train(5), BackwardOptions { parameters: true, workers: 3 }).unwrap();
        assert_eq!(three, again);
    }

    #[test]
    fn latent_only_backward_matches_full() {
        let arch = tiny_arch(3);
        let model = MlpModel::<f64>::init(arch.clone(), 1).unwrap();
        let batch = random_batch(&arch, 40, 2, 3);
        let full = model.backward(&batch, Mode::Eval, BackwardOptions::default()).unwrap();
        let lat = model.backward(&batch, Mode::Eval, BackwardOptions { parameters: false, workers: 1 }).unwrap();
        assert!(lat.0.layers.is_empty());
        assert_eq!(full.0.codes, lat.0.codes);
        assert_eq!(full.1, lat.1);
    }

    #[test]
    fn dropout_preserves_expected_activation() {
        // hidden units are the constants relu(b) = b; the output layer is
        // the identity, so each logit reads one dropped-out hidden unit
        let arch = Architecture {
            latent_dim: 2,
            frequencies: 1,
            hidden: 4,
            depth: 2,
            classes: 4,
            dropout: 0.2,
        };
        let mut model = MlpModel::<f64>::zeros(arch).unwrap();
        model.layers[0].b = vec![0.5, 1.0, 1.5, 2.0];
        for i in 0..4 {
            model.layers[1].v[i * 4 + i] = 1.0;
            model.layers[1].g[i] = 1.0;
        }
        let point = EncodedPoint::new([0.2, -0.4, 0.6], 1);
        let z = [0.3, 0.8];
        let eval = model.forward(&z, &point.encoded, Mode::Eval).unwrap();
        assert_eq!(eval, vec![0.5, 1.0, 1.5, 2.0]);
        let n = 100_000;
        let batch = Batch {
            codes: vec![z.to_vec()],
            code_of_point: vec![0; n],
            features: point.encoded.repeat(n),
            width: point.encoded.len(),
            targets: vec![0; n],
        };
        let logits = model.logits(&batch, Mode::Train(1)).unwrap();
        for (c, &e) in eval.iter().enumerate() {
            let mean = logits.iter().map(|l| l[c]).sum::<f64>() / n as f64;
            assert!((mean - e).abs() <= 0.01 * e, "unit {c}: {mean} vs {e}");
        }
        let dropped = logits.iter().filter(|l| l[0] == 0.0).count() as f64 / n as f64;
        assert!((dropped - 0.2).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn direction_scale_leaves_output_unchanged(seed in any::<u64>(), scale in 0.01f64..100.0, row in 0usize..5) {
            let arch = tiny_arch(3);
            let model = MlpModel::<f64>::init(arch.clone(), seed).unwrap();
            let mut scaled = model.clone();
            let fan_in = scaled.layers[1].fan_in;
            scaled.layers[1].v[row * fan_in..(row + 1) * fan_in].iter_mut().for_each(|v| *v *= scale);
            let point = EncodedPoint::new([0.5, 0.1, -0.7], 1);
            let a = model.forward(&[0.2, -0.3], &point.encoded, Mode::Eval).unwrap();
            let b = scaled.forward(&[0.2, -0.3], &point.encoded, Mode::Eval).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }

        #[test]
        fn softmax_sums_to_one_and_matches_fused_ce(
            logits in proptest::collection::vec(-50.0f64..50.0, 2..12),
            t in 0usize..12,
        ) {
            let p = softmax_posterior(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let t = t % logits.len();
            let ce = cross_entropy(&logits, t).unwrap();
            prop_assert!(ce >= 0.0);
            prop_assert!((ce - (-p[t].ln())).abs() <= 1e-12 * ce.abs().max(1.0));
        }
    }
}
