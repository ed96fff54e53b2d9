//! Central finite-difference checks of the analytic gradients.

use crate::error::Result;
use crate::mlp::{BackwardOptions, Batch, MlpModel, Mode};
use crate::train::{objective_value, train_objective};

/// Denominator floor for relative errors, so entries with vanishing
/// gradient are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h) − f(x − h)) / 2h` for every coordinate of `x`.
pub fn central_differences(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Agreement statistics for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    /// `layer{l}.v`, `layer{l}.g`, `layer{l}.b` or `latent{i}`.
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl ClassReport {
    fn compare(name: String, analytic: &[f64], numeric: &[f64]) -> Self {
        let mut report = ClassReport {
            name,
            entries: analytic.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for (&a, &n) in analytic.iter().zip(numeric) {
            report.max_rel_error = report.max_rel_error.max(relative_error(a, n));
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
        }
        report
    }
}

/// Compares the analytic gradient of the per-point batch objective against
/// central differences, tensor by tensor. With `parameters` false only the
/// latent codes are checked (the restoration setting, network frozen).
pub fn check_objective(
    model: &MlpModel<f64>,
    batch: &Batch<f64>,
    reg_weight: f64,
    mode: Mode,
    parameters: bool,
    h: f64,
) -> Result<Vec<ClassReport>> {
    let options = BackwardOptions { parameters, workers: 1 };
    let (_, grads) = train_objective(model, batch, reg_weight, mode, options)?;
    let value = |m: &MlpModel<f64>, b: &Batch<f64>| {
        objective_value(m, b, reg_weight, mode).map(|o| o.per_point()).unwrap_or(f64::NAN)
    };

    let mut reports = Vec::new();
    if parameters {
        let names = ["v", "g", "b"];
        for (t, analytic) in grads.tensors().into_iter().enumerate() {
            let x = model.tensors()[t].to_vec();
            let numeric = central_differences(
                |probe| {
                    let mut m = model.clone();
                    m.tensors_mut()[t].copy_from_slice(probe);
                    value(&m, batch)
                },
                &x,
                h,
            );
            let name = format!("layer{}.{}", t / 3, names[t % 3]);
            reports.push(ClassReport::compare(name, analytic, &numeric));
        }
    }
    for (i, analytic) in grads.codes.iter().enumerate() {
        let numeric = central_differences(
            |probe| {
                let mut b = batch.clone();
                b.codes[i].copy_from_slice(probe);
                value(model, &b)
            },
            &batch.codes[i],
            h,
        );
        reports.push(ClassReport::compare(format!("latent{i}"), analytic, &numeric));
    }
    Ok(reports)
}
