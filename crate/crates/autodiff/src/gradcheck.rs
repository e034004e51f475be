//! Central finite-difference gradient verification.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors: `|a - n| / max(|a|, |n|, floor)`.
pub const DEFAULT_REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares coordinate-wise analytic and numeric gradient vectors.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], floor: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        coordinates: analytic.len(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = relative_error(a, n, floor);
        report.max_abs_error = report.max_abs_error.max((a - n).abs());
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report
}

/// Central differences `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)`.
pub fn numeric_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    point: &Tensor<T>,
    eps: T,
) -> Result<Vec<f64>> {
    let mut x = point.clone();
    let mut out = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let fp = f(&x)?;
        x.data_mut()[i] = orig - eps;
        let fm = f(&x)?;
        x.data_mut()[i] = orig;
        out.push(((fp - fm) / (eps + eps)).to_f64().unwrap_or(f64::NAN));
    }
    Ok(out)
}

/// Checks the gradient of a scalar function built on a tape against
/// central finite differences at `point`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, eps: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_with_floor(f, point, eps, DEFAULT_REL_FLOOR)
}

pub fn grad_check_with_floor<T, F>(f: F, point: &Tensor<T>, eps: T, floor: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.constant(point.clone());
    let loss = f(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = match grads.get(x) {
        Some(g) => g.data().iter().map(|v| v.to_f64().unwrap()).collect(),
        None => vec![0.0; point.numel()],
    };
    let numeric = numeric_gradient(
        |p| {
            let mut t = Tape::new();
            let x = t.constant(p.clone());
            let l = f(&mut t, x)?;
            Ok(t.value(l).item())
        },
        point,
        eps,
    )?;
    Ok(compare_gradients(&analytic, &numeric, floor))
}
