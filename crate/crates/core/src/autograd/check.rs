//! Central finite-difference gradients for checking the tape.

use ndarray::Array2;

use super::{ParamId, ParamStore};

/// Denominator floor for relative errors, so gradients that are exactly zero
/// compare by absolute difference instead of dividing by zero.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Central-difference gradient of `f` with respect to every entry of `param`.
pub fn numeric_param_grad(
    store: &ParamStore,
    param: ParamId,
    step: f64,
    f: impl Fn(&ParamStore) -> f64,
) -> Array2<f64> {
    let mut work = store.clone();
    let dim = store.get(param).dim();
    let mut out = Array2::zeros(dim);
    for r in 0..dim.0 {
        for c in 0..dim.1 {
            let orig = work.get(param)[[r, c]];
            work.get_mut(param)[[r, c]] = orig + step;
            let plus = f(&work);
            work.get_mut(param)[[r, c]] = orig - step;
            let minus = f(&work);
            work.get_mut(param)[[r, c]] = orig;
            out[[r, c]] = (plus - minus) / (2.0 * step);
        }
    }
    out
}

/// Central-difference gradient of `f` with respect to a free input matrix.
pub fn numeric_input_grad(
    input: &Array2<f64>,
    step: f64,
    f: impl Fn(&Array2<f64>) -> f64,
) -> Array2<f64> {
    let mut work = input.clone();
    let mut out = Array2::zeros(input.dim());
    for idx in 0..input.len() {
        let (r, c) = (idx / input.ncols(), idx % input.ncols());
        let orig = work[[r, c]];
        work[[r, c]] = orig + step;
        let plus = f(&work);
        work[[r, c]] = orig - step;
        let minus = f(&work);
        work[[r, c]] = orig;
        out[[r, c]] = (plus - minus) / (2.0 * step);
    }
    out
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// `||a - n|| / max(||a||, ||n||)` over whole tensors; robust to entries
/// that are zero up to finite-difference noise.
pub fn norm_rel_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim(), "gradient shape mismatch");
    let sq = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>();
    let diff = analytic - numeric;
    sq(&diff).sqrt() / sq(analytic).max(sq(numeric)).sqrt().max(REL_ERROR_FLOOR)
}

/// Largest entrywise relative error between two gradient matrices.
pub fn max_rel_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim(), "gradient shape mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| rel_error(*a, *n))
        .fold(0.0, f64::max)
}
