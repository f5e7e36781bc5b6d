//! Finite-difference verification of reverse-mode gradients.

use super::{Graph, NumericsError, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, in units of `max(1, |f(x)|)`.
/// Central differences of a function of size `|f|` carry roughly
/// `eps * |f| / FD_STEP` of rounding error, so coordinates whose gradient is
/// below the floor are judged against the function scale instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error (or the first non-finite one).
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
    pub non_finite: bool,
}

/// Relative error with the denominator floored at `floor`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare a gradient routine against central differences of `value`.
///
/// Only the coordinates in `coords` are probed when given; otherwise all.
pub fn grad_check_with(
    value: impl Fn(&Tensor) -> Result<f64, NumericsError>,
    gradient: impl Fn(&Tensor) -> Result<Tensor, NumericsError>,
    input: &Tensor,
    tolerance: f64,
    coords: Option<&[usize]>,
) -> Result<CheckReport, NumericsError> {
    if tolerance <= 0.0 {
        return Err(NumericsError::Invalid("tolerance must be positive".into()));
    }
    let analytic = gradient(input)?;
    if analytic.shape() != input.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "grad_check",
            lhs: input.shape().to_vec(),
            rhs: analytic.shape().to_vec(),
        });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..input.len()).collect();
            &all
        }
    };
    let mut report = CheckReport { max_rel_err: 0.0, worst_index: 0, checked: 0, passed: true, non_finite: false };
    let base = input.to_vec();
    let floor = REL_FLOOR * value(input)?.abs().max(1.0);
    for &i in coords {
        let mut plus = base.clone();
        plus[i] += FD_STEP;
        let mut minus = base.clone();
        minus[i] -= FD_STEP;
        let fp = value(&Tensor::from_parts(input.shape().to_vec(), plus))?;
        let fm = value(&Tensor::from_parts(input.shape().to_vec(), minus))?;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        report.checked += 1;
        if !numeric.is_finite() || !a.is_finite() {
            report.non_finite = true;
            report.passed = false;
            report.worst_index = i;
            report.max_rel_err = f64::INFINITY;
            return Ok(report);
        }
        let e = rel_err(a, numeric, floor);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_err <= tolerance;
    Ok(report)
}

/// Check the tape gradient of a scalar-valued function built on a [`Graph`].
pub fn grad_check<F>(f: F, input: &Tensor, tolerance: f64) -> Result<CheckReport, NumericsError>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>, NumericsError>,
{
    grad_check_coords(f, input, tolerance, None)
}

pub fn grad_check_coords<F>(
    f: F,
    input: &Tensor,
    tolerance: f64,
    coords: Option<&[usize]>,
) -> Result<CheckReport, NumericsError>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>, NumericsError>,
{
    let value = |x: &Tensor| {
        let g = Graph::new();
        let out = f(&g, g.constant(x.clone()))?;
        Ok(out.value().item())
    };
    let gradient = |x: &Tensor| {
        let g = Graph::new();
        let v = g.param(x.clone());
        let out = f(&g, v)?;
        let grads = g.backward(out)?;
        Ok(grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
    };
    grad_check_with(value, gradient, input, tolerance, coords)
}
