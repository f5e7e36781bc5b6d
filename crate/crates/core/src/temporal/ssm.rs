//! Diagonal state space layer: zero-order-hold discretization, recurrent
//! scan and the equivalent causal convolution kernel.

use std::str::FromStr;

use super::TemporalError;
use crate::numerics::{NumericsError, Tensor, Var};

/// Below this `|delta * a|` the input matrix uses its first-order limit.
pub const ZOH_LIMIT: f64 = 1e-8;

/// Continuous parameters of a per-channel diagonal SSM.
///
/// `a`, `b`, `c` are `[D, S]` (`a <= 0`); `delta` is `[D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub delta: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsmMode {
    Scan,
    Kernel,
}

impl FromStr for SsmMode {
    type Err = TemporalError;

    fn from_str(s: &str) -> Result<Self, TemporalError> {
        match s {
            "scan" => Ok(SsmMode::Scan),
            "kernel" => Ok(SsmMode::Kernel),
            other => Err(TemporalError::Invalid(format!("unknown SSM mode {other:?} (expected scan or kernel)"))),
        }
    }
}

/// Zero-order hold for diagonal `a`: `abar = exp(delta a)`,
/// `bbar = (exp(delta a) - 1) / a * b`, or `delta b` when `|delta a|` is tiny.
pub fn ssm_discretize(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>), TemporalError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(TemporalError::Invalid(format!("step size must be positive, got {delta}")));
    }
    if a.len() != b.len() {
        return Err(TemporalError::Invalid(format!("A has {} entries, B has {}", a.len(), b.len())));
    }
    if let Some(x) = a.iter().find(|x| !(**x <= 0.0)) {
        return Err(TemporalError::Invalid(format!("A entries must be non-positive, got {x}")));
    }
    let mut abar = Vec::with_capacity(a.len());
    let mut bbar = Vec::with_capacity(a.len());
    for (&ai, &bi) in a.iter().zip(b) {
        let z = delta * ai;
        abar.push(z.exp());
        bbar.push(if z.abs() < ZOH_LIMIT { delta * bi } else { z.exp_m1() / ai * bi });
    }
    Ok((abar, bbar))
}

fn discretized(p: &SsmParams) -> Result<(usize, usize, Vec<f64>, Vec<f64>), TemporalError> {
    let [d, s] = p.a.shape()[..] else {
        return Err(TemporalError::Invalid(format!("A must be [D, S], got {:?}", p.a.shape())));
    };
    if p.b.shape() != [d, s] || p.c.shape() != [d, s] || p.delta.shape() != [d] {
        return Err(TemporalError::Invalid("SSM parameter shapes disagree".into()));
    }
    let mut abar = Vec::with_capacity(d * s);
    let mut bbar = Vec::with_capacity(d * s);
    for ch in 0..d {
        let (ab, bb) = ssm_discretize(&p.a.data()[ch * s..][..s], &p.b.data()[ch * s..][..s], p.delta.data()[ch])?;
        abar.extend(ab);
        bbar.extend(bb);
    }
    Ok((d, s, abar, bbar))
}

/// Convolution kernel `K[k] = sum_s c_s abar_s^k bbar_s`, `[L, D]`.
pub fn ssm_kernel(p: &SsmParams, len: usize) -> Result<Tensor, TemporalError> {
    let (d, s, abar, bbar) = discretized(p)?;
    let mut k = vec![0.0; len * d];
    for ch in 0..d {
        for st in 0..s {
            let (a, cb) = (abar[ch * s + st], p.c.data()[ch * s + st] * bbar[ch * s + st]);
            let mut pow = 1.0;
            for step in 0..len {
                k[step * d + ch] += cb * pow;
                pow *= a;
            }
        }
    }
    Ok(Tensor::from_parts(vec![len, d], k))
}

/// Run the SSM over `x: [L, D]` from a zero state.
pub fn ssm_apply(x: &Tensor, p: &SsmParams, mode: SsmMode) -> Result<Tensor, TemporalError> {
    let [len, d] = x.shape()[..] else {
        return Err(TemporalError::Invalid(format!("SSM input must be [L, D], got {:?}", x.shape())));
    };
    if p.a.shape().first() != Some(&d) {
        return Err(TemporalError::Invalid(format!("input has {d} channels, parameters {:?}", p.a.shape())));
    }
    let xd = x.data();
    let mut y = vec![0.0; len * d];
    match mode {
        SsmMode::Scan => {
            let (_, s, abar, bbar) = discretized(p)?;
            let mut h = vec![0.0; s];
            for ch in 0..d {
                h.iter_mut().for_each(|v| *v = 0.0);
                for l in 0..len {
                    let xi = xd[l * d + ch];
                    let mut acc = 0.0;
                    for st in 0..s {
                        let i = ch * s + st;
                        h[st] = abar[i] * h[st] + bbar[i] * xi;
                        acc += p.c.data()[i] * h[st];
                    }
                    y[l * d + ch] = acc;
                }
            }
        }
        SsmMode::Kernel => {
            let k = ssm_kernel(p, len)?;
            for l in 0..len {
                for j in 0..=l {
                    for ch in 0..d {
                        y[l * d + ch] += k.data()[j * d + ch] * xd[(l - j) * d + ch];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![len, d], y))
}

/// Tape version used inside the temporal layers, with
/// `A = -exp(a_log)` and `delta = exp(log_delta)` so both stay in range.
///
/// `x` is `[B, L, D]`; `a_log`, `b`, `c` are `[D, S]`; `log_delta` is `[D, 1]`.
pub fn ssm_layer<'g>(
    x: Var<'g>,
    a_log: Var<'g>,
    log_delta: Var<'g>,
    b: Var<'g>,
    c: Var<'g>,
) -> Result<Var<'g>, NumericsError> {
    let a = a_log.exp()?.neg()?;
    let abar = log_delta.exp()?.mul(a)?.exp()?;
    let bbar = abar.add_scalar(-1.0)?.div(a)?.mul(b)?;
    x.graph().ssm_scan(x, abar, bbar, c)
}
