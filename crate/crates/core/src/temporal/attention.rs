//! Two-branch differential self-attention and windowed music cross-attention.

use std::sync::Arc;

use super::mask::AlignmentMask;
use super::TemporalError;
use crate::numerics::{NumericsError, Var};

type Result<T> = std::result::Result<T, NumericsError>;

/// Projections of one differential attention layer.
///
/// `wq`, `wk`, `wv` map `d -> 2d`; `wo` maps `2d -> d`; `lambda` has shape `[1]`.
#[derive(Clone, Copy, Debug)]
pub struct DiffAttnWeights<'g> {
    pub wq: Var<'g>,
    pub wk: Var<'g>,
    pub wv: Var<'g>,
    pub wo: Var<'g>,
    pub lambda: Var<'g>,
}

/// Query/key/value projections of one cross-attention layer, all `d -> d`.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttnWeights<'g> {
    pub wq: Var<'g>,
    pub wk: Var<'g>,
    pub wv: Var<'g>,
    pub wo: Var<'g>,
}

/// Accept `[L, d]` or `[B, L, d]`; returns the batched view and whether to
/// drop the batch axis again.
fn batched(x: Var<'_>) -> Result<(Var<'_>, bool)> {
    let s = x.shape();
    match s.len() {
        2 => Ok((x.reshape(&[1, s[0], s[1]])?, true)),
        3 => Ok((x, false)),
        _ => Err(NumericsError::Invalid(format!("attention input must be [L, d] or [B, L, d], got {s:?}"))),
    }
}

fn unbatch(x: Var<'_>, squeeze: bool) -> Result<Var<'_>> {
    if squeeze {
        let s = x.shape();
        x.reshape(&s[1..])
    } else {
        Ok(x)
    }
}

fn check_lambda(w: &DiffAttnWeights<'_>) -> Result<()> {
    if w.lambda.shape() != [1] || !w.lambda.item().is_finite() {
        return Err(NumericsError::Invalid("lambda must be one finite scalar".into()));
    }
    Ok(())
}

/// Split `x W` into two `d`-wide halves.
fn halves<'g>(x: Var<'g>, w: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let p = x.matmul(w)?;
    let d = p.shape()[2] / 2;
    let parts = p.split(2, &[d, d])?;
    Ok((parts[0], parts[1]))
}

/// `(softmax(Q1 K1^T / sqrt d) - lambda softmax(Q2 K2^T / sqrt d)) V`, projected.
///
/// Query `l` sees keys `windows[l]`. With `prune_tau > 0` entries of the
/// difference map below `tau` in magnitude are zeroed (dense path).
pub fn diff_attention<'g>(
    x: Var<'g>,
    w: &DiffAttnWeights<'g>,
    windows: Arc<[(usize, usize)]>,
    prune_tau: f64,
) -> Result<Var<'g>> {
    check_lambda(w)?;
    let (x, squeeze) = batched(x)?;
    let out = if prune_tau > 0.0 {
        let (map, v) = diff_map(x, w, &windows)?;
        let keep_small: Arc<[bool]> = map.value().data().iter().map(|p| p.abs() < prune_tau).collect();
        map.masked_fill(keep_small, 0.0)?.matmul(v)?
    } else {
        let d = x.shape()[2];
        let scale = 1.0 / (d as f64).sqrt();
        let (q1, q2) = halves(x, w.wq)?;
        let (k1, k2) = halves(x, w.wk)?;
        let v = x.matmul(w.wv)?;
        let g = x.graph();
        let a1 = g.attention(q1, k1, v, windows.clone(), scale)?;
        let a2 = g.attention(q2, k2, v, windows, scale)?;
        a1.sub(a2.mul(w.lambda)?)?
    };
    unbatch(out.matmul(w.wo)?, squeeze)
}

/// Dense difference map `A1 - lambda A2` (`[B, L, L]`, zero outside the
/// windows) together with the value projection.
pub fn diff_map<'g>(x: Var<'g>, w: &DiffAttnWeights<'g>, windows: &[(usize, usize)]) -> Result<(Var<'g>, Var<'g>)> {
    let (x, _) = batched(x)?;
    let [b, l, d] = x.shape()[..] else { unreachable!() };
    if windows.len() != l {
        return Err(NumericsError::Invalid(format!("{} windows for {l} frames", windows.len())));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let blocked: Arc<[bool]> = (0..b * l * l)
        .map(|i| {
            let (r, c) = ((i / l) % l, i % l);
            !(windows[r].0..=windows[r].1).contains(&c)
        })
        .collect();
    let branch = |q: Var<'g>, k: Var<'g>| -> Result<Var<'g>> {
        q.matmul(k.transpose(1, 2)?)?.scale(scale)?.masked_fill(blocked.clone(), f64::NEG_INFINITY)?.softmax()
    };
    let (q1, q2) = halves(x, w.wq)?;
    let (k1, k2) = halves(x, w.wk)?;
    let map = branch(q1, k1)?.sub(branch(q2, k2)?.mul(w.lambda)?)?;
    Ok((map, x.matmul(w.wv)?))
}

fn check_cross(x: &[usize], music: &[usize], mask: &AlignmentMask) -> std::result::Result<(), TemporalError> {
    if x.len() != 3 || music.len() != 2 || x[1] != music[0] || mask.len() != x[1] {
        return Err(TemporalError::Invalid(format!(
            "cross-attention needs x [B, L, d], music [L, d] and a length-L mask; got {x:?}, {music:?}, mask {}",
            mask.len()
        )));
    }
    Ok(())
}

/// Windowed `softmax(Q K_m^T / sqrt d + mask) V_m`, projected; keys outside
/// the window are never read.
pub fn masked_cross_attention<'g>(
    x: Var<'g>,
    music: Var<'g>,
    w: &CrossAttnWeights<'g>,
    mask: &AlignmentMask,
) -> std::result::Result<Var<'g>, TemporalError> {
    check_cross(&x.shape(), &music.shape(), mask)?;
    let [l, d] = music.shape()[..] else { unreachable!() };
    let q = x.matmul(w.wq)?;
    let m = music.reshape(&[1, l, d])?;
    let (k, v) = (m.matmul(w.wk)?, m.matmul(w.wv)?);
    let out = x.graph().attention(q, k, v, mask.windows(), 1.0 / (d as f64).sqrt())?;
    Ok(out.matmul(w.wo)?)
}

/// Same result through dense generic ops; also returns the `[B, L, L]`
/// attention weights.
pub fn masked_cross_attention_dense<'g>(
    x: Var<'g>,
    music: Var<'g>,
    w: &CrossAttnWeights<'g>,
    mask: &AlignmentMask,
) -> std::result::Result<(Var<'g>, Var<'g>), TemporalError> {
    check_cross(&x.shape(), &music.shape(), mask)?;
    let b = x.shape()[0];
    let [l, d] = music.shape()[..] else { unreachable!() };
    let q = x.matmul(w.wq)?;
    let (k, v) = (music.matmul(w.wk)?, music.matmul(w.wv)?);
    let blocked = mask.blocked();
    let blocked: Arc<[bool]> = (0..b).flat_map(|_| blocked.iter().copied()).collect();
    let weights = q
        .matmul(k.transpose(0, 1)?)?
        .scale(1.0 / (d as f64).sqrt())?
        .masked_fill(blocked, f64::NEG_INFINITY)?
        .softmax()?;
    debug_assert_eq!(weights.shape(), [b, l, l]);
    Ok((weights.matmul(v)?.matmul(w.wo)?, weights))
}
