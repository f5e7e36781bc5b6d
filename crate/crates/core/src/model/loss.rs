use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::motion::{forward_kinematics_tape, Skeleton, CONTACT_OFFSET, FOOT_JOINTS, JOINTS, POSE_DIM, ROOT_OFFSET};
use crate::numerics::{flops, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub simple: f64,
    pub vel: f64,
    pub fk: f64,
    pub contact: f64,
    pub dist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { simple: 0.636, vel: 2.964, fk: 0.646, contact: 10.942, dist: 100.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [self.simple, self.vel, self.fk, self.contact, self.dist];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(ModelError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.simple, self.vel, self.fk, self.contact, self.dist]
    }
}

pub const LOSS_NAMES: [&str; 5] = ["simple", "vel", "fk", "contact", "dist"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub simple: f64,
    pub vel: f64,
    pub fk: f64,
    pub contact: f64,
    pub dist: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 5] {
        [self.simple, self.vel, self.fk, self.contact, self.dist]
    }

    /// Weighted sum, accumulated left to right.
    pub fn weighted(components: [f64; 5], w: &LossWeights) -> Self {
        let total = components.iter().zip(w.as_array()).fold(0.0, |acc, (c, w)| acc + c * w);
        let [simple, vel, fk, contact, dist] = components;
        Self { simple, vel, fk, contact, dist, total }
    }
}

/// The five training terms on the tape. `x_hat` and `x0` are `[L, N, 151]`;
/// returns the weighted total and the per-term values.
pub fn compute_losses_tape<'g>(
    x_hat: Var<'g>,
    x0: &Tensor,
    skeleton: &Skeleton,
    w: &LossWeights,
) -> Result<(Var<'g>, LossBreakdown), ModelError> {
    let _scope = flops::scope("loss");
    let g = x_hat.graph();
    let shape = x_hat.shape();
    if shape != x0.shape() || shape.len() != 3 || shape[2] != POSE_DIM {
        return Err(ModelError::Shape(format!("prediction {shape:?} vs target {:?}", x0.shape())));
    }
    let (l, n) = (shape[0], shape[1]);
    let target = g.constant(x0.clone());
    let diff = x_hat.sub(target)?;
    let simple = diff.square()?.mean()?;

    let zero = || g.constant(Tensor::scalar(0.0));
    let vel = if l > 1 { diff.narrow(0, 1, l - 1)?.sub(diff.narrow(0, 0, l - 1)?)?.square()?.mean()? } else { zero() };

    let fk_hat = forward_kinematics_tape(x_hat.reshape(&[l * n, POSE_DIM])?, skeleton)?;
    let fk_true = forward_kinematics_tape(target.reshape(&[l * n, POSE_DIM])?, skeleton)?;
    let fk = fk_hat.sub(fk_true)?.square()?.mean()?;

    let contact = if l > 1 {
        let joints = fk_hat.reshape(&[l, n, JOINTS, 3])?;
        let feet: Vec<Var<'g>> = FOOT_JOINTS.iter().map(|&j| joints.narrow(2, j, 1)).collect::<Result<_, _>>()?;
        let feet = g.concat(&feet, 2)?;
        let v = feet.narrow(0, 1, l - 1)?.sub(feet.narrow(0, 0, l - 1)?)?;
        let gate = x_hat.narrow(2, CONTACT_OFFSET, 4)?.narrow(0, 0, l - 1)?.reshape(&[l - 1, n, 4, 1])?;
        v.mul(gate)?.square()?.sum()?.scale(1.0 / ((l - 1) * n) as f64)?
    } else {
        zero()
    };

    let dist = if n > 1 {
        // Relative-position error of a pair is the difference of the two
        // dancers' root errors.
        let err = diff.narrow(2, ROOT_OFFSET, 3)?.transpose(0, 1)?.reshape(&[n, l * 3])?;
        let mut entries = Vec::new();
        let mut pairs = 0;
        for i in 0..n {
            for j in i + 1..n {
                entries.push((pairs, i, 1.0));
                entries.push((pairs, j, -1.0));
                pairs += 1;
            }
        }
        let rel = err.sparse_mix(Arc::from(entries), pairs)?;
        rel.square()?.sum()?.scale(1.0 / (l * pairs) as f64)?
    } else {
        zero()
    };

    let terms = [simple, vel, fk, contact, dist];
    let mut total = terms[0].scale(w.simple)?;
    for (t, wi) in terms.iter().zip(w.as_array()).skip(1) {
        total = total.add(t.scale(wi)?)?;
    }
    let values = terms.map(|t| t.item());
    let mut report = LossBreakdown::weighted(values, w);
    report.total = total.item();
    Ok((total, report))
}

/// Value-only version of [`compute_losses_tape`].
pub fn compute_losses(
    x_hat: &Tensor,
    x0: &Tensor,
    skeleton: &Skeleton,
    w: &LossWeights,
) -> Result<LossBreakdown, ModelError> {
    let g = Graph::new();
    Ok(compute_losses_tape(g.constant(x_hat.clone()), x0, skeleton, w)?.1)
}
