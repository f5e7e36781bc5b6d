use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::TemporalError;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Frame `l` sees `l - w ..= l + w`.
    #[default]
    Symmetric,
    /// Frame `l` sees `l - w ..= l`.
    Causal,
}

/// Key window `(lo, hi)` (inclusive) for query `l` over `len` keys.
pub fn window(l: usize, len: usize, radius: usize, mode: MaskMode) -> (usize, usize) {
    let lo = l.saturating_sub(radius);
    let hi = match mode {
        MaskMode::Symmetric => l.saturating_add(radius).min(len - 1),
        MaskMode::Causal => l,
    };
    (lo, hi)
}

pub fn windows(len: usize, radius: usize, mode: MaskMode) -> Arc<[(usize, usize)]> {
    (0..len).map(|l| window(l, len, radius, mode)).collect()
}

/// Additive `L x L` mask: 0 inside the window, `-inf` outside.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMask {
    len: usize,
    radius: usize,
    mode: MaskMode,
    values: Tensor,
}

impl AlignmentMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn is_open(&self, l: usize, m: usize) -> bool {
        let (lo, hi) = window(l, self.len, self.radius, self.mode);
        (lo..=hi).contains(&m)
    }

    pub fn windows(&self) -> Arc<[(usize, usize)]> {
        windows(self.len, self.radius, self.mode)
    }

    /// `true` where the mask blocks attention, row-major.
    pub fn blocked(&self) -> Arc<[bool]> {
        self.values.data().iter().map(|&v| v != 0.0).collect()
    }
}

pub fn build_alignment_mask(len: usize, radius: i64, mode: MaskMode) -> Result<AlignmentMask, TemporalError> {
    if len == 0 {
        return Err(TemporalError::Invalid("mask length must be at least 1".into()));
    }
    let radius = usize::try_from(radius)
        .map_err(|_| TemporalError::Invalid(format!("window radius must be non-negative, got {radius}")))?;
    let values = Tensor::from_fn(&[len, len], |i| {
        let (l, m) = (i / len, i % len);
        let (lo, hi) = window(l, len, radius, mode);
        if (lo..=hi).contains(&m) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    });
    Ok(AlignmentMask { len, radius, mode, values })
}
