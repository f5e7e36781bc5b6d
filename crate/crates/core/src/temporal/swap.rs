//! Swap-mode code: how the dancers' left-right and front-back rank order
//! looks at the end of a segment.

use super::TemporalError;
use crate::numerics::{NumericsError, Var};

/// Largest group the embedding table is laid out for.
pub const MAX_DANCERS: usize = 5;
/// Rows in the swap embedding table: one per (slot, dancer id).
pub const SWAP_TABLE_ROWS: usize = 2 * MAX_DANCERS * MAX_DANCERS;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwapCode {
    /// Dancer ids ordered by end x, then dancer ids ordered by end y.
    pub index_sequence: Vec<usize>,
}

fn argsort(vals: impl Iterator<Item = f64>) -> Vec<usize> {
    let v: Vec<f64> = vals.collect();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

/// Rank dancers at the segment end along x and along y (ties by id).
pub fn swap_mode_encode(start: &[[f64; 2]], end: &[[f64; 2]]) -> Result<SwapCode, TemporalError> {
    if start.len() != end.len() || end.is_empty() {
        return Err(TemporalError::Invalid(format!(
            "swap code needs matching dancer counts, got {} and {}",
            start.len(),
            end.len()
        )));
    }
    if end.len() > MAX_DANCERS {
        return Err(TemporalError::Invalid(format!("at most {MAX_DANCERS} dancers, got {}", end.len())));
    }
    let mut index_sequence = argsort(end.iter().map(|p| p[0]));
    index_sequence.extend(argsort(end.iter().map(|p| p[1])));
    Ok(SwapCode { index_sequence })
}

impl SwapCode {
    pub fn identity(n: usize) -> Self {
        Self { index_sequence: (0..n).chain(0..n).collect() }
    }

    /// Table rows looked up for this code: slot `s` holding dancer `id`
    /// reads row `s * MAX_DANCERS + id`.
    pub fn table_rows(&self) -> Vec<usize> {
        self.index_sequence.iter().enumerate().map(|(slot, &id)| slot * MAX_DANCERS + id).collect()
    }

    /// Mean of the looked-up table rows, `[d]`.
    pub fn embed<'g>(&self, table: Var<'g>) -> Result<Var<'g>, NumericsError> {
        let d = table.shape()[1];
        let rows = self.table_rows();
        let n = rows.len();
        table.gather(&rows)?.sum_axis(0)?.reshape(&[d])?.scale(1.0 / n as f64)
    }
}
