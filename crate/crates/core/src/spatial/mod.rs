//! Per-frame dancer graphs and graph convolution.
//!
//! Closer dancers get heavier edges, each dancer keeps only its `k` strongest
//! edges, and the union of kept edges is degree-normalized. The graph is
//! built from root positions and enters the tape as a constant.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numerics::{flops, gaussian, BoundParams, NumericsError, ParamStore, RngStream, Tensor, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpatialError {
    #[error("non-finite position for dancer {0}")]
    NonFinitePosition(usize),
    #[error("adjacency is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("invalid adjacency: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// How pairs closer than `d_min` are handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProximityMode {
    /// Distance is clamped up to `d_min`, capping the weight.
    #[default]
    Clamp,
    /// The edge is removed.
    Drop,
}

/// Edges kept per dancer: a fixed count or a fraction of `N - 1` (rounded up).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopK {
    Count(usize),
    Fraction(f64),
}

impl Default for TopK {
    fn default() -> Self {
        TopK::Fraction(0.5)
    }
}

impl TopK {
    pub fn resolve(self, n: usize) -> usize {
        let others = n.saturating_sub(1);
        match self {
            TopK::Count(c) => c.min(others),
            TopK::Fraction(f) => ((f * others as f64).ceil().max(0.0) as usize).min(others),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    pub top_k: TopK,
    pub eps: f64,
    pub d_min: f64,
    pub proximity: ProximityMode,
    pub layers: usize,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self { top_k: TopK::default(), eps: 1e-6, d_min: 0.05, proximity: ProximityMode::Clamp, layers: 2 }
    }
}

impl SpatialConfig {
    pub fn validate(&self) -> Result<(), SpatialError> {
        if !(self.eps > 0.0) {
            return Err(SpatialError::Invalid(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.d_min >= 0.0) {
            return Err(SpatialError::Invalid(format!("d_min must be non-negative, got {}", self.d_min)));
        }
        if let TopK::Fraction(f) = self.top_k {
            if !(0.0..=1.0).contains(&f) {
                return Err(SpatialError::Invalid(format!("top_k fraction must be in [0, 1], got {f}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGraph {
    n: usize,
    edges: Vec<(usize, usize, f64)>,
    normalized: Tensor,
}

impl SpatialGraph {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Undirected edges `(i, j, weight)` with `i < j`.
    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Dense `N x N` normalized adjacency.
    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }

    /// Nonzero entries of the normalized adjacency as `(row, col, value)`
    /// with both indices shifted by `offset`.
    pub fn mix_entries(&self, offset: usize) -> Vec<(usize, usize, f64)> {
        let a = self.normalized.data();
        let mut out = Vec::with_capacity(2 * self.edges.len());
        for i in 0..self.n {
            for j in 0..self.n {
                let v = a[i * self.n + j];
                if v != 0.0 {
                    out.push((offset + i, offset + j, v));
                }
            }
        }
        out
    }
}

/// Raw pair weights `1 / (max(d, d_min) + eps)`; zero on the diagonal and on
/// dropped pairs.
pub fn pair_weights(positions: &[[f64; 2]], cfg: &SpatialConfig) -> Result<Vec<f64>, SpatialError> {
    if let Some(i) = positions.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(SpatialError::NonFinitePosition(i));
    }
    let n = positions.len();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = ((positions[i][0] - positions[j][0]).powi(2) + (positions[i][1] - positions[j][1]).powi(2)).sqrt();
            w[i * n + j] = match cfg.proximity {
                ProximityMode::Drop if d < cfg.d_min => 0.0,
                _ => 1.0 / (d.max(cfg.d_min) + cfg.eps),
            };
        }
    }
    Ok(w)
}

/// For each node, its `k` strongest positive-weight neighbours (ties go to
/// the lower index).
pub fn top_k_candidates(weights: &[f64], n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            let mut c: Vec<usize> = (0..n).filter(|&j| j != i && weights[i * n + j] > 0.0).collect();
            c.sort_by(|&a, &b| weights[i * n + b].total_cmp(&weights[i * n + a]).then(a.cmp(&b)));
            c.truncate(k);
            c
        })
        .collect()
}

pub fn build_adjacency(positions: &[[f64; 2]], cfg: &SpatialConfig) -> Result<SpatialGraph, SpatialError> {
    cfg.validate()?;
    let n = positions.len();
    if n == 0 {
        return Err(SpatialError::Invalid("no dancers".into()));
    }
    let w = pair_weights(positions, cfg)?;
    let mut keep = vec![false; n * n];
    for (i, cands) in top_k_candidates(&w, n, cfg.top_k.resolve(n)).iter().enumerate() {
        for &j in cands {
            keep[i * n + j] = true;
            keep[j * n + i] = true;
        }
    }
    let mut a = vec![0.0; n * n];
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if keep[i * n + j] {
                a[i * n + j] = w[i * n + j];
                a[j * n + i] = w[i * n + j];
                edges.push((i, j, w[i * n + j]));
            }
        }
    }
    let normalized = normalize(&Tensor::from_parts(vec![n, n], a))?;
    Ok(SpatialGraph { n, edges, normalized })
}

/// `D^-1/2 A D^-1/2`; zero-degree rows and columns stay zero.
pub fn normalize(a: &Tensor) -> Result<Tensor, SpatialError> {
    let [n, m] = a.shape() else {
        return Err(SpatialError::Invalid(format!("adjacency must be square, got {:?}", a.shape())));
    };
    if n != m {
        return Err(SpatialError::Invalid(format!("adjacency must be square, got {:?}", a.shape())));
    }
    let n = *n;
    let d = a.data();
    for i in 0..n {
        if d[i * n + i] != 0.0 {
            return Err(SpatialError::Invalid(format!("self edge at {i}")));
        }
        for j in 0..n {
            if d[i * n + j] < 0.0 || !d[i * n + j].is_finite() {
                return Err(SpatialError::Invalid(format!("weight at ({i}, {j}) is {}", d[i * n + j])));
            }
            if d[i * n + j] != d[j * n + i] {
                return Err(SpatialError::Asymmetric(i, j));
            }
        }
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = d[i * n..(i + 1) * n].iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (inv_sqrt[i] * inv_sqrt[j]) * d[idx]
    }))
}

/// Skip path of a graph convolution.
#[derive(Clone, Copy, Debug)]
pub enum Residual<'g> {
    Off,
    Identity,
    /// `H P` with `P: d x d'`.
    Project(Var<'g>),
}

/// `ReLU(A H W)` plus the residual, for `H: [N, d]`.
pub fn gcn_layer<'g>(
    h: Var<'g>,
    graph: &SpatialGraph,
    w: Var<'g>,
    residual: Residual<'g>,
) -> Result<Var<'g>, NumericsError> {
    if h.shape().first() != Some(&graph.n()) {
        return Err(NumericsError::ShapeMismatch { op: "gcn_layer", lhs: h.shape(), rhs: vec![graph.n(), graph.n()] });
    }
    gcn_rows(h, Arc::from(graph.mix_entries(0)), w, residual)
}

fn gcn_rows<'g>(
    h: Var<'g>,
    entries: Arc<[(usize, usize, f64)]>,
    w: Var<'g>,
    residual: Residual<'g>,
) -> Result<Var<'g>, NumericsError> {
    let rows = h.shape()[0];
    let out = h.sparse_mix(entries, rows)?.matmul(w)?.relu()?;
    match residual {
        Residual::Off => Ok(out),
        Residual::Identity => out.add(h),
        Residual::Project(p) => out.add(h.matmul(p)?),
    }
}

/// Register the block's weights (`{prefix}.gcn{i}.w`, each `d x d`).
pub fn init_params(store: &mut ParamStore, prefix: &str, d: usize, cfg: &SpatialConfig, rng: &mut RngStream) {
    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..cfg.layers {
        store.insert(format!("{prefix}.gcn{i}.w"), gaussian(rng, &[d, d]).map(|v| v * scale));
    }
}

/// One graph per frame from `roots: [L, N, 2]`.
pub fn frame_graphs(roots: &Tensor, cfg: &SpatialConfig) -> Result<Vec<SpatialGraph>, SpatialError> {
    let [l, n, 2] = roots.shape() else {
        return Err(SpatialError::Invalid(format!("roots must be [L, N, 2], got {:?}", roots.shape())));
    };
    (0..*l)
        .map(|f| {
            let pos: Vec<[f64; 2]> = (0..*n)
                .map(|i| {
                    let at = (f * n + i) * 2;
                    [roots.data()[at], roots.data()[at + 1]]
                })
                .collect();
            build_adjacency(&pos, cfg)
        })
        .collect()
}

/// Shared-weight graph convolutions applied to every frame of `x: [L, N, d]`.
pub fn spatial_block<'g>(
    x: Var<'g>,
    roots: &Tensor,
    params: &BoundParams<'g>,
    prefix: &str,
    cfg: &SpatialConfig,
) -> Result<Var<'g>, SpatialError> {
    let shape = x.shape();
    let [l, n, d] = shape[..] else {
        return Err(SpatialError::Invalid(format!("spatial input must be [L, N, d], got {shape:?}")));
    };
    if roots.shape() != [l, n, 2] {
        return Err(SpatialError::Invalid(format!("roots {:?} do not match input {shape:?}", roots.shape())));
    }
    let _scope = flops::scope("gcn");
    let graphs = frame_graphs(roots, cfg)?;
    let entries: Arc<[(usize, usize, f64)]> =
        graphs.iter().enumerate().flat_map(|(f, g)| g.mix_entries(f * n)).collect();
    let mut h = x.reshape(&[l * n, d])?;
    for i in 0..cfg.layers {
        let w = params.get(&format!("{prefix}.gcn{i}.w"))?;
        h = gcn_rows(h, entries.clone(), w, Residual::Identity)?;
    }
    Ok(h.reshape(&[l, n, d])?)
}

/// Directed entries the block propagates over, summed over frames.
pub fn propagation_entries(roots: &Tensor, cfg: &SpatialConfig) -> Result<usize, SpatialError> {
    Ok(frame_graphs(roots, cfg)?.iter().map(|g| 2 * g.edges().len()).sum())
}

#[cfg(test)]
mod tests;
