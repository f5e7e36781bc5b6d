//! Cost accounting and scaling measurements.
//!
//! [`flop_count`] gives closed-form multiply-accumulate counts per block,
//! keyed by the same labels the instrumented kernels report under, so the
//! two can be compared exactly. [`run_scaling`] times the decoder against a
//! dense baseline that runs one full-attention temporal stack over all
//! `N * L` tokens with the same weights.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::model::{
    decoder_forward, init_params, input_projection, output_projection, temporal_inputs, ModelConfig, ModelError,
};
use crate::motion::{ground_roots, POSE_DIM};
use crate::numerics::{gaussian, BoundParams, Graph, ParamStore, RngStream, Tensor, Var};
use crate::temporal::{
    self, build_alignment_mask, diff_map, temporal_layer, DiffAttnWeights, MaskMode, SwapCode, TemporalConfig,
    TIME_FEATURES,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BenchError {
    #[error("bench: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<temporal::TemporalError> for BenchError {
    fn from(e: temporal::TemporalError) -> Self {
        BenchError::Model(e.into())
    }
}

impl From<crate::numerics::NumericsError> for BenchError {
    fn from(e: crate::numerics::NumericsError) -> Self {
        BenchError::Model(e.into())
    }
}

/// Multiply-accumulates per block label.
pub type FlopCount = BTreeMap<&'static str, u64>;

pub fn total(count: &FlopCount) -> u64 {
    count.values().sum()
}

/// Key positions visited by `len` queries with the given window radius.
pub fn window_total(len: usize, radius: usize, mode: MaskMode) -> usize {
    let (l, w) = (len, radius);
    if l == 0 {
        return 0;
    }
    match mode {
        MaskMode::Symmetric if w + 1 >= l => l * l,
        MaskMode::Symmetric => l * (2 * w + 1) - w * (w + 1),
        MaskMode::Causal if w + 1 >= l => l * (l + 1) / 2,
        MaskMode::Causal => l * (w + 1) - w * (w + 1) / 2,
    }
}

fn self_window_total(cfg: &TemporalConfig, len: usize) -> usize {
    window_total(len, cfg.self_span.unwrap_or(len), cfg.mode)
}

/// Upper bound on directed graph entries over `l` frames: each dancer keeps
/// `k` edges, and the union is at most every ordered pair.
pub fn gcn_entry_bound(cfg: &ModelConfig, l: usize, n: usize) -> usize {
    let k = cfg.spatial.top_k.resolve(n);
    l * (2 * n * k).min(n * n.saturating_sub(1))
}

/// Per-dancer temporal stack over `batch` sequences of `len` tokens.
fn add_temporal(c: &mut FlopCount, cfg: &ModelConfig, t: &TemporalConfig, batch: usize, len: usize) {
    let (b, l, d) = (batch as u64, len as u64, cfg.d as u64);
    let layers = t.layers as u64;
    let proj = 8 * b * l * d * d;
    let attn = if t.prune_tau > 0.0 { 4 * b * l * l * d } else { 6 * d * b * self_window_total(t, len) as u64 };
    let cross_w = window_total(len, t.window, t.mode) as u64;
    *c.entry("diff_attn").or_default() += layers * (proj + attn);
    *c.entry("cross_attn").or_default() += layers * (2 * b * l * d * d + 2 * l * d * d + 2 * d * b * cross_w);
    *c.entry("ssm").or_default() += layers * (2 * b * l * d * d + 3 * b * l * d * t.ssm_state as u64);
    *c.entry("ffn").or_default() += layers * 2 * t.ffn_mult as u64 * b * l * d * d;
}

fn add_io(c: &mut FlopCount, cfg: &ModelConfig, l: u64, n: u64) {
    let d = cfg.d as u64;
    c.insert("in_proj", l * n * POSE_DIM as u64 * d);
    c.insert("out_proj", l * n * d * POSE_DIM as u64);
    c.insert("embed", l * TIME_FEATURES as u64 * d + l * d * d);
    c.insert("music", l * cfg.music_dim as u64 * d);
}

/// Decoder cost for `l` frames and `n` dancers. `gcn_entries` is the number
/// of directed graph entries summed over frames; `None` uses
/// [`gcn_entry_bound`].
pub fn flop_count(cfg: &ModelConfig, l: usize, n: usize, gcn_entries: Option<usize>) -> FlopCount {
    let mut c = FlopCount::new();
    let (lu, nu, d) = (l as u64, n as u64, cfg.d as u64);
    add_io(&mut c, cfg, lu, nu);
    c.insert("fusion", 2 * lu * (nu * d) * (nu * d));
    let e = gcn_entries.unwrap_or_else(|| gcn_entry_bound(cfg, l, n)) as u64;
    c.insert("gcn", cfg.spatial.layers as u64 * (e * d + lu * nu * d * d));
    add_temporal(&mut c, cfg, &cfg.temporal, n, l);
    c
}

/// Cost of [`dense_forward`].
pub fn dense_flop_count(cfg: &ModelConfig, l: usize, n: usize) -> FlopCount {
    let mut c = FlopCount::new();
    add_io(&mut c, cfg, l as u64, n as u64);
    add_temporal(&mut c, cfg, &dense_temporal(&cfg.temporal), 1, n * l);
    c
}

/// Self-attention map cost of the dense baseline alone.
pub fn dense_attention_macs(cfg: &ModelConfig, l: usize, n: usize) -> u64 {
    let tokens = (n * l) as u64;
    cfg.temporal.layers as u64 * 6 * cfg.d as u64 * tokens * tokens
}

/// The temporal config the dense baseline runs with.
pub fn dense_temporal(cfg: &TemporalConfig) -> TemporalConfig {
    TemporalConfig { self_span: None, ..cfg.clone() }
}

/// Reference model: input projection, one temporal stack over all `N * L`
/// tokens (dancer-major) with unrestricted self-attention, output
/// projection. Music tokens and conditioning are repeated per dancer.
pub fn dense_forward<'g>(
    params: &BoundParams<'g>,
    cfg: &ModelConfig,
    x_t: Var<'g>,
    t: &[usize],
    music: Var<'g>,
    swap: &SwapCode,
) -> Result<Var<'g>, BenchError> {
    let h = input_projection(params, x_t)?;
    let [l, n, d] = h.shape()[..] else { unreachable!() };
    if t.len() != l || music.shape() != [l, cfg.music_dim] {
        return Err(BenchError::Invalid(format!("{l} frames need {l} levels and [{l}, {}] music", cfg.music_dim)));
    }
    let cond = temporal::conditioning(params, "temporal", t, cfg.steps, swap)?;
    let tokens = temporal::music_tokens(params, "temporal", music)?;
    let g = h.graph();
    let tile = |v: Var<'g>| g.concat(&vec![v; n], 0);
    let flat = h.transpose(0, 1)?.reshape(&[1, n * l, d])?;
    let out =
        temporal::temporal_stack(flat, tile(tokens)?, tile(cond)?, params, "temporal", &dense_temporal(&cfg.temporal))?;
    Ok(output_projection(params, out.reshape(&[n, l, d])?.transpose(0, 1)?)?)
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> Result<f64, BenchError> {
    if xs.len() != ys.len() || xs.len() < 4 {
        return Err(BenchError::Invalid(format!("need at least 4 paired points, got {} and {}", xs.len(), ys.len())));
    }
    if xs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(BenchError::Invalid("sizes must be strictly increasing".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(BenchError::Invalid("sizes and values must be positive".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    /// Sweep frames at a fixed group size.
    L,
    /// Sweep group size at a fixed length.
    N,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub axis: Axis,
    pub sizes: Vec<usize>,
    /// The other dimension, held fixed.
    pub fixed: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub dense: bool,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self { axis: Axis::L, sizes: vec![120, 240, 480, 960], fixed: 3, repeats: 5, warmup: 1, dense: true }
    }
}

/// Smallest median that still counts as a usable timing.
pub const MIN_RESOLVABLE_SECS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub axis: Axis,
    pub sizes: Vec<usize>,
    pub fixed: usize,
    pub repeats: usize,
    /// Median seconds per forward pass.
    pub decoupled_secs: Vec<f64>,
    pub dense_secs: Option<Vec<f64>>,
    pub decoupled_flops: Vec<u64>,
    pub dense_flops: Vec<u64>,
    pub decoupled_exponent: f64,
    pub dense_exponent: Option<f64>,
    pub decoupled_flop_exponent: f64,
    pub dense_flop_exponent: f64,
    /// Parameters outside the fusion layer, and the fusion layer per size.
    pub shared_params: usize,
    pub fusion_params: Vec<usize>,
    pub advisories: Vec<String>,
}

impl ScalingReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("size,decoupled_secs,dense_secs,decoupled_flops,dense_flops\n");
        for (i, s) in self.sizes.iter().enumerate() {
            let dense = self.dense_secs.as_ref().map_or(String::new(), |v| format!("{:.9}", v[i]));
            out.push_str(&format!(
                "{s},{:.9},{dense},{},{}\n",
                self.decoupled_secs[i], self.decoupled_flops[i], self.dense_flops[i]
            ));
        }
        out
    }

    /// Whitespace-separated `size seconds` pairs for plotting tools.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("# size decoupled_secs dense_secs\n");
        for (i, s) in self.sizes.iter().enumerate() {
            let dense = self.dense_secs.as_ref().map_or(f64::NAN, |v| v[i]);
            out.push_str(&format!("{s} {:.9} {dense:.9}\n", self.decoupled_secs[i]));
        }
        out
    }
}

/// Random decoder inputs: `x_t`, levels, music, identity swap code.
pub fn random_inputs(cfg: &ModelConfig, l: usize, n: usize, rng: &RngStream) -> (Tensor, Vec<usize>, Tensor, SwapCode) {
    let x = gaussian(&mut rng.derive(0), &[l, n, POSE_DIM]);
    let music = gaussian(&mut rng.derive(1), &[l, cfg.music_dim]);
    (x, vec![cfg.steps / 2; l], music, SwapCode::identity(n))
}

fn time_runs(repeats: usize, warmup: usize, mut f: impl FnMut() -> Result<(), BenchError>) -> Result<f64, BenchError> {
    for _ in 0..warmup {
        f()?;
    }
    let mut secs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        secs.push(start.elapsed().as_secs_f64());
    }
    Ok(median(secs))
}

/// Time both models over `sc.sizes` and fit growth exponents. `on_size` is
/// called after each size with the index just finished.
pub fn run_scaling(
    model: &ModelConfig,
    sc: &ScalingConfig,
    rng: &RngStream,
    mut on_size: impl FnMut(usize),
) -> Result<ScalingReport, BenchError> {
    if sc.sizes.len() < 4 {
        return Err(BenchError::Invalid(format!("need at least 4 sizes, got {}", sc.sizes.len())));
    }
    if sc.sizes.windows(2).any(|w| w[1] <= w[0]) || sc.sizes[0] == 0 {
        return Err(BenchError::Invalid("sizes must be positive and strictly increasing".into()));
    }
    if sc.repeats < 5 || sc.warmup < 1 {
        return Err(BenchError::Invalid("need at least 5 timed repeats and 1 warm-up run".into()));
    }
    let mut dec_secs = Vec::new();
    let mut dense_secs = Vec::new();
    let mut dec_flops = Vec::new();
    let mut dense_flops = Vec::new();
    let mut fusion_params = Vec::new();
    let mut shared = None;
    for (i, &size) in sc.sizes.iter().enumerate() {
        let (l, n) = match sc.axis {
            Axis::L => (size, sc.fixed),
            Axis::N => (sc.fixed, size),
        };
        let cfg = ModelConfig { dancers: n, ..model.clone() };
        let params = init_params(&cfg, &rng.derive(0))?;
        let report = param_report(&params);
        if *shared.get_or_insert(report.shared) != report.shared {
            return Err(BenchError::Invalid("shared parameter count changed with size".into()));
        }
        fusion_params.push(report.fusion);
        let (x, t, music, swap) = random_inputs(&cfg, l, n, &rng.derive(1 + i as u64));
        let roots = ground_roots(&x);
        dec_secs.push(time_runs(sc.repeats, sc.warmup, || {
            let g = Graph::new();
            let p = params.bind(&g, false);
            decoder_forward(&p, &cfg, g.constant(x.clone()), &t, g.constant(music.clone()), &swap, &roots)?;
            Ok(())
        })?);
        if sc.dense {
            dense_secs.push(time_runs(sc.repeats, sc.warmup, || {
                let g = Graph::new();
                let p = params.bind(&g, false);
                dense_forward(&p, &cfg, g.constant(x.clone()), &t, g.constant(music.clone()), &swap)?;
                Ok(())
            })?);
        }
        let entries = crate::spatial::propagation_entries(&roots, &cfg.spatial).map_err(ModelError::from)?;
        dec_flops.push(total(&flop_count(&cfg, l, n, Some(entries))));
        dense_flops.push(total(&dense_flop_count(&cfg, l, n)));
        on_size(i);
    }
    let xs: Vec<f64> = sc.sizes.iter().map(|&s| s as f64).collect();
    let as_f64 = |v: &[u64]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let mut advisories = Vec::new();
    if dec_secs[0] < MIN_RESOLVABLE_SECS {
        advisories.push(format!(
            "smallest size ran in {:.2e} s, below the {MIN_RESOLVABLE_SECS:.0e} s resolution floor; enlarge sizes",
            dec_secs[0]
        ));
    }
    Ok(ScalingReport {
        axis: sc.axis,
        sizes: sc.sizes.clone(),
        fixed: sc.fixed,
        repeats: sc.repeats,
        decoupled_exponent: fit_exponent(&xs, &dec_secs)?,
        dense_exponent: if sc.dense { Some(fit_exponent(&xs, &dense_secs)?) } else { None },
        decoupled_flop_exponent: fit_exponent(&xs, &as_f64(&dec_flops))?,
        dense_flop_exponent: fit_exponent(&xs, &as_f64(&dense_flops))?,
        decoupled_secs: dec_secs,
        dense_secs: sc.dense.then_some(dense_secs),
        decoupled_flops: dec_flops,
        dense_flops,
        shared_params: shared.unwrap_or(0),
        fusion_params,
        advisories,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    /// Independent of sequence length and group size.
    pub shared: usize,
    /// Group fusion weights, which grow with the group size.
    pub fusion: usize,
}

pub fn param_report(store: &ParamStore) -> ParamReport {
    let fusion = store.numel_with_prefix("fusion.");
    ParamReport { total: store.numel(), shared: store.numel() - fusion, fusion }
}

/// Magnitude below which a difference-map entry counts as empty.
pub const SPARSITY_THRESHOLD: f64 = 1e-3;

/// Fraction of in-window entries of a `[B, L, L]` map with magnitude below
/// `threshold`. Entries outside the windows are structurally zero and are
/// not counted.
pub fn map_sparsity(map: &Tensor, windows: &[(usize, usize)], threshold: f64) -> f64 {
    let l = windows.len();
    let data = map.data();
    let batches = data.len() / (l * l).max(1);
    let (mut small, mut seen) = (0usize, 0usize);
    for b in 0..batches {
        for (r, &(lo, hi)) in windows.iter().enumerate() {
            for c in lo..=hi {
                seen += 1;
                small += (data[(b * l + r) * l + c].abs() < threshold) as usize;
            }
        }
    }
    if seen == 0 {
        0.0
    } else {
        small as f64 / seen as f64
    }
}

/// Per-layer sparsity of the differential attention map for one input.
#[allow(clippy::too_many_arguments)]
pub fn sparsity_probe(
    params: &ParamStore,
    cfg: &ModelConfig,
    x_t: &Tensor,
    t: &[usize],
    music: &Tensor,
    swap: &SwapCode,
    threshold: f64,
) -> Result<Vec<f64>, BenchError> {
    let g = Graph::new();
    let p = params.bind(&g, false);
    let roots = ground_roots(x_t);
    let (h, tokens, cond) =
        temporal_inputs(&p, cfg, g.constant(x_t.clone()), t, g.constant(music.clone()), swap, &roots)?;
    let len = h.shape()[1];
    let tc = &cfg.temporal;
    let mask = build_alignment_mask(len, tc.window as i64, tc.mode)?;
    let windows = tc.self_windows(len);
    let mut h = h.add(cond)?;
    let mut out = Vec::with_capacity(tc.layers);
    for i in 0..tc.layers {
        let prefix = format!("temporal.l{i}");
        let get = |n: &str| p.get(&format!("{prefix}.attn.{n}"));
        let w =
            DiffAttnWeights { wq: get("wq")?, wk: get("wk")?, wv: get("wv")?, wo: get("wo")?, lambda: get("lambda")? };
        let (map, _) = diff_map(h.layer_norm(temporal::LN_EPS)?, &w, &windows)?;
        out.push(map_sparsity(&map.value(), &windows, threshold));
        h = temporal_layer(h, tokens, &p, &prefix, tc, &mask)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
