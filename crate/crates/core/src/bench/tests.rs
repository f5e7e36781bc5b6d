use super::*;
use crate::numerics::flops::Counter;
use crate::spatial::{propagation_entries, TopK};

fn tiny(mode: MaskMode, self_span: Option<usize>, prune_tau: f64) -> ModelConfig {
    let mut cfg = ModelConfig { d: 8, dancers: 3, music_dim: 5, steps: 50, ..ModelConfig::default() };
    cfg.temporal.layers = 2;
    cfg.temporal.window = 2;
    cfg.temporal.ssm_state = 4;
    cfg.temporal.mode = mode;
    cfg.temporal.self_span = self_span;
    cfg.temporal.prune_tau = prune_tau;
    cfg
}

fn nonzero(c: FlopCount) -> FlopCount {
    c.into_iter().filter(|(_, v)| *v > 0).collect()
}

fn measured(cfg: &ModelConfig, l: usize, dense: bool, seed: u64) -> (FlopCount, usize) {
    let params = init_params(cfg, &RngStream::new(seed)).unwrap();
    let (x, t, music, swap) = random_inputs(cfg, l, cfg.dancers, &RngStream::new(seed + 1));
    let roots = ground_roots(&x);
    let g = Graph::new();
    let p = params.bind(&g, false);
    let counter = Counter::start();
    if dense {
        dense_forward(&p, cfg, g.constant(x.clone()), &t, g.constant(music), &swap).unwrap();
    } else {
        decoder_forward(&p, cfg, g.constant(x.clone()), &t, g.constant(music), &swap, &roots).unwrap();
    }
    let snap = counter.snapshot();
    (nonzero(snap), propagation_entries(&roots, &cfg.spatial).unwrap())
}

#[test]
fn formulas_match_instrumented_counts() {
    for mode in [MaskMode::Symmetric, MaskMode::Causal] {
        for span in [None, Some(1), Some(3)] {
            for prune in [0.0, 1e-3] {
                for (l, n) in [(1, 2), (5, 2), (8, 3), (7, 4)] {
                    let cfg = ModelConfig { dancers: n, ..tiny(mode, span, prune) };
                    let (got, entries) = measured(&cfg, l, false, 3);
                    assert_eq!(
                        got,
                        nonzero(flop_count(&cfg, l, n, Some(entries))),
                        "{mode:?} {span:?} {prune} L={l} N={n}"
                    );
                    let (got, _) = measured(&cfg, l, true, 3);
                    assert_eq!(
                        got,
                        nonzero(dense_flop_count(&cfg, l, n)),
                        "dense {mode:?} {span:?} {prune} L={l} N={n}"
                    );
                }
            }
        }
    }
}

#[test]
fn window_totals_match_enumeration() {
    for len in 1..20 {
        for w in 0..25 {
            for mode in [MaskMode::Symmetric, MaskMode::Causal] {
                let direct: usize = temporal::windows(len, w, mode).iter().map(|(lo, hi)| hi - lo + 1).sum();
                assert_eq!(window_total(len, w, mode), direct, "len {len} w {w} {mode:?}");
            }
        }
    }
}

#[test]
fn dense_attention_quadruples_with_length() {
    let cfg = ModelConfig::default();
    for l in [10, 60, 120] {
        assert_eq!(dense_attention_macs(&cfg, 2 * l, 3), 4 * dense_attention_macs(&cfg, l, 3));
    }
}

#[test]
fn cross_attention_is_linear_in_length() {
    let cfg = ModelConfig::default();
    let w = cfg.temporal.window;
    let ca = |l: usize| flop_count(&cfg, l, 3, None)["cross_attn"];
    // Affine in L once L exceeds the window: doubling doubles the slope
    // part and leaves the boundary correction fixed.
    let boundary = cfg.temporal.layers as u64 * 2 * cfg.d as u64 * 3 * (w * (w + 1)) as u64;
    for l in [2 * w, 100, 400] {
        assert_eq!(ca(2 * l) + boundary, 2 * (ca(l) + boundary));
        assert_eq!(ca(2 * l) - 2 * ca(l), boundary);
    }
}

#[test]
fn gcn_doubles_with_group_size_at_fixed_k() {
    let mut cfg = ModelConfig::default();
    cfg.spatial.top_k = TopK::Count(2);
    for n in [5, 8, 16] {
        assert_eq!(flop_count(&cfg, 50, 2 * n, None)["gcn"], 2 * flop_count(&cfg, 50, n, None)["gcn"]);
    }
}

#[test]
fn decoupled_formula_grows_linearly_dense_quadratically() {
    let mut cfg = ModelConfig::default();
    cfg.d = 32;
    cfg.temporal.layers = 2;
    let sizes = [120.0, 240.0, 480.0, 960.0];
    let dec: Vec<f64> = sizes.iter().map(|&l| total(&flop_count(&cfg, l as usize, 3, None)) as f64).collect();
    let dense: Vec<f64> = sizes.iter().map(|&l| total(&dense_flop_count(&cfg, l as usize, 3)) as f64).collect();
    let (a, b) = (fit_exponent(&sizes, &dec).unwrap(), fit_exponent(&sizes, &dense).unwrap());
    assert!((0.95..1.05).contains(&a), "decoupled {a}");
    assert!((1.7..2.05).contains(&b), "dense {b}");
}

#[test]
fn exponent_fit_recovers_square_law() {
    let xs = [3.0, 10.0, 40.0, 150.0, 800.0];
    let ys: Vec<f64> = xs.iter().map(|x| 0.37 * x * x).collect();
    assert!((fit_exponent(&xs, &ys).unwrap() - 2.0).abs() < 0.01);
    assert!(fit_exponent(&xs[..3], &ys[..3]).is_err());
    assert!(fit_exponent(&[1.0, 2.0, 2.0, 3.0], &[1.0; 4]).is_err());
}

#[test]
fn shared_params_ignore_group_size() {
    let mut shared = Vec::new();
    for n in 1..=5 {
        let cfg = ModelConfig { dancers: n, d: 16, ..ModelConfig::default() };
        let r = param_report(&init_params(&cfg, &RngStream::new(0)).unwrap());
        let nd = n * 16;
        assert_eq!(r.fusion, 2 * nd * nd + 2 * nd);
        assert_eq!(r.total, r.shared + r.fusion);
        shared.push(r.shared);
    }
    assert!(shared.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn scaling_rejects_bad_sweeps() {
    let cfg = tiny(MaskMode::Symmetric, Some(2), 0.0);
    let rng = RngStream::new(0);
    let sc = ScalingConfig { sizes: vec![4, 8, 16], ..ScalingConfig::default() };
    assert!(run_scaling(&cfg, &sc, &rng, |_| {}).is_err());
    let sc = ScalingConfig { sizes: vec![4, 8, 8, 16], ..ScalingConfig::default() };
    assert!(run_scaling(&cfg, &sc, &rng, |_| {}).is_err());
    let sc = ScalingConfig { sizes: vec![4, 8, 12, 16], repeats: 3, ..ScalingConfig::default() };
    assert!(run_scaling(&cfg, &sc, &rng, |_| {}).is_err());
}

#[test]
fn scaling_report_on_tiny_sweep() {
    let cfg = tiny(MaskMode::Symmetric, Some(2), 0.0);
    let sc = ScalingConfig { axis: Axis::N, sizes: vec![2, 3, 4, 5], fixed: 6, ..ScalingConfig::default() };
    let mut seen = Vec::new();
    let r = run_scaling(&cfg, &sc, &RngStream::new(4), |i| seen.push(i)).unwrap();
    assert_eq!(seen, vec![0, 1, 2, 3]);
    assert_eq!(r.decoupled_secs.len(), 4);
    assert!(r.fusion_params.windows(2).all(|w| w[1] > w[0]));
    assert!(r.csv().lines().count() == 5 && r.plot_data().lines().count() == 5);
    // Sub-millisecond passes trip the resolution advisory.
    assert!(!r.advisories.is_empty());
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<ScalingReport>(&json).unwrap(), r);
}

#[test]
fn tied_branches_cancel_exactly() {
    let cfg = tiny(MaskMode::Symmetric, Some(3), 0.0);
    let mut params = init_params(&cfg, &RngStream::new(2)).unwrap();
    let d = cfg.d;
    for i in 0..cfg.temporal.layers {
        for n in ["wq", "wk"] {
            let name = format!("temporal.l{i}.attn.{n}");
            let src = params.get(&name).unwrap().clone();
            let tied = Tensor::from_fn(&[d, 2 * d], |idx| {
                let (r, c) = (idx / (2 * d), idx % (2 * d));
                src.get(&[r, c % d])
            });
            params.insert(name, tied);
        }
        params.insert(format!("temporal.l{i}.attn.lambda"), Tensor::from_vec(vec![1.0]));
    }
    let (x, t, music, swap) = random_inputs(&cfg, 9, 3, &RngStream::new(3));
    let s = sparsity_probe(&params, &cfg, &x, &t, &music, &swap, SPARSITY_THRESHOLD).unwrap();
    assert_eq!(s, vec![1.0; cfg.temporal.layers]);
}

#[test]
fn zero_lambda_reduces_to_first_branch() {
    let mut cfg = tiny(MaskMode::Symmetric, Some(2), 0.0);
    cfg.temporal.layers = 1;
    let mut params = init_params(&cfg, &RngStream::new(5)).unwrap();
    params.insert("temporal.l0.attn.lambda", Tensor::from_vec(vec![0.0]));
    let (x, t, music, swap) = random_inputs(&cfg, 10, 3, &RngStream::new(6));
    // Large logits push many softmax weights under the threshold.
    let wq = params.get("temporal.l0.attn.wq").unwrap().map(|v| 6.0 * v);
    params.insert("temporal.l0.attn.wq", wq);
    let probe = sparsity_probe(&params, &cfg, &x, &t, &music, &swap, 0.05).unwrap();

    let g = Graph::new();
    let p = params.bind(&g, false);
    let (h, _, cond) =
        temporal_inputs(&p, &cfg, g.constant(x.clone()), &t, g.constant(music), &swap, &ground_roots(&x)).unwrap();
    let (n, l, d) = (3, 10, cfg.d);
    let xin = h.add(cond).unwrap().layer_norm(temporal::LN_EPS).unwrap().value().reshape(&[n * l, d]).unwrap();
    let q = xin.matmul(params.get("temporal.l0.attn.wq").unwrap()).unwrap();
    let k = xin.matmul(params.get("temporal.l0.attn.wk").unwrap()).unwrap();
    let windows = cfg.temporal.self_windows(l);
    let (mut small, mut seen) = (0, 0);
    for b in 0..n {
        for (r, &(lo, hi)) in windows.iter().enumerate() {
            let logits: Vec<f64> = (lo..=hi)
                .map(|c| {
                    (0..d).map(|j| q.get(&[b * l + r, j]) * k.get(&[b * l + c, j])).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            for v in &logits {
                seen += 1;
                small += (((v - m).exp() / z) < 0.05) as usize;
            }
        }
    }
    assert!(small > 0);
    assert!((probe[0] - small as f64 / seen as f64).abs() < 1e-12);
}

#[test]
fn map_sparsity_ignores_out_of_window_entries() {
    let map = Tensor::from_vec(vec![0.5, 0.0, 0.0, 0.0001]).reshape(&[1, 2, 2]).unwrap();
    assert_eq!(map_sparsity(&map, &[(0, 0), (1, 1)], 1e-3), 0.5);
    assert_eq!(map_sparsity(&map, &[(0, 1), (0, 1)], 1e-3), 0.75);
}
