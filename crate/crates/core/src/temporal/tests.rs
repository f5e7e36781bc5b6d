use proptest::prelude::*;

use super::*;
use crate::numerics::{grad_check, grad_check_coords, Graph};

fn rand(seed: u64, shape: &[usize]) -> Tensor {
    gaussian(&mut RngStream::new(seed), shape)
}

/// softmax(q k^T * scale) v on plain row-major matrices.
fn ref_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Tensor {
    let (l, m, dv) = (q.shape()[0], k.shape()[0], v.shape()[1]);
    let dk = q.shape()[1];
    let mut out = vec![0.0; l * dv];
    for i in 0..l {
        let s: Vec<f64> =
            (0..m).map(|j| scale * (0..dk).map(|c| q.get(&[i, c]) * k.get(&[j, c])).sum::<f64>()).collect();
        let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..m {
            for c in 0..dv {
                out[i * dv + c] += e[j] / z * v.get(&[j, c]);
            }
        }
    }
    Tensor::new(vec![l, dv], out).unwrap()
}

struct DiffW {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

fn diff_weights(seed: u64, d: usize) -> DiffW {
    DiffW {
        wq: rand(seed, &[d, 2 * d]),
        wk: rand(seed + 1, &[d, 2 * d]),
        wv: rand(seed + 2, &[d, 2 * d]),
        wo: rand(seed + 3, &[2 * d, d]),
    }
}

fn run_diff(x: &Tensor, w: &DiffW, lambda: f64, tau: f64) -> Tensor {
    let g = Graph::new();
    let c = |t: &Tensor| g.constant(t.clone());
    let weights = DiffAttnWeights {
        wq: c(&w.wq),
        wk: c(&w.wk),
        wv: c(&w.wv),
        wo: c(&w.wo),
        lambda: c(&Tensor::from_vec(vec![lambda])),
    };
    let l = x.shape()[x.rank() - 2];
    diff_attention(c(x), &weights, windows(l, l, MaskMode::Symmetric), tau).unwrap().value()
}

fn cols(t: &Tensor, start: usize, len: usize) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[r, len], |i| t.data()[(i / len) * c + start + i % len])
}

#[test]
fn zero_lambda_is_single_branch_attention() {
    let d = 4;
    let x = rand(1, &[6, d]);
    let w = diff_weights(2, d);
    let got = run_diff(&x, &w, 0.0, 0.0);
    let q = x.matmul(&w.wq).unwrap();
    let k = x.matmul(&w.wk).unwrap();
    let v = x.matmul(&w.wv).unwrap();
    let want = ref_attention(&cols(&q, 0, d), &cols(&k, 0, d), &v, 1.0 / 2.0).matmul(&w.wo).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn singleton_sequence_scales_values() {
    let d = 3;
    let x = rand(3, &[1, d]);
    let w = diff_weights(4, d);
    let got = run_diff(&x, &w, 0.3, 0.0);
    let want = x.matmul(&w.wv).unwrap().map(|v| 0.7 * v).matmul(&w.wo).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn zero_queries_average_values() {
    let d = 3;
    let x = rand(5, &[5, d]);
    let mut w = diff_weights(6, d);
    w.wq = Tensor::zeros(&[d, 2 * d]);
    let got = run_diff(&x, &w, 0.25, 0.0);
    let v = x.matmul(&w.wv).unwrap();
    let mean = Tensor::from_fn(&[1, 2 * d], |c| (0..5).map(|r| v.get(&[r, c])).sum::<f64>() / 5.0 * 0.75);
    let row = mean.matmul(&w.wo).unwrap();
    for r in 0..5 {
        for c in 0..d {
            assert!((got.get(&[r, c]) - row.get(&[0, c])).abs() < 1e-12);
        }
    }
}

#[test]
fn pruning_limits() {
    let x = rand(7, &[2, 5, 4]);
    let w = diff_weights(8, 4);
    let exact = run_diff(&x, &w, 0.5, 0.0);
    assert!(run_diff(&x, &w, 0.5, 1e-300).max_abs_diff(&exact) < 1e-12);
    assert!(run_diff(&x, &w, 0.5, 10.0).data().iter().all(|&v| v == 0.0));
}

#[test]
fn diff_attention_gradient() {
    let d = 8;
    let w = diff_weights(9, d);
    let x = rand(10, &[4, d]);
    let r = grad_check(
        |g, v| {
            let c = |t: &Tensor| g.constant(t.clone());
            let weights = DiffAttnWeights {
                wq: c(&w.wq),
                wk: c(&w.wk),
                wv: c(&w.wv),
                wo: c(&w.wo),
                lambda: c(&Tensor::from_vec(vec![0.5])),
            };
            diff_attention(v, &weights, windows(4, 4, MaskMode::Symmetric), 0.0)?.square()?.sum()
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

fn cross_weights(seed: u64, d: usize) -> [Tensor; 4] {
    [rand(seed, &[d, d]), rand(seed + 1, &[d, d]), rand(seed + 2, &[d, d]), rand(seed + 3, &[d, d])]
}

fn run_cross(x: &Tensor, m: &Tensor, w: &[Tensor; 4], mask: &AlignmentMask, dense: bool) -> (Tensor, Option<Tensor>) {
    let g = Graph::new();
    let c = |t: &Tensor| g.constant(t.clone());
    let weights = CrossAttnWeights { wq: c(&w[0]), wk: c(&w[1]), wv: c(&w[2]), wo: c(&w[3]) };
    if dense {
        let (o, a) = masked_cross_attention_dense(c(x), c(m), &weights, mask).unwrap();
        (o.value(), Some(a.value()))
    } else {
        (masked_cross_attention(c(x), c(m), &weights, mask).unwrap().value(), None)
    }
}

#[test]
fn zero_window_copies_the_aligned_music_frame() {
    let d = 4;
    let (x, m) = (rand(11, &[1, 6, d]), rand(12, &[6, d]));
    let mut w = cross_weights(13, d);
    w[2] = Tensor::eye(d);
    w[3] = Tensor::eye(d);
    let mask = build_alignment_mask(6, 0, MaskMode::Symmetric).unwrap();
    let (out, _) = run_cross(&x, &m, &w, &mask, false);
    assert_eq!(out.reshape(&[6, d]).unwrap(), m);
}

#[test]
fn full_window_equals_unmasked_attention() {
    let d = 4;
    let (x, m) = (rand(14, &[2, 7, d]), rand(15, &[7, d]));
    let w = cross_weights(16, d);
    let mask = build_alignment_mask(7, 6, MaskMode::Symmetric).unwrap();
    let (fused, _) = run_cross(&x, &m, &w, &mask, false);
    let k = m.matmul(&w[1]).unwrap();
    let v = m.matmul(&w[2]).unwrap();
    for b in 0..2 {
        let xb = Tensor::from_fn(&[7, d], |i| x.data()[b * 7 * d + i]);
        let want = ref_attention(&xb.matmul(&w[0]).unwrap(), &k, &v, 0.5).matmul(&w[3]).unwrap();
        let got = Tensor::from_fn(&[7, d], |i| fused.data()[b * 7 * d + i]);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn weights_vanish_outside_the_window(seed in 0u64..10_000, l in 1usize..40, w in 0i64..9, causal: bool) {
        let d = 3;
        let mode = if causal { MaskMode::Causal } else { MaskMode::Symmetric };
        let (x, m) = (rand(seed, &[1, l, d]), rand(seed + 1, &[l, d]));
        let wts = cross_weights(seed + 2, d);
        let mask = build_alignment_mask(l, w, mode).unwrap();
        let (dense, a) = run_cross(&x, &m, &wts, &mask, true);
        let a = a.unwrap();
        for r in 0..l {
            let mut total = 0.0;
            for c in 0..l {
                let p = a.get(&[0, r, c]);
                if mask.is_open(r, c) { total += p } else { prop_assert_eq!(p, 0.0) }
            }
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
        let (fused, _) = run_cross(&x, &m, &wts, &mask, false);
        prop_assert!(fused.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn causal_output_ignores_future_music(seed in 0u64..10_000, l in 2usize..30, w in 0i64..6) {
        let d = 3;
        let (x, m) = (rand(seed, &[2, l, d]), rand(seed + 1, &[l, d]));
        let wts = cross_weights(seed + 2, d);
        let mask = build_alignment_mask(l, w, MaskMode::Causal).unwrap();
        let cut = l / 2;
        let noise = rand(seed + 3, &[l, d]);
        let m2 = Tensor::from_fn(&[l, d], |i| if i / d > cut { m.data()[i] + 10.0 * noise.data()[i] } else { m.data()[i] });
        let (a, _) = run_cross(&x, &m, &wts, &mask, false);
        let (b, _) = run_cross(&x, &m2, &wts, &mask, false);
        for bb in 0..2 {
            for r in 0..=cut {
                for c in 0..d {
                    prop_assert_eq!(a.get(&[bb, r, c]).to_bits(), b.get(&[bb, r, c]).to_bits());
                }
            }
        }
    }
}

fn stack_store(d: usize, dm: usize, cfg: &TemporalConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_params(&mut s, "t", d, dm, cfg, &mut RngStream::new(seed));
    s
}

fn stack_out<'g>(
    g: &'g Graph,
    p: &BoundParams<'g>,
    x: Var<'g>,
    music: &Tensor,
    ts: &[usize],
    cfg: &TemporalConfig,
) -> Result<Var<'g>, TemporalError> {
    let m = music_tokens(p, "t", g.constant(music.clone()))?;
    let cond = conditioning(p, "t", ts, 1000, &SwapCode::identity(2))?;
    temporal_stack(x, m, cond, p, "t", cfg)
}

#[test]
fn full_stack_gradient() {
    let (d, l, dm) = (16, 8, 5);
    let cfg = TemporalConfig { layers: 2, ssm_state: 4, window: 2, ..Default::default() };
    let store = stack_store(d, dm, &cfg, 20);
    let x = rand(21, &[2, l, d]);
    let music = rand(22, &[l, dm]);
    let ts: Vec<usize> = (0..l).map(|i| 100 * i).collect();
    let r = grad_check(
        |g, v| {
            let p = store.bind(g, false);
            stack_out(g, &p, v, &music, &ts, &cfg)
                .map_err(|e| match e {
                    TemporalError::Numerics(n) => n,
                    other => NumericsError::Invalid(other.to_string()),
                })?
                .square()?
                .mean()
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");

    // parameter gradients through the flat parameter vector, sampled
    let flat = store.flatten();
    let coords: Vec<usize> = (0..flat.len()).step_by(37).collect();
    let r = grad_check_coords(
        |g, v| {
            let p = store.bind_flat(v)?;
            let xin = g.constant(x.clone());
            stack_out(g, &p, xin, &music, &ts, &cfg)
                .map_err(|e| match e {
                    TemporalError::Numerics(n) => n,
                    other => NumericsError::Invalid(other.to_string()),
                })?
                .square()?
                .mean()
        },
        &flat,
        1e-4,
        Some(&coords),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn causal_stack_ignores_future_music() {
    let (d, l, dm) = (8, 12, 4);
    let cfg = TemporalConfig {
        layers: 2,
        ssm_state: 4,
        window: 3,
        mode: MaskMode::Causal,
        self_span: Some(4),
        ..Default::default()
    };
    let store = stack_store(d, dm, &cfg, 30);
    let x = rand(31, &[2, l, d]);
    let music = rand(32, &[l, dm]);
    let mut future = music.to_vec();
    for v in &mut future[7 * dm..] {
        *v += 3.0;
    }
    let future = Tensor::new(vec![l, dm], future).unwrap();
    let ts = vec![500; l];
    let run = |m: &Tensor| {
        let g = Graph::new();
        let p = store.bind(&g, false);
        stack_out(&g, &p, g.constant(x.clone()), m, &ts, &cfg).unwrap().value()
    };
    let (a, b) = (run(&music), run(&future));
    for bb in 0..2 {
        for r in 0..7 {
            for c in 0..d {
                assert_eq!(a.get(&[bb, r, c]).to_bits(), b.get(&[bb, r, c]).to_bits());
            }
        }
    }
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn stack_rejects_mismatched_conditioning() {
    let cfg = TemporalConfig { layers: 1, ..Default::default() };
    let store = stack_store(4, 3, &cfg, 1);
    let g = Graph::new();
    let p = store.bind(&g, false);
    let x = g.constant(rand(2, &[1, 5, 4]));
    let m = music_tokens(&p, "t", g.constant(rand(3, &[5, 3]))).unwrap();
    let cond = conditioning(&p, "t", &[0; 4], 1000, &SwapCode::identity(1)).unwrap();
    assert!(temporal_stack(x, m, cond, &p, "t", &cfg).is_err());
    assert!(music_tokens(&p, "t", g.constant(rand(3, &[5, 2]))).is_err());
}
