use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

use super::*;
use crate::numerics::{grad_check, Graph};

fn tiny() -> SpatialConfig {
    SpatialConfig { eps: 1e-12, d_min: 0.0, top_k: TopK::Count(usize::MAX), ..Default::default() }
}

fn assert_close(a: &Tensor, b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.data().iter().zip(b) {
        assert!((x - y).abs() <= tol, "{:?} vs {b:?}", a.data());
    }
}

#[test]
fn weight_is_inverse_distance() {
    let g = build_adjacency(&[[0.0, 0.0], [3.0, 4.0]], &tiny()).unwrap();
    assert_eq!(g.edges().len(), 1);
    assert!((g.edges()[0].2 - 0.2).abs() < 1e-10);
}

#[test]
fn coincident_dancers_are_clamped() {
    let cfg = SpatialConfig { d_min: 0.05, ..tiny() };
    let g = build_adjacency(&[[1.0, 1.0], [1.0, 1.0]], &cfg).unwrap();
    assert!((g.edges()[0].2 - 20.0).abs() < 1e-8);
    let drop = SpatialConfig { proximity: ProximityMode::Drop, ..cfg };
    assert!(build_adjacency(&[[1.0, 1.0], [1.0, 1.0]], &drop).unwrap().edges().is_empty());
}

#[test]
fn top_one_keeps_nearest_edges() {
    let cfg = SpatialConfig { top_k: TopK::Count(1), ..tiny() };
    let pos = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
    let g = build_adjacency(&pos, &cfg).unwrap();
    let kept: Vec<(usize, usize)> = g.edges().iter().map(|e| (e.0, e.1)).collect();
    // brute force: each node's single strongest neighbour, then union
    let mut expect = Vec::new();
    for i in 0..3 {
        let best = (0..3)
            .filter(|&j| j != i)
            .min_by(|&a, &b| {
                let da = (pos[i][0] - pos[a][0]).abs();
                let db = (pos[i][0] - pos[b][0]).abs();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .unwrap();
        expect.push((i.min(best), i.max(best)));
    }
    expect.sort();
    expect.dedup();
    assert_eq!(kept, expect);
    assert_eq!(kept, vec![(0, 1), (1, 2)]);
}

#[test]
fn normalization_cases() {
    let two = normalize(&Tensor::new(vec![2, 2], vec![0.0, 7.0, 7.0, 0.0]).unwrap()).unwrap();
    assert_close(&two, &[0.0, 1.0, 1.0, 0.0], 1e-15);
    let k3 = normalize(&Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 0.0 } else { 1.0 })).unwrap();
    assert_close(&k3, &[0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0], 1e-15);
    let iso = normalize(&Tensor::new(vec![3, 3], vec![0.0, 2.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    assert_close(&iso, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1e-15);
    let asym = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 0.0]).unwrap();
    assert_eq!(normalize(&asym), Err(SpatialError::Asymmetric(0, 1)));
}

#[test]
fn single_dancer_has_no_edges() {
    let g = build_adjacency(&[[0.5, 0.5]], &SpatialConfig::default()).unwrap();
    assert!(g.edges().is_empty());
    assert_eq!(g.normalized().data(), &[0.0]);
    assert!(matches!(
        build_adjacency(&[[f64::NAN, 0.0]], &SpatialConfig::default()),
        Err(SpatialError::NonFinitePosition(0))
    ));
}

#[test]
fn default_k_is_half_of_the_others_rounded_up() {
    assert_eq!(TopK::default().resolve(1), 0);
    assert_eq!(TopK::default().resolve(2), 1);
    assert_eq!(TopK::default().resolve(4), 2);
    assert_eq!(TopK::default().resolve(5), 2);
    assert_eq!(TopK::Count(9).resolve(3), 2);
}

#[test]
fn gcn_layer_cases() {
    let g = Graph::new();
    let h = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let graph = build_adjacency(&[[0.0, 0.0], [1.0, 0.0]], &SpatialConfig::default()).unwrap();
    let eye = g.constant(Tensor::eye(2));
    let out = gcn_layer(h, &graph, eye, Residual::Off).unwrap().value();
    assert_close(&out, &[0.0, 1.0, 1.0, 0.0], 1e-15);

    let single = build_adjacency(&[[0.0, 0.0]], &SpatialConfig::default()).unwrap();
    let h1 = g.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]).unwrap());
    let w = g.constant(Tensor::full(&[3, 2], 5.0));
    let p = g.constant(Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
    let out = gcn_layer(h1, &single, w, Residual::Project(p)).unwrap().value();
    assert_close(&out, &[4.0, 1.0], 1e-15);
}

#[test]
fn gcn_layer_gradients() {
    let mut rng = RngStream::new(21);
    let pos: Vec<[f64; 2]> = (0..4).map(|_| [rng.normal(), rng.normal()]).collect();
    let graph = build_adjacency(&pos, &SpatialConfig::default()).unwrap();
    let h = gaussian(&mut rng, &[4, 3]);
    let w = gaussian(&mut rng, &[3, 3]);
    let r =
        grad_check(|g, v| gcn_layer(v, &graph, g.constant(w.clone()), Residual::Identity)?.square()?.sum(), &h, 1e-4)
            .unwrap();
    assert!(r.passed, "{r:?}");
    let r =
        grad_check(|g, v| gcn_layer(g.constant(h.clone()), &graph, v, Residual::Identity)?.square()?.sum(), &w, 1e-4)
            .unwrap();
    assert!(r.passed, "{r:?}");
}

fn block_output(x: &Tensor, roots: &Tensor, store: &ParamStore, cfg: &SpatialConfig) -> Tensor {
    let g = Graph::new();
    let p = store.bind(&g, false);
    spatial_block(g.constant(x.clone()), roots, &p, "s", cfg).unwrap().value()
}

fn permute_dancers(t: &Tensor, perm: &[usize]) -> Tensor {
    let (l, n, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Tensor::from_fn(&[l, n, c], |i| {
        let (f, rest) = (i / (n * c), i % (n * c));
        let (d, ch) = (rest / c, rest % c);
        t.get(&[f, perm[d], ch])
    })
}

#[test]
fn one_dancer_block_has_no_cross_flow() {
    let cfg = SpatialConfig::default();
    let mut store = ParamStore::new();
    init_params(&mut store, "s", 4, &cfg, &mut RngStream::new(1));
    let x = gaussian(&mut RngStream::new(2), &[3, 1, 4]);
    let roots = gaussian(&mut RngStream::new(3), &[3, 1, 2]);
    let out = block_output(&x, &roots, &store, &cfg);
    // Ã = 0 so each layer is the identity residual
    assert_eq!(out, x);
}

#[test]
fn block_is_permutation_equivariant() {
    let cfg = SpatialConfig::default();
    let mut store = ParamStore::new();
    init_params(&mut store, "s", 5, &cfg, &mut RngStream::new(4));
    let x = gaussian(&mut RngStream::new(5), &[3, 4, 5]);
    let roots = gaussian(&mut RngStream::new(6), &[3, 4, 2]);
    let perm = [2, 0, 3, 1];
    let a = permute_dancers(&block_output(&x, &roots, &store, &cfg), &perm);
    let b = block_output(&permute_dancers(&x, &perm), &permute_dancers(&roots, &perm), &store, &cfg);
    assert!(a.max_abs_diff(&b) < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn normalized_adjacency_is_symmetric_with_unit_spectral_radius(seed in 0u64..10_000, n in 1usize..7, k in 0usize..6) {
        let mut rng = RngStream::new(seed);
        let pos: Vec<[f64; 2]> = (0..n).map(|_| [2.0 * rng.normal(), 2.0 * rng.normal()]).collect();
        let cfg = SpatialConfig { top_k: TopK::Count(k), ..Default::default() };
        let g = build_adjacency(&pos, &cfg).unwrap();
        let a = g.normalized();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(a.get(&[i, j]), a.get(&[j, i]));
            }
        }
        let m = DMatrix::from_row_slice(n, n, a.data());
        let radius = SymmetricEigen::new(m).eigenvalues.iter().fold(0.0f64, |r, e| r.max(e.abs()));
        prop_assert!(radius <= 1.0 + 1e-8);

        let w = pair_weights(&pos, &cfg).unwrap();
        for c in top_k_candidates(&w, n, cfg.top_k.resolve(n)) {
            prop_assert_eq!(c.len(), k.min(n - 1));
        }
    }

    #[test]
    fn bounded_inputs_give_bounded_outputs(seed in 0u64..10_000) {
        let cfg = SpatialConfig::default();
        let mut store = ParamStore::new();
        init_params(&mut store, "s", 4, &cfg, &mut RngStream::new(seed));
        let x = gaussian(&mut RngStream::new(seed + 1), &[2, 3, 4]).map(f64::tanh);
        let roots = gaussian(&mut RngStream::new(seed + 2), &[2, 3, 2]);
        let out = block_output(&x, &roots, &store, &cfg);
        prop_assert!(out.all_finite());
        prop_assert!(out.data().iter().all(|v| v.abs() < 1e3));
    }
}
