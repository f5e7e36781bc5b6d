use proptest::prelude::*;

use super::*;
use crate::motion::{GroupMotion, Pose, Skeleton, JOINTS, POSE_DIM};
use crate::numerics::RngStream;

fn build(frames: usize, dancers: usize, f: impl Fn(usize, usize) -> Pose) -> GroupMotion {
    let mut data = Vec::with_capacity(frames * dancers * POSE_DIM);
    for l in 0..frames {
        for k in 0..dancers {
            data.extend(f(l, k).pack().into_iter().map(|v| v as f32));
        }
    }
    GroupMotion::new(frames, dancers, 30.0, data).unwrap()
}

/// Smoothly varying joint rotations plus a wandering root.
fn wiggle(frames: usize, dancers: usize, seed: u64) -> GroupMotion {
    let mut rng = RngStream::new(seed);
    let phase: Vec<f64> = (0..dancers * JOINTS).map(|_| rng.uniform_range(0.0, 6.28)).collect();
    let freq: Vec<f64> = (0..dancers).map(|_| rng.uniform_range(0.1, 0.4)).collect();
    build(frames, dancers, |l, k| {
        let mut p = Pose::default();
        for (j, r) in p.rot6d.iter_mut().enumerate() {
            let a = 0.4 * (freq[k] * l as f64 + phase[k * JOINTS + j]).sin();
            *r = [a.cos(), a.sin(), 0.0, -a.sin(), a.cos(), 0.0];
        }
        let t = l as f64 * freq[k];
        p.root = [k as f64 + 0.3 * t.sin(), 0.2 * (1.3 * t).cos(), 0.9 + 0.05 * t.sin()];
        p
    })
}

fn joints_of(m: &GroupMotion, k: usize) -> JointTrack {
    dancer_joints(m, k, &Skeleton::default()).unwrap()
}

#[test]
fn static_pose_has_zero_velocity_stats() {
    let m = build(20, 1, |_, _| Pose { root: [0.5, -1.0, 0.9], ..Pose::default() });
    let f = kinematic_features(&joints_of(&m, 0)).unwrap();
    assert_eq!(f.len(), FEATURE_DIM);
    assert!(f[JOINT_SPEED_STATS].iter().all(|&v| v == 0.0));
    assert!(f[ROOT_STATS].iter().all(|&v| v == 0.0));
}

#[test]
fn features_need_two_frames() {
    let m = build(2, 1, |_, _| Pose::default());
    assert_eq!(kinematic_features(&joints_of(&m, 0)[..1]), Err(MetricsError::TooShort { need: 2, got: 1 }));
}

#[test]
fn time_reversal_keeps_speed_stats() {
    let m = wiggle(40, 1, 3);
    let fwd = joints_of(&m, 0);
    let rev: JointTrack = fwd.iter().rev().copied().collect();
    let (a, b) = (kinematic_features(&fwd).unwrap(), kinematic_features(&rev).unwrap());
    for i in JOINT_SPEED_STATS.chain(POSITION_STATS) {
        assert!((a[i] - b[i]).abs() < 1e-12, "feature {i}: {} vs {}", a[i], b[i]);
    }
}

#[test]
fn doubling_root_translation_doubles_root_stats() {
    let base = wiggle(40, 1, 5);
    let doubled = build(40, 1, |l, k| {
        let mut p = base.pose(l, k);
        p.root = p.root.map(|v| 2.0 * v);
        p
    });
    let a = kinematic_features(&joints_of(&base, 0)).unwrap();
    let b = kinematic_features(&joints_of(&doubled, 0)).unwrap();
    for i in ROOT_STATS {
        assert!((2.0 * a[i] - b[i]).abs() < 1e-9 * (1.0 + a[i].abs()), "feature {i}: {} vs {}", a[i], b[i]);
    }
}

fn random_set(rng: &mut RngStream, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect()
}

#[test]
fn frechet_identical_sets_is_zero() {
    let set = random_set(&mut RngStream::new(1), 40, 8);
    assert!(frechet_distance(&set, &set).unwrap().abs() < 1e-8);
}

#[test]
fn frechet_mean_shift_is_squared_norm() {
    let a = random_set(&mut RngStream::new(2), 30, 5);
    let delta = [0.5, -1.0, 2.0, 0.0, 0.25];
    let b: Vec<Vec<f64>> = a.iter().map(|v| v.iter().zip(&delta).map(|(x, d)| x + d).collect()).collect();
    let expect: f64 = delta.iter().map(|d| d * d).sum();
    assert!((frechet_distance(&a, &b).unwrap() - expect).abs() < 1e-6);
}

#[test]
fn frechet_one_dimensional_closed_form() {
    let mut rng = RngStream::new(9);
    for _ in 0..20 {
        let a: Vec<Vec<f64>> = (0..25).map(|_| vec![rng.normal() * 2.0 + 1.0]).collect();
        let b: Vec<Vec<f64>> = (0..17).map(|_| vec![rng.normal() * 0.5 - 0.3]).collect();
        let stats = |s: &[Vec<f64>]| {
            let n = s.len() as f64;
            let m = s.iter().map(|v| v[0]).sum::<f64>() / n;
            let var = s.iter().map(|v| (v[0] - m).powi(2)).sum::<f64>() / (n - 1.0) + COV_EPS;
            (m, var.sqrt())
        };
        let ((ma, sa), (mb, sb)) = (stats(&a), stats(&b));
        let expect = (ma - mb).powi(2) + (sa - sb).powi(2);
        assert!((frechet_distance(&a, &b).unwrap() - expect).abs() < 1e-9);
    }
}

#[test]
fn frechet_rejects_bad_input() {
    let a = random_set(&mut RngStream::new(1), 4, 3);
    let b = random_set(&mut RngStream::new(2), 4, 2);
    assert_eq!(frechet_distance(&a, &b), Err(MetricsError::Dimension { expected: 3, got: 2 }));
    assert_eq!(frechet_distance(&a[..1], &a), Err(MetricsError::TooFew { need: 2, got: 1 }));
}

proptest! {
    #[test]
    fn frechet_is_symmetric(seed in 0u64..1000, dim in 1usize..6) {
        let mut rng = RngStream::new(seed);
        let a = random_set(&mut rng, 12, dim);
        let b: Vec<Vec<f64>> = random_set(&mut rng, 9, dim).into_iter().map(|v| v.iter().map(|x| 3.0 * x + 1.0).collect()).collect();
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
    }

    #[test]
    fn gmc_stays_in_range(seed in 0u64..1000) {
        let mut rng = RngStream::new(seed);
        let profiles: Vec<Vec<f64>> = (0..3).map(|_| (0..30).map(|_| rng.uniform()).collect()).collect();
        let g = gmc_from_profiles(&profiles).unwrap();
        prop_assert!((-100.0..=100.0).contains(&g));
    }
}

#[test]
fn gmc_identical_dancers_is_hundred() {
    let one = wiggle(50, 1, 4);
    let m = build(50, 3, |l, _| one.pose(l, 0));
    assert!((gmc(&m, &Skeleton::default()).unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn gmc_static_partner_is_zero() {
    let one = wiggle(50, 1, 4);
    let m = build(50, 2, |l, k| if k == 0 { one.pose(l, 0) } else { Pose::default() });
    assert_eq!(gmc(&m, &Skeleton::default()).unwrap(), 0.0);
}

#[test]
fn gmc_recovers_shift() {
    let mut rng = RngStream::new(8);
    let s: Vec<f64> = (0..63).map(|_| rng.uniform()).collect();
    let a = s[3..].to_vec();
    let b = s[..60].to_vec();
    // Lag 0 on the realigned streams is a perfect match.
    assert!((gmc_from_profiles(&[a, b]).unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn gmc_ignores_dancer_translation() {
    let m = wiggle(40, 3, 11);
    let moved = build(40, 3, |l, k| {
        let mut p = m.pose(l, k);
        p.root[0] += 2.0 * k as f64;
        p.root[1] -= 1.0;
        p
    });
    let sk = Skeleton::default();
    assert!((gmc(&m, &sk).unwrap() - gmc(&moved, &sk).unwrap()).abs() < 1e-4);
}

#[test]
fn gmc_needs_two_dancers() {
    let m = wiggle(10, 1, 1);
    assert_eq!(gmc(&m, &Skeleton::default()), Err(MetricsError::TooFew { need: 2, got: 1 }));
}

#[test]
fn tif_crossing_diagonals() {
    let paths = vec![vec![[0.0, 0.0], [1.0, 1.0]], vec![[0.0, 1.0], [1.0, 0.0]]];
    let t = tif_from_paths(&paths).unwrap();
    assert_eq!((t.count, t.rate), (1, 1.0));
}

#[test]
fn tif_parallel_is_zero() {
    let paths: Vec<Vec<[f64; 2]>> = (0..3).map(|k| (0..20).map(|l| [l as f64 * 0.1, k as f64]).collect()).collect();
    assert_eq!(tif_from_paths(&paths).unwrap().count, 0);
}

#[test]
fn tif_touching_endpoint_counts_once() {
    let paths = vec![vec![[0.0, 0.0], [1.0, 0.0]], vec![[1.0, 0.0], [1.0, 1.0]]];
    assert_eq!(tif_from_paths(&paths).unwrap().count, 1);
}

type P = [i64; 2];

fn cross(a: P, b: P) -> i64 {
    a[0] * b[1] - a[1] * b[0]
}

fn minus(a: P, b: P) -> P {
    [a[0] - b[0], a[1] - b[1]]
}

fn on_segment(p: P, a: P, b: P) -> bool {
    let ab = minus(b, a);
    if ab == [0, 0] {
        return p == a;
    }
    let ap = minus(p, a);
    cross(ab, ap) == 0 && {
        let dot = ap[0] * ab[0] + ap[1] * ab[1];
        (0..=ab[0] * ab[0] + ab[1] * ab[1]).contains(&dot)
    }
}

/// Exact parametric intersection on integer coordinates.
fn naive_intersect(p1: P, p2: P, q1: P, q2: P) -> bool {
    let (r, w) = (minus(p2, p1), minus(q2, q1));
    let qp = minus(q1, p1);
    let den = cross(r, w);
    if den != 0 {
        let (sn, un) = (cross(qp, w), cross(qp, r));
        let within = |num: i64| if den > 0 { (0..=den).contains(&num) } else { (den..=0).contains(&num) };
        return within(sn) && within(un);
    }
    on_segment(q1, p1, p2) || on_segment(q2, p1, p2) || on_segment(p1, q1, q2) || on_segment(p2, q1, q2)
}

fn naive_count(paths: &[Vec<P>]) -> usize {
    let mut count = 0;
    for i in 0..paths.len() {
        for j in 0..paths.len() {
            if i < j {
                for s in 1..paths[i].len() {
                    count += naive_intersect(paths[i][s - 1], paths[i][s], paths[j][s - 1], paths[j][s]) as usize;
                }
            }
        }
    }
    count
}

fn grid_walk(rng: &mut RngStream, len: usize) -> Vec<P> {
    let mut p = [rng.below(5) as i64 - 2, rng.below(5) as i64 - 2];
    let mut out = vec![p];
    for _ in 1..len {
        p = [p[0] + rng.below(3) as i64 - 1, p[1] + rng.below(3) as i64 - 1];
        out.push(p);
    }
    out
}

fn as_f64(paths: &[Vec<P>]) -> Vec<Vec<[f64; 2]>> {
    paths.iter().map(|p| p.iter().map(|q| [q[0] as f64, q[1] as f64]).collect()).collect()
}

#[test]
fn tif_matches_naive_checker_on_random_duets() {
    let mut rng = RngStream::new(21);
    let mut total = 0;
    for _ in 0..50 {
        let paths = vec![grid_walk(&mut rng, 40), grid_walk(&mut rng, 40)];
        let expect = naive_count(&paths);
        total += expect;
        assert_eq!(tif_from_paths(&as_f64(&paths)).unwrap().count, expect);
    }
    assert!(total > 0, "fixtures should produce some intersections");
}

#[test]
fn tif_matches_naive_checker_on_groups() {
    let mut rng = RngStream::new(22);
    for n in 2..6 {
        let paths: Vec<Vec<P>> = (0..n).map(|_| grid_walk(&mut rng, 25)).collect();
        let t = tif_from_paths(&as_f64(&paths)).unwrap();
        assert_eq!(t.count, naive_count(&paths));
        assert_eq!(t.rate, t.count as f64 / (n * (n - 1) / 2 * 24) as f64);
    }
}

#[test]
fn tif_invariant_under_rigid_motion() {
    let mut rng = RngStream::new(23);
    for _ in 0..20 {
        let paths: Vec<Vec<[f64; 2]>> = (0..3)
            .map(|_| {
                let mut p = [rng.normal(), rng.normal()];
                (0..30)
                    .map(|_| {
                        p = [p[0] + 0.3 * rng.normal(), p[1] + 0.3 * rng.normal()];
                        p
                    })
                    .collect()
            })
            .collect();
        let (c, s) = (0.7f64.cos(), 0.7f64.sin());
        let moved: Vec<Vec<[f64; 2]>> = paths
            .iter()
            .map(|p| p.iter().map(|q| [c * q[0] - s * q[1] + 5.0, s * q[0] + c * q[1] - 3.0]).collect())
            .collect();
        assert_eq!(tif_from_paths(&paths).unwrap().count, tif_from_paths(&moved).unwrap().count);
    }
    // Quarter turns and integer shifts keep touching cases exact.
    let grid: Vec<Vec<P>> = (0..3).map(|_| grid_walk(&mut rng, 30)).collect();
    let turned: Vec<Vec<P>> = grid.iter().map(|p| p.iter().map(|q| [-q[1] + 7, q[0] - 2]).collect()).collect();
    assert_eq!(tif_from_paths(&as_f64(&grid)).unwrap(), tif_from_paths(&as_f64(&turned)).unwrap());
}

#[test]
fn tif_from_motion_uses_ground_roots() {
    let m = build(2, 2, |l, k| Pose {
        root: match (l, k) {
            (0, 0) => [0.0, 0.0, 0.9],
            (1, 0) => [1.0, 1.0, 0.9],
            (0, 1) => [0.0, 1.0, 0.2],
            _ => [1.0, 0.0, 1.5],
        },
        ..Pose::default()
    });
    assert_eq!(tif(&m).unwrap().count, 1);
}

#[test]
fn diversity_cases() {
    let a = vec![1.0, 2.0, 3.0];
    assert_eq!(diversity(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
    assert_eq!(diversity(&[vec![0.0, 0.0], vec![3.0, 0.0]]).unwrap(), 3.0);
    let set = random_set(&mut RngStream::new(4), 7, 4);
    let mut shuffled = set.clone();
    shuffled.reverse();
    shuffled.swap(0, 3);
    assert!((diversity(&set).unwrap() - diversity(&shuffled).unwrap()).abs() < 1e-12);
    assert_eq!(diversity(&set[..1]), Err(MetricsError::TooFew { need: 2, got: 1 }));
}

#[test]
fn pfc_stationary_root_is_zero() {
    let m = build(30, 1, |l, _| {
        let mut p = wiggle(30, 1, 2).pose(l, 0);
        p.root = [0.0, 0.0, 0.9];
        p
    });
    assert_eq!(pfc(&m, 0, &Skeleton::default()).unwrap(), 0.0);
}

fn accelerating(frames: usize, pin_feet: bool) -> JointTrack {
    let rest = joints_of(&build(2, 1, |_, _| Pose::default()), 0)[0];
    (0..frames)
        .map(|l| {
            let dx = 0.01 * (l * l) as f64;
            let mut f = rest;
            for (j, p) in f.iter_mut().enumerate() {
                if !(pin_feet && crate::motion::FOOT_JOINTS.contains(&j)) {
                    p[0] += dx;
                }
            }
            f
        })
        .collect()
}

#[test]
fn pfc_moving_feet_is_positive() {
    assert!(pfc_from_joints(&accelerating(20, false)).unwrap() > 0.0);
}

#[test]
fn pfc_gliding_over_planted_feet_is_zero() {
    assert_eq!(pfc_from_joints(&accelerating(20, true)).unwrap(), 0.0);
}

#[test]
fn pfc_needs_three_frames() {
    assert_eq!(pfc_from_joints(&accelerating(2, false)), Err(MetricsError::TooShort { need: 3, got: 2 }));
}

#[test]
fn evaluate_reports_all_scores() {
    let generated: Vec<GroupMotion> = (0..4).map(|s| wiggle(30, 3, s)).collect();
    let reference: Vec<GroupMotion> = (10..14).map(|s| wiggle(30, 3, s)).collect();
    let sk = Skeleton::default();
    let self_report = evaluate(&generated, &generated, &sk).unwrap();
    assert!(self_report.fid.unwrap() < 1e-6);
    assert!(self_report.gmr.unwrap() < 1e-6);
    let r = evaluate(&generated, &reference, &sk).unwrap();
    assert!(r.fid.unwrap() > 0.0 && r.gmr.unwrap() > 0.0 && r.div.unwrap() > 0.0);
    assert!((-100.0..=100.0).contains(&r.gmc.unwrap()));
    assert!(r.tif.unwrap() >= 0.0 && r.pfc >= 0.0);
    assert_eq!((r.generated, r.reference, r.dancer_sequences), (4, 4, 12));
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), r);
    assert!(r.table().contains("GMR"));
}
