use super::MetricsError;
use crate::motion::{forward_kinematics, GroupMotion, Skeleton, FOOT_JOINTS, JOINTS};

/// Joint positions of one dancer over time.
pub type JointTrack = Vec<[[f64; 3]; JOINTS]>;

/// Root-relative position mean and std per axis.
pub const POSITION_STATS: std::ops::Range<usize> = 0..6;
/// Per-joint speed mean then std.
pub const JOINT_SPEED_STATS: std::ops::Range<usize> = 6..54;
/// Horizontal root speed mean, std, max; vertical range; path length; net
/// displacement; mean horizontal acceleration.
pub const ROOT_STATS: std::ops::Range<usize> = 54..61;
pub const FEATURE_DIM: usize = 61;

pub fn dancer_joints(motion: &GroupMotion, dancer: usize, skeleton: &Skeleton) -> Result<JointTrack, MetricsError> {
    (0..motion.frames()).map(|l| Ok(forward_kinematics(&motion.pose(l, dancer), skeleton)?)).collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Fixed-length kinematic descriptor of one dancer's joint track.
pub fn kinematic_features(joints: &[[[f64; 3]; JOINTS]]) -> Result<Vec<f64>, MetricsError> {
    let l = joints.len();
    if l < 2 {
        return Err(MetricsError::TooShort { need: 2, got: l });
    }
    let mut out = Vec::with_capacity(FEATURE_DIM);

    let rel: Vec<(f64, f64)> = (0..3)
        .map(|axis| {
            let v: Vec<f64> = joints.iter().flat_map(|f| f.iter().map(move |j| j[axis] - f[0][axis])).collect();
            mean_std(&v)
        })
        .collect();
    out.extend(rel.iter().map(|s| s.0));
    out.extend(rel.iter().map(|s| s.1));

    let speeds: Vec<Vec<f64>> =
        (0..JOINTS).map(|j| joints.windows(2).map(|w| norm(sub(w[1][j], w[0][j]))).collect()).collect();
    let stats: Vec<(f64, f64)> = speeds.iter().map(|s| mean_std(s)).collect();
    out.extend(stats.iter().map(|s| s.0));
    out.extend(stats.iter().map(|s| s.1));

    let root: Vec<[f64; 3]> = joints.iter().map(|f| f[0]).collect();
    let hvel: Vec<[f64; 3]> = root.windows(2).map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1], 0.0]).collect();
    let hspeed: Vec<f64> = hvel.iter().map(|&v| norm(v)).collect();
    let (m, s) = mean_std(&hspeed);
    out.push(m);
    out.push(s);
    out.push(hspeed.iter().copied().fold(0.0, f64::max));
    let (zmin, zmax) = root.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[2]), hi.max(r[2])));
    out.push(zmax - zmin);
    out.push(root.windows(2).map(|w| norm(sub(w[1], w[0]))).sum());
    out.push(norm(sub(root[l - 1], root[0])));
    let acc: Vec<f64> = hvel.windows(2).map(|w| norm(sub(w[1], w[0]))).collect();
    out.push(mean_std(&acc).0);

    debug_assert_eq!(out.len(), FEATURE_DIM);
    Ok(out)
}

/// Foot-skating score of one dancer: mean over frames of the normalized
/// horizontal root acceleration times the slower foot speed of each foot.
/// Zero when every root acceleration happens over a planted foot.
pub fn pfc_from_joints(joints: &[[[f64; 3]; JOINTS]]) -> Result<f64, MetricsError> {
    let l = joints.len();
    if l < 3 {
        return Err(MetricsError::TooShort { need: 3, got: l });
    }
    let acc: Vec<f64> = (1..l - 1)
        .map(|i| {
            let a = |k: usize| joints[i + 1][0][k] - 2.0 * joints[i][0][k] + joints[i - 1][0][k];
            (a(0) * a(0) + a(1) * a(1)).sqrt()
        })
        .collect();
    let peak = acc.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(0.0);
    }
    // FOOT_JOINTS is (left heel, left toe, right heel, right toe).
    let speed = |i: usize, j: usize| norm(sub(joints[i + 1][j], joints[i][j]));
    let total: f64 = (1..l - 1)
        .map(|i| {
            let left = speed(i, FOOT_JOINTS[0]).min(speed(i, FOOT_JOINTS[1]));
            let right = speed(i, FOOT_JOINTS[2]).min(speed(i, FOOT_JOINTS[3]));
            acc[i - 1] / peak * left * right
        })
        .sum();
    Ok(total / (l - 2) as f64)
}

pub fn pfc(motion: &GroupMotion, dancer: usize, skeleton: &Skeleton) -> Result<f64, MetricsError> {
    pfc_from_joints(&dancer_joints(motion, dancer, skeleton)?)
}

/// Formation descriptor: the mean dancer descriptor followed by pairwise
/// distance, spread around the centroid and centroid speed (mean and std each).
pub fn group_features(motion: &GroupMotion, skeleton: &Skeleton) -> Result<Vec<f64>, MetricsError> {
    let n = motion.dancers();
    let mut out = vec![0.0; FEATURE_DIM];
    for k in 0..n {
        for (o, f) in out.iter_mut().zip(kinematic_features(&dancer_joints(motion, k, skeleton)?)?) {
            *o += f / n as f64;
        }
    }
    let ground = |l: usize, k: usize| {
        let r = motion.root(l, k);
        [r[0], r[1]]
    };
    let mut pair = Vec::new();
    let mut spread = Vec::new();
    let mut centroids = Vec::new();
    for l in 0..motion.frames() {
        let c = (0..n).fold([0.0, 0.0], |acc, k| {
            let p = ground(l, k);
            [acc[0] + p[0] / n as f64, acc[1] + p[1] / n as f64]
        });
        for i in 0..n {
            let p = ground(l, i);
            spread.push(((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt());
            for j in i + 1..n {
                let q = ground(l, j);
                pair.push(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt());
            }
        }
        centroids.push(c);
    }
    let cspeed: Vec<f64> =
        centroids.windows(2).map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt()).collect();
    for v in [&pair, &spread, &cspeed] {
        let (m, s) = mean_std(v);
        out.push(m);
        out.push(s);
    }
    Ok(out)
}
