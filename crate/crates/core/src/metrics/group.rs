use super::features::{dancer_joints, JointTrack};
use super::MetricsError;
use crate::motion::{GroupMotion, Skeleton, JOINTS};

/// Lags searched when correlating two dancers.
pub const GMC_MAX_LAG: usize = 5;

/// Mean joint speed per frame step.
pub fn speed_profile(joints: &JointTrack) -> Vec<f64> {
    joints
        .windows(2)
        .map(|w| {
            (0..JOINTS)
                .map(|j| {
                    let d = [w[1][j][0] - w[0][j][0], w[1][j][1] - w[0][j][1], w[1][j][2] - w[0][j][2]];
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                })
                .sum::<f64>()
                / JOINTS as f64
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Best Pearson correlation over lags in `-GMC_MAX_LAG..=GMC_MAX_LAG`; 0 if
/// either profile is constant.
pub fn lagged_correlation(a: &[f64], b: &[f64]) -> f64 {
    if pearson(a, b).is_none() {
        return 0.0;
    }
    let n = a.len().min(b.len());
    let mut best = f64::NEG_INFINITY;
    for lag in -(GMC_MAX_LAG as isize)..=GMC_MAX_LAG as isize {
        let k = lag.unsigned_abs();
        if n < k + 3 {
            continue;
        }
        let (x, y) = if lag >= 0 { (&a[..n - k], &b[k..n]) } else { (&a[k..n], &b[..n - k]) };
        if let Some(r) = pearson(x, y) {
            best = best.max(r);
        }
    }
    if best.is_finite() {
        best
    } else {
        0.0
    }
}

/// Group motion correlation in `[-100, 100]`.
pub fn gmc(motion: &GroupMotion, skeleton: &Skeleton) -> Result<f64, MetricsError> {
    let n = motion.dancers();
    if n < 2 {
        return Err(MetricsError::TooFew { need: 2, got: n });
    }
    let profiles: Vec<Vec<f64>> =
        (0..n).map(|k| Ok(speed_profile(&dancer_joints(motion, k, skeleton)?))).collect::<Result<_, MetricsError>>()?;
    gmc_from_profiles(&profiles)
}

pub fn gmc_from_profiles(profiles: &[Vec<f64>]) -> Result<f64, MetricsError> {
    let n = profiles.len();
    if n < 2 {
        return Err(MetricsError::TooFew { need: 2, got: n });
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        for j in i + 1..n {
            total += lagged_correlation(&profiles[i], &profiles[j]);
            pairs += 1;
        }
    }
    Ok(100.0 * total / pairs as f64)
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn within(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Closed segments `p1-p2` and `q1-q2` share at least one point.
pub fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let disjoint_boxes = p1[0].max(p2[0]) < q1[0].min(q2[0])
        || q1[0].max(q2[0]) < p1[0].min(p2[0])
        || p1[1].max(p2[1]) < q1[1].min(q2[1])
        || q1[1].max(q2[1]) < p1[1].min(p2[1]);
    if disjoint_boxes {
        return false;
    }
    let (d1, d2) = (orient(q1, q2, p1), orient(q1, q2, p2));
    let (d3, d4) = (orient(p1, p2, q1), orient(p1, p2, q2));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && within(q1, q2, p1))
        || (d2 == 0.0 && within(q1, q2, p2))
        || (d3 == 0.0 && within(p1, p2, q1))
        || (d4 == 0.0 && within(p1, p2, q2))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TifCount {
    /// Intersecting (pair, step) combinations.
    pub count: usize,
    /// `count / (pairs * steps)`.
    pub rate: f64,
}

/// Trajectory intersections of ground-plane root displacements, per frame
/// step and dancer pair.
pub fn tif(motion: &GroupMotion) -> Result<TifCount, MetricsError> {
    let (l, n) = (motion.frames(), motion.dancers());
    let paths: Vec<Vec<[f64; 2]>> = (0..n)
        .map(|k| {
            (0..l)
                .map(|f| {
                    let r = motion.root(f, k);
                    [r[0], r[1]]
                })
                .collect()
        })
        .collect();
    tif_from_paths(&paths)
}

pub fn tif_from_paths(paths: &[Vec<[f64; 2]>]) -> Result<TifCount, MetricsError> {
    let n = paths.len();
    if n < 2 {
        return Err(MetricsError::TooFew { need: 2, got: n });
    }
    let l = paths[0].len();
    if l < 2 || paths.iter().any(|p| p.len() != l) {
        return Err(MetricsError::TooShort { need: 2, got: l });
    }
    let mut count = 0;
    for s in 0..l - 1 {
        for i in 0..n {
            for j in i + 1..n {
                if segments_intersect(paths[i][s], paths[i][s + 1], paths[j][s], paths[j][s + 1]) {
                    count += 1;
                }
            }
        }
    }
    let slots = (n * (n - 1) / 2) * (l - 1);
    Ok(TifCount { count, rate: count as f64 / slots as f64 })
}
