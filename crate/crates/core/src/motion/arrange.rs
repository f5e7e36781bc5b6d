use super::{GroupMotion, MotionError, POSE_DIM};

/// Sort dancers left to right by first-frame root x (ties: y, then index).
///
/// Returns the reordered motion and `perm`, where new dancer `i` was old
/// dancer `perm[i]`.
pub fn rearrange_dancers(motion: &GroupMotion) -> (GroupMotion, Vec<usize>) {
    let mut perm: Vec<usize> = (0..motion.dancers()).collect();
    perm.sort_by(|&a, &b| {
        let (ra, rb) = (motion.root(0, a), motion.root(0, b));
        ra[0].total_cmp(&rb[0]).then(ra[1].total_cmp(&rb[1])).then(a.cmp(&b))
    });
    let out = apply_permutation(motion, &perm).expect("sorted indices form a permutation");
    (out, perm)
}

/// Reorder dancers so that new dancer `i` is old dancer `perm[i]`.
pub fn apply_permutation(motion: &GroupMotion, perm: &[usize]) -> Result<GroupMotion, MotionError> {
    let n = motion.dancers();
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(MotionError::Invalid(format!("{perm:?} is not a permutation of {n} dancers")));
    }
    let mut data = Vec::with_capacity(motion.data().len());
    for l in 0..motion.frames() {
        for &p in perm {
            data.extend_from_slice(motion.channels(l, p));
        }
    }
    debug_assert_eq!(data.len(), motion.frames() * n * POSE_DIM);
    GroupMotion::new(motion.frames(), n, motion.fps(), data)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::motion::{Pose, ROOT_OFFSET};

    fn motion_with_roots(xy: &[(f64, f64)]) -> GroupMotion {
        let mut data = Vec::new();
        for l in 0..2 {
            for (i, &(x, y)) in xy.iter().enumerate() {
                let mut p = Pose::default();
                p.root = [x, y, 0.9];
                p.contacts[0] = (i as f64 + l as f64) / 10.0;
                data.extend(p.pack().iter().map(|&v| v as f32));
            }
        }
        GroupMotion::new(2, xy.len(), 30.0, data).unwrap()
    }

    #[test]
    fn sorted_input_keeps_order() {
        let (_, perm) = rearrange_dancers(&motion_with_roots(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]));
        assert_eq!(perm, vec![0, 1, 2]);
    }

    #[test]
    fn reversed_input_is_reversed() {
        let m = motion_with_roots(&[(2.0, 0.0), (1.0, 0.0), (0.0, 0.0)]);
        let (out, perm) = rearrange_dancers(&m);
        assert_eq!(perm, vec![2, 1, 0]);
        assert_eq!(out.root(0, 0)[0], 0.0);
        assert_eq!(out.channels(1, 0), m.channels(1, 2));
    }

    #[test]
    fn ties_break_on_y() {
        let (_, perm) = rearrange_dancers(&motion_with_roots(&[(1.0, 0.5), (1.0, -0.5)]));
        assert_eq!(perm, vec![1, 0]);
    }

    #[test]
    fn rejects_non_permutations() {
        let m = motion_with_roots(&[(0.0, 0.0), (1.0, 0.0)]);
        assert!(apply_permutation(&m, &[0, 0]).is_err());
        assert!(apply_permutation(&m, &[0]).is_err());
        assert_eq!(m.channels(0, 0)[ROOT_OFFSET], 0.0);
    }

    proptest! {
        #[test]
        fn rearrangement_is_idempotent(xs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..6)) {
            let xs: Vec<(f64, f64)> = xs.iter().map(|&(x, y)| ((x * 4.0).round() / 4.0, y)).collect();
            let (once, _) = rearrange_dancers(&motion_with_roots(&xs));
            let (twice, perm) = rearrange_dancers(&once);
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(perm, (0..xs.len()).collect::<Vec<_>>());
        }
    }
}
