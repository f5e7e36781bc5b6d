use serde::Deserialize;

use super::rotation::{mat_mul, mat_vec, rot6d_to_matrix, Mat3};
use super::{MotionError, Pose, JOINTS, POSE_DIM, ROOT_OFFSET};
use crate::numerics::{NumericsError, Tensor, Var};

/// Left ankle, left foot, right ankle, right foot: the joints paired with
/// the four contact channels (heel/toe per foot).
pub const FOOT_JOINTS: [usize; 4] = [7, 10, 8, 11];

const DEFAULT_SKELETON: &str = include_str!("../../data/skeleton_smpl24.json");

#[derive(Deserialize)]
struct SkeletonFile {
    joints: Vec<String>,
    parents: Vec<i32>,
    offsets: Vec<[f64; 3]>,
}

/// 24-joint kinematic tree with fixed rest-pose bone offsets (meters).
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    parents: [i32; JOINTS],
    offsets: [[f64; 3]; JOINTS],
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::from_json(DEFAULT_SKELETON).expect("bundled skeleton is valid")
    }
}

impl Skeleton {
    pub fn from_json(text: &str) -> Result<Self, MotionError> {
        let f: SkeletonFile = serde_json::from_str(text).map_err(|e| MotionError::Json(e.to_string()))?;
        if f.parents.len() != JOINTS || f.offsets.len() != JOINTS || f.joints.len() != JOINTS {
            return Err(MotionError::Invalid(format!("skeleton needs {JOINTS} joints")));
        }
        let mut parents = [0i32; JOINTS];
        parents.copy_from_slice(&f.parents);
        let mut offsets = [[0.0; 3]; JOINTS];
        offsets.copy_from_slice(&f.offsets);
        Self::new(parents, offsets).map(|mut s| {
            s.names = f.joints;
            s
        })
    }

    pub fn new(parents: [i32; JOINTS], offsets: [[f64; 3]; JOINTS]) -> Result<Self, MotionError> {
        if parents[0] != -1 {
            return Err(MotionError::Invalid("joint 0 must be the root".into()));
        }
        for (j, &p) in parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(MotionError::Invalid(format!("joint {j} has parent {p}; parents must precede children")));
            }
        }
        Ok(Self { names: (0..JOINTS).map(|j| format!("joint{j}")).collect(), parents, offsets })
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        (self.parents[j] >= 0).then(|| self.parents[j] as usize)
    }

    pub fn offset(&self, j: usize) -> [f64; 3] {
        self.offsets[j]
    }

    pub fn joint_name(&self, j: usize) -> &str {
        &self.names[j]
    }
}

/// Joint positions (24 x 3) for one pose.
pub fn forward_kinematics(pose: &Pose, skeleton: &Skeleton) -> Result<[[f64; 3]; JOINTS], MotionError> {
    let mut global: [Mat3; JOINTS] = [[[0.0; 3]; 3]; JOINTS];
    let mut pos = [[0.0; 3]; JOINTS];
    for j in 0..JOINTS {
        let local = rot6d_to_matrix(&pose.rot6d[j])?;
        match skeleton.parent(j) {
            None => {
                global[j] = local;
                pos[j] = pose.root;
            }
            Some(p) => {
                global[j] = mat_mul(&global[p], &local);
                let d = mat_vec(&global[p], skeleton.offsets[j]);
                pos[j] = [pos[p][0] + d[0], pos[p][1] + d[1], pos[p][2] + d[2]];
            }
        }
    }
    Ok(pos)
}

/// Differentiable forward kinematics over a batch of packed poses.
///
/// `poses` is `[P, 151]`; returns `[P, 24, 3]`.
pub fn forward_kinematics_tape<'g>(poses: Var<'g>, skeleton: &Skeleton) -> Result<Var<'g>, NumericsError> {
    let g = poses.graph();
    let shape = poses.shape();
    if shape.len() != 2 || shape[1] != POSE_DIM {
        return Err(NumericsError::Invalid(format!("FK expects [P, {POSE_DIM}], got {shape:?}")));
    }
    let p = shape[0];
    let rot = poses.narrow(1, 0, JOINTS * 6)?.reshape(&[p, JOINTS, 6])?;
    let a1 = rot.narrow(2, 0, 3)?;
    let a2 = rot.narrow(2, 3, 3)?;
    let b1 = a1.div(a1.square()?.sum_axis(2)?.sqrt()?)?;
    let proj = b1.mul(a2)?.sum_axis(2)?;
    let u2 = a2.sub(b1.mul(proj)?)?;
    let b2 = u2.div(u2.square()?.sum_axis(2)?.sqrt()?)?;
    let comp = |v: Var<'g>, i: usize| v.narrow(2, i, 1);
    let (x1, y1, z1) = (comp(b1, 0)?, comp(b1, 1)?, comp(b1, 2)?);
    let (x2, y2, z2) = (comp(b2, 0)?, comp(b2, 1)?, comp(b2, 2)?);
    let b3 =
        g.concat(&[y1.mul(z2)?.sub(z1.mul(y2)?)?, z1.mul(x2)?.sub(x1.mul(z2)?)?, x1.mul(y2)?.sub(y1.mul(x2)?)?], 2)?;
    let col = |v: Var<'g>| v.reshape(&[p, JOINTS, 3, 1]);
    // [P, 24, 3, 3] with entry (r, c) = b_c[r]
    let local = g.concat(&[col(b1)?, col(b2)?, col(b3)?], 3)?;
    let root = poses.narrow(1, ROOT_OFFSET, 3)?;

    let mut global: Vec<Var<'g>> = Vec::with_capacity(JOINTS);
    let mut pos: Vec<Var<'g>> = Vec::with_capacity(JOINTS);
    for j in 0..JOINTS {
        let r = local.narrow(1, j, 1)?.reshape(&[p, 3, 3])?;
        match skeleton.parent(j) {
            None => {
                global.push(r);
                pos.push(root);
            }
            Some(par) => {
                let off = g.constant(Tensor::from_parts(vec![3, 1], skeleton.offsets[j].to_vec()));
                let d = global[par].matmul(off)?.reshape(&[p, 3])?;
                pos.push(pos[par].add(d)?);
                global.push(global[par].matmul(r)?);
            }
        }
    }
    let stacked: Vec<Var<'g>> = pos.iter().map(|v| v.reshape(&[p, 1, 3])).collect::<Result<_, _>>()?;
    g.concat(&stacked, 1)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::motion::matrix_to_rot6d;
    use crate::motion::rotation::axis_angle;
    use crate::numerics::{gaussian, grad_check, Graph, RngStream};

    fn cumulative_offsets(s: &Skeleton) -> [[f64; 3]; JOINTS] {
        let mut out = [[0.0; 3]; JOINTS];
        for j in 1..JOINTS {
            let p = s.parent(j).unwrap();
            for k in 0..3 {
                out[j][k] = out[p][k] + s.offset(j)[k];
            }
        }
        out
    }

    #[test]
    fn bundled_skeleton_is_a_valid_tree() {
        let s = Skeleton::default();
        assert_eq!(s.parent(0), None);
        assert_eq!(s.joint_name(7), "left_ankle");
        assert_eq!(s.parent(23), Some(21));
    }

    #[test]
    fn identity_pose_places_joints_at_rest_offsets() {
        let s = Skeleton::default();
        let pos = forward_kinematics(&Pose::default(), &s).unwrap();
        assert_eq!(pos, cumulative_offsets(&s));
        let mut moved = Pose::default();
        moved.root = [1.0, 2.0, 3.0];
        let pos2 = forward_kinematics(&moved, &s).unwrap();
        for j in 0..JOINTS {
            for k in 0..3 {
                assert!((pos2[j][k] - pos[j][k] - moved.root[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_step_rotation() {
        let mut parents = [0i32; JOINTS];
        parents[0] = -1;
        for (j, p) in parents.iter_mut().enumerate().skip(1) {
            *p = j as i32 - 1;
        }
        let mut offsets = [[0.0; 3]; JOINTS];
        offsets[1] = [0.0, 1.0, 0.0];
        let s = Skeleton::new(parents, offsets).unwrap();
        let mut pose = Pose::default();
        pose.rot6d[0] = matrix_to_rot6d(&axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2));
        let pos = forward_kinematics(&pose, &s).unwrap();
        assert!((pos[1][0] + 1.0).abs() < 1e-12);
        assert!(pos[1][1].abs() < 1e-12);
    }

    #[test]
    fn skeleton_rejects_bad_parent_order() {
        let mut parents = [0i32; JOINTS];
        parents[0] = -1;
        parents[5] = 9;
        assert!(Skeleton::new(parents, [[0.0; 3]; JOINTS]).is_err());
    }

    fn random_pose_rows(seed: u64, p: usize) -> Tensor {
        let noise = gaussian(&mut RngStream::new(seed), &[p, POSE_DIM]);
        let base = Pose::default().pack();
        Tensor::from_fn(&[p, POSE_DIM], |i| base[i % POSE_DIM] + 0.3 * noise.data()[i])
    }

    #[test]
    fn tape_fk_matches_plain_fk() {
        let s = Skeleton::default();
        let x = random_pose_rows(5, 3);
        let g = Graph::new();
        let out = forward_kinematics_tape(g.constant(x.clone()), &s).unwrap().value();
        assert_eq!(out.shape(), &[3, JOINTS, 3]);
        for i in 0..3 {
            let pose = Pose::unpack(&x.data()[i * POSE_DIM..][..POSE_DIM]).unwrap();
            let pos = forward_kinematics(&pose, &s).unwrap();
            for j in 0..JOINTS {
                for k in 0..3 {
                    assert!((out.get(&[i, j, k]) - pos[j][k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tape_fk_gradient() {
        let s = Skeleton::default();
        let x = random_pose_rows(6, 2);
        let w = gaussian(&mut RngStream::new(7), &[2, JOINTS, 3]);
        let r = grad_check(|g, v| forward_kinematics_tape(v, &s)?.mul(g.constant(w.clone()))?.sum(), &x, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fk_is_translation_equivariant(seed in 0u64..500, dx in -5.0f64..5.0, dy in -5.0f64..5.0, dz in -5.0f64..5.0) {
            let s = Skeleton::default();
            let row = random_pose_rows(seed, 1);
            let pose = Pose::unpack(row.data()).unwrap();
            let mut shifted = pose.clone();
            shifted.root = [pose.root[0] + dx, pose.root[1] + dy, pose.root[2] + dz];
            let a = forward_kinematics(&pose, &s).unwrap();
            let b = forward_kinematics(&shifted, &s).unwrap();
            for j in 0..JOINTS {
                prop_assert!((b[j][0] - a[j][0] - dx).abs() < 1e-9);
                prop_assert!((b[j][1] - a[j][1] - dy).abs() < 1e-9);
                prop_assert!((b[j][2] - a[j][2] - dz).abs() < 1e-9);
            }
        }
    }
}
