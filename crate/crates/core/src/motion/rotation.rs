use super::MotionError;

/// Row-major 3x3 matrix.
pub type Mat3 = [[f64; 3]; 3];

const COLLAPSE_EPS: f64 = 1e-8;

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Gram-Schmidt on the two stored columns; the result has columns
/// `[b1 b2 b1 x b2]`.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Result<Mat3, MotionError> {
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let n1 = norm(a1);
    if !(n1 > COLLAPSE_EPS) {
        return Err(MotionError::DegenerateRotation("first"));
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let proj = b1[0] * a2[0] + b1[1] * a2[1] + b1[2] * a2[2];
    let u2 = [a2[0] - proj * b1[0], a2[1] - proj * b1[1], a2[2] - proj * b1[2]];
    let n2 = norm(u2);
    if !(n2 > COLLAPSE_EPS) {
        return Err(MotionError::DegenerateRotation("second"));
    }
    let b2 = [u2[0] / n2, u2[1] / n2, u2[2] / n2];
    let b3 = cross(b1, b2);
    Ok([[b1[0], b2[0], b3[0]], [b1[1], b2[1], b3[1]], [b1[2], b2[2], b3[2]]])
}

/// First two columns of a rotation matrix.
pub fn matrix_to_rot6d(m: &Mat3) -> [f64; 6] {
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, o) in row.iter_mut().enumerate() {
            *o = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub(crate) fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// Rodrigues rotation about a unit `axis`.
pub(crate) fn axis_angle(axis: [f64; 3], angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Determinant.
pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Largest entry of |R^T R - I|.
pub fn orthogonality_error(m: &Mat3) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let d = (0..3).map(|k| m[k][i] * m[k][j]).sum::<f64>() - if i == j { 1.0 } else { 0.0 };
            worst = worst.max(d.abs());
        }
    }
    worst
}
