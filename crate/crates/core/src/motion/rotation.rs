//! 3x3 rotation helpers and the continuous 6D rotation encoding.
//!
//! The 6D encoding stores the first two columns of a rotation matrix;
//! decoding orthonormalises them with Gram-Schmidt and completes the
//! frame with a cross product.

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
/// Row-major 3x3 matrix, `m[row][col]`.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn determinant(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

fn column(m: &Mat3, j: usize) -> Vec3 {
    [m[0][j], m[1][j], m[2][j]]
}

fn from_columns(c0: Vec3, c1: Vec3, c2: Vec3) -> Mat3 {
    [
        [c0[0], c1[0], c2[0]],
        [c0[1], c1[1], c2[1]],
        [c0[2], c1[2], c2[2]],
    ]
}

/// Rodrigues formula for a rotation vector (axis times angle in radians).
pub fn axis_angle_to_matrix(rv: Vec3) -> Mat3 {
    let angle = norm(rv);
    if angle < 1e-15 {
        return IDENTITY;
    }
    let [x, y, z] = scale(rv, 1.0 / angle);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// First two columns, column-major: `(m00, m10, m20, m01, m11, m21)`.
pub fn matrix_to_rot6d(m: &Mat3) -> [f64; 6] {
    let (a, b) = (column(m, 0), column(m, 1));
    [a[0], a[1], a[2], b[0], b[1], b[2]]
}

/// Gram-Schmidt decoding of the 6D representation.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Result<Mat3> {
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let n1 = norm(a1);
    let n2 = norm(a2);
    if !(n1 > 1e-12 && n2 > 1e-12) || !n1.is_finite() || !n2.is_finite() {
        return Err(Error::DegenerateRotation(format!("zero column in {r:?}")));
    }
    let b1 = scale(a1, 1.0 / n1);
    let u2 = sub(a2, scale(b1, dot(b1, a2)));
    let nu = norm(u2);
    if nu <= 1e-9 * n2 {
        return Err(Error::DegenerateRotation(format!("parallel columns in {r:?}")));
    }
    let b2 = scale(u2, 1.0 / nu);
    let b3 = cross(b1, b2);
    Ok(from_columns(b1, b2, b3))
}

/// Unit quaternion `(w, x, y, z)` with non-negative `w`.
pub fn matrix_to_quaternion(m: &Mat3) -> [f64; 4] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    [q[0] * sign / n, q[1] * sign / n, q[2] * sign / n, q[3] * sign / n]
}

pub fn quaternion_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Angles `(z, y, x)` in radians with `R = Rz(z) * Ry(y) * Rx(x)`.
pub fn matrix_to_euler_zyx(m: &Mat3) -> Vec3 {
    let sy = (-m[2][0]).clamp(-1.0, 1.0);
    let y = sy.asin();
    if sy.abs() < 1.0 - 1e-12 {
        [m[1][0].atan2(m[0][0]), y, m[2][1].atan2(m[2][2])]
    } else {
        // gimbal lock: fold the x rotation into z
        [(-m[0][1]).atan2(m[1][1]), y, 0.0]
    }
}

pub fn euler_zyx_to_matrix(angles: Vec3) -> Mat3 {
    let [z, y, x] = angles;
    let rz = axis_angle_to_matrix([0.0, 0.0, z]);
    let ry = axis_angle_to_matrix([0.0, y, 0.0]);
    let rx = axis_angle_to_matrix([x, 0.0, 0.0]);
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

pub fn max_abs_diff(a: &Mat3, b: &Mat3) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            worst = worst.max((a[i][j] - b[i][j]).abs());
        }
    }
    worst
}
