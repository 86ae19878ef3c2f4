//! Quaternions `(w, x, y, z)`, axis-angle vectors and rotation matrices.
//!
//! Quaternions returned here are unit length with `w ≥ 0`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{param_err, Result};

fn canonical(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = if q[0] < 0.0 { -1.0 / n } else { 1.0 / n };
    q.map(|v| v * s)
}

/// Rotation matrix of `q` after normalization. A zero quaternion is a
/// parameter error.
pub fn quaternion_to_rotation_matrix(q: [f64; 4]) -> Result<Matrix3<f64>> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 1e-12) {
        return param_err("cannot convert a zero quaternion");
    }
    let [w, x, y, z] = q.map(|v| v / n);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Shepperd's method: branch on the largest of the trace and the diagonal.
pub fn rotation_matrix_to_quaternion(m: &Matrix3<f64>) -> [f64; 4] {
    let (m00, m11, m22) = (m[(0, 0)], m[(1, 1)], m[(2, 2)]);
    let tr = m00 + m11 + m22;
    let q = if tr >= m00 && tr >= m11 && tr >= m22 {
        let s = (1.0 + tr).sqrt() * 2.0;
        [0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s]
    } else if m00 >= m11 && m00 >= m22 {
        let s = (1.0 + m00 - m11 - m22).sqrt() * 2.0;
        [(m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s]
    } else if m11 >= m22 {
        let s = (1.0 + m11 - m00 - m22).sqrt() * 2.0;
        [(m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s]
    } else {
        let s = (1.0 + m22 - m00 - m11).sqrt() * 2.0;
        [(m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s]
    };
    canonical(q)
}

/// Rodrigues' formula; the angle is the vector norm.
pub fn axis_angle_to_rotation_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    let k = if theta < 1e-12 { *v } else { v / theta };
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    if theta < 1e-12 {
        return Matrix3::identity() + kx;
    }
    Matrix3::identity() + kx * theta.sin() + kx * kx * (1.0 - theta.cos())
}

pub fn axis_angle_to_quaternion(v: &Vector3<f64>) -> [f64; 4] {
    let theta = v.norm();
    if theta < 1e-12 {
        return canonical([1.0, 0.5 * v.x, 0.5 * v.y, 0.5 * v.z]);
    }
    let (s, c) = (0.5 * theta).sin_cos();
    canonical([c, s * v.x / theta, s * v.y / theta, s * v.z / theta])
}

/// Axis-angle vector with angle in `[0, π]`.
pub fn quaternion_to_axis_angle(q: [f64; 4]) -> Result<Vector3<f64>> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 1e-12) {
        return param_err("cannot convert a zero quaternion");
    }
    let [w, x, y, z] = canonical(q);
    let xyz = Vector3::new(x, y, z);
    let sin_half = xyz.norm();
    if sin_half < 1e-12 {
        return Ok(xyz * (2.0 / w));
    }
    let theta = 2.0 * sin_half.atan2(w);
    Ok(xyz * (theta / sin_half))
}

pub fn rotation_matrix_to_axis_angle(m: &Matrix3<f64>) -> Vector3<f64> {
    quaternion_to_axis_angle(rotation_matrix_to_quaternion(m)).expect("matrix quaternions are unit length")
}
