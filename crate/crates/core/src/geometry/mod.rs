//! Planar warps, rotation parameterizations, rigid transforms and the
//! pinhole camera.
//!
//! Public matrices act on pixel coordinates, with `(0, 0)` the centre of the
//! top-left pixel. Conversion to the `[-1, 1]` sampling grid happens inside
//! the warps.

mod camera;
mod rotation;
mod warp;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub use camera::{depth_normals, depth_to_3d, depth_warp, PinholeCamera};
pub use rotation::{
    axis_angle_to_quaternion, axis_angle_to_rotation_matrix, quaternion_to_axis_angle,
    quaternion_to_rotation_matrix, rotation_matrix_to_axis_angle, rotation_matrix_to_quaternion,
};
pub use warp::{
    get_perspective_transform, get_rotation_matrix2d, homography_grid, lift_affine, resize, warp_affine,
    warp_perspective, warp_perspective_const,
};
pub(crate) use warp::dlt_least_squares;

pub fn deg2rad(deg: f64) -> f64 {
    deg.to_radians()
}

pub fn rad2deg(rad: f64) -> f64 {
    rad.to_degrees()
}

/// Appends a unit coordinate along the last axis (`…×D → …×(D+1)`).
pub fn to_homogeneous<T: Real>(pts: &Tensor<T>) -> Result<Tensor<T>> {
    let Some((&d, lead)) = pts.shape().split_last() else {
        return shape_err("points need at least one axis");
    };
    let mut shape = lead.to_vec();
    shape.push(d + 1);
    let mut data = Vec::with_capacity(pts.numel() / d * (d + 1));
    for p in pts.data().chunks(d) {
        data.extend_from_slice(p);
        data.push(T::one());
    }
    Tensor::new(&shape, data)
}

/// Divides by the last coordinate (`…×(D+1) → …×D`). A last coordinate
/// within 1e-12 of zero is a degenerate-point error.
pub fn from_homogeneous<T: Real>(pts: &Tensor<T>) -> Result<Tensor<T>> {
    let Some((&d1, lead)) = pts.shape().split_last() else {
        return shape_err("points need at least one axis");
    };
    if d1 < 2 {
        return shape_err(format!("homogeneous points need at least 2 coordinates, got {d1}"));
    }
    let mut shape = lead.to_vec();
    shape.push(d1 - 1);
    let mut data = Vec::with_capacity(pts.numel() / d1 * (d1 - 1));
    for p in pts.data().chunks(d1) {
        let w = p[d1 - 1];
        if w.abs().as_f64() <= 1e-12 {
            return Err(Error::DegeneratePoint(w.as_f64()));
        }
        data.extend(p[..d1 - 1].iter().map(|&v| v / w));
    }
    Tensor::new(&shape, data)
}

/// Matrix taking pixel coordinates of an `h×w` image to `[-1, 1]`.
pub fn normalization_matrix(h: usize, w: usize) -> Result<Matrix3<f64>> {
    if h < 2 || w < 2 {
        return param_err(format!("coordinate normalization needs an image of at least 2×2, got {h}×{w}"));
    }
    let (sx, sy) = (2.0 / (w - 1) as f64, 2.0 / (h - 1) as f64);
    Ok(Matrix3::new(sx, 0.0, -1.0, 0.0, sy, -1.0, 0.0, 0.0, 1.0))
}

/// `(u, v)` in pixels to `[-1, 1]²` for an `h×w` image.
pub fn normalize_pixel_coordinates(u: f64, v: f64, h: usize, w: usize) -> Result<(f64, f64)> {
    let n = normalization_matrix(h, w)?;
    Ok((n[(0, 0)] * u + n[(0, 2)], n[(1, 1)] * v + n[(1, 2)]))
}

pub fn denormalize_pixel_coordinates(x: f64, y: f64, h: usize, w: usize) -> Result<(f64, f64)> {
    normalization_matrix(h, w)?;
    Ok(((x + 1.0) * 0.5 * (w - 1) as f64, (y + 1.0) * 0.5 * (h - 1) as f64))
}

/// Packs matrices into an `N×3×3` tensor.
pub fn mat3_to_tensor<T: Real>(ms: &[Matrix3<f64>]) -> Tensor<T> {
    Tensor::from_fn(&[ms.len().max(1), 3, 3], |i| T::c(ms[i[0]][(i[1], i[2])]))
}

/// Matrix `i` of an `N×3×3` tensor.
pub fn tensor_to_mat3<T: Real>(t: &Tensor<T>, i: usize) -> Result<Matrix3<f64>> {
    match t.shape()[..] {
        [n, 3, 3] if i < n => Ok(Matrix3::from_fn(|r, c| t.at(&[i, r, c]).as_f64())),
        _ => shape_err(format!("expected N×3×3 with N > {i}, got {:?}", t.shape())),
    }
}

/// Applies a homography to 2-D points with perspective division.
pub fn transform_points2(h: &Matrix3<f64>, pts: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    pts.iter()
        .map(|p| {
            let q = h * Vector3::new(p[0], p[1], 1.0);
            if q.z.abs() <= 1e-12 {
                return Err(Error::DegeneratePoint(q.z));
            }
            Ok([q.x / q.z, q.y / q.z])
        })
        .collect()
}

/// Applies a 4×4 transform to 3-D points (affine part; the bottom row is
/// assumed to be `[0, 0, 0, 1]`).
pub fn transform_points3(t: &Matrix4<f64>, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    pts.iter().map(|p| t.fixed_view::<3, 3>(0, 0) * p + t.fixed_view::<3, 1>(0, 3)).collect()
}

/// `a · b`: apply `b` first, then `a`.
pub fn compose(a: &Matrix4<f64>, b: &Matrix4<f64>) -> Matrix4<f64> {
    a * b
}

/// Inverse of a 4×4 transform; singular matrices are an estimation error.
pub fn inverse_transform(t: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    if t.determinant().abs() <= 1e-12 {
        return Err(Error::Estimation("transform is singular".into()));
    }
    t.try_inverse().ok_or_else(|| Error::Estimation("transform is singular".into()))
}

/// Transform from frame `a` to frame `b` when both map world points into
/// their frames: `T_b · T_a⁻¹`.
pub fn relative_transform(t_a: &Matrix4<f64>, t_b: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    Ok(t_b * inverse_transform(t_a)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn angle_and_homogeneous_conversions() {
        assert!((deg2rad(180.0) - PI).abs() < 1e-15);
        assert!((rad2deg(PI / 2.0) - 90.0).abs() < 1e-12);
        let p = Tensor::new(&[1, 3], vec![2.0f64, 4.0, 2.0]).unwrap();
        assert_eq!(from_homogeneous(&p).unwrap().data(), &[1.0, 2.0]);
        let q = Tensor::new(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(to_homogeneous(&q).unwrap().data(), &[1.0, 2.0, 1.0, 3.0, 4.0, 1.0]);
        let bad = Tensor::new(&[3], vec![1.0f64, 1.0, 0.0]).unwrap();
        assert!(matches!(from_homogeneous(&bad), Err(Error::DegeneratePoint(_))));
    }

    #[test]
    fn pixel_normalization_corners() {
        assert_eq!(normalize_pixel_coordinates(0.0, 0.0, 5, 7).unwrap(), (-1.0, -1.0));
        assert_eq!(normalize_pixel_coordinates(6.0, 4.0, 5, 7).unwrap(), (1.0, 1.0));
        assert!(matches!(normalize_pixel_coordinates(0.0, 0.0, 1, 7), Err(Error::Parameter(_))));
        let (x, y) = normalize_pixel_coordinates(2.5, 1.5, 5, 7).unwrap();
        let (u, v) = denormalize_pixel_coordinates(x, y, 5, 7).unwrap();
        assert!((u - 2.5).abs() < 1e-12 && (v - 1.5).abs() < 1e-12);
    }

    #[test]
    fn rigid_transform_algebra() {
        let t = Matrix4::new_translation(&Vector3::new(1.0, -2.0, 0.5))
            * axis_angle_to_rotation_matrix(&Vector3::new(0.1, 0.2, -0.3)).to_homogeneous();
        let id = compose(&inverse_transform(&t).unwrap(), &t);
        assert!((id - Matrix4::identity()).abs().max() < 1e-10);
        assert!((relative_transform(&t, &t).unwrap() - Matrix4::identity()).abs().max() < 1e-10);
        let p = [Vector3::new(0.3, 0.2, 4.0)];
        assert_eq!(transform_points3(&Matrix4::identity(), &p), p.to_vec());
        assert!(matches!(inverse_transform(&Matrix4::zeros()), Err(Error::Estimation(_))));
    }

    proptest! {
        #[test]
        fn transform_chain_matches_composition(
            a in proptest::array::uniform12(-2.0f64..2.0),
            b in proptest::array::uniform12(-2.0f64..2.0),
            p in proptest::array::uniform3(-5.0f64..5.0),
        ) {
            let mk = |v: [f64; 12]| {
                let mut m = Matrix4::identity();
                for r in 0..3 { for c in 0..4 { m[(r, c)] = v[r * 4 + c]; } }
                m
            };
            let (t1, t2) = (mk(a), mk(b));
            let pts = [Vector3::new(p[0], p[1], p[2])];
            let seq = transform_points3(&t2, &transform_points3(&t1, &pts));
            let once = transform_points3(&compose(&t2, &t1), &pts);
            prop_assert!((seq[0] - once[0]).abs().max() < 1e-10);
        }
    }
}
