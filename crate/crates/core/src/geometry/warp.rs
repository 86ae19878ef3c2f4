//! Homography estimation from point pairs and inverse-sampling warps.

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use super::normalization_matrix;
use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::{identity_grid, Real, Tensor, Var};

/// Solves `A·x = b` for a dense row-major `n×n` system by Gaussian
/// elimination with partial pivoting. Returns `None` when a pivot falls
/// below `1e-12` times the largest entry of `A`.
pub(crate) fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() <= 1e-12 * scale {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Some(x)
}

/// Similarity moving the centroid to the origin and the mean distance to √2.
fn conditioning(pts: &[[f64; 2]]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0] / n, y + p[1] / n));
    let md = pts.iter().map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()).sum::<f64>() / n;
    if !(md > 1e-12) || !md.is_finite() {
        return Err(Error::Estimation("points are coincident".into()));
    }
    let s = std::f64::consts::SQRT_2 / md;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply(m: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let q = m * Vector3::new(p[0], p[1], 1.0);
    [q.x / q.z, q.y / q.z]
}

/// The two DLT rows of a correspondence with `h₂₂ = 1`.
fn dlt_rows(s: [f64; 2], d: [f64; 2]) -> [([f64; 8], f64); 2] {
    let ([x, y], [u, v]) = (s, d);
    [
        ([x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y], u),
        ([0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y], v),
    ]
}

fn finish(h: &[f64], ts: &Matrix3<f64>, td: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    let td_inv = td.try_inverse().ok_or_else(|| Error::Estimation("conditioning is singular".into()))?;
    let m = td_inv * hn * ts;
    let z = m[(2, 2)];
    if z.abs() <= 1e-12 || !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Estimation("homography is degenerate".into()));
    }
    Ok(m / z)
}

fn triangle_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs()
}

fn has_collinear_triple(pts: &[[f64; 2]; 4]) -> bool {
    let span = pts.iter().flat_map(|p| pts.iter().map(move |q| (p[0] - q[0]).hypot(p[1] - q[1]))).fold(0.0, f64::max);
    let tol = 1e-9 * span * span;
    (0..4).any(|skip| {
        let t: Vec<[f64; 2]> = (0..4).filter(|&i| i != skip).map(|i| pts[i]).collect();
        triangle_area(t[0], t[1], t[2]) <= tol
    })
}

/// Homography mapping four source points onto four destination points,
/// solved exactly from the 8×8 DLT system, with `H[2,2] = 1`.
pub fn get_perspective_transform(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<Matrix3<f64>> {
    if has_collinear_triple(src) || has_collinear_triple(dst) {
        return Err(Error::Estimation("three control points are collinear".into()));
    }
    let (ts, td) = (conditioning(src)?, conditioning(dst)?);
    let mut a = Vec::with_capacity(64);
    let mut b = Vec::with_capacity(8);
    for (s, d) in src.iter().zip(dst) {
        for (row, rhs) in dlt_rows(apply(&ts, *s), apply(&td, *d)) {
            a.extend_from_slice(&row);
            b.push(rhs);
        }
    }
    let h = solve_dense(a, b).ok_or_else(|| Error::Estimation("DLT system is singular".into()))?;
    finish(&h, &ts, &td)
}

/// Least-squares homography over all pairs (normal equations of the
/// stacked DLT system, on conditioned coordinates).
pub(crate) fn dlt_least_squares(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Matrix3<f64>> {
    if src.len() < 4 || src.len() != dst.len() {
        return Err(Error::Estimation(format!("need at least 4 point pairs, got {}", src.len().min(dst.len()))));
    }
    let (ts, td) = (conditioning(src)?, conditioning(dst)?);
    let mut ata = vec![0.0; 64];
    let mut atb = vec![0.0; 8];
    for (s, d) in src.iter().zip(dst) {
        for (row, rhs) in dlt_rows(apply(&ts, *s), apply(&td, *d)) {
            for i in 0..8 {
                atb[i] += row[i] * rhs;
                for j in 0..8 {
                    ata[i * 8 + j] += row[i] * row[j];
                }
            }
        }
    }
    let h = solve_dense(ata, atb).ok_or_else(|| Error::Estimation("normal equations are singular".into()))?;
    finish(&h, &ts, &td)
}

/// Sampling grid (`N×h×w×2`) of the normalized homographies `m`: output
/// pixel centre `q` reads from `m·q` after perspective division.
pub fn homography_grid<T: Real>(m: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    let nb = match m.shape()[..] {
        [nb, 3, 3] => nb,
        _ => return shape_err(format!("homography batch must be N×3×3, got {:?}", m.shape())),
    };
    let base = identity_grid::<T>(1, h, w);
    let plane = h * w;
    let mv = m.value().clone();
    let far = T::c(-1e4);
    let tiny = T::c(1e-12);
    let mut grid = vec![T::zero(); nb * plane * 2];
    for b in 0..nb {
        let mm = &mv.data()[b * 9..(b + 1) * 9];
        for p in 0..plane {
            let (x, y) = (base.data()[2 * p], base.data()[2 * p + 1]);
            let z = mm[6] * x + mm[7] * y + mm[8];
            let o = (b * plane + p) * 2;
            if z.abs() <= tiny {
                grid[o] = far;
                grid[o + 1] = far;
            } else {
                grid[o] = (mm[0] * x + mm[1] * y + mm[2]) / z;
                grid[o + 1] = (mm[3] * x + mm[4] * y + mm[5]) / z;
            }
        }
    }
    let value = Tensor::new(&[nb, h, w, 2], grid)?;
    Var::from_op("homography_grid", &[m], value, move |g| {
        let mut gm = vec![T::zero(); nb * 9];
        for b in 0..nb {
            let mm = &mv.data()[b * 9..(b + 1) * 9];
            let acc = &mut gm[b * 9..(b + 1) * 9];
            for p in 0..plane {
                let (x, y) = (base.data()[2 * p], base.data()[2 * p + 1]);
                let z = mm[6] * x + mm[7] * y + mm[8];
                if z.abs() <= tiny {
                    continue;
                }
                let u = (mm[0] * x + mm[1] * y + mm[2]) / z;
                let v = (mm[3] * x + mm[4] * y + mm[5]) / z;
                let o = (b * plane + p) * 2;
                let (gu, gv) = (g.data()[o] / z, g.data()[o + 1] / z);
                let q = [x, y, T::one()];
                for c in 0..3 {
                    acc[c] += gu * q[c];
                    acc[3 + c] += gv * q[c];
                    acc[6 + c] -= (gu * u + gv * v) * q[c];
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![nb, 3, 3], gm))]
    })
}

/// Inverse warp of an NCHW batch by pixel-space homographies `h`
/// (`N×3×3`): output pixel `u'` samples the input at `H⁻¹·u'`. Samples
/// outside the input read as zero. Differentiable in `img` and `h`.
pub fn warp_perspective<T: Real>(img: &Var<T>, h: &Var<T>, out: (usize, usize)) -> Result<Var<T>> {
    let (n, _, hin, win) = img.value().dims4()?;
    if h.shape() != [n, 3, 3] {
        return shape_err(format!("expected {n}×3×3 homographies, got {:?}", h.shape()));
    }
    let n_in = normalization_matrix(hin, win)?;
    let n_out_inv = normalization_matrix(out.0, out.1)?
        .try_inverse()
        .ok_or_else(|| Error::Estimation("output normalization is singular".into()))?;
    let left = img.constant_like(super::mat3_to_tensor::<T>(&[n_in]).reshape(&[3, 3])?);
    let right = img.constant_like(super::mat3_to_tensor::<T>(&[n_out_inv]).reshape(&[3, 3])?);
    let m = left.matmul(&h.inverse3x3()?)?.matmul(&right)?;
    img.grid_sample(&homography_grid(&m, out.0, out.1)?)
}

/// [`warp_perspective`] with constant matrices.
pub fn warp_perspective_const<T: Real>(img: &Var<T>, hs: &[Matrix3<f64>], out: (usize, usize)) -> Result<Var<T>> {
    warp_perspective(img, &img.constant_like(super::mat3_to_tensor(hs)), out)
}

/// `N×2×3` affine matrices to `N×3×3` with bottom row `[0, 0, 1]`.
pub fn lift_affine<T: Real>(m: &Var<T>) -> Result<Var<T>> {
    let nb = match m.shape()[..] {
        [nb, 2, 3] => nb,
        _ => return shape_err(format!("affine batch must be N×2×3, got {:?}", m.shape())),
    };
    let row = Tensor::from_fn(&[nb, 1, 3], |i| if i[2] == 2 { T::one() } else { T::zero() });
    Var::concat(&[m.clone(), m.constant_like(row)], 1)
}

/// Affine warp; identical to [`warp_perspective`] with the lifted matrix.
pub fn warp_affine<T: Real>(img: &Var<T>, m: &Var<T>, out: (usize, usize)) -> Result<Var<T>> {
    warp_perspective(img, &lift_affine(m)?, out)
}

/// Rotation by `angle` degrees (counter-clockwise on screen) about `center`
/// with isotropic `scale`.
pub fn get_rotation_matrix2d(center: (f64, f64), angle: f64, scale: f64) -> Result<Matrix2x3<f64>> {
    if scale == 0.0 || !scale.is_finite() {
        return param_err(format!("rotation scale must be non-zero, got {scale}"));
    }
    let (s, c) = angle.to_radians().sin_cos();
    let (a, b) = (scale * c, scale * s);
    let (cx, cy) = center;
    Ok(Matrix2x3::new(a, b, (1.0 - a) * cx - b * cy, -b, a, b * cx + (1.0 - a) * cy))
}

/// Bilinear resize in which the corner pixel centres stay aligned.
pub fn resize<T: Real>(img: &Var<T>, size: (usize, usize)) -> Result<Var<T>> {
    let (n, _, _, _) = img.value().dims4()?;
    img.grid_sample(&img.constant_like(identity_grid(n, size.0, size.1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{mat3_to_tensor, transform_points2};
    use crate::gradcheck::check_gradients;
    use crate::tensor::Tape;
    use proptest::prelude::*;

    fn smooth(n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, c, h, w], |i| {
            let (x, y) = (i[3] as f64, i[2] as f64);
            0.5 + 0.25 * (0.21 * x + 0.1 * i[1] as f64).sin() * (0.17 * y + 0.05 * i[0] as f64).cos()
        })
    }

    fn interior_err(a: &Tensor<f64>, b: &Tensor<f64>, margin: usize) -> f64 {
        let (_, _, h, w) = a.dims4().unwrap();
        let mut e = 0.0f64;
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let (r, c) = ((i / w) % h, i % w);
            if r >= margin && c >= margin && r + margin < h && c + margin < w {
                e = e.max((x - y).abs());
            }
        }
        e
    }

    #[test]
    fn dlt_known_cases() {
        let src = [[0.0, 0.0], [10.0, 0.0], [10.0, 8.0], [0.0, 8.0]];
        let h = get_perspective_transform(&src, &src).unwrap();
        assert!((h - Matrix3::identity()).abs().max() < 1e-10);
        let dst = src.map(|p| [p[0] + 5.0, p[1] + 3.0]);
        let h = get_perspective_transform(&src, &dst).unwrap();
        let want = Matrix3::new(1.0, 0.0, 5.0, 0.0, 1.0, 3.0, 0.0, 0.0, 1.0);
        assert!((h - want).abs().max() < 1e-10);
        let line = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 5.0]];
        assert!(matches!(get_perspective_transform(&line, &src), Err(Error::Estimation(_))));
    }

    #[test]
    fn least_squares_recovers_exact_model() {
        let h = Matrix3::new(1.1, 0.05, 3.0, -0.02, 0.95, -2.0, 1e-4, -2e-4, 1.0);
        let src: Vec<[f64; 2]> = (0..12).map(|i| [(i * 37 % 50) as f64, (i * 23 % 40) as f64]).collect();
        let dst = transform_points2(&h, &src).unwrap();
        let est = dlt_least_squares(&src, &dst).unwrap();
        assert!((est - h).abs().max() < 1e-9);
        assert!(dlt_least_squares(&src[..3], &dst[..3]).is_err());
    }

    proptest! {
        #[test]
        fn dlt_reprojects_random_quads(
            jit in proptest::array::uniform8(-20.0f64..20.0),
            tgt in proptest::array::uniform8(-30.0f64..30.0),
        ) {
            let base = [[40.0, 40.0], [200.0, 40.0], [200.0, 200.0], [40.0, 200.0]];
            let src: [[f64; 2]; 4] = std::array::from_fn(|i| [base[i][0] + jit[2 * i], base[i][1] + jit[2 * i + 1]]);
            let dst: [[f64; 2]; 4] = std::array::from_fn(|i| [base[i][0] + tgt[2 * i], base[i][1] + tgt[2 * i + 1]]);
            let h = get_perspective_transform(&src, &dst).unwrap();
            let proj = transform_points2(&h, &src).unwrap();
            for (p, d) in proj.iter().zip(&dst) {
                prop_assert!((p[0] - d[0]).hypot(p[1] - d[1]) < 1e-6);
            }
        }
    }

    #[test]
    fn identity_and_integer_translation() {
        let tape = Tape::new();
        let img = tape.constant(smooth(2, 2, 9, 11));
        let id = warp_perspective_const(&img, &[Matrix3::identity(); 2], (9, 11)).unwrap();
        assert_eq!(id.value(), img.value());
        let t = Matrix3::new(1.0, 0.0, 3.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let sh = warp_perspective_const(&img, &[t; 2], (9, 11)).unwrap();
        for y in 0..9 {
            for x in 0..11 {
                let got = sh.value().at(&[1, 1, y, x]);
                let want = if x >= 3 { img.value().at(&[1, 1, y, x - 3]) } else { 0.0 };
                assert!((got - want).abs() < 1e-12, "({y},{x}) {got} vs {want}");
            }
        }
        let singular = Matrix3::zeros();
        assert!(matches!(warp_perspective_const(&img, &[singular; 2], (9, 11)), Err(Error::Estimation(_))));
    }

    #[test]
    fn warp_round_trip_is_close() {
        let tape = Tape::new();
        let img = tape.constant(smooth(1, 1, 64, 64));
        let h = Matrix3::new(0.98, 0.08, 2.5, -0.07, 1.01, -1.5, 1e-4, 5e-5, 1.0);
        let fwd = warp_perspective_const(&img, &[h], (64, 64)).unwrap();
        let back = warp_perspective_const(&fwd, &[h.try_inverse().unwrap()], (64, 64)).unwrap();
        assert!(interior_err(back.value(), img.value(), 10) < 1e-2);
    }

    #[test]
    fn quarter_turns_compose_to_identity() {
        let tape = Tape::new();
        let img = tape.constant(smooth(1, 1, 33, 33));
        let m = get_rotation_matrix2d((16.0, 16.0), 90.0, 1.0).unwrap();
        let mt = img.constant_like(Tensor::from_fn(&[1, 2, 3], |i| m[(i[1], i[2])]));
        let mut x = img.clone();
        for _ in 0..4 {
            x = warp_affine(&x, &mt, (33, 33)).unwrap();
        }
        assert!(interior_err(x.value(), img.value(), 4) < 5e-2);
        let id = get_rotation_matrix2d((3.0, 4.0), 0.0, 1.0).unwrap();
        assert!((id - Matrix2x3::identity()).abs().max() < 1e-15);
        assert!(get_rotation_matrix2d((0.0, 0.0), 10.0, 0.0).is_err());
    }

    #[test]
    fn affine_equals_lifted_perspective() {
        let tape = Tape::new();
        let img = tape.constant(smooth(1, 3, 20, 24));
        let m = get_rotation_matrix2d((11.0, 9.0), 23.0, 1.1).unwrap();
        let mt = img.constant_like(Tensor::from_fn(&[1, 2, 3], |i| m[(i[1], i[2])]));
        let a = warp_affine(&img, &mt, (20, 24)).unwrap();
        let lifted = Matrix3::new(m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], 0.0, 0.0, 1.0);
        let p = warp_perspective(&img, &img.constant_like(mat3_to_tensor(&[lifted])), (20, 24)).unwrap();
        assert!(a.value().max_abs_diff(p.value()) < 1e-12);
    }

    #[test]
    fn warp_gradients() {
        let img = smooth(1, 1, 6, 7);
        let h = mat3_to_tensor::<f64>(&[Matrix3::new(1.02, 0.03, 0.31, -0.04, 0.97, 0.22, 1e-3, -2e-3, 1.0)]);
        let r = check_gradients(
            |v| Ok(warp_perspective(&v[0], &v[1], (5, 6))?.square().sum()),
            &[img, h],
            1e-6,
        )
        .unwrap();
        assert!(r.iter().all(|r| r.rel_err < 1e-4), "{r:?}");
    }

    #[test]
    fn resize_keeps_corners() {
        let tape = Tape::new();
        let img = tape.constant(smooth(1, 1, 8, 8));
        let up = resize(&img, (15, 15)).unwrap();
        assert_eq!(up.value().at(&[0, 0, 0, 0]), img.value().at(&[0, 0, 0, 0]));
        assert!((up.value().at(&[0, 0, 14, 14]) - img.value().at(&[0, 0, 7, 7])).abs() < 1e-12);
        assert!((up.value().at(&[0, 0, 2, 4]) - img.value().at(&[0, 0, 1, 2])).abs() < 1e-12);
    }
}
