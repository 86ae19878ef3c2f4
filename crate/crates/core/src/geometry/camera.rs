//! Pinhole cameras, depth back-projection and depth-driven view warping.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};

use super::inverse_transform;
use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Zero-skew pinhole camera with world→camera extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rigid transform taking world points into the camera frame.
    pub extrinsics: Matrix4<f64>,
    pub height: usize,
    pub width: usize,
}

impl PinholeCamera {
    pub fn new(
        (fx, fy, cx, cy): (f64, f64, f64, f64),
        extrinsics: Matrix4<f64>,
        (height, width): (usize, usize),
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return param_err(format!("focal lengths must be positive, got {fx}, {fy}"));
        }
        let r = extrinsics.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return param_err("extrinsic rotation is not a proper rotation");
        }
        let bottom = [extrinsics[(3, 0)], extrinsics[(3, 1)], extrinsics[(3, 2)], extrinsics[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return param_err("extrinsics bottom row must be [0, 0, 0, 1]");
        }
        Ok(Self { fx, fy, cx, cy, extrinsics, height, width })
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn intrinsics_inverse(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Pixel of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> Result<[f64; 2]> {
        if !(p.z > 0.0) {
            return Err(Error::BehindCamera(p.z));
        }
        Ok([self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy])
    }

    /// Camera-frame point at `depth` along the ray of pixel `uv`.
    pub fn unproject(&self, uv: [f64; 2], depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::BehindCamera(depth));
        }
        Ok(Vector3::new((uv[0] - self.cx) / self.fx * depth, (uv[1] - self.cy) / self.fy * depth, depth))
    }

    pub fn project_points(&self, pts: &[Vector3<f64>]) -> Result<Vec<[f64; 2]>> {
        pts.iter().map(|p| self.project(p)).collect()
    }

    pub fn unproject_points(&self, uv: &[[f64; 2]], depth: &[f64]) -> Result<Vec<Vector3<f64>>> {
        if uv.len() != depth.len() {
            return shape_err(format!("{} pixels but {} depths", uv.len(), depth.len()));
        }
        uv.iter().zip(depth).map(|(p, &d)| self.unproject(*p, d)).collect()
    }

    /// Parses the text form: `fx fy cx cy` on the first line, then the four
    /// rows of the extrinsics.
    pub fn parse(text: &str, size: (usize, usize)) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("bad number `{t}`: {e}"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        if rows.len() != 5 || rows.iter().any(|r| r.len() != 4) {
            return Err(Error::Format("camera file needs 5 lines of 4 numbers".into()));
        }
        let t = Matrix4::from_fn(|r, c| rows[r + 1][c]);
        Self::new((rows[0][0], rows[0][1], rows[0][2], rows[0][3]), t, size)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {} {}\n", self.fx, self.fy, self.cx, self.cy);
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| self.extrinsics[(r, c)].to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn read(path: impl AsRef<Path>, size: (usize, usize)) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, size)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Rays `K⁻¹·[u, v, 1]` of every pixel as a `1×3×H×W` tensor.
fn pixel_rays<T: Real>(cam: &PinholeCamera, h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[1, 3, h, w], |i| match i[1] {
        0 => T::c((i[3] as f64 - cam.cx) / cam.fx),
        1 => T::c((i[2] as f64 - cam.cy) / cam.fy),
        _ => T::one(),
    })
}

fn depth_dims<T: Real>(depth: &Var<T>) -> Result<(usize, usize, usize)> {
    match depth.value().dims4()? {
        (n, 1, h, w) => Ok((n, h, w)),
        _ => shape_err(format!("depth must be N×1×H×W, got {:?}", depth.shape())),
    }
}

/// Camera-frame point of every pixel (`N×3×H×W`); zero depth gives the
/// zero point.
pub fn depth_to_3d<T: Real>(depth: &Var<T>, cam: &PinholeCamera) -> Result<Var<T>> {
    let (_, h, w) = depth_dims(depth)?;
    depth.mul_const(&pixel_rays(cam, h, w))
}

/// Unit surface normals from central differences of the point cloud,
/// oriented toward the camera for surfaces facing it. Pixels with zero
/// depth get a zero normal.
pub fn depth_normals<T: Real>(depth: &Var<T>, cam: &PinholeCamera) -> Result<Var<T>> {
    let (_, h, w) = depth_dims(depth)?;
    if h < 2 || w < 2 {
        return shape_err("depth_normals needs at least 2×2 pixels");
    }
    let pts = depth_to_3d(depth, cam)?;
    let next = |n: usize| (0..n).map(|i| (i + 1).min(n - 1)).collect::<Vec<_>>();
    let prev = |n: usize| (0..n).map(|i| i.saturating_sub(1)).collect::<Vec<_>>();
    let tx = pts.index_select(3, &next(w))?.sub(&pts.index_select(3, &prev(w))?)?;
    let ty = pts.index_select(2, &next(h))?.sub(&pts.index_select(2, &prev(h))?)?;
    let c = |v: &Var<T>, i: usize| v.slice(1, i, i + 1, 1);
    let (x0, x1, x2) = (c(&tx, 0)?, c(&tx, 1)?, c(&tx, 2)?);
    let (y0, y1, y2) = (c(&ty, 0)?, c(&ty, 1)?, c(&ty, 2)?);
    let n = Var::concat(
        &[
            y1.mul(&x2)?.sub(&y2.mul(&x1)?)?,
            y2.mul(&x0)?.sub(&y0.mul(&x2)?)?,
            y0.mul(&x1)?.sub(&y1.mul(&x0)?)?,
        ],
        1,
    )?;
    let sq = n.square().sum_axes(&[1], true)?;
    let zero = sq.value().map(|v| if v == T::zero() { T::one() } else { T::zero() });
    let valid = depth.value().map(|v| if v > T::zero() { T::one() } else { T::zero() });
    n.div(&sq.add_const(&zero)?.sqrt())?.mul_const(&valid)
}

/// Warps `src` (seen by `cam_src`) into the reference view using the
/// reference depth: each reference pixel is back-projected at its depth,
/// moved by `T_src·T_ref⁻¹`, projected with `K_src` and sampled bilinearly.
/// Points that land behind the source camera or outside its image read as
/// zero. Differentiable in `src` and `depth_ref`.
pub fn depth_warp<T: Real>(
    src: &Var<T>,
    depth_ref: &Var<T>,
    cam_src: &PinholeCamera,
    cam_ref: &PinholeCamera,
) -> Result<Var<T>> {
    let (n, h, w) = depth_dims(depth_ref)?;
    let (ns, _, hs, ws) = src.value().dims4()?;
    if ns != n {
        return shape_err(format!("source batch {ns} does not match depth batch {n}"));
    }
    if hs < 2 || ws < 2 {
        return shape_err("source image must be at least 2×2");
    }
    let rel = cam_src.extrinsics * inverse_transform(&cam_ref.extrinsics)?;
    let r = rel.fixed_view::<3, 3>(0, 0).into_owned();
    let t = rel.fixed_view::<3, 1>(0, 3).into_owned();
    let a_mat = cam_src.intrinsics() * r * cam_ref.intrinsics_inverse();
    let b = cam_src.intrinsics() * t;
    let plane = h * w;
    // Per-pixel A·[u, v, 1].
    let rays: Vec<[T; 3]> = (0..plane)
        .map(|p| {
            let a = a_mat * Vector3::new((p % w) as f64, (p / w) as f64, 1.0);
            [T::c(a.x), T::c(a.y), T::c(a.z)]
        })
        .collect();
    let bt = [T::c(b.x), T::c(b.y), T::c(b.z)];
    let (sx, sy) = (T::c(2.0 / (ws - 1) as f64), T::c(2.0 / (hs - 1) as f64));
    let min_z = T::c(1e-6);
    let far = T::c(-1e4);

    let d = depth_ref.value().clone();
    let mut grid = vec![T::zero(); n * plane * 2];
    for bi in 0..n {
        for p in 0..plane {
            let dv = d.data()[bi * plane + p];
            let a = rays[p];
            let z = dv * a[2] + bt[2];
            let o = (bi * plane + p) * 2;
            if z <= min_z {
                grid[o] = far;
                grid[o + 1] = far;
            } else {
                grid[o] = (dv * a[0] + bt[0]) / z * sx - T::one();
                grid[o + 1] = (dv * a[1] + bt[1]) / z * sy - T::one();
            }
        }
    }
    let grid = Tensor::new(&[n, h, w, 2], grid)?;
    let grid = Var::from_op("depth_grid", &[depth_ref], grid, move |g| {
        let mut gd = vec![T::zero(); n * plane];
        for bi in 0..n {
            for p in 0..plane {
                let dv = d.data()[bi * plane + p];
                let a = rays[p];
                let z = dv * a[2] + bt[2];
                if z <= min_z {
                    continue;
                }
                let z2 = z * z;
                let du = (a[0] * bt[2] - a[2] * bt[0]) / z2;
                let dvv = (a[1] * bt[2] - a[2] * bt[1]) / z2;
                let o = (bi * plane + p) * 2;
                gd[bi * plane + p] = g.data()[o] * du * sx + g.data()[o + 1] * dvv * sy;
            }
        }
        vec![Some(Tensor::from_parts(vec![n, 1, h, w], gd))]
    })?;
    src.grid_sample(&grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle_to_rotation_matrix;
    use crate::gradcheck::check_gradients;
    use crate::tensor::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(t: Matrix4<f64>, size: (usize, usize)) -> PinholeCamera {
        PinholeCamera::new((100.0, 100.0, 50.0, 50.0), t, size).unwrap()
    }

    fn translation(x: f64, y: f64, z: f64) -> Matrix4<f64> {
        Matrix4::new_translation(&Vector3::new(x, y, z))
    }

    fn texture(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ph: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 6.0).collect();
        Tensor::from_fn(&[1, 1, h, w], |i| {
            let (x, y) = (i[3] as f64, i[2] as f64);
            0.5 + 0.2 * (0.31 * x + ph[0]).sin() * (0.27 * y + ph[1]).cos() + 0.1 * (0.13 * x + 0.19 * y + ph[2]).sin()
        })
    }

    #[test]
    fn projection_examples() {
        let c = cam(Matrix4::identity(), (100, 100));
        assert_eq!(c.project(&Vector3::new(0.0, 0.0, 7.0)).unwrap(), [50.0, 50.0]);
        // u = 100·1/4 + 50, v = 100·2/4 + 50.
        assert_eq!(c.project(&Vector3::new(1.0, 2.0, 4.0)).unwrap(), [75.0, 100.0]);
        assert!(matches!(c.project(&Vector3::new(0.0, 0.0, -1.0)), Err(Error::BehindCamera(_))));
        assert!(matches!(c.unproject([1.0, 1.0], 0.0), Err(Error::BehindCamera(_))));
    }

    proptest! {
        #[test]
        fn project_unproject_round_trip(x in -3.0f64..3.0, y in -3.0f64..3.0, z in 0.1f64..20.0) {
            let c = cam(Matrix4::identity(), (100, 100));
            let p = Vector3::new(x, y, z);
            let back = c.unproject(c.project(&p).unwrap(), z).unwrap();
            prop_assert!((back - p).abs().max() < 1e-9);
        }
    }

    #[test]
    fn camera_text_round_trip() {
        let mut t = axis_angle_to_rotation_matrix(&Vector3::new(0.1, -0.2, 0.05)).to_homogeneous();
        t[(0, 3)] = 0.3;
        t[(2, 3)] = -1.25;
        let c = PinholeCamera::new((120.5, 118.0, 80.0, 60.0), t, (120, 160)).unwrap();
        assert_eq!(PinholeCamera::parse(&c.to_text(), (120, 160)).unwrap(), c);
        assert!(matches!(PinholeCamera::parse("1 2 3\n", (1, 1)), Err(Error::Format(_))));
        let mut bad = Matrix4::identity();
        bad[(0, 0)] = 2.0;
        assert!(matches!(PinholeCamera::new((1.0, 1.0, 0.0, 0.0), bad, (1, 1)), Err(Error::Parameter(_))));
        assert!(PinholeCamera::new((0.0, 1.0, 0.0, 0.0), Matrix4::identity(), (1, 1)).is_err());
    }

    #[test]
    fn depth_points_and_normals() {
        let c = cam(Matrix4::identity(), (101, 101));
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = tape.constant(Tensor::from_fn(&[1, 1, 101, 101], |_| 0.5 + rng.random::<f64>()));
        let pts = depth_to_3d(&d, &c).unwrap();
        assert_eq!(pts.slice(1, 2, 3, 1).unwrap().value().data(), d.value().data());
        let plane = tape.constant(Tensor::full(&[1, 1, 101, 101], 2.0));
        let p = depth_to_3d(&plane, &c).unwrap();
        assert_eq!([p.value().at(&[0, 0, 50, 50]), p.value().at(&[0, 1, 50, 50]), p.value().at(&[0, 2, 50, 50])], [0.0, 0.0, 2.0]);
        let nrm = depth_normals(&plane, &c).unwrap();
        for (y, x) in [(10, 10), (50, 60), (90, 30)] {
            let v: Vec<f64> = (0..3).map(|k| nrm.value().at(&[0, k, y, x])).collect();
            assert!(v[0].abs() < 1e-12 && v[1].abs() < 1e-12 && (v[2] + 1.0).abs() < 1e-12, "{v:?}");
        }
        let holes = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| if i[3] == 1 { 0.0 } else { 1.0 }));
        let nh = depth_normals(&holes, &c).unwrap();
        assert_eq!(nh.value().at(&[0, 2, 2, 1]), 0.0);
    }

    #[test]
    fn identity_pose_reproduces_source() {
        let tape = Tape::new();
        let src = tape.constant(texture(20, 24, 1));
        let c = cam(translation(0.2, 0.0, 0.1), (20, 24));
        let depth = tape.constant(Tensor::full(&[1, 1, 20, 24], 3.0));
        let out = depth_warp(&src, &depth, &c, &c).unwrap();
        assert!(out.value().max_abs_diff(src.value()) < 1e-12);
    }

    #[test]
    fn lateral_translation_shifts_uniformly() {
        // Source camera centre at x = 0.06 with Z = 3: shift fx·t/Z = 2 px.
        let tape = Tape::new();
        let src = tape.constant(texture(20, 24, 2));
        let cam_ref = cam(Matrix4::identity(), (20, 24));
        let cam_src = cam(translation(-0.06, 0.0, 0.0), (20, 24));
        let depth = tape.constant(Tensor::full(&[1, 1, 20, 24], 3.0));
        let out = depth_warp(&src, &depth, &cam_src, &cam_ref).unwrap();
        for y in 0..20 {
            for x in 2..24 {
                let want = src.value().at(&[0, 0, y, x - 2]);
                assert!((out.value().at(&[0, 0, y, x]) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn behind_camera_reads_zero() {
        let tape = Tape::new();
        let src = tape.constant(Tensor::ones(&[1, 1, 8, 8]));
        let c = cam(Matrix4::identity(), (8, 8));
        let depth = tape.constant(Tensor::full(&[1, 1, 8, 8], -1.0));
        assert_eq!(depth_warp(&src, &depth, &c, &c).unwrap().value().max_value(), 0.0);
    }

    #[test]
    fn photometric_gradient_in_depth() {
        let cam_ref = PinholeCamera::new((8.0, 8.0, 3.5, 3.5), Matrix4::identity(), (8, 8)).unwrap();
        let mut t = axis_angle_to_rotation_matrix(&Vector3::new(0.01, -0.02, 0.01)).to_homogeneous();
        t[(0, 3)] = -0.1;
        t[(1, 3)] = 0.05;
        let cam_src = PinholeCamera::new((8.0, 8.0, 3.5, 3.5), t, (8, 8)).unwrap();
        let src = texture(8, 8, 4);
        let target = texture(8, 8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let depth = Tensor::from_fn(&[1, 1, 8, 8], |_| 1.5 + rng.random::<f64>());
        let r = check_gradients(
            |v| {
                let warped = depth_warp(&v[0], &v[1], &cam_src, &cam_ref)?;
                Ok(warped.sub(&v[0].constant_like(target.clone()))?.square().sum())
            },
            &[src, depth],
            1e-6,
        )
        .unwrap();
        assert!(r.iter().all(|r| r.rel_err < 1e-3), "{r:?}");
    }
}
