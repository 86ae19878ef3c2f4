//! Homography registration by photometric gradient descent over a
//! Gaussian pyramid.

use gradvision::filters::pyr_down;
use gradvision::geometry::{normalization_matrix, warp_perspective};
use gradvision::{Error, Result, Tape, Tensor};
use nalgebra::Matrix3;

use crate::config::{check_finite, RunConfig, Trace};
use crate::optim::{Optimizer, OptimizerKind};

/// Smallest pyramid side the demos descend to.
pub const MIN_LEVEL_SIZE: usize = 16;

#[derive(Debug, Clone)]
pub struct Registration {
    /// Pixel-space homography taking source to destination coordinates.
    pub homography: Matrix3<f64>,
    pub trace: Trace,
    /// Warped source at the end of each level, coarsest first.
    pub warped: Vec<Tensor<f64>>,
    /// Full-resolution homography at the end of each level, coarsest first.
    pub level_homographies: Vec<Matrix3<f64>>,
}

/// Pyramid with the full-resolution image first, stopping before a side
/// drops below [`MIN_LEVEL_SIZE`].
pub fn pyramid(img: &Tensor<f64>, levels: usize) -> Result<Vec<Tensor<f64>>> {
    let tape = Tape::new();
    let mut out = vec![img.clone()];
    while out.len() < levels {
        let (_, _, h, w) = out.last().expect("non-empty").dims4()?;
        if h.div_ceil(2).min(w.div_ceil(2)) < MIN_LEVEL_SIZE {
            break;
        }
        let next = pyr_down(&tape.constant(out.last().expect("non-empty").clone()))?.value().clone();
        out.push(next);
    }
    Ok(out)
}

/// 1 where an output pixel samples fully inside the source, else 0;
/// broadcast over channels.
fn overlap_mask(h: &gradvision::Var<f64>, src_shape: &[usize], out: (usize, usize)) -> Result<Tensor<f64>> {
    let ones = h.constant_like(Tensor::ones(&[1, 1, src_shape[2], src_shape[3]]));
    let cover = warp_perspective(&ones, h, out)?;
    let c = src_shape[1];
    let m = cover.value();
    Ok(Tensor::from_fn(&[1, c, out.0, out.1], |i| if m.at(&[0, 0, i[2], i[3]]) > 1.0 - 1e-9 { 1.0 } else { 0.0 }))
}

fn to_matrix(p: &[f64]) -> Matrix3<f64> {
    Matrix3::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], 1.0)
}

fn mat_tensor(m: &Matrix3<f64>) -> Tensor<f64> {
    Tensor::from_fn(&[3, 3], |i| m[(i[0], i[1])])
}

/// Homography taking `src` onto `dst` (both `1×C×H×W`).
///
/// Eight entries of a homography between normalized `[-1, 1]` frames are
/// optimized with Adam against the mean absolute photometric error over the
/// pixels whose warp lands inside the source, coarse to fine. The normalized frame is shared by all levels, so parameters and
/// optimizer state carry over unchanged.
pub fn register(src: &Tensor<f64>, dst: &Tensor<f64>, cfg: &RunConfig) -> Result<Registration> {
    cfg.validate()?;
    let (n, _, h, w) = src.dims4()?;
    if src.shape() != dst.shape() || n != 1 {
        return Err(Error::Shape(format!("registration needs two equal 1×C×H×W images, got {:?} and {:?}", src.shape(), dst.shape())));
    }
    let ps = pyramid(src, cfg.levels)?;
    let pd = pyramid(dst, cfg.levels)?;
    let mut params = vec![Tensor::new(&[8], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])?];
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.lr)?;
    let mut trace = Trace::default();
    let mut warped = Vec::new();
    let mut level_homographies = Vec::new();
    let n0 = normalization_matrix(h, w)?;
    let n0_inv = n0.try_inverse().ok_or_else(|| Error::Estimation("singular normalization".into()))?;
    for level in (0..ps.len()).rev() {
        let (_, _, lh, lw) = ps[level].dims4()?;
        let nl = normalization_matrix(lh, lw)?;
        let nl_inv = nl.try_inverse().ok_or_else(|| Error::Estimation("singular normalization".into()))?;
        let mut last = None;
        for it in 0..cfg.iters {
            let tape = Tape::new();
            let p = tape.leaf(params[0].clone());
            let full = gradvision::Var::concat(&[p.clone(), tape.constant(Tensor::new(&[1], vec![1.0])?)], 0)?.reshape(&[1, 3, 3])?;
            let hp = tape.constant(mat_tensor(&nl_inv)).matmul(&full)?.matmul(&tape.constant(mat_tensor(&nl)))?;
            let out = warp_perspective(&tape.constant(ps[level].clone()), &hp, (lh, lw))?;
            let valid = overlap_mask(&hp.detach(), ps[level].shape(), (lh, lw))?;
            let count = valid.sum().max(1.0);
            let loss = out.sub(&tape.constant(pd[level].clone()))?.abs().mul_const(&valid)?.sum().mul_scalar(1.0 / count);
            trace.push(level, check_finite(loss.item(), level, it)?);
            let grads = loss.backward()?;
            opt.step(&mut params, &[grads.wrt(&p)?])?;
            last = Some(out.value().clone());
        }
        warped.push(last.expect("at least one iteration"));
        level_homographies.push(n0_inv * to_matrix(params[0].data()) * n0);
    }
    let homography = *level_homographies.last().expect("at least one level");
    Ok(Registration { homography, trace, warped, level_homographies })
}

/// Largest distance between where `a` and `b` send the four image corners.
pub fn corner_error(a: &Matrix3<f64>, b: &Matrix3<f64>, h: usize, w: usize) -> f64 {
    let (x1, y1) = ((w - 1) as f64, (h - 1) as f64);
    [[0.0, 0.0], [x1, 0.0], [x1, y1], [0.0, y1]]
        .iter()
        .map(|&[x, y]| {
            let p = a * nalgebra::Vector3::new(x, y, 1.0);
            let q = b * nalgebra::Vector3::new(x, y, 1.0);
            (p.x / p.z - q.x / q.z).hypot(p.y / p.z - q.y / q.z)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::textured_image;

    fn cfg(levels: usize, iters: usize) -> RunConfig {
        RunConfig { seed: 0, levels, iters, lr: 1e-3, alpha: 1.0, lambda: 0.0, beta: 0.0, out: None }
    }

    #[test]
    fn identical_pair_stays_at_identity() {
        let img = textured_image(1, 48, 48, 2.0);
        let r = register(&img, &img, &cfg(2, 20)).unwrap();
        assert!(r.trace.last().unwrap() < 1e-4);
        assert!(corner_error(&r.homography, &Matrix3::identity(), 48, 48) < 0.1);
        assert_eq!(r.trace.rows.len(), 40);
        assert_eq!(r.warped.len(), 2);
    }

    #[test]
    fn rejects_mismatched_sizes() {
        let a = textured_image(1, 32, 32, 2.0);
        let b = textured_image(1, 32, 30, 2.0);
        assert!(matches!(register(&a, &b, &cfg(1, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn corner_error_shrinks_every_level() {
        let (h, w) = (128, 128);
        let tex = crate::synth::Texture::new(5, 256.0, 2.0);
        let src = tex.render(1, h, w, |x, y| (x + 64.0, y + 64.0));
        let truth = Matrix3::new(0.996, -0.087, 12.0, 0.087, 0.996, -4.0, 0.0, 0.0, 1.0);
        let inv = truth.try_inverse().unwrap();
        let dst = tex.render(1, h, w, move |x, y| {
            let p = inv * nalgebra::Vector3::new(x, y, 1.0);
            (p.x / p.z + 64.0, p.y / p.z + 64.0)
        });
        let r = register(&src, &dst, &cfg(3, 150)).unwrap();
        let errs: Vec<f64> = r.level_homographies.iter().map(|m| corner_error(m, &truth, h, w)).collect();
        assert!(errs.windows(2).all(|p| p[1] < p[0]), "{errs:?}");
        assert!(errs[2] < 0.5, "{errs:?}");
    }
}
