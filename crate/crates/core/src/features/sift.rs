//! Dominant orientation and the 128-d SIFT descriptor.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Real, Tensor, Var};

/// Side length of a descriptor patch.
pub const PATCH_SIZE: usize = 32;
pub const DESCRIPTOR_DIM: usize = 128;
const SPATIAL_BINS: usize = 4;
const ORI_BINS: usize = 8;
const CLAMP: f64 = 0.2;
const ORIENTATION_BINS: usize = 36;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    /// Radians in `(-π, π]`.
    pub angle: f64,
    /// Set when the patch has no gradient; `angle` is then 0.
    pub degenerate: bool,
}

/// Central differences with clamped indices on an `s×s` plane.
fn gradients(p: &[f64], s: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; s * s];
    let mut gy = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(s - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(s - 1));
            gx[y * s + x] = 0.5 * (p[y * s + xr] - p[y * s + xl]);
            gy[y * s + x] = 0.5 * (p[yd * s + x] - p[yu * s + x]);
        }
    }
    (gx, gy)
}

fn square_side<T: Real>(patch: &Tensor<T>) -> Result<usize> {
    let r = patch.ndim();
    if r < 2 || patch.shape()[r - 1] != patch.shape()[r - 2] || patch.numel() != patch.shape()[r - 1].pow(2) {
        return shape_err(format!("expected a single square patch, got {:?}", patch.shape()));
    }
    Ok(patch.shape()[r - 1])
}

/// Peak of a 36-bin magnitude-weighted orientation histogram with a
/// Gaussian window of σ = side/4 and parabolic peak interpolation.
pub fn dominant_orientation<T: Real>(patch: &Tensor<T>) -> Result<Orientation> {
    let s = square_side(patch)?;
    let p: Vec<f64> = patch.data().iter().map(|v| v.as_f64()).collect();
    let (gx, gy) = gradients(&p, s);
    let c = (s as f64 - 1.0) / 2.0;
    let sigma = s as f64 / 4.0;
    let mut hist = [0.0f64; ORIENTATION_BINS];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let m = gx[i].hypot(gy[i]);
            if m == 0.0 {
                continue;
            }
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            let w = m * (-r2 / (2.0 * sigma * sigma)).exp();
            let b = gy[i].atan2(gx[i]).rem_euclid(TAU) / TAU * ORIENTATION_BINS as f64;
            let b0 = b.floor();
            let f = b - b0;
            let b0 = b0 as usize % ORIENTATION_BINS;
            hist[b0] += w * (1.0 - f);
            hist[(b0 + 1) % ORIENTATION_BINS] += w * f;
        }
    }
    let (k, &peak) = hist
        .iter()
        .enumerate()
        .fold((0, &hist[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
    if !(peak > 1e-12) {
        return Ok(Orientation { angle: 0.0, degenerate: true });
    }
    let l = hist[(k + ORIENTATION_BINS - 1) % ORIENTATION_BINS];
    let r = hist[(k + 1) % ORIENTATION_BINS];
    let den = l - 2.0 * peak + r;
    let off = if den < 0.0 { (0.5 * (l - r) / den).clamp(-0.5, 0.5) } else { 0.0 };
    let mut angle = (k as f64 + off) * TAU / ORIENTATION_BINS as f64;
    if angle > PI {
        angle -= TAU;
    }
    Ok(Orientation { angle, degenerate: false })
}

/// Spatial votes of one pixel: `(spatial bin, weight)` pairs.
type Votes = Vec<[(usize, f64); 4]>;

/// Bilinear spatial bin weights times the Gaussian window for every pixel
/// of a patch described at orientation `theta`.
fn spatial_votes(theta: f64) -> Votes {
    let s = PATCH_SIZE;
    let c = (s as f64 - 1.0) / 2.0;
    let bin_width = s as f64 / SPATIAL_BINS as f64;
    let sigma = s as f64 / 2.0;
    let (sin, cos) = theta.sin_cos();
    (0..s * s)
        .map(|i| {
            let (dx, dy) = ((i % s) as f64 - c, (i / s) as f64 - c);
            let rx = cos * dx + sin * dy;
            let ry = -sin * dx + cos * dy;
            let g = (-(rx * rx + ry * ry) / (2.0 * sigma * sigma)).exp();
            let bx = rx / bin_width + (SPATIAL_BINS as f64 - 1.0) / 2.0;
            let by = ry / bin_width + (SPATIAL_BINS as f64 - 1.0) / 2.0;
            let (x0, y0) = (bx.floor(), by.floor());
            let (fx, fy) = (bx - x0, by - y0);
            let mut out = [(0, 0.0); 4];
            for (k, (ox, oy, w)) in
                [(0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)), (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)]
                    .into_iter()
                    .enumerate()
            {
                let (xi, yi) = (x0 as i64 + ox, y0 as i64 + oy);
                if (0..SPATIAL_BINS as i64).contains(&xi) && (0..SPATIAL_BINS as i64).contains(&yi) {
                    out[k] = (yi as usize * SPATIAL_BINS + xi as usize, w * g);
                }
            }
            out
        })
        .collect()
}

/// Orientation bin split of one gradient angle (relative to `theta`).
fn ori_split(gx: f64, gy: f64, theta: f64) -> (usize, usize, f64) {
    let o = (gy.atan2(gx) - theta).rem_euclid(TAU) / TAU * ORI_BINS as f64;
    let o0 = o.floor();
    let f = o - o0;
    let o0 = o0 as usize % ORI_BINS;
    (o0, (o0 + 1) % ORI_BINS, f)
}

struct Forward {
    gx: Vec<f64>,
    gy: Vec<f64>,
    votes: Votes,
    raw_norm: f64,
    n1: Vec<f64>,
    clamped_norm: f64,
    out: Vec<f64>,
}

fn describe_one(p: &[f64], theta: f64) -> Forward {
    let (gx, gy) = gradients(p, PATCH_SIZE);
    let votes = spatial_votes(theta);
    let mut h = vec![0.0; DESCRIPTOR_DIM];
    for i in 0..PATCH_SIZE * PATCH_SIZE {
        let m = gx[i].hypot(gy[i]);
        if m < 1e-12 {
            continue;
        }
        let (o0, o1, f) = ori_split(gx[i], gy[i], theta);
        for &(sb, w) in &votes[i] {
            if w != 0.0 {
                h[sb * ORI_BINS + o0] += w * m * (1.0 - f);
                h[sb * ORI_BINS + o1] += w * m * f;
            }
        }
    }
    let raw_norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(raw_norm > 1e-12) {
        let zeros = vec![0.0; DESCRIPTOR_DIM];
        return Forward { gx, gy, votes, raw_norm: 0.0, n1: zeros.clone(), clamped_norm: 0.0, out: zeros };
    }
    let n1: Vec<f64> = h.iter().map(|v| v / raw_norm).collect();
    let c: Vec<f64> = n1.iter().map(|v| v.min(CLAMP)).collect();
    let clamped_norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let out = c.iter().map(|v| v / clamped_norm).collect();
    Forward { gx, gy, votes, raw_norm, n1, clamped_norm, out }
}

/// Adjoint of `v / ‖v‖` given the normalized vector `n` and `‖v‖`.
fn normalize_adjoint(g: &[f64], n: &[f64], norm: f64) -> Vec<f64> {
    let d: f64 = g.iter().zip(n).map(|(a, b)| a * b).sum();
    g.iter().zip(n).map(|(gi, ni)| (gi - ni * d) / norm).collect()
}

fn describe_one_backward(p: &[f64], theta: f64, g_out: &[f64]) -> Vec<f64> {
    let s = PATCH_SIZE;
    let fw = describe_one(p, theta);
    let mut gp = vec![0.0; s * s];
    if fw.raw_norm == 0.0 {
        return gp;
    }
    let gc = normalize_adjoint(g_out, &fw.out, fw.clamped_norm);
    let gn1: Vec<f64> = gc.iter().zip(&fw.n1).map(|(g, n)| if *n < CLAMP { *g } else { 0.0 }).collect();
    let gh = normalize_adjoint(&gn1, &fw.n1, fw.raw_norm);
    let scale = ORI_BINS as f64 / TAU;
    for i in 0..s * s {
        let (gx, gy) = (fw.gx[i], fw.gy[i]);
        let m = gx.hypot(gy);
        if m < 1e-12 {
            continue;
        }
        let (o0, o1, f) = ori_split(gx, gy, theta);
        let (mut dm, mut da) = (0.0, 0.0);
        for &(sb, w) in &fw.votes[i] {
            if w != 0.0 {
                let (g0, g1) = (gh[sb * ORI_BINS + o0], gh[sb * ORI_BINS + o1]);
                dm += w * (g0 * (1.0 - f) + g1 * f);
                da += w * m * (g1 - g0) * scale;
            }
        }
        let dgx = dm * gx / m - da * gy / (m * m);
        let dgy = dm * gy / m + da * gx / (m * m);
        let (x, y) = (i % s, i / s);
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(s - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(s - 1));
        gp[y * s + xr] += 0.5 * dgx;
        gp[y * s + xl] -= 0.5 * dgx;
        gp[yd * s + x] += 0.5 * dgy;
        gp[yu * s + x] -= 0.5 * dgy;
    }
    gp
}

/// Describes `N×1×32×32` patches at per-patch orientations `thetas`,
/// giving `N×128` descriptors of unit norm (zero for flat patches).
///
/// Spatial bins are 8 px wide with bilinear votes, orientations use 8 bins
/// with linear votes, and a Gaussian of σ = 16 px weights the votes. The
/// histogram is normalized, clamped at 0.2 and normalized again. Every vote
/// weight is continuous, so the gradient is exact away from the bin seams.
pub fn sift_describe<T: Real>(patches: &Var<T>, thetas: &[f64]) -> Result<Var<T>> {
    let (n, c, h, w) = patches.value().dims4()?;
    if c != 1 || h != PATCH_SIZE || w != PATCH_SIZE {
        return shape_err(format!("descriptor patches must be N×1×32×32, got {:?}", patches.shape()));
    }
    if thetas.len() != n {
        return param_err(format!("{} orientations for {n} patches", thetas.len()));
    }
    let plane = PATCH_SIZE * PATCH_SIZE;
    let input: Vec<f64> = patches.value().data().iter().map(|v| v.as_f64()).collect();
    let out: Vec<T> = input
        .par_chunks(plane)
        .zip(thetas.par_iter())
        .flat_map_iter(|(p, &t)| describe_one(p, t).out.into_iter().map(T::c))
        .collect();
    let thetas = thetas.to_vec();
    let value = Tensor::new(&[n, DESCRIPTOR_DIM], out)?;
    Var::from_op("sift_describe", &[patches], value, move |g| {
        let g: Vec<f64> = g.data().iter().map(|v| v.as_f64()).collect();
        let gp: Vec<T> = input
            .par_chunks(plane)
            .zip(g.par_chunks(DESCRIPTOR_DIM))
            .zip(thetas.par_iter())
            .flat_map_iter(|((p, go), &t)| describe_one_backward(p, t, go).into_iter().map(T::c))
            .collect();
        vec![Some(Tensor::new(&[n, 1, PATCH_SIZE, PATCH_SIZE], gp).expect("gradient matches patch shape"))]
    })
}
