//! Linear and rank filters on NCHW batches.
//!
//! All filters use reflect borders and keep the input size.

use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{param_err, Error, Result};
use crate::tensor::{border_index, BorderMode, Real, Tensor, Var};

fn check_odd(size: (usize, usize), what: &str) -> Result<()> {
    if size.0 % 2 == 0 || size.1 % 2 == 0 {
        return param_err(format!("{what} size must be odd, got {}×{}", size.0, size.1));
    }
    Ok(())
}

/// Normalized 1-D Gaussian of odd `size`, sampled at integer offsets from
/// the centre and truncated at the window edge.
pub fn gaussian_kernel1d<T: Real>(size: usize, sigma: f64) -> Result<Tensor<T>> {
    if size % 2 == 0 {
        return param_err(format!("gaussian kernel size must be odd, got {size}"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return param_err(format!("gaussian sigma must be positive, got {sigma}"));
    }
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Tensor::new(&[size], raw.iter().map(|v| T::c(v / total)).collect())
}

/// Outer product `g(y)ᵀ·g(x)` of two Gaussians as a `kh×kw` kernel.
pub fn gaussian_kernel2d<T: Real>(size: (usize, usize), sigma: (f64, f64)) -> Result<Tensor<T>> {
    let gy = gaussian_kernel1d::<T>(size.0, sigma.0)?;
    let gx = gaussian_kernel1d::<T>(size.1, sigma.1)?;
    Ok(Tensor::from_fn(&[size.0, size.1], |i| gy.data()[i[0]] * gx.data()[i[1]]))
}

/// Separable Gaussian blur with kernel `(kh, kw)` and `(σy, σx)`.
pub fn gaussian_blur2d<T: Real>(img: &Var<T>, size: (usize, usize), sigma: (f64, f64)) -> Result<Var<T>> {
    let gy = gaussian_kernel1d::<T>(size.0, sigma.0)?;
    let gx = gaussian_kernel1d::<T>(size.1, sigma.1)?;
    img.conv2d_const(&gx.reshape(&[1, size.1])?, BorderMode::Reflect)?
        .conv2d_const(&gy.reshape(&[size.0, 1])?, BorderMode::Reflect)
}

/// Window mean.
pub fn box_blur<T: Real>(img: &Var<T>, size: (usize, usize)) -> Result<Var<T>> {
    check_odd(size, "box blur")?;
    let k = Tensor::full(&[size.0, size.1], T::one() / T::from_usize(size.0 * size.1));
    img.conv2d_const(&k, BorderMode::Reflect)
}

/// Window median. The gradient flows to the selected element only.
pub fn median_blur<T: Real>(img: &Var<T>, size: (usize, usize)) -> Result<Var<T>> {
    check_odd(size, "median blur")?;
    let (n, c, h, w) = img.value().dims4()?;
    let (kh, kw) = size;
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = h * w;
    let x = img.value();
    // Source index (within the plane) of the median for every output pixel.
    let mut choice = vec![0usize; n * c * plane];
    choice.par_chunks_mut(plane).enumerate().for_each(|(p, ch)| {
        let src = &x.data()[p * plane..(p + 1) * plane];
        let mut win: Vec<(T, usize)> = Vec::with_capacity(kh * kw);
        for y in 0..h {
            for xo in 0..w {
                win.clear();
                for dy in -ry..=ry {
                    let sy = border_index(y as isize + dy, h, BorderMode::Reflect).unwrap_or(0);
                    for dx in -rx..=rx {
                        let sx = border_index(xo as isize + dx, w, BorderMode::Reflect).unwrap_or(0);
                        let i = sy * w + sx;
                        win.push((src[i], i));
                    }
                }
                let mid = win.len() / 2;
                let (_, m, _) = win.select_nth_unstable_by(mid, |a, b| {
                    a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
                });
                ch[y * w + xo] = m.1;
            }
        }
    });
    let data: Vec<T> = choice
        .iter()
        .enumerate()
        .map(|(o, &i)| x.data()[(o / plane) * plane + i])
        .collect();
    let value = Tensor::new(&[n, c, h, w], data)?;
    Var::from_op("median_blur", &[img], value, move |g| {
        let mut gi = vec![T::zero(); n * c * plane];
        for (o, &i) in choice.iter().enumerate() {
            gi[(o / plane) * plane + i] += g.data()[o];
        }
        vec![Some(Tensor::from_parts(vec![n, c, h, w], gi))]
    })
}

/// First-derivative kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// 3×3 Sobel.
    Sobel,
    /// Central difference `[-0.5, 0, 0.5]`.
    Diff,
}

impl FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sobel" => Ok(Self::Sobel),
            "diff" => Ok(Self::Diff),
            other => param_err(format!("unknown gradient mode `{other}` (expected sobel or diff)")),
        }
    }
}

/// `(kx, ky)` as 3×3 kernels.
pub fn gradient_kernels<T: Real>(mode: GradientMode, normalized: bool) -> (Tensor<T>, Tensor<T>) {
    let kx: [f64; 9] = match mode {
        GradientMode::Sobel => {
            let s = if normalized { 1.0 / 8.0 } else { 1.0 };
            [-s, 0.0, s, -2.0 * s, 0.0, 2.0 * s, -s, 0.0, s]
        }
        GradientMode::Diff => [0.0, 0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.0, 0.0],
    };
    let kx = Tensor::from_fn(&[3, 3], |i| T::c(kx[i[0] * 3 + i[1]]));
    let ky = Tensor::from_fn(&[3, 3], |i| kx.at(&[i[1], i[0]]));
    (kx, ky)
}

/// `N×C×2×H×W` stack of x- and y-derivatives.
pub fn spatial_gradient<T: Real>(img: &Var<T>, mode: GradientMode, normalized: bool) -> Result<Var<T>> {
    img.value().dims4()?;
    let (kx, ky) = gradient_kernels::<T>(mode, normalized);
    let dx = img.conv2d_const(&kx, BorderMode::Reflect)?;
    let dy = img.conv2d_const(&ky, BorderMode::Reflect)?;
    Var::stack(&[dx, dy], 2)
}

const SOBEL_EPS: f64 = 1e-12;

/// Reflect-padded copy of a plane with a one-pixel margin.
fn pad_reflect1<T: Real>(src: &[T], h: usize, w: usize, out: &mut Vec<T>) {
    let (hp, wp) = (h + 2, w + 2);
    out.clear();
    out.resize(hp * wp, T::zero());
    for y in 0..hp {
        let sy = border_index(y as isize - 1, h, BorderMode::Reflect).unwrap_or(0);
        let row = &src[sy * w..(sy + 1) * w];
        let dst = &mut out[y * wp..(y + 1) * wp];
        dst[1..=w].copy_from_slice(row);
        dst[0] = row[border_index(-1, w, BorderMode::Reflect).unwrap_or(0)];
        dst[w + 1] = row[border_index(w as isize, w, BorderMode::Reflect).unwrap_or(0)];
    }
}

/// Normalized Sobel derivatives of one plane.
fn sobel_plane<T: Real>(src: &[T], h: usize, w: usize, gx: &mut [T], gy: &mut [T]) {
    let mut pad = Vec::new();
    pad_reflect1(src, h, w, &mut pad);
    let wp = w + 2;
    let eighth = T::c(0.125);
    let two = T::c(2.0);
    for y in 0..h {
        let (r0, r1, r2) = (&pad[y * wp..], &pad[(y + 1) * wp..], &pad[(y + 2) * wp..]);
        for x in 0..w {
            let dx = (r0[x + 2] - r0[x]) + two * (r1[x + 2] - r1[x]) + (r2[x + 2] - r2[x]);
            let dy = (r2[x] - r0[x]) + two * (r2[x + 1] - r0[x + 1]) + (r2[x + 2] - r0[x + 2]);
            gx[y * w + x] = dx * eighth;
            gy[y * w + x] = dy * eighth;
        }
    }
}

fn sobel_magnitude_plane<T: Real>(src: &[T], h: usize, w: usize, out: &mut [T]) {
    let mut pad = Vec::new();
    pad_reflect1(src, h, w, &mut pad);
    let wp = w + 2;
    let eighth = T::c(0.125);
    let two = T::c(2.0);
    let eps = T::c(SOBEL_EPS);
    for y in 0..h {
        let (r0, r1, r2) = (&pad[y * wp..], &pad[(y + 1) * wp..], &pad[(y + 2) * wp..]);
        for x in 0..w {
            let dx = ((r0[x + 2] - r0[x]) + two * (r1[x + 2] - r1[x]) + (r2[x + 2] - r2[x])) * eighth;
            let dy = ((r2[x] - r0[x]) + two * (r2[x + 1] - r0[x + 1]) + (r2[x + 2] - r0[x + 2])) * eighth;
            out[y * w + x] = (dx * dx + dy * dy + eps).sqrt();
        }
    }
}

/// Gradient magnitude `sqrt(dx² + dy² + 1e-12)` from normalized Sobel
/// derivatives, computed by a fused kernel.
pub fn sobel_edges<T: Real>(img: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = img.value().dims4()?;
    let plane = h * w;
    if !img.requires_grad() {
        // Nothing to differentiate: skip the derivative buffers kept for backward.
        let src = img.value().data();
        let mut mag = vec![T::zero(); n * c * plane];
        mag.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(p, pm)| sobel_magnitude_plane(&src[p * plane..(p + 1) * plane], h, w, pm));
        return Ok(img.constant_like(Tensor::from_parts(vec![n, c, h, w], mag)));
    }
    let x = img.value().clone();
    let eps = T::c(SOBEL_EPS);
    let mut gx = vec![T::zero(); n * c * plane];
    let mut gy = vec![T::zero(); n * c * plane];
    let mut mag = vec![T::zero(); n * c * plane];
    gx.par_chunks_mut(plane)
        .zip(gy.par_chunks_mut(plane))
        .zip(mag.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(p, ((px, py), pm))| {
            sobel_plane(&x.data()[p * plane..(p + 1) * plane], h, w, px, py);
            for i in 0..plane {
                pm[i] = (px[i] * px[i] + py[i] * py[i] + eps).sqrt();
            }
        });
    let value = Tensor::from_parts(vec![n, c, h, w], mag.clone());
    Var::from_op("sobel_edges", &[img], value, move |g| {
        let mut gin = vec![T::zero(); n * c * plane];
        gin.par_chunks_mut(plane).enumerate().for_each(|(p, gi)| {
            let off = p * plane;
            let wp = w + 2;
            // Adjoints of the padded input.
            let mut gpad = vec![T::zero(); (h + 2) * wp];
            let eighth = T::c(0.125);
            let two = T::c(2.0);
            for y in 0..h {
                for xo in 0..w {
                    let i = off + y * w + xo;
                    let s = g.data()[i] / mag[i] * eighth;
                    let (ax, ay) = (s * gx[i], s * gy[i]);
                    let base = y * wp + xo;
                    // Transposed taps of the x-kernel.
                    gpad[base] -= ax;
                    gpad[base + 2] += ax;
                    gpad[base + wp] -= two * ax;
                    gpad[base + wp + 2] += two * ax;
                    gpad[base + 2 * wp] -= ax;
                    gpad[base + 2 * wp + 2] += ax;
                    // Transposed taps of the y-kernel.
                    gpad[base] -= ay;
                    gpad[base + 1] -= two * ay;
                    gpad[base + 2] -= ay;
                    gpad[base + 2 * wp] += ay;
                    gpad[base + 2 * wp + 1] += two * ay;
                    gpad[base + 2 * wp + 2] += ay;
                }
            }
            for yp in 0..h + 2 {
                let sy = border_index(yp as isize - 1, h, BorderMode::Reflect).unwrap_or(0);
                for xp in 0..w + 2 {
                    let sx = border_index(xp as isize - 1, w, BorderMode::Reflect).unwrap_or(0);
                    gi[sy * w + sx] += gpad[yp * wp + xp];
                }
            }
        });
        vec![Some(Tensor::from_parts(vec![n, c, h, w], gin))]
    })
}

/// 3×3 Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]`.
pub fn laplacian<T: Real>(img: &Var<T>, size: usize) -> Result<Var<T>> {
    if size != 3 {
        return param_err(format!("laplacian supports size 3 only, got {size}"));
    }
    let k = Tensor::new(&[3, 3], [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0].map(T::c).to_vec())?;
    img.conv2d_const(&k, BorderMode::Reflect)
}

/// Second derivatives `(Ixx, Iyy, Ixy)` from Sobel-smoothed 3×3 kernels.
pub fn second_derivatives<T: Real>(img: &Var<T>) -> Result<(Var<T>, Var<T>, Var<T>)> {
    let q = 0.25;
    let kxx = Tensor::new(&[3, 3], [q, -2.0 * q, q, 2.0 * q, -4.0 * q, 2.0 * q, q, -2.0 * q, q].map(T::c).to_vec())?;
    let kyy = Tensor::from_fn(&[3, 3], |i| kxx.at(&[i[1], i[0]]));
    let kxy = Tensor::new(&[3, 3], [q, 0.0, -q, 0.0, 0.0, 0.0, -q, 0.0, q].map(T::c).to_vec())?;
    Ok((
        img.conv2d_const(&kxx, BorderMode::Reflect)?,
        img.conv2d_const(&kyy, BorderMode::Reflect)?,
        img.conv2d_const(&kxy, BorderMode::Reflect)?,
    ))
}

/// Blur with a 5×5 Gaussian (σ = 1) and keep every second row and column.
pub fn pyr_down<T: Real>(img: &Var<T>) -> Result<Var<T>> {
    gaussian_blur2d(img, (5, 5), (1.0, 1.0))?.subsample2d(2)
}
