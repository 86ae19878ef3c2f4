//! Color-space conversions and intensity adjustments.
//!
//! Hue is in radians on `[0, 2π)`. Inputs outside `[0, 1]` are processed
//! as-is by the conversions; the `adjust_*` functions clamp their output.

use std::f64::consts::PI;

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Real, Tensor, Var};

/// BT.601 luma weights.
pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
];

const CB_SCALE: f64 = 0.564;
const CR_SCALE: f64 = 0.713;

fn check_channels<T: Real>(img: &Var<T>, c: usize, op: &str) -> Result<(usize, usize, usize)> {
    let (n, ch, h, w) = img.value().dims4()?;
    if ch != c {
        return shape_err(format!("{op} needs {c} channels, got {ch}"));
    }
    Ok((n, h, w))
}

fn channel<T: Real>(img: &Var<T>, i: usize) -> Result<Var<T>> {
    img.slice(1, i, i + 1, 1)
}

/// `N×1×H×W` luma.
pub fn rgb_to_grayscale<T: Real>(img: &Var<T>) -> Result<Var<T>> {
    check_channels(img, 3, "rgb_to_grayscale")?;
    let w = Tensor::new(&[1, 3, 1, 1], GRAY_WEIGHTS.map(T::c).to_vec())?;
    img.mul_const(&w)?.sum_axes(&[1], true)
}

/// Swaps the first and last channel.
pub fn rgb_to_bgr<T: Real>(img: &Var<T>) -> Result<Var<T>> {
    check_channels(img, 3, "rgb_to_bgr")?;
    img.flip(1)
}

/// Per-pixel affine channel mix `out = M·x + offset` on a 3-channel batch.
pub fn mix_channels<T: Real>(img: &Var<T>, m: [[f64; 3]; 3], offset: [f64; 3]) -> Result<Var<T>> {
    let (n, h, w) = check_channels(img, 3, "mix_channels")?;
    let plane = h * w;
    let mt: [[T; 3]; 3] = m.map(|r| r.map(T::c));
    let off = offset.map(T::c);
    let x = img.value();
    let mut out = vec![T::zero(); n * 3 * plane];
    for b in 0..n {
        let base = b * 3 * plane;
        for p in 0..plane {
            let v = [x.data()[base + p], x.data()[base + plane + p], x.data()[base + 2 * plane + p]];
            for i in 0..3 {
                out[base + i * plane + p] = mt[i][0] * v[0] + mt[i][1] * v[1] + mt[i][2] * v[2] + off[i];
            }
        }
    }
    let value = Tensor::new(&[n, 3, h, w], out)?;
    Var::from_op("mix_channels", &[img], value, move |g| {
        let gd = g.data();
        let mut gi = vec![T::zero(); n * 3 * plane];
        for b in 0..n {
            let base = b * 3 * plane;
            for p in 0..plane {
                let gv = [gd[base + p], gd[base + plane + p], gd[base + 2 * plane + p]];
                for j in 0..3 {
                    gi[base + j * plane + p] = mt[0][j] * gv[0] + mt[1][j] * gv[1] + mt[2][j] * gv[2];
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![n, 3, h, w], gi))]
    })
}

fn inverse_affine(m: [[f64; 3]; 3], offset: [f64; 3]) -> ([[f64; 3]; 3], [f64; 3]) {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    let inv = crate::tensor::invert3(&flat).expect("color matrices are invertible");
    let mi = [[inv[0], inv[1], inv[2]], [inv[3], inv[4], inv[5]], [inv[6], inv[7], inv[8]]];
    let oi = [0, 1, 2].map(|i| -(mi[i][0] * offset[0] + mi[i][1] * offset[1] + mi[i][2] * offset[2]));
    (mi, oi)
}

/// Linear RGB to CIE XYZ (D65 white).
pub fn rgb_to_xyz<T: Real>(img: &Var<T>) -> Result<Var<T>> {
    mix_channels(img, RGB_TO_XYZ, [0.0; 3])
}

pub fn xyz_to_rgb<T: Real>(img: &Var<T>) -> Result<Var<T>> {
    let (m, o) = inverse_affine(RGB_TO_XYZ, [0.0; 3]);
    mix_channels(img, m, o)
}

fn ycbcr_matrix() -> ([[f64; 3]; 3], [f64; 3]) {
    let [wr, wg, wb] = GRAY_WEIGHTS;
    (
        [
            [wr, wg, wb],
            [-CB_SCALE * wr, -CB_SCALE * wg, CB_SCALE * (1.0 - wb)],
            [CR_SCALE * (1.0 - wr), -CR_SCALE * wg, -CR_SCALE * wb],
        ],
        [0.0, 0.5, 0.5],
    )
}

/// BT.601 YCbCr with chroma centred on 0.5.
pub fn rgb_to_ycbcr<T: Real>(img: &Var<T>) -> Result<Var<T>> {
    let (m, o) = ycbcr_matrix();
    mix_channels(img, m, o)
}

pub fn ycbcr_to_rgb<T: Real>(img: &Var<T>) -> Result<Var<T>> {
    let (m, o) = ycbcr_matrix();
    let (mi, oi) = inverse_affine(m, o);
    mix_channels(img, mi, oi)
}

/// `1` where `pred` holds, else `0`, with the shape of `t`.
fn mask<T: Real>(t: &Tensor<T>, pred: impl Fn(T) -> bool) -> Tensor<T> {
    t.map(|v| if pred(v) { T::one() } else { T::zero() })
}

/// RGB to HSV with hue in radians on `[0, 2π)`.
///
/// Hue is 0 where the pixel is gray and saturation is 0 where `V = 0`.
/// The sector is chosen by the first maximal channel in R, G, B order.
pub fn rgb_to_hsv<T: Real>(img: &Var<T>) -> Result<Var<T>> {
    check_channels(img, 3, "rgb_to_hsv")?;
    let (r, g, b) = (channel(img, 0)?, channel(img, 1)?, channel(img, 2)?);
    let v = img.max_axis(1, true)?;
    let mn = img.min_axis(1, true)?;
    let delta = v.sub(&mn)?;

    let (rv, gv) = (r.value(), g.value());
    let vv = v.value();
    let is_r = rv.zip_map(vv, |a, m| if a == m { T::one() } else { T::zero() })?;
    let is_g = gv.zip_map(vv, |a, m| if a == m { T::one() } else { T::zero() })?.zip_map(&is_r, |a, b| a * (T::one() - b))?;
    let is_b = is_r.zip_map(&is_g, |a, b| T::one() - a - b)?;

    // Divisors are made safe where they vanish; the numerators are 0 there.
    let safe_delta = delta.add_const(&mask(delta.value(), |d| d == T::zero()))?;
    let hr = g.sub(&b)?.div(&safe_delta)?;
    let wrap = hr.value().map(|x| if x < T::zero() { T::c(6.0) } else { T::zero() });
    let hr = hr.add_const(&wrap)?;
    let hg = b.sub(&r)?.div(&safe_delta)?.add_scalar(T::c(2.0));
    let hb = r.sub(&g)?.div(&safe_delta)?.add_scalar(T::c(4.0));
    let gray = mask(delta.value(), |d| d != T::zero());
    let sector = hr
        .mul_const(&is_r)?
        .add(&hg.mul_const(&is_g)?)?
        .add(&hb.mul_const(&is_b)?)?
        .mul_const(&gray)?;
    let h = sector.mul_scalar(T::c(PI / 3.0));
    let safe_v = v.add_const(&mask(vv, |x| x == T::zero()))?;
    let s = delta.div(&safe_v)?;
    Var::concat(&[h, s, v], 1)
}

/// Inverse of [`rgb_to_hsv`]; hue may be any real (taken modulo 2π).
pub fn hsv_to_rgb<T: Real>(img: &Var<T>) -> Result<Var<T>> {
    check_channels(img, 3, "hsv_to_rgb")?;
    let (h, s, v) = (channel(img, 0)?, channel(img, 1)?, channel(img, 2)?);
    let h6 = h.mul_scalar(T::c(3.0 / PI));
    let vs = v.mul(&s)?;
    let mut out = Vec::with_capacity(3);
    for n in [5.0, 3.0, 1.0] {
        let shift = h6.value().map(|x| {
            let y = x + T::c(n);
            T::c(n) - T::c(6.0) * (y / T::c(6.0)).floor()
        });
        let k = h6.add_const(&shift)?;
        let f = k.minimum(&k.rsub_scalar(T::c(4.0)))?.clamp(Some(T::zero()), Some(T::one()));
        out.push(v.sub(&vs.mul(&f)?)?);
    }
    Var::concat(&out, 1)
}

fn per_channel<T: Real>(values: &[f64], c: usize, what: &str) -> Result<Tensor<T>> {
    if values.len() != c {
        return param_err(format!("{what} needs {c} values, got {}", values.len()));
    }
    Tensor::new(&[1, c, 1, 1], values.iter().map(|&v| T::c(v)).collect())
}

/// `(x − mean) / std` per channel.
pub fn normalize<T: Real>(img: &Var<T>, mean: &[f64], std: &[f64]) -> Result<Var<T>> {
    let (_, c, _, _) = img.value().dims4()?;
    if std.iter().any(|&s| !(s > 0.0)) {
        return param_err("normalize std must be positive in every channel");
    }
    let m = per_channel::<T>(mean, c, "normalize mean")?.map(|v| -v);
    let inv = per_channel::<T>(&std.iter().map(|s| 1.0 / s).collect::<Vec<_>>(), c, "normalize std")?;
    img.add_const(&m)?.mul_const(&inv)
}

/// `x · std + mean` per channel.
pub fn denormalize<T: Real>(img: &Var<T>, mean: &[f64], std: &[f64]) -> Result<Var<T>> {
    let (_, c, _, _) = img.value().dims4()?;
    if std.iter().any(|&s| !(s > 0.0)) {
        return param_err("denormalize std must be positive in every channel");
    }
    let s = per_channel::<T>(std, c, "denormalize std")?;
    img.mul_const(&s)?.add_const(&per_channel(mean, c, "denormalize mean")?)
}

fn unit<T: Real>(x: Var<T>) -> Var<T> {
    x.clamp(Some(T::zero()), Some(T::one()))
}

pub fn adjust_brightness<T: Real>(img: &Var<T>, b: f64) -> Result<Var<T>> {
    Ok(unit(img.add_scalar(T::c(b))))
}

pub fn adjust_contrast<T: Real>(img: &Var<T>, c: f64) -> Result<Var<T>> {
    if !(c >= 0.0) {
        return param_err(format!("contrast factor must be non-negative, got {c}"));
    }
    Ok(unit(img.mul_scalar(T::c(c))))
}

pub fn adjust_gamma<T: Real>(img: &Var<T>, gamma: f64) -> Result<Var<T>> {
    if !(gamma > 0.0) {
        return param_err(format!("gamma must be positive, got {gamma}"));
    }
    Ok(unit(img.powf(T::c(gamma))))
}

/// Scales HSV saturation by `s`.
pub fn adjust_saturation<T: Real>(img: &Var<T>, s: f64) -> Result<Var<T>> {
    if !(s >= 0.0) {
        return param_err(format!("saturation factor must be non-negative, got {s}"));
    }
    let hsv = rgb_to_hsv(img)?;
    let scale = Tensor::new(&[1, 3, 1, 1], vec![T::one(), T::c(s), T::one()])?;
    let sat = hsv.mul_const(&scale)?;
    let hi = Tensor::new(&[1, 3, 1, 1], vec![T::infinity(), T::one(), T::infinity()])?;
    let sat = sat.minimum(&sat.constant_like(hi))?;
    Ok(unit(hsv_to_rgb(&sat)?))
}

/// Rotates hue by `shift` radians.
pub fn adjust_hue<T: Real>(img: &Var<T>, shift: f64) -> Result<Var<T>> {
    let hsv = rgb_to_hsv(img)?;
    let add = Tensor::new(&[1, 3, 1, 1], vec![T::c(shift), T::zero(), T::zero()])?;
    Ok(unit(hsv_to_rgb(&hsv.add_const(&add)?)?))
}
