//! Local features: response maps, non-maxima suppression, orientation,
//! SIFT description, mutual nearest-neighbour matching and RANSAC.
//!
//! Keypoint coordinates are full-resolution pixels with `(0, 0)` at the
//! centre of the top-left pixel.

mod ransac;
mod sift;

use std::io::Write;
use std::str::FromStr;

use crate::error::{param_err, shape_err, Error, Result};
use crate::filters::{gaussian_blur2d, pyr_down, second_derivatives, spatial_gradient, GradientMode};
use crate::tensor::{Real, Tensor, Var};

pub use ransac::ransac_homography;
pub use sift::{dominant_orientation, sift_describe, Orientation, DESCRIPTOR_DIM, PATCH_SIZE};

/// Side of the descriptor support region in units of the keypoint scale.
pub const PATCH_EXTENT: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Detection scale σ in full-resolution pixels.
    pub scale: f64,
    pub orientation: f64,
    pub response: f64,
    /// Pyramid level the keypoint was found on.
    pub level: usize,
    /// Integer peak `(column, row)` on that level's response map.
    pub peak: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseKind {
    Harris,
    ShiTomasi,
    Hessian,
}

impl FromStr for ResponseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "harris" => Ok(Self::Harris),
            "shi_tomasi" | "shi-tomasi" => Ok(Self::ShiTomasi),
            "hessian" => Ok(Self::Hessian),
            _ => param_err(format!("unknown response kind `{s}`")),
        }
    }
}

/// Odd Gaussian support covering ±3σ.
pub fn gaussian_size(sigma: f64) -> usize {
    2 * (3.0 * sigma).ceil().max(1.0) as usize + 1
}

fn smooth<T: Real>(img: &Var<T>, sigma: f64) -> Result<Var<T>> {
    if sigma > 0.0 {
        let k = gaussian_size(sigma);
        gaussian_blur2d(img, (k, k), (sigma, sigma))
    } else {
        Ok(img.clone())
    }
}

/// Corner or blob response of a single-channel `N×1×H×W` image.
///
/// The image is first smoothed with `sigma_int`. Harris and Shi-Tomasi use
/// the structure tensor of normalized Sobel gradients integrated with
/// `sigma_window`; `k` only affects Harris. Hessian is the determinant of
/// the second-derivative matrix scaled by `sigma_int⁴`.
pub fn corner_response<T: Real>(
    img: &Var<T>,
    kind: ResponseKind,
    sigma_int: f64,
    sigma_window: f64,
    k: f64,
) -> Result<Var<T>> {
    let (n, c, h, w) = img.value().dims4()?;
    if c != 1 {
        return shape_err(format!("response maps need a single channel, got {c}"));
    }
    let s = smooth(img, sigma_int)?;
    if kind == ResponseKind::Hessian {
        let (xx, yy, xy) = second_derivatives(&s)?;
        let det = xx.mul(&yy)?.sub(&xy.square())?;
        return Ok(if sigma_int > 0.0 { det.mul_scalar(T::c(sigma_int.powi(4))) } else { det });
    }
    let g = spatial_gradient(&s, GradientMode::Sobel, true)?;
    let gx = g.slice(2, 0, 1, 1)?.reshape(&[n, 1, h, w])?;
    let gy = g.slice(2, 1, 2, 1)?.reshape(&[n, 1, h, w])?;
    let a = smooth(&gx.square(), sigma_window)?;
    let b = smooth(&gx.mul(&gy)?, sigma_window)?;
    let d = smooth(&gy.square(), sigma_window)?;
    let trace = a.add(&d)?;
    match kind {
        ResponseKind::Harris => a.mul(&d)?.sub(&b.square())?.sub(&trace.square().mul_scalar(T::c(k))),
        _ => {
            let half_diff = a.sub(&d)?.mul_scalar(T::c(0.5));
            let root = half_diff.square().add(&b.square())?.add_scalar(T::c(1e-24)).sqrt();
            trace.mul_scalar(T::c(0.5)).sub(&root)
        }
    }
}

/// Quadratic-fit offset of a peak from its two neighbours, within ±0.5.
fn quad_offset(l: f64, c: f64, r: f64) -> f64 {
    let den = l - 2.0 * c + r;
    if den < 0.0 {
        (0.5 * (l - r) / den).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Strict window maxima above `threshold` at least `border` pixels from
/// the edge, as `(x, y, value)`.
///
/// Among equal maxima within a window the first in scan order is kept. A
/// peak must also exceed at least one of its neighbours, so plateaus yield
/// nothing.
fn peaks(plane: &[f64], h: usize, w: usize, window: usize, threshold: f64, border: usize) -> Vec<(usize, usize, f64)> {
    let r = window / 2;
    let mut out = Vec::new();
    for y in border..h.saturating_sub(border) {
        for x in border..w.saturating_sub(border) {
            let v = plane[y * w + x];
            if !(v > threshold) {
                continue;
            }
            let mut keep = true;
            let mut above_some = false;
            'win: for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    if (yy, xx) == (y, x) {
                        continue;
                    }
                    let u = plane[yy * w + xx];
                    if u > v || (u == v && (yy, xx) < (y, x)) {
                        keep = false;
                        break 'win;
                    }
                    above_some |= u < v;
                }
            }
            if keep && above_some {
                out.push((x, y, v));
            }
        }
    }
    out
}

fn subpixel(plane: &[f64], h: usize, w: usize, x: usize, y: usize) -> (f64, f64) {
    let at = |xx: usize, yy: usize| plane[yy * w + xx];
    let c = at(x, y);
    let dx = if x > 0 && x + 1 < w { quad_offset(at(x - 1, y), c, at(x + 1, y)) } else { 0.0 };
    let dy = if y > 0 && y + 1 < h { quad_offset(at(x, y - 1), c, at(x, y + 1)) } else { 0.0 };
    (dx, dy)
}

fn plane_dims<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    let r = t.ndim();
    if r < 2 || t.numel() != t.shape()[r - 2] * t.shape()[r - 1] {
        return shape_err(format!("expected a single response plane, got {:?}", t.shape()));
    }
    Ok((t.shape()[r - 2], t.shape()[r - 1]))
}

/// Hard non-maxima suppression of one response plane (`H×W` or
/// `1×1×H×W`) with a `window×window` neighbourhood.
///
/// Keypoints are refined by a per-axis quadratic fit clamped to ±0.5 px and
/// returned in scan order with unit scale.
pub fn nms2d<T: Real>(response: &Tensor<T>, window: usize, threshold: f64) -> Result<Vec<Keypoint>> {
    if window % 2 == 0 {
        return param_err(format!("nms window must be odd, got {window}"));
    }
    let (h, w) = plane_dims(response)?;
    let plane: Vec<f64> = response.data().iter().map(|v| v.as_f64()).collect();
    Ok(peaks(&plane, h, w, window, threshold, 0)
        .into_iter()
        .map(|(x, y, v)| {
            let (dx, dy) = subpixel(&plane, h, w, x, y);
            Keypoint { x: x as f64 + dx, y: y as f64 + dy, scale: 1.0, orientation: 0.0, response: v, level: 0, peak: (x, y) }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Pyramid levels, each half the size of the previous one.
    pub levels: usize,
    /// Detection scale on every level, in that level's pixels.
    pub base_sigma: f64,
    pub nms_window: usize,
    pub threshold: f64,
    /// Peaks closer than this to a level's edge are dropped.
    pub border: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { levels: 3, base_sigma: 1.6, nms_window: 5, threshold: 1e-6, border: 10 }
    }
}

/// Gaussian pyramid of a `1×1×H×W` image with a Hessian response per level.
pub struct ScaleSpace<T: Real> {
    pub images: Vec<Var<T>>,
    pub responses: Vec<Var<T>>,
}

pub fn scale_space<T: Real>(img: &Var<T>, cfg: &DetectorConfig) -> Result<ScaleSpace<T>> {
    let (n, c, _, _) = img.value().dims4()?;
    if n != 1 || c != 1 {
        return shape_err(format!("detection needs a 1×1×H×W image, got {:?}", img.shape()));
    }
    if cfg.levels == 0 {
        return param_err("detector needs at least one level");
    }
    let mut images = vec![img.clone()];
    while images.len() < cfg.levels {
        let last = images.last().expect("non-empty");
        let (_, _, h, w) = last.value().dims4()?;
        if h.min(w) < 2 * (2 * cfg.border + 1) {
            break;
        }
        images.push(pyr_down(last)?);
    }
    let responses = images
        .iter()
        .map(|im| corner_response(im, ResponseKind::Hessian, cfg.base_sigma, 0.0, 0.0))
        .collect::<Result<_>>()?;
    Ok(ScaleSpace { images, responses })
}

/// Up to `max_keypoints` peaks over all levels, strongest first (ties by
/// level, then scan order).
pub fn detect<T: Real>(ss: &ScaleSpace<T>, cfg: &DetectorConfig, max_keypoints: usize) -> Result<Vec<Keypoint>> {
    if cfg.nms_window % 2 == 0 {
        return param_err(format!("nms window must be odd, got {}", cfg.nms_window));
    }
    let mut all = Vec::new();
    for (level, resp) in ss.responses.iter().enumerate() {
        let (_, _, h, w) = resp.value().dims4()?;
        let plane: Vec<f64> = resp.value().data().iter().map(|v| v.as_f64()).collect();
        let f = (1usize << level) as f64;
        for (x, y, v) in peaks(&plane, h, w, cfg.nms_window, cfg.threshold, cfg.border) {
            let (dx, dy) = subpixel(&plane, h, w, x, y);
            all.push(Keypoint {
                x: (x as f64 + dx) * f,
                y: (y as f64 + dy) * f,
                scale: cfg.base_sigma * f,
                orientation: 0.0,
                response: v,
                level,
                peak: (x, y),
            });
        }
    }
    all.sort_by(|a, b| b.response.total_cmp(&a.response).then(a.level.cmp(&b.level)).then((a.peak.1, a.peak.0).cmp(&(b.peak.1, b.peak.0))));
    all.truncate(max_keypoints);
    Ok(all)
}

/// Subpixel keypoint positions `K×2` (x, y) as a differentiable function of
/// the response maps. Matches the coordinates stored by [`detect`].
pub fn keypoint_positions<T: Real>(ss: &ScaleSpace<T>, kps: &[Keypoint]) -> Result<Var<T>> {
    if kps.is_empty() {
        return param_err("no keypoints");
    }
    let mut flat = Vec::new();
    let mut offsets = Vec::new();
    let mut start = 0;
    let mut widths = Vec::new();
    for r in &ss.responses {
        let (_, _, h, w) = r.value().dims4()?;
        flat.push(r.reshape(&[h * w])?);
        offsets.push(start);
        widths.push((h, w));
        start += h * w;
    }
    let all = Var::concat(&flat, 0)?;
    let vals = all.value().clone();
    let k = kps.len();
    // Per axis: indices of left, centre, right samples.
    let mut idx = [vec![], vec![], vec![], vec![], vec![]];
    let mut base = vec![T::zero(); 2 * k];
    let mut factor = vec![T::zero(); 2 * k];
    let mut live = vec![T::zero(); 2 * k];
    let mut fix = vec![T::zero(); 2 * k];
    for (i, kp) in kps.iter().enumerate() {
        let (h, w) = *widths.get(kp.level).ok_or_else(|| Error::Parameter(format!("keypoint level {} not in pyramid", kp.level)))?;
        let (x, y) = kp.peak;
        if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
            return param_err(format!("keypoint peak {:?} touches the border of level {}", kp.peak, kp.level));
        }
        let o = offsets[kp.level];
        let at = |xx: usize, yy: usize| o + yy * w + xx;
        for (slot, j) in [at(x - 1, y), at(x, y), at(x + 1, y), at(x, y - 1), at(x, y + 1)].into_iter().enumerate() {
            idx[slot].push(j);
        }
        let f = (1usize << kp.level) as f64;
        base[2 * i] = T::c(x as f64 * f);
        base[2 * i + 1] = T::c(y as f64 * f);
        factor[2 * i] = T::c(f);
        factor[2 * i + 1] = T::c(f);
        let c = vals.data()[at(x, y)];
        for (axis, (l, r)) in [(at(x - 1, y), at(x + 1, y)), (at(x, y - 1), at(x, y + 1))].into_iter().enumerate() {
            let den = vals.data()[l] - T::c(2.0) * c + vals.data()[r];
            if den < T::zero() {
                live[2 * i + axis] = T::one();
            } else {
                fix[2 * i + axis] = T::one();
            }
        }
    }
    let pick = |ids: &[usize]| all.index_select(0, ids);
    let (l_x, c, r_x, u_y, d_y) = (pick(&idx[0])?, pick(&idx[1])?, pick(&idx[2])?, pick(&idx[3])?, pick(&idx[4])?);
    let lo = Var::stack(&[l_x, u_y], 1)?;
    let hi = Var::stack(&[r_x, d_y], 1)?;
    let mid = Var::stack(&[c.clone(), c], 1)?;
    let num = lo.sub(&hi)?.mul_scalar(T::c(0.5));
    let den = lo.add(&hi)?.sub(&mid.mul_scalar(T::c(2.0)))?;
    let shape = [k, 2];
    let den = den.add_const(&Tensor::new(&shape, fix)?.map(|v| -v))?;
    let off = num.div(&den)?.clamp(Some(T::c(-0.5)), Some(T::c(0.5))).mul_const(&Tensor::new(&shape, live)?)?;
    off.mul_const(&Tensor::new(&shape, factor)?)?.add_const(&Tensor::new(&shape, base)?)
}

/// Axis-aligned `K×1×32×32` patches covering [`PATCH_EXTENT`]·σ around
/// each keypoint, sampled bilinearly from the keypoint's pyramid level.
pub fn extract_keypoint_patches<T: Real>(ss: &ScaleSpace<T>, kps: &[Keypoint], base_sigma: f64) -> Result<Var<T>> {
    if kps.is_empty() {
        return param_err("no keypoints");
    }
    let p = PATCH_SIZE;
    let step = PATCH_EXTENT * base_sigma / p as f64;
    let c = (p as f64 - 1.0) / 2.0;
    let mut parts = Vec::new();
    let mut order = vec![0; kps.len()];
    let mut next = 0;
    for (level, img) in ss.images.iter().enumerate() {
        let members: Vec<usize> = (0..kps.len()).filter(|&i| kps[i].level == level).collect();
        if members.is_empty() {
            continue;
        }
        let (_, _, h, w) = img.value().dims4()?;
        let f = (1usize << level) as f64;
        let mut grid = Vec::with_capacity(members.len() * p * p * 2);
        for &i in &members {
            let (kx, ky) = (kps[i].x / f, kps[i].y / f);
            for r in 0..p {
                for col in 0..p {
                    let x = kx + (col as f64 - c) * step;
                    let y = ky + (r as f64 - c) * step;
                    grid.push(T::c(2.0 * x / (w - 1).max(1) as f64 - 1.0));
                    grid.push(T::c(2.0 * y / (h - 1).max(1) as f64 - 1.0));
                }
            }
            order[i] = next;
            next += 1;
        }
        let grid = img.constant_like(Tensor::new(&[1, members.len() * p, p, 2], grid)?);
        parts.push(img.grid_sample(&grid)?.reshape(&[members.len(), 1, p, p])?);
    }
    if next != kps.len() {
        return param_err("keypoint level not in pyramid");
    }
    Var::concat(&parts, 0)?.index_select(0, &order)
}

/// Sets each keypoint's orientation to the dominant gradient direction of
/// its patch (`K×1×32×32`, as from [`extract_keypoint_patches`]).
pub fn assign_orientations<T: Real>(patches: &Tensor<T>, kps: &mut [Keypoint]) -> Result<()> {
    let plane = PATCH_SIZE * PATCH_SIZE;
    if patches.numel() != kps.len() * plane {
        return shape_err(format!("{} keypoints but patches of shape {:?}", kps.len(), patches.shape()));
    }
    for (i, kp) in kps.iter_mut().enumerate() {
        let data = patches.data()[i * plane..(i + 1) * plane].to_vec();
        kp.orientation = dominant_orientation(&Tensor::new(&[PATCH_SIZE, PATCH_SIZE], data)?)?.angle;
    }
    Ok(())
}

/// `K×128` descriptors at the keypoints' stored orientations,
/// differentiable with respect to the pyramid images.
pub fn describe<T: Real>(ss: &ScaleSpace<T>, kps: &[Keypoint], base_sigma: f64) -> Result<Var<T>> {
    let patches = extract_keypoint_patches(ss, kps, base_sigma)?;
    let thetas: Vec<f64> = kps.iter().map(|k| k.orientation).collect();
    sift_describe(&patches, &thetas)
}

/// Full pipeline on a `1×1×H×W` image with the default configuration.
/// Returns no descriptors when nothing is detected.
pub fn detect_and_describe<T: Real>(img: &Var<T>, max_keypoints: usize) -> Result<(Vec<Keypoint>, Option<Var<T>>)> {
    let cfg = DetectorConfig::default();
    let ss = scale_space(img, &cfg)?;
    let mut kps = detect(&ss, &cfg, max_keypoints)?;
    if kps.is_empty() {
        return Ok((kps, None));
    }
    let patches = extract_keypoint_patches(&ss, &kps, cfg.base_sigma)?;
    assign_orientations(patches.value(), &mut kps)?;
    let thetas: Vec<f64> = kps.iter().map(|k| k.orientation).collect();
    let desc = sift_describe(&patches, &thetas)?;
    Ok((kps, Some(desc)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub ia: usize,
    pub ib: usize,
    pub dist: f64,
}

fn rows<T: Real>(d: &[T], dim: usize, what: &str) -> Result<usize> {
    if dim == 0 || d.len() % dim != 0 {
        return shape_err(format!("{what}: {} values do not form rows of {dim}", d.len()));
    }
    Ok(d.len() / dim)
}

/// Mutual nearest neighbours between row-major descriptor sets `a` and `b`
/// of width `dim`, by L2 distance. With `ratio`, a match also needs
/// `d1 / d2 ≤ ratio` among `a`'s two nearest neighbours in `b`. Sorted by
/// `ia`.
pub fn match_mnn<T: Real>(a: &[T], b: &[T], dim: usize, ratio: Option<f64>) -> Result<Vec<MatchPair>> {
    let (na, nb) = (rows(a, dim, "set A")?, rows(b, dim, "set B")?);
    if na == 0 || nb == 0 {
        return Ok(Vec::new());
    }
    let d: Vec<f64> = (0..na * nb)
        .map(|k| {
            let (i, j) = (k / nb, k % nb);
            a[i * dim..(i + 1) * dim]
                .iter()
                .zip(&b[j * dim..(j + 1) * dim])
                .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let argmin = |it: &mut dyn Iterator<Item = (usize, f64)>| it.fold((usize::MAX, f64::INFINITY), |m, c| if c.1 < m.1 { c } else { m });
    let best_b: Vec<usize> = (0..na).map(|i| argmin(&mut (0..nb).map(|j| (j, d[i * nb + j]))).0).collect();
    let best_a: Vec<usize> = (0..nb).map(|j| argmin(&mut (0..na).map(|i| (i, d[i * nb + j]))).0).collect();
    let mut out = Vec::new();
    for (i, &j) in best_b.iter().enumerate() {
        if j == usize::MAX || best_a[j] != i {
            continue;
        }
        let d1 = d[i * nb + j];
        if let Some(r) = ratio {
            let d2 = argmin(&mut (0..nb).filter(|&jj| jj != j).map(|jj| (jj, d[i * nb + jj]))).1;
            if d2.is_finite() && d1 > r * d2 {
                continue;
            }
        }
        out.push(MatchPair { ia: i, ib: j, dist: d1 });
    }
    Ok(out)
}

pub fn write_keypoints_csv(mut w: impl Write, kps: &[Keypoint]) -> Result<()> {
    writeln!(w, "x,y,scale,orientation,response")?;
    for k in kps {
        writeln!(w, "{},{},{},{},{}", k.x, k.y, k.scale, k.orientation, k.response)?;
    }
    Ok(())
}

pub fn write_matches_csv(mut w: impl Write, matches: &[MatchPair]) -> Result<()> {
    writeln!(w, "ia,ib,dist")?;
    for m in matches {
        writeln!(w, "{},{},{}", m.ia, m.ib, m.dist)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use crate::tensor::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(h: usize, w: usize, count: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<[f64; 4]> = (0..count)
            .map(|_| {
                [rng.random::<f64>() * w as f64, rng.random::<f64>() * h as f64, 1.5 + rng.random::<f64>() * 3.0, rng.random::<f64>() - 0.5]
            })
            .collect();
        Tensor::from_fn(&[1, 1, h, w], |i| {
            let (x, y) = (i[3] as f64, i[2] as f64);
            0.5 + b.iter().map(|[bx, by, s, a]| a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp()).sum::<f64>()
        })
    }

    #[test]
    fn flat_and_multichannel_inputs() {
        let tape = Tape::new();
        let flat = tape.constant(Tensor::full(&[1, 1, 12, 12], 0.4));
        for kind in [ResponseKind::Harris, ResponseKind::ShiTomasi, ResponseKind::Hessian] {
            let r = corner_response(&flat, kind, 1.0, 1.5, 0.04).unwrap();
            assert!(r.value().data().iter().all(|v: &f64| v.abs() <= 1e-12), "{kind:?}");
        }
        let rgb = tape.constant(Tensor::full(&[1, 3, 8, 8], 0.4));
        assert!(matches!(corner_response(&rgb, ResponseKind::Harris, 1.0, 1.0, 0.04), Err(Error::Shape(_))));
        assert_eq!("shi_tomasi".parse::<ResponseKind>().unwrap(), ResponseKind::ShiTomasi);
        assert!("dog".parse::<ResponseKind>().is_err());
    }

    #[test]
    fn harris_on_white_square() {
        let tape = Tape::new();
        let img = tape.constant(Tensor::<f64>::from_fn(&[1, 1, 40, 40], |i| {
            if (10..30).contains(&i[2]) && (10..30).contains(&i[3]) { 1.0 } else { 0.0 }
        }));
        let r = corner_response(&img, ResponseKind::Harris, 1.0, 2.0, 0.04).unwrap();
        let at = |y: usize, x: usize| r.value().at(&[0, 0, y, x]);
        let corners = [at(10, 10), at(10, 29), at(29, 10), at(29, 29)];
        let edges = [at(10, 20), at(20, 10), at(29, 20), at(20, 29)];
        let interior = at(20, 20);
        let weakest_corner = corners.iter().cloned().fold(f64::INFINITY, f64::min);
        // Edges respond negatively for k > 0, so the ordering holds in magnitude.
        for e in edges {
            assert!(weakest_corner > e.abs() && e.abs() > interior.abs());
        }
        assert!(weakest_corner > 0.0 && edges.iter().all(|&e| e < 0.0));
    }

    #[test]
    fn hessian_peaks_at_blob_centre() {
        let tape = Tape::new();
        let img = tape.constant(Tensor::<f64>::from_fn(&[1, 1, 31, 31], |i| {
            let r2 = (i[2] as f64 - 17.0).powi(2) + (i[3] as f64 - 12.0).powi(2);
            (-r2 / 8.0).exp()
        }));
        let r = corner_response(&img, ResponseKind::Hessian, 2.0, 0.0, 0.0).unwrap();
        let data = r.value().data();
        let best = (0..data.len()).max_by(|&a, &b| data[a].total_cmp(&data[b])).unwrap();
        assert_eq!((best / 31, best % 31), (17, 12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn responses_are_translation_equivariant(shift in 1usize..5, seed in 0u64..1000) {
            let tape = Tape::new();
            let big = blobs(40, 48, 8, seed);
            let a = tape.constant(Tensor::from_fn(&[1, 1, 40, 40], |i| big.at(&[0, 0, i[2], i[3]])));
            let b = tape.constant(Tensor::from_fn(&[1, 1, 40, 40], |i| big.at(&[0, 0, i[2], i[3] + shift])));
            for kind in [ResponseKind::Harris, ResponseKind::Hessian] {
                let ra = corner_response(&a, kind, 1.2, 1.5, 0.04).unwrap();
                let rb = corner_response(&b, kind, 1.2, 1.5, 0.04).unwrap();
                for y in 12..28 {
                    for x in 12..24 {
                        let d = ra.value().at(&[0, 0, y, x + shift]) - rb.value().at(&[0, 0, y, x]);
                        prop_assert!(d.abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn nms_cases() {
        let mut spike = Tensor::<f64>::zeros(&[9, 9]);
        spike.data_mut()[4 * 9 + 6] = 1.0;
        let k = nms2d(&spike, 3, 0.0).unwrap();
        assert_eq!(k.len(), 1);
        assert_eq!((k[0].x, k[0].y), (6.0, 4.0));
        assert!(nms2d(&Tensor::<f64>::full(&[9, 9], 2.0), 3, 0.0).unwrap().is_empty());
        let mut twin = Tensor::<f64>::zeros(&[1, 1, 7, 7]);
        twin.data_mut()[3 * 7 + 2] = 1.0;
        twin.data_mut()[3 * 7 + 3] = 1.0;
        let k = nms2d(&twin, 3, 0.0).unwrap();
        assert_eq!(k.len(), 1);
        assert_eq!(k[0].peak, (2, 3));
        assert!(nms2d(&spike, 4, 0.0).is_err());
    }

    #[test]
    fn nms_matches_window_enumeration() {
        // Quantized values give plenty of ties.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = Tensor::<f64>::from_fn(&[10, 11], |_| (rng.random::<f64>() * 4.0).floor());
            let got: Vec<(usize, usize)> = nms2d(&t, 3, 0.5).unwrap().iter().map(|k| k.peak).collect();
            let mut want = Vec::new();
            for y in 0..10usize {
                for x in 0..11usize {
                    let v = t.at(&[y, x]);
                    let nb: Vec<((usize, usize), f64)> = (y.saturating_sub(1)..(y + 2).min(10))
                        .flat_map(|yy| (x.saturating_sub(1)..(x + 2).min(11)).map(move |xx| (yy, xx)))
                        .filter(|&p| p != (y, x))
                        .map(|p| (p, t.at(&[p.0, p.1])))
                        .collect();
                    let first_max = nb.iter().all(|&(p, u)| u < v || (u == v && p > (y, x)));
                    if v > 0.5 && first_max && nb.iter().any(|&(_, u)| u < v) {
                        want.push((x, y));
                    }
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn subpixel_recovers_parabola_vertex() {
        let t = Tensor::<f64>::from_fn(&[9, 9], |i| 10.0 - (i[1] as f64 - 3.3).powi(2) - 2.0 * (i[0] as f64 - 5.8).powi(2));
        let k = nms2d(&t, 3, 0.0).unwrap();
        assert_eq!(k.len(), 1);
        assert!((k[0].x - 3.3).abs() < 1e-12 && (k[0].y - 5.8).abs() < 1e-12);
    }

    #[test]
    fn pipeline_contracts() {
        let tape = Tape::new();
        let flat = tape.constant(Tensor::full(&[1, 1, 64, 64], 0.5));
        let (k, d) = detect_and_describe(&flat, 100).unwrap();
        assert!(k.is_empty() && d.is_none());
        let img = tape.constant(blobs(128, 128, 120, 3));
        let cfg = DetectorConfig::default();
        let ss = scale_space(&img, &cfg).unwrap();
        assert!(detect(&ss, &cfg, usize::MAX).unwrap().len() > 100);
        let (k, d) = detect_and_describe(&img, 100).unwrap();
        assert_eq!(k.len(), 100);
        assert_eq!(d.unwrap().shape(), &[100, 128]);
        assert!(k.windows(2).all(|w| w[0].response >= w[1].response));
        assert!(k.iter().all(|kp| [1.6, 3.2, 6.4].contains(&kp.scale) && kp.x >= 0.0 && kp.x < 128.0));
        let pos = keypoint_positions(&ss, &detect(&ss, &cfg, 100).unwrap()).unwrap();
        for (i, kp) in k.iter().enumerate() {
            assert!((pos.value().at(&[i, 0]) - kp.x).abs() < 1e-12 && (pos.value().at(&[i, 1]) - kp.y).abs() < 1e-12);
        }
    }

    #[test]
    fn positions_and_descriptors_are_differentiable() {
        let cfg = DetectorConfig { border: 4, ..DetectorConfig::default() };
        let img = blobs(48, 48, 25, 8);
        let tape = Tape::new();
        let ss = scale_space(&tape.constant(img.clone()), &cfg).unwrap();
        let mut kps = detect(&ss, &cfg, 5).unwrap();
        assert!(!kps.is_empty());
        let patches = extract_keypoint_patches(&ss, &kps, cfg.base_sigma).unwrap();
        assign_orientations(patches.value(), &mut kps).unwrap();
        let r = check_gradient(
            |v| {
                let ss = scale_space(v, &cfg)?;
                let p = keypoint_positions(&ss, &kps)?.sum();
                let d = describe(&ss, &kps, cfg.base_sigma)?.sum();
                p.add(&d)
            },
            &img,
            1e-6,
        )
        .unwrap();
        assert!(r.rel_err < 1e-3, "{r:?}");
    }

    fn naive_mutual(a: &[Vec<f64>], b: &[Vec<f64>], ratio: f64) -> Vec<(usize, usize)> {
        let d = |x: &Vec<f64>, y: &Vec<f64>| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let mut out = Vec::new();
        for (i, x) in a.iter().enumerate() {
            let mut ds: Vec<(f64, usize)> = b.iter().enumerate().map(|(j, y)| (d(x, y), j)).collect();
            ds.sort_by(|p, q| p.0.total_cmp(&q.0));
            let j = ds[0].1;
            let back = a.iter().enumerate().map(|(ii, xx)| (d(xx, &b[j]), ii)).min_by(|p, q| p.0.total_cmp(&q.0)).unwrap().1;
            if back == i && ds[0].0 <= ratio * ds[1].0 {
                out.push((i, j));
            }
        }
        out
    }

    #[test]
    fn matching_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..5 * 8).map(|_| rng.random()).collect();
        let perm = [3, 0, 4, 1, 2];
        let b: Vec<f64> = perm.iter().flat_map(|&i| a[i * 8..(i + 1) * 8].to_vec()).collect();
        let m = match_mnn(&a, &b, 8, None).unwrap();
        assert_eq!(m.len(), 5);
        for p in &m {
            assert_eq!(perm[p.ib], p.ia);
            assert_eq!(p.dist, 0.0);
        }
        assert_eq!(match_mnn(&[1.0f64, 2.0], &[5.0, 5.0], 2, Some(0.8)).unwrap().len(), 1);
        assert!(match_mnn::<f64>(&[], &a, 8, None).unwrap().is_empty());
        assert!(match_mnn(&a, &b[..7], 8, None).is_err());

        // 10 planted pairs (small noise) and 10 unrelated descriptors per side.
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let dim = 16;
            // Distractors sit on opposite sides of the shared cluster, so each
            // one's nearest neighbour is a planted descriptor.
            let mut gen = |n: usize, off: f64| -> Vec<Vec<f64>> {
                (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>() + off).collect()).collect()
            };
            let shared = gen(10, 0.0);
            let (da, db) = (gen(10, -3.0), gen(10, 3.0));
            let noisy: Vec<Vec<f64>> = shared.iter().map(|v| v.iter().map(|x| x + 0.01 * ((x * 1e4).sin())).collect()).collect();
            let set_a: Vec<Vec<f64>> = shared.iter().chain(&da).cloned().collect();
            let set_b: Vec<Vec<f64>> = db.iter().chain(&noisy).cloned().collect();
            let got: Vec<(usize, usize)> =
                match_mnn(&set_a.concat(), &set_b.concat(), dim, Some(0.8)).unwrap().iter().map(|m| (m.ia, m.ib)).collect();
            assert_eq!(got, naive_mutual(&set_a, &set_b, 0.8));
            let planted: Vec<(usize, usize)> = (0..10).map(|i| (i, i + 10)).collect();
            assert_eq!(got, planted, "seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn mutual_matching_is_symmetric(a in proptest::collection::vec(0.0f64..1.0, 4..40), b in proptest::collection::vec(0.0f64..1.0, 4..40)) {
            let (a, b) = (&a[..a.len() / 4 * 4], &b[..b.len() / 4 * 4]);
            let mut ab: Vec<(usize, usize)> = match_mnn(a, b, 4, None).unwrap().iter().map(|m| (m.ia, m.ib)).collect();
            let mut ba: Vec<(usize, usize)> = match_mnn(b, a, 4, None).unwrap().iter().map(|m| (m.ib, m.ia)).collect();
            ab.sort();
            ba.sort();
            prop_assert_eq!(ab, ba);
        }
    }

    #[test]
    fn csv_dumps() {
        let mut buf = Vec::new();
        let kp = Keypoint { x: 1.5, y: 2.0, scale: 1.6, orientation: 0.25, response: 3.0, level: 0, peak: (1, 2) };
        write_keypoints_csv(&mut buf, &[kp]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x,y,scale,orientation,response\n1.5,2,1.6,0.25,3\n");
        let mut buf = Vec::new();
        write_matches_csv(&mut buf, &[MatchPair { ia: 0, ib: 4, dist: 0.5 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "ia,ib,dist\n0,4,0.5\n");
    }
}
