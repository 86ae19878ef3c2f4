//! Depthwise 2-D correlation with "same" output size.

use rayon::prelude::*;

use super::{Real, Tensor, Var};
use crate::error::{param_err, shape_err, Result};

/// How samples outside the image are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BorderMode {
    /// Outside samples are 0.
    Zero,
    /// Clamp to the nearest edge sample.
    Replicate,
    /// Mirror about the edge sample without repeating it (`-1 → 1`).
    #[default]
    Reflect,
}

/// Maps a possibly out-of-range coordinate to a source index, or `None`
/// for zero padding.
pub(crate) fn border_index(i: isize, n: usize, mode: BorderMode) -> Option<usize> {
    let ni = n as isize;
    if (0..ni).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        BorderMode::Zero => None,
        BorderMode::Replicate => Some(i.clamp(0, ni - 1) as usize),
        BorderMode::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (ni - 1);
            let mut m = i.rem_euclid(period);
            if m >= ni {
                m = period - m;
            }
            Some(m as usize)
        }
    }
}

/// Per-axis source index tables: `tab[o * k + t]` is the input index read by
/// output `o` at kernel tap `t`.
fn tap_table(n: usize, k: usize, mode: BorderMode) -> Vec<Option<usize>> {
    let r = (k / 2) as isize;
    let mut tab = Vec::with_capacity(n * k);
    for o in 0..n as isize {
        for t in 0..k as isize {
            tab.push(border_index(o + t - r, n, mode));
        }
    }
    tab
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    /// Whether the kernel has one slice per channel.
    per_channel: bool,
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

impl ConvGeometry {
    fn kernel_offset(&self, channel: usize) -> usize {
        if self.per_channel {
            channel * self.kh * self.kw
        } else {
            0
        }
    }
}

fn conv_geometry(input: &[usize], kernel: &[usize], border: BorderMode) -> Result<ConvGeometry> {
    let [n, c, h, w] = input[..] else {
        return shape_err(format!("conv2d expects NCHW input, got {input:?}"));
    };
    let (kh, kw, per_channel) = match kernel[..] {
        [kh, kw] => (kh, kw, false),
        [kc, kh, kw] if kc == c => (kh, kw, true),
        _ => {
            return shape_err(format!(
                "conv2d kernel must be kH×kW or C×kH×kW with C={c}, got {kernel:?}"
            ))
        }
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return param_err(format!("conv2d kernel extents must be odd, got {kh}×{kw}"));
    }
    Ok(ConvGeometry {
        n,
        c,
        h,
        w,
        kh,
        kw,
        per_channel,
        rows: tap_table(h, kh, border),
        cols: tap_table(w, kw, border),
    })
}

fn conv_forward<T: Real>(g: &ConvGeometry, x: &[T], k: &[T]) -> Vec<T> {
    let plane = g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.c * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(p, o)| {
        let ch = p % g.c;
        let kern = &k[g.kernel_offset(ch)..g.kernel_offset(ch) + g.kh * g.kw];
        let src = &x[p * plane..(p + 1) * plane];
        for y in 0..g.h {
            let rows = &g.rows[y * g.kh..(y + 1) * g.kh];
            for xo in 0..g.w {
                let cols = &g.cols[xo * g.kw..(xo + 1) * g.kw];
                let mut acc = T::zero();
                for (ty, ry) in rows.iter().enumerate() {
                    let Some(ry) = ry else { continue };
                    let row = &src[ry * g.w..(ry + 1) * g.w];
                    let krow = &kern[ty * g.kw..(ty + 1) * g.kw];
                    for (tx, cx) in cols.iter().enumerate() {
                        if let Some(cx) = cx {
                            acc += krow[tx] * row[*cx];
                        }
                    }
                }
                o[y * g.w + xo] = acc;
            }
        }
    });
    out
}

/// Returns (grad input, grad kernel) for the requested sides.
fn conv_backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    k: &[T],
    gout: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.h * g.w;
    let ksize = g.kh * g.kw;
    let gin = need_input.then(|| {
        let mut gin = vec![T::zero(); x.len()];
        gin.par_chunks_mut(plane).enumerate().for_each(|(p, gi)| {
            let ch = p % g.c;
            let kern = &k[g.kernel_offset(ch)..g.kernel_offset(ch) + ksize];
            let go = &gout[p * plane..(p + 1) * plane];
            for y in 0..g.h {
                let rows = &g.rows[y * g.kh..(y + 1) * g.kh];
                for xo in 0..g.w {
                    let gv = go[y * g.w + xo];
                    if gv == T::zero() {
                        continue;
                    }
                    let cols = &g.cols[xo * g.kw..(xo + 1) * g.kw];
                    for (ty, ry) in rows.iter().enumerate() {
                        let Some(ry) = ry else { continue };
                        for (tx, cx) in cols.iter().enumerate() {
                            if let Some(cx) = cx {
                                gi[ry * g.w + cx] += gv * kern[ty * g.kw + tx];
                            }
                        }
                    }
                }
            }
        });
        gin
    });
    let gk = need_kernel.then(|| {
        let mut gk = vec![T::zero(); k.len()];
        for p in 0..g.n * g.c {
            let ch = p % g.c;
            let off = g.kernel_offset(ch);
            let src = &x[p * plane..(p + 1) * plane];
            let go = &gout[p * plane..(p + 1) * plane];
            for y in 0..g.h {
                let rows = &g.rows[y * g.kh..(y + 1) * g.kh];
                for xo in 0..g.w {
                    let gv = go[y * g.w + xo];
                    let cols = &g.cols[xo * g.kw..(xo + 1) * g.kw];
                    for (ty, ry) in rows.iter().enumerate() {
                        let Some(ry) = ry else { continue };
                        for (tx, cx) in cols.iter().enumerate() {
                            if let Some(cx) = cx {
                                gk[off + ty * g.kw + tx] += gv * src[ry * g.w + cx];
                            }
                        }
                    }
                }
            }
        }
        gk
    });
    (gin, gk)
}

impl<T: Real> Var<T> {
    /// Depthwise correlation of an NCHW batch with an odd-sized kernel,
    /// shared (`kH×kW`) or per channel (`C×kH×kW`). Output has the input's
    /// size; `border` decides the samples read outside the image.
    pub fn conv2d(&self, kernel: &Var<T>, border: BorderMode) -> Result<Var<T>> {
        let geom = conv_geometry(self.shape(), kernel.shape(), border)?;
        let x = self.value().clone();
        let k = kernel.value().clone();
        let out = conv_forward(&geom, x.data(), k.data());
        let value = Tensor::from_parts(self.shape().to_vec(), out);
        let (need_x, need_k) = (self.requires_grad(), kernel.requires_grad());
        Var::from_op("conv2d", &[self, kernel], value, move |g| {
            let (gi, gk) = conv_backward(&geom, x.data(), k.data(), g.data(), need_x, need_k);
            vec![
                gi.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                gk.map(|d| Tensor::from_parts(k.shape().to_vec(), d)),
            ]
        })
    }

    /// [`conv2d`](Self::conv2d) with a constant kernel.
    pub fn conv2d_const(&self, kernel: &Tensor<T>, border: BorderMode) -> Result<Var<T>> {
        self.conv2d(&self.constant_like(kernel.clone()), border)
    }
}
