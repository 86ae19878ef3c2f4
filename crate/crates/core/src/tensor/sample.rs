//! Bilinear sampling at normalized grid locations.
//!
//! Grid coordinates are `(x, y)` in `[-1, 1]`, where `-1` and `+1` are the
//! centres of the first and last pixel. Neighbours that fall outside the
//! image read as zero, so samples drift to black across the border.

use rayon::prelude::*;

use super::{Real, Tensor, Var};
use crate::error::{shape_err, Result};

/// Pixel coordinate of a normalized coordinate along an axis of `n` samples.
/// Values within a few ulps of an integer are snapped so that grids built
/// from pixel centres reproduce the input exactly.
#[inline]
fn to_pixel<T: Real>(v: T, n: usize) -> T {
    let scale = T::from_usize(n.saturating_sub(1));
    let p = (v + T::one()) * T::c(0.5) * scale;
    let r = p.round();
    if (p - r).abs() <= T::epsilon() * T::c(8.0) * (scale + T::one()) {
        r
    } else {
        p
    }
}

/// The four bilinear taps of a pixel-space location.
struct Taps<T> {
    idx: [Option<usize>; 4],
    fx: T,
    fy: T,
}

#[inline]
fn taps<T: Real>(px: T, py: T, h: usize, w: usize) -> Taps<T> {
    let mut idx = [None; 4];
    if !px.is_finite() || !py.is_finite() {
        return Taps { idx, fx: T::zero(), fy: T::zero() };
    }
    let x0f = px.floor();
    let y0f = py.floor();
    let fx = px - x0f;
    let fy = py - y0f;
    // Far-away samples: all taps outside, avoid overflowing the cast.
    let limit = T::from_usize(h.max(w) + 2);
    if x0f < -limit || y0f < -limit || x0f > limit || y0f > limit {
        return Taps { idx, fx, fy };
    }
    let (x0, y0) = (x0f.as_f64() as isize, y0f.as_f64() as isize);
    let inside = |x: isize, y: isize| -> Option<usize> {
        (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then(|| y as usize * w + x as usize)
    };
    idx[0] = inside(x0, y0);
    idx[1] = inside(x0 + 1, y0);
    idx[2] = inside(x0, y0 + 1);
    idx[3] = inside(x0 + 1, y0 + 1);
    Taps { idx, fx, fy }
}

impl<T: Real> Taps<T> {
    #[inline]
    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.fx) * (one - self.fy),
            self.fx * (one - self.fy),
            (one - self.fx) * self.fy,
            self.fx * self.fy,
        ]
    }

    #[inline]
    fn read(&self, plane: &[T], k: usize) -> T {
        self.idx[k].map_or(T::zero(), |i| plane[i])
    }
}

impl<T: Real> Var<T> {
    /// Samples an `N×C×H×W` batch at an `N×H'×W'×2` grid, giving
    /// `N×C×H'×W'`. Differentiable with respect to both the image and the
    /// grid.
    pub fn grid_sample(&self, grid: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = self.value().dims4()?;
        let (ho, wo) = match grid.shape()[..] {
            [gn, ho, wo, 2] if gn == n => (ho, wo),
            _ => {
                return shape_err(format!(
                    "grid must be N×H'×W'×2 with N={n}, got {:?}",
                    grid.shape()
                ))
            }
        };
        let x = self.value().clone();
        let gr = grid.value().clone();
        let in_plane = h * w;
        let out_plane = ho * wo;
        let mut out = vec![T::zero(); n * c * out_plane];
        out.par_chunks_mut(c * out_plane).enumerate().for_each(|(b, ob)| {
            let gd = &gr.data()[b * out_plane * 2..(b + 1) * out_plane * 2];
            let xb = &x.data()[b * c * in_plane..(b + 1) * c * in_plane];
            for o in 0..out_plane {
                let t = taps(to_pixel(gd[2 * o], w), to_pixel(gd[2 * o + 1], h), h, w);
                let wts = t.weights();
                for ch in 0..c {
                    let plane = &xb[ch * in_plane..(ch + 1) * in_plane];
                    let mut acc = T::zero();
                    for (k, &wk) in wts.iter().enumerate() {
                        if let Some(i) = t.idx[k] {
                            acc += wk * plane[i];
                        }
                    }
                    ob[ch * out_plane + o] = acc;
                }
            }
        });
        let value = Tensor::from_parts(vec![n, c, ho, wo], out);
        let (need_x, need_g) = (self.requires_grad(), grid.requires_grad());
        Var::from_op("grid_sample", &[self, grid], value, move |g| {
            let gout = g.data();
            let gx = need_x.then(|| {
                let mut gi = vec![T::zero(); n * c * in_plane];
                gi.par_chunks_mut(c * in_plane).enumerate().for_each(|(b, gib)| {
                    let gd = &gr.data()[b * out_plane * 2..(b + 1) * out_plane * 2];
                    for o in 0..out_plane {
                        let t = taps(to_pixel(gd[2 * o], w), to_pixel(gd[2 * o + 1], h), h, w);
                        let wts = t.weights();
                        for ch in 0..c {
                            let gv = gout[(b * c + ch) * out_plane + o];
                            for (k, &wk) in wts.iter().enumerate() {
                                if let Some(i) = t.idx[k] {
                                    gib[ch * in_plane + i] += wk * gv;
                                }
                            }
                        }
                    }
                });
                Tensor::from_parts(vec![n, c, h, w], gi)
            });
            let gg = need_g.then(|| {
                let sx = T::from_usize(w.saturating_sub(1)) * T::c(0.5);
                let sy = T::from_usize(h.saturating_sub(1)) * T::c(0.5);
                let mut ggd = vec![T::zero(); n * out_plane * 2];
                ggd.par_chunks_mut(out_plane * 2).enumerate().for_each(|(b, ggb)| {
                    let gd = &gr.data()[b * out_plane * 2..(b + 1) * out_plane * 2];
                    let xb = &x.data()[b * c * in_plane..(b + 1) * c * in_plane];
                    for o in 0..out_plane {
                        let t = taps(to_pixel(gd[2 * o], w), to_pixel(gd[2 * o + 1], h), h, w);
                        let one = T::one();
                        let (mut dpx, mut dpy) = (T::zero(), T::zero());
                        for ch in 0..c {
                            let plane = &xb[ch * in_plane..(ch + 1) * in_plane];
                            let gv = gout[(b * c + ch) * out_plane + o];
                            let (v00, v01, v10, v11) =
                                (t.read(plane, 0), t.read(plane, 1), t.read(plane, 2), t.read(plane, 3));
                            dpx += gv * ((one - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                            dpy += gv * ((one - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                        }
                        ggb[2 * o] = dpx * sx;
                        ggb[2 * o + 1] = dpy * sy;
                    }
                });
                Tensor::from_parts(vec![n, ho, wo, 2], ggd)
            });
            vec![gx, gg]
        })
    }
}

/// Normalized grid whose samples land on the pixel centres of an `h×w`
/// image (`N×h×w×2`).
pub fn identity_grid<T: Real>(n: usize, h: usize, w: usize) -> Tensor<T> {
    let norm = |i: usize, len: usize| -> T {
        if len <= 1 {
            T::zero()
        } else {
            T::c(2.0 * i as f64 / (len - 1) as f64 - 1.0)
        }
    };
    Tensor::from_fn(&[n, h, w, 2], |i| if i[3] == 0 { norm(i[2], w) } else { norm(i[1], h) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn identity_grid_reproduces_input_exactly() {
        let tape = Tape::new();
        let img = Tensor::<f64>::from_fn(&[2, 3, 7, 9], |i| ((i[0] * 31 + i[1] * 17 + i[2] * 5 + i[3]) % 13) as f64 / 13.0 + 0.01);
        let x = tape.constant(img.clone());
        let grid = tape.constant(identity_grid(2, 7, 9));
        let y = x.grid_sample(&grid).unwrap();
        assert_eq!(y.value(), &img);

        let tape32 = Tape::new();
        let img32 = img.cast::<f32>();
        let y32 = tape32.constant(img32.clone()).grid_sample(&tape32.constant(identity_grid(2, 7, 9))).unwrap();
        assert_eq!(y32.value(), &img32);
    }

    #[test]
    fn midpoint_between_pixels() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0f64, 1.0]).unwrap());
        let grid = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 0.0]).unwrap());
        assert_eq!(x.grid_sample(&grid).unwrap().item(), 0.5);
    }

    #[test]
    fn out_of_range_reads_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[1, 1, 3, 3]));
        let grid = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![3.0, 0.0, -1.5, 0.0]).unwrap());
        let y = x.grid_sample(&grid).unwrap();
        assert_eq!(y.value().data()[0], 0.0);
        // x = -1.5 normalized is half a pixel left of the first column.
        assert_eq!(y.value().data()[1], 0.5);
    }

    #[test]
    fn bad_grid_shape() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[1, 1, 3, 3]));
        let grid = tape.constant(Tensor::zeros(&[1, 2, 2, 3]));
        assert!(matches!(x.grid_sample(&grid), Err(crate::Error::Shape(_))));
    }
}
