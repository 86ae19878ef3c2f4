use super::{Real, Tensor, Var};
use crate::error::{param_err, Result};

impl<T: Real> Var<T> {
    /// Splits an `N×C×H×W` batch into windows of `window` taken every
    /// `stride` pixels, in row-major order: `N×P×C×h×w`.
    pub fn extract_patches(&self, window: (usize, usize), stride: (usize, usize)) -> Result<Var<T>> {
        let (n, c, h, w) = self.value().dims4()?;
        let (ph, pw) = window;
        let (sh, sw) = stride;
        if ph == 0 || pw == 0 || sh == 0 || sw == 0 {
            return param_err("patch window and stride must be positive");
        }
        if ph > h || pw > w {
            return param_err(format!("window {ph}×{pw} larger than image {h}×{w}"));
        }
        let gy = (h - ph) / sh + 1;
        let gx = (w - pw) / sw + 1;
        let p = gy * gx;
        let x = self.value().data();
        let mut data = Vec::with_capacity(n * p * c * ph * pw);
        for b in 0..n {
            for py in 0..gy {
                for px in 0..gx {
                    for ch in 0..c {
                        let plane = (b * c + ch) * h * w;
                        for y in 0..ph {
                            let row = plane + (py * sh + y) * w + px * sw;
                            data.extend_from_slice(&x[row..row + pw]);
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, p, c, ph, pw], data);
        Var::from_op("extract_patches", &[self], value, move |g| {
            let mut gi = Tensor::zeros(&[n, c, h, w]);
            let gid = gi.data_mut();
            let gd = g.data();
            let mut pos = 0;
            for b in 0..n {
                for py in 0..gy {
                    for px in 0..gx {
                        for ch in 0..c {
                            let plane = (b * c + ch) * h * w;
                            for y in 0..ph {
                                let row = plane + (py * sh + y) * w + px * sw;
                                for (dst, &src) in gid[row..row + pw].iter_mut().zip(&gd[pos..pos + pw]) {
                                    *dst += src;
                                }
                                pos += pw;
                            }
                        }
                    }
                }
            }
            vec![Some(gi)]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, h, w], |i| (i[2] * w + i[3]) as f64)
    }

    #[test]
    fn tiles_four_by_four() {
        let tape = Tape::new();
        let x = tape.constant(ramp(4, 4));
        let p = x.extract_patches((2, 2), (2, 2)).unwrap();
        assert_eq!(p.shape(), &[1, 4, 1, 2, 2]);
        assert_eq!(&p.value().data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.value().data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn whole_image_window() {
        let tape = Tape::new();
        let x = tape.constant(ramp(3, 5));
        let p = x.extract_patches((3, 5), (1, 1)).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1, 3, 5]);
        assert_eq!(p.value().data(), x.value().data());
    }

    #[test]
    fn overlapping_windows_index_arithmetic() {
        let tape = Tape::new();
        let img = ramp(5, 5);
        let x = tape.constant(img.clone());
        let p = x.extract_patches((3, 3), (1, 1)).unwrap();
        assert_eq!(p.shape()[1], 9);
        for k in 0..9 {
            let (oy, ox) = (k / 3, k % 3);
            for y in 0..3 {
                for xx in 0..3 {
                    assert_eq!(p.value().at(&[0, k, 0, y, xx]), img.at(&[0, 0, oy + y, ox + xx]));
                }
            }
        }
    }

    #[test]
    fn window_larger_than_image() {
        let tape = Tape::new();
        let x = tape.constant(ramp(3, 3));
        assert!(matches!(x.extract_patches((4, 2), (1, 1)), Err(crate::Error::Parameter(_))));
    }
}
