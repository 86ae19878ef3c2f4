//! Small batched matrix products and 3×3 inverses on the tape.

use super::{Real, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// `(batch, rows, cols)` of a 2-D or 3-D matrix tensor; 2-D has batch 0.
fn mat_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape[..] {
        [r, c] => Ok((0, r, c)),
        [b, r, c] => Ok((b, r, c)),
        _ => shape_err(format!("expected a matrix or batch of matrices, got {shape:?}")),
    }
}

fn matmul_raw<T: Real>(
    a: &[T],
    b: &[T],
    batch: usize,
    (m, k, n): (usize, usize, usize),
    a_batched: bool,
    b_batched: bool,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch.max(1) * m * n];
    for bi in 0..batch.max(1) {
        let ao = if a_batched { bi * m * k } else { 0 };
        let bo = if b_batched { bi * k * n } else { 0 };
        let oo = bi * m * n;
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for l in 0..k {
                    let av = if trans_a { a[ao + l * m + i] } else { a[ao + i * k + l] };
                    let bv = if trans_b { b[bo + j * k + l] } else { b[bo + l * n + j] };
                    acc += av * bv;
                }
                out[oo + i * n + j] = acc;
            }
        }
    }
    out
}

fn sum_batches<T: Real>(d: Vec<T>, batch: usize, size: usize) -> Vec<T> {
    let mut out = vec![T::zero(); size];
    for bi in 0..batch.max(1) {
        for (o, v) in out.iter_mut().zip(&d[bi * size..(bi + 1) * size]) {
            *o += *v;
        }
    }
    out
}

pub(crate) fn invert3<T: Real>(m: &[T]) -> Option<[T; 9]> {
    let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6]);
    if !det.is_finite() || det.abs() <= T::c(1e-12) {
        return None;
    }
    let inv_det = T::one() / det;
    Some([
        (m[4] * m[8] - m[5] * m[7]) * inv_det,
        (m[2] * m[7] - m[1] * m[8]) * inv_det,
        (m[1] * m[5] - m[2] * m[4]) * inv_det,
        (m[5] * m[6] - m[3] * m[8]) * inv_det,
        (m[0] * m[8] - m[2] * m[6]) * inv_det,
        (m[2] * m[3] - m[0] * m[5]) * inv_det,
        (m[3] * m[7] - m[4] * m[6]) * inv_det,
        (m[1] * m[6] - m[0] * m[7]) * inv_det,
        (m[0] * m[4] - m[1] * m[3]) * inv_det,
    ])
}

impl<T: Real> Var<T> {
    /// Matrix product of `[B,]m×k` and `[B,]k×n`. A 2-D operand is shared
    /// across the other's batch.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (ba, m, k) = mat_dims(self.shape())?;
        let (bb, k2, n) = mat_dims(other.shape())?;
        if k != k2 || (ba != 0 && bb != 0 && ba != bb) {
            return shape_err(format!("matmul shape mismatch {:?} × {:?}", self.shape(), other.shape()));
        }
        let batch = ba.max(bb);
        let (a_batched, b_batched) = (ba != 0, bb != 0);
        let a = self.value().clone();
        let b = other.value().clone();
        let out = matmul_raw(a.data(), b.data(), batch, (m, k, n), a_batched, b_batched, false, false);
        let shape = if batch == 0 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::from_parts(shape, out);
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Var::from_op("matmul", &[self, other], value, move |g| {
            let gd = g.data();
            // dA = G · Bᵀ, dB = Aᵀ · G
            let ga = need_a.then(|| {
                let d = matmul_raw(gd, b.data(), batch, (m, n, k), true, b_batched, false, true);
                let d = if a_batched { d } else { sum_batches(d, batch, m * k) };
                Tensor::from_parts(a.shape().to_vec(), d)
            });
            let gb = need_b.then(|| {
                let d = matmul_raw(a.data(), gd, batch, (k, m, n), a_batched, true, true, false);
                let d = if b_batched { d } else { sum_batches(d, batch, k * n) };
                Tensor::from_parts(b.shape().to_vec(), d)
            });
            vec![ga, gb]
        })
    }

    /// Inverse of each matrix in an `N×3×3` batch. Fails with an estimation
    /// error when any determinant is below 1e-12 in magnitude.
    pub fn inverse3x3(&self) -> Result<Var<T>> {
        let nb = match self.shape()[..] {
            [nb, 3, 3] => nb,
            _ => return shape_err(format!("inverse3x3 expects N×3×3, got {:?}", self.shape())),
        };
        let mut inv = Vec::with_capacity(nb * 9);
        for b in 0..nb {
            let m = &self.value().data()[b * 9..(b + 1) * 9];
            let i = invert3(m).ok_or_else(|| Error::Estimation(format!("matrix {b} is singular")))?;
            inv.extend_from_slice(&i);
        }
        let value = Tensor::from_parts(vec![nb, 3, 3], inv);
        let saved = value.clone();
        Var::from_op("inverse3x3", &[self], value, move |g| {
            // d(A⁻¹) = -A⁻¹ dA A⁻¹  ⇒  dL/dA = -A⁻ᵀ G A⁻ᵀ
            let inv = saved.data();
            let mut out = vec![T::zero(); nb * 9];
            for b in 0..nb {
                let a = &inv[b * 9..(b + 1) * 9];
                let gm = &g.data()[b * 9..(b + 1) * 9];
                // t = G · A⁻ᵀ
                let mut t = [T::zero(); 9];
                for i in 0..3 {
                    for j in 0..3 {
                        t[i * 3 + j] = (0..3).map(|l| gm[i * 3 + l] * a[j * 3 + l]).sum();
                    }
                }
                for i in 0..3 {
                    for j in 0..3 {
                        let v: T = (0..3).map(|l| a[l * 3 + i] * t[l * 3 + j]).sum();
                        out[b * 9 + i * 3 + j] = -v;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![nb, 3, 3], out))]
        })
    }
}
