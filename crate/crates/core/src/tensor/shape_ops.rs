//! Views and layout changes: reshape, slicing, concatenation, permutation,
//! flips, spatial padding and gathers.

use super::conv::{border_index, BorderMode};
use super::elementwise::{broadcast_shape, broadcast_zip, reduce_to};
use super::{numel, strides, Real, Tensor, Var};
use crate::error::{param_err, shape_err, Result};

fn check_axis(axis: usize, shape: &[usize]) -> Result<()> {
    if axis >= shape.len() {
        return shape_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

/// Copies a strided selection along `axis`: indices `start, start+step, …`
/// below `end`.
fn slice_value<T: Real>(x: &Tensor<T>, axis: usize, idx: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * idx.len() * inner);
    let d = x.data();
    for o in 0..outer {
        for &k in idx {
            let base = (o * len + k) * inner;
            data.extend_from_slice(&d[base..base + inner]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = idx.len();
    Tensor::from_parts(out_shape, data)
}

/// Scatter-adds `g` (shaped like the selection) back into a zero tensor.
fn scatter_axis<T: Real>(g: &Tensor<T>, shape: &[usize], axis: usize, idx: &[usize]) -> Tensor<T> {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let gd = g.data();
    for o in 0..outer {
        for (j, &k) in idx.iter().enumerate() {
            let src = (o * idx.len() + j) * inner;
            let dst = (o * len + k) * inner;
            for i in 0..inner {
                od[dst + i] += gd[src + i];
            }
        }
    }
    out
}

impl<T: Real> Var<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let value = self.value().reshape(shape)?;
        let in_shape = self.shape().to_vec();
        Var::from_op("reshape", &[self], value, move |g| {
            vec![Some(g.reshape(&in_shape).expect("same element count"))]
        })
    }

    /// Inserts a unit axis at `axis`.
    pub fn unsqueeze(&self, axis: usize) -> Result<Var<T>> {
        let mut shape = self.shape().to_vec();
        if axis > shape.len() {
            return shape_err(format!("unsqueeze axis {axis} out of range for {shape:?}"));
        }
        shape.insert(axis, 1);
        self.reshape(&shape)
    }

    /// Elements `start, start+step, …` (< `end`) along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize, step: usize) -> Result<Var<T>> {
        check_axis(axis, self.shape())?;
        let len = self.shape()[axis];
        if step == 0 || start >= end || end > len {
            return shape_err(format!(
                "invalid slice {start}..{end} step {step} on axis {axis} of extent {len}"
            ));
        }
        let idx: Vec<usize> = (start..end).step_by(step).collect();
        self.index_select(axis, &idx)
    }

    /// Gathers the listed positions along `axis` (repeats allowed; their
    /// gradients accumulate).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Var<T>> {
        check_axis(axis, self.shape())?;
        let len = self.shape()[axis];
        if indices.is_empty() {
            return shape_err("index_select with no indices");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return shape_err(format!("index {bad} out of range for axis {axis} of extent {len}"));
        }
        let value = slice_value(self.value(), axis, indices);
        let shape = self.shape().to_vec();
        let idx = indices.to_vec();
        Var::from_op("index_select", &[self], value, move |g| {
            vec![Some(scatter_axis(g, &shape, axis, &idx))]
        })
    }

    /// Concatenates along `axis`; other extents must agree.
    pub fn concat(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let Some(first) = parts.first() else {
            return shape_err("concat of an empty list");
        };
        check_axis(axis, first.shape())?;
        let base = first.shape();
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(d, (&a, &b))| d == axis || a == b);
            if !compatible {
                return shape_err(format!("concat shape mismatch {s:?} vs {base:?} on axis {axis}"));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                let chunk = l * inner;
                data.extend_from_slice(&p.value().data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        let value = Tensor::from_parts(shape, data);
        let refs: Vec<&Var<T>> = parts.iter().collect();
        Var::from_op("concat", &refs, value, move |g| {
            let gd = g.data();
            let mut outs: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (buf, &l) in outs.iter_mut().zip(&lens) {
                    buf.extend_from_slice(&gd[pos..pos + l * inner]);
                    pos += l * inner;
                }
            }
            outs.into_iter()
                .zip(&lens)
                .map(|(buf, &l)| {
                    let mut s = g.shape().to_vec();
                    s[axis] = l;
                    Some(Tensor::from_parts(s, buf))
                })
                .collect()
        })
    }

    /// Stacks equally shaped variables along a new axis.
    pub fn stack(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let expanded = parts.iter().map(|p| p.unsqueeze(axis)).collect::<Result<Vec<_>>>()?;
        Var::concat(&expanded, axis)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("invalid permutation {perm:?} for shape {shape:?}"));
        }
        let value = permute_value(self.value(), perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Var::from_op("permute", &[self], value, move |g| vec![Some(permute_value(g, &inverse))])
    }

    /// Reverses the order of elements along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Var<T>> {
        check_axis(axis, self.shape())?;
        let len = self.shape()[axis];
        let idx: Vec<usize> = (0..len).rev().collect();
        self.index_select(axis, &idx)
    }

    /// Pads the last two axes by `(top, bottom, left, right)`.
    ///
    /// `Zero` fills with zeros; `Replicate` and `Reflect` index into the
    /// input (reflect mirrors without repeating the edge sample).
    pub fn pad2d(&self, pads: (usize, usize, usize, usize), mode: BorderMode) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 {
            return shape_err(format!("pad2d needs at least 2 axes, got {shape:?}"));
        }
        let (top, bottom, left, right) = pads;
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (ho, wo) = (h + top + bottom, w + left + right);
        let rows: Vec<Option<usize>> =
            (0..ho).map(|y| border_index(y as isize - top as isize, h, mode)).collect();
        let cols: Vec<Option<usize>> =
            (0..wo).map(|x| border_index(x as isize - left as isize, w, mode)).collect();
        let planes = numel(&shape) / (h * w);
        let x = self.value().data();
        let mut data = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            for (y, ry) in rows.iter().enumerate() {
                let Some(ry) = ry else { continue };
                for (xo, cx) in cols.iter().enumerate() {
                    if let Some(cx) = cx {
                        data[(p * ho + y) * wo + xo] = x[(p * h + ry) * w + cx];
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        let value = Tensor::from_parts(out_shape, data);
        Var::from_op("pad2d", &[self], value, move |g| {
            let mut gi = Tensor::zeros(&shape);
            let gid = gi.data_mut();
            let gd = g.data();
            for p in 0..planes {
                for (y, ry) in rows.iter().enumerate() {
                    let Some(ry) = ry else { continue };
                    for (xo, cx) in cols.iter().enumerate() {
                        if let Some(cx) = cx {
                            gid[(p * h + ry) * w + cx] += gd[(p * ho + y) * wo + xo];
                        }
                    }
                }
            }
            vec![Some(gi)]
        })
    }

    /// Broadcasts to a larger shape (copying).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<T>> {
        let target = broadcast_shape(self.shape(), shape)?;
        if target != shape {
            return shape_err(format!("cannot broadcast {:?} to {shape:?}", self.shape()));
        }
        let value = broadcast_zip(&Tensor::zeros(shape), self.value(), |_, v| v)?;
        let own = self.shape().to_vec();
        Var::from_op("broadcast_to", &[self], value, move |g| vec![Some(reduce_to(g, &own))])
    }

    /// Keeps every `factor`-th row and column of the last two axes, starting
    /// at index 0 (pyramid decimation).
    pub fn subsample2d(&self, factor: usize) -> Result<Var<T>> {
        if factor == 0 {
            return param_err("subsample factor must be positive");
        }
        let r = self.ndim();
        if r < 2 {
            return shape_err("subsample2d needs at least 2 axes");
        }
        let (h, w) = (self.shape()[r - 2], self.shape()[r - 1]);
        self.slice(r - 2, 0, h, factor)?.slice(r - 1, 0, w, factor)
    }
}

fn permute_value<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    let d = x.data();
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(d[off]);
        for k in (0..out_shape.len()).rev() {
            idx[k] += 1;
            off += src_strides[k];
            if idx[k] < out_shape[k] {
                break;
            }
            off -= src_strides[k] * out_shape[k];
            idx[k] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn iota(shape: &[usize]) -> Tensor<f64> {
        let n = numel(shape);
        Tensor::new(shape, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn permute_round_trip_and_values() {
        let tape = Tape::new();
        let x = tape.leaf(iota(&[2, 3, 4]));
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.value().at(&[3, 1, 2]), x.value().at(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.value(), x.value());
    }

    #[test]
    fn concat_and_gradient_split() {
        let tape = Tape::new();
        let a = tape.leaf(iota(&[2, 1]));
        let b = tape.leaf(iota(&[2, 2]));
        let c = Var::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.value().data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 3.0]);
        let w = tape.constant(iota(&[2, 3]));
        let g = c.mul(&w).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&a).unwrap().data(), &[0.0, 3.0]);
        assert_eq!(g.get(&b).unwrap().data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn pad_reflect_and_replicate() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 3], vec![1.0f64, 2.0, 3.0]).unwrap());
        let r = x.pad2d((0, 0, 2, 2), BorderMode::Reflect).unwrap();
        assert_eq!(r.value().data(), &[3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        let e = x.pad2d((0, 0, 1, 1), BorderMode::Replicate).unwrap();
        assert_eq!(e.value().data(), &[1.0, 1.0, 2.0, 3.0, 3.0]);
        let z = x.pad2d((1, 0, 0, 0), BorderMode::Zero).unwrap();
        assert_eq!(z.value().data(), &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn flip_twice_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(iota(&[1, 1, 3, 4]));
        let f = x.flip(3).unwrap();
        assert_eq!(f.value().at(&[0, 0, 1, 0]), 7.0);
        assert_eq!(f.flip(3).unwrap().value(), x.value());
    }

    #[test]
    fn slice_with_step_and_scatter() {
        let tape = Tape::new();
        let x = tape.leaf(iota(&[5]));
        let s = x.slice(0, 1, 5, 2).unwrap();
        assert_eq!(s.value().data(), &[1.0, 3.0]);
        let g = s.sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0]);
    }
}
