//! Broadcasting arithmetic, pointwise functions and reductions.

use super::{numel, strides, Real, Tensor, Var};
use crate::error::{shape_err, Result};

/// Numpy-style broadcast of two shapes (trailing axes aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("shapes {a:?} and {b:?} do not broadcast")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < offset || shape[i - offset] == 1 { 0 } else { own[i - offset] })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(out) / inner;
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        for k in 0..inner {
            f(o * inner + k, oa + k * ia, ob + k * ib);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_zip<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    if b.numel() == 1 {
        let y = b.data()[0];
        let data = a.data().iter().map(|&x| f(x, y)).collect();
        if out == a.shape() {
            return Ok(Tensor::from_parts(out, data));
        }
    }
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
    Ok(Tensor::from_parts(out, data))
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub(crate) fn reduce_to<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    if numel(shape) == 1 {
        return Tensor::from_parts(shape.to_vec(), vec![g.sum()]);
    }
    let out = g.shape();
    let sr = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    let mut data = vec![T::zero(); numel(shape)];
    let gd = g.data();
    for_each_broadcast(out, &zeros, &sr, |o, _, r| data[r] += gd[o]);
    Tensor::from_parts(shape.to_vec(), data)
}

fn same_or_reduce<T: Real>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g
    } else {
        reduce_to(&g, shape)
    }
}

impl<T: Real> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a + b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op("add", &[self, other], value, move |g| {
            vec![Some(reduce_to(g, &sa)), Some(reduce_to(g, &sb))]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a - b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op("sub", &[self, other], value, move |g| {
            vec![Some(reduce_to(g, &sa)), Some(reduce_to(g, &sb).map(|v| -v))]
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a * b)?;
        let (a, b) = (self.value().clone(), other.value().clone());
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Var::from_op("mul", &[self, other], value, move |g| {
            let ga = need_a.then(|| {
                let t = broadcast_zip(g, &b, |g, b| g * b).expect("broadcast checked in forward");
                same_or_reduce(t, a.shape())
            });
            let gb = need_b.then(|| {
                let t = broadcast_zip(g, &a, |g, a| g * a).expect("broadcast checked in forward");
                same_or_reduce(t, b.shape())
            });
            vec![ga, gb]
        })
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a / b)?;
        let (sa, b) = (self.shape().to_vec(), other.value().clone());
        let out = value.clone();
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Var::from_op("div", &[self, other], value, move |g| {
            let ga = need_a.then(|| {
                let t = broadcast_zip(g, &b, |g, b| g / b).expect("broadcast checked in forward");
                same_or_reduce(t, &sa)
            });
            let gb = need_b.then(|| {
                // d(a/b)/db = -(a/b)/b
                let go = g.zip_map(&out, |g, o| -g * o).expect("adjoint has output shape");
                let t = broadcast_zip(&go, &b, |x, b| x / b).expect("broadcast checked in forward");
                same_or_reduce(t, b.shape())
            });
            vec![ga, gb]
        })
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(&self, other: &Var<T>) -> Result<Var<T>> {
        self.select_binary(other, "maximum", |a, b| a >= b)
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(&self, other: &Var<T>) -> Result<Var<T>> {
        self.select_binary(other, "minimum", |a, b| a <= b)
    }

    fn select_binary(
        &self,
        other: &Var<T>,
        op: &'static str,
        pick_first: fn(T, T) -> bool,
    ) -> Result<Var<T>> {
        let value =
            broadcast_zip(self.value(), other.value(), |a, b| if pick_first(a, b) { a } else { b })?;
        let mask = broadcast_zip(self.value(), other.value(), |a, b| {
            if pick_first(a, b) {
                T::one()
            } else {
                T::zero()
            }
        })?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(op, &[self, other], value, move |g| {
            let ga = g.zip_map(&mask, |g, m| g * m).expect("mask has output shape");
            let gb = g.zip_map(&mask, |g, m| g * (T::one() - m)).expect("mask has output shape");
            vec![Some(same_or_reduce(ga, &sa)), Some(same_or_reduce(gb, &sb))]
        })
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        self.unary("add_scalar", self.value().map(|v| v + s), |g| g.clone())
    }

    pub fn mul_scalar(&self, s: T) -> Var<T> {
        self.unary("mul_scalar", self.value().map(|v| v * s), move |g| g.map(|v| v * s))
    }

    /// `s - self`.
    pub fn rsub_scalar(&self, s: T) -> Var<T> {
        self.unary("rsub_scalar", self.value().map(|v| s - v), |g| g.map(|v| -v))
    }

    pub fn neg(&self) -> Var<T> {
        self.mul_scalar(-T::one())
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&self) -> Var<T> {
        let x = self.value().clone();
        self.unary("abs", x.map(T::abs), move |g| {
            g.zip_map(&x, |g, x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })
            .expect("same shape")
        })
    }

    pub fn exp(&self) -> Var<T> {
        let y = self.value().map(T::exp);
        let saved = y.clone();
        self.unary("exp", y, move |g| g.zip_map(&saved, |g, y| g * y).expect("same shape"))
    }

    pub fn ln(&self) -> Var<T> {
        let x = self.value().clone();
        self.unary("ln", x.map(T::ln), move |g| g.zip_map(&x, |g, x| g / x).expect("same shape"))
    }

    pub fn sqrt(&self) -> Var<T> {
        let y = self.value().map(T::sqrt);
        let saved = y.clone();
        let half = T::c(0.5);
        self.unary("sqrt", y, move |g| g.zip_map(&saved, |g, y| g * half / y).expect("same shape"))
    }

    pub fn square(&self) -> Var<T> {
        let x = self.value().clone();
        let two = T::c(2.0);
        self.unary("square", x.map(|v| v * v), move |g| {
            g.zip_map(&x, |g, x| g * two * x).expect("same shape")
        })
    }

    /// `x^p` for a constant exponent.
    pub fn powf(&self, p: T) -> Var<T> {
        let x = self.value().clone();
        self.unary("powf", x.map(|v| v.powf(p)), move |g| {
            g.zip_map(&x, |g, x| {
                if p == T::zero() {
                    T::zero()
                } else {
                    g * p * x.powf(p - T::one())
                }
            })
            .expect("same shape")
        })
    }

    /// Clamps into `[lo, hi]` (either bound optional). The gradient passes
    /// where the input lies inside the closed interval.
    pub fn clamp(&self, lo: Option<T>, hi: Option<T>) -> Var<T> {
        let x = self.value().clone();
        let lo_v = lo.unwrap_or(T::neg_infinity());
        let hi_v = hi.unwrap_or(T::infinity());
        let y = x.map(|v| v.max(lo_v).min(hi_v));
        self.unary("clamp", y, move |g| {
            g.zip_map(&x, |g, x| if x >= lo_v && x <= hi_v { g } else { T::zero() })
                .expect("same shape")
        })
    }

    pub fn sin(&self) -> Var<T> {
        let x = self.value().clone();
        self.unary("sin", x.map(T::sin), move |g| g.zip_map(&x, |g, x| g * x.cos()).expect("same shape"))
    }

    pub fn cos(&self) -> Var<T> {
        let x = self.value().clone();
        self.unary("cos", x.map(T::cos), move |g| g.zip_map(&x, |g, x| -g * x.sin()).expect("same shape"))
    }

    /// Multiplies by a constant tensor (broadcast).
    pub fn mul_const(&self, c: &Tensor<T>) -> Result<Var<T>> {
        self.mul(&self.constant_like(c.clone()))
    }

    /// Adds a constant tensor (broadcast).
    pub fn add_const(&self, c: &Tensor<T>) -> Result<Var<T>> {
        self.add(&self.constant_like(c.clone()))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        self.unary("sum", Tensor::scalar(self.value().sum()), move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::from_usize(self.value().numel());
        let shape = self.shape().to_vec();
        self.unary("mean", Tensor::scalar(self.value().sum() / n), move |g| {
            Tensor::full(&shape, g.item() / n)
        })
    }

    /// Sum over the listed axes.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var<T>> {
        let (kept, value) = sum_axes_value(self.value(), axes)?;
        let value = if keepdim { value } else { squeeze_axes(value, axes) };
        let in_shape = self.shape().to_vec();
        Var::from_op("sum_axes", &[self], value, move |g| {
            let g = g.reshape(&kept).expect("kept shape has same size");
            vec![Some(broadcast_zip(&Tensor::zeros(&in_shape), &g, |_, g| g).expect("broadcastable"))]
        })
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var<T>> {
        let count: usize = axes.iter().map(|&a| self.shape().get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_axes(axes, keepdim)?.mul_scalar(T::one() / T::from_usize(count)))
    }

    /// Maximum of all elements; the gradient goes to the first maximum in
    /// scan order.
    pub fn max(&self) -> Var<T> {
        self.extremum_all("max", |a, b| a > b)
    }

    /// Minimum of all elements; first minimum in scan order wins.
    pub fn min(&self) -> Var<T> {
        self.extremum_all("min", |a, b| a < b)
    }

    fn extremum_all(&self, op: &'static str, better: fn(T, T) -> bool) -> Var<T> {
        let data = self.value().data();
        let mut best = 0;
        for (i, &v) in data.iter().enumerate() {
            if better(v, data[best]) {
                best = i;
            }
        }
        let shape = self.shape().to_vec();
        self.unary(op, Tensor::scalar(data[best]), move |g| {
            let mut out = Tensor::zeros(&shape);
            out.data_mut()[best] = g.item();
            out
        })
    }

    /// Maximum along one axis (first index wins ties).
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        self.extremum_axis(axis, keepdim, "max_axis", |a, b| a > b)
    }

    /// Minimum along one axis (first index wins ties).
    pub fn min_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        self.extremum_axis(axis, keepdim, "min_axis", |a, b| a < b)
    }

    fn extremum_axis(
        &self,
        axis: usize,
        keepdim: bool,
        op: &'static str,
        better: fn(T, T) -> bool,
    ) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return shape_err(format!("axis {axis} out of range for shape {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value().data();
        let mut vals = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for k in 1..len {
                    let off = base + k * inner;
                    if better(x[off], x[best]) {
                        best = off;
                    }
                }
                vals.push(x[best]);
                arg.push(best);
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let value = Tensor::from_parts(out_shape, vals);
        Var::from_op(op, &[self], value, move |g| {
            let mut gi = Tensor::zeros(&shape);
            let d = gi.data_mut();
            for (&src, &gv) in arg.iter().zip(g.data()) {
                d[src] += gv;
            }
            vec![Some(gi)]
        })
    }
}

/// Returns (keepdim shape, summed tensor with keepdim shape).
fn sum_axes_value<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<(Vec<usize>, Tensor<T>)> {
    let shape = x.shape();
    let mut kept = shape.to_vec();
    for &a in axes {
        if a >= shape.len() {
            return shape_err(format!("axis {a} out of range for shape {shape:?}"));
        }
        kept[a] = 1;
    }
    let out = reduce_to(x, &kept);
    Ok((kept, out))
}

fn squeeze_axes<T: Real>(t: Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape: Vec<usize> =
        t.shape().iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &n)| n).collect();
    let data = t.into_data();
    Tensor::from_parts(shape, data)
}
