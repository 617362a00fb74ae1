//! Forward kernels over [`Tensor`] values.
//!
//! These are pure functions; the differentiable versions in
//! [`crate::autodiff`] call into the same inner loops.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Default epsilon added to the variance in [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c += op(a) · op(b)` for row-major slices, where `op(a)` is `m×k` and
/// `op(b)` is `k×n`. With `ta` the slice `a` is stored `k×m`; with `tb` the
/// slice `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cj, bj) in crow.iter_mut().zip(brow) {
                        *cj += aip * bj;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    c[i * n + j] += dot;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let api = a[p * m + i];
                    if api == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cj, bj) in crow.iter_mut().zip(brow) {
                        *cj += api * bj;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += acc;
                }
            }
        }
    }
}

/// Matrix product of `m×k` and `k×n` tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(dim_err("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n, false, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(dim_err("transpose", a.shape(), &[]));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// In-place max-subtracted softmax over each contiguous row of length `n`.
pub(crate) fn softmax_rows(data: &mut [f64], n: usize) {
    for row in data.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - max);
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Softmax along `axis`. Every slice along that axis is nonnegative and
/// sums to one.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Contract(alloc::format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = src[base + j * inner];
            }
            softmax_rows(&mut buf, n);
            for (j, b) in buf.iter().enumerate() {
                out[base + j * inner] = *b;
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Per-row standardisation. Returns the normalised rows and the per-row
/// reciprocal standard deviation.
pub(crate) fn standardize_rows(data: &[f64], c: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = data.len() / c;
    let mut xhat = vec![0.0; data.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &data[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / math::sqrt(var + eps);
        inv_std[r] = is;
        for (o, v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv_std)
}

/// Layer normalisation over the last axis followed by a per-channel affine
/// map. Uses the population variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.last_dim();
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(dim_err("layer_norm", x.shape(), gain.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::Config(alloc::format!("layer_norm eps must be > 0, got {eps}")));
    }
    let (mut y, _) = standardize_rows(x.data(), c, eps);
    for row in y.chunks_mut(c) {
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Affine map over the last axis of every token: `x·W + b`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let cin = x.last_dim();
    if weight.rank() != 2 || weight.shape()[0] != cin {
        return Err(dim_err("linear", x.shape(), weight.shape()));
    }
    let cout = weight.shape()[1];
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(dim_err("linear", weight.shape(), b.shape()));
        }
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * cout];
    gemm(x.data(), weight.data(), &mut out, rows, cin, cout, false, false);
    if let Some(b) = bias {
        for row in out.chunks_mut(cout) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Ok(Tensor::from_parts(shape, out))
}
