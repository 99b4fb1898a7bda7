//! Slice-level numeric kernels shared by the tape and the plain tensor ops.

use crate::error::{Error, Result};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major storage.
///
/// `op(a)` is `m x k`; when `ta` is set `a` is stored `k x m`. Likewise `op(b)`
/// is `k x n`, stored `n x k` when `tb` is set. With `beta == 0` the previous
/// contents of `c` are never read.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements checked by the debug assertions, and `c` does not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn permuted_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("permutation {axes:?} has wrong length"),
        });
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("{axes:?} is not a permutation"),
            });
        }
        seen[a] = true;
    }
    Ok(axes.iter().map(|&a| shape[a]).collect())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Writes `input` with axes reordered so that output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(input: &[f64], shape: &[usize], axes: &[usize], out: &mut [f64]) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride in the input for a unit step along each output axis
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for dst in out.iter_mut() {
        *dst = input[src];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Inverse of a permutation.
pub(crate) fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Numerically stabilised softmax of one strided lane.
#[inline]
fn softmax_lane(x: &[f64], y: &mut [f64], base: usize, stride: usize, len: usize) {
    let mut max = f64::NEG_INFINITY;
    for i in 0..len {
        max = max.max(x[base + i * stride]);
    }
    let mut sum = 0.0;
    for i in 0..len {
        let e = (x[base + i * stride] - max).exp();
        y[base + i * stride] = e;
        sum += e;
    }
    for i in 0..len {
        y[base + i * stride] /= sum;
    }
}

/// Softmax of every length-`cols` row of a batch of `rows x cols` matrices.
pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize, y: &mut [f64]) {
    let mats = x.len() / (rows * cols);
    for m in 0..mats {
        for r in 0..rows {
            softmax_lane(x, y, m * rows * cols + r * cols, 1, cols);
        }
    }
}

/// Softmax of every length-`rows` column of a batch of `rows x cols` matrices.
pub(crate) fn softmax_cols(x: &[f64], rows: usize, cols: usize, y: &mut [f64]) {
    let mats = x.len() / (rows * cols);
    for m in 0..mats {
        for c in 0..cols {
            softmax_lane(x, y, m * rows * cols + c, cols, rows);
        }
    }
}

/// Vector-Jacobian product of softmax along strided lanes: `dx = y * (g - <g, y>)`.
fn softmax_lane_backward(y: &[f64], g: &[f64], dx: &mut [f64], base: usize, stride: usize, len: usize) {
    let mut dot = 0.0;
    for i in 0..len {
        let j = base + i * stride;
        dot += g[j] * y[j];
    }
    for i in 0..len {
        let j = base + i * stride;
        dx[j] += y[j] * (g[j] - dot);
    }
}

pub(crate) fn softmax_rows_backward(y: &[f64], g: &[f64], rows: usize, cols: usize, dx: &mut [f64]) {
    let mats = y.len() / (rows * cols);
    for m in 0..mats {
        for r in 0..rows {
            softmax_lane_backward(y, g, dx, m * rows * cols + r * cols, 1, cols);
        }
    }
}

pub(crate) fn softmax_cols_backward(y: &[f64], g: &[f64], rows: usize, cols: usize, dx: &mut [f64]) {
    let mats = y.len() / (rows * cols);
    for m in 0..mats {
        for c in 0..cols {
            softmax_lane_backward(y, g, dx, m * rows * cols + c, cols, rows);
        }
    }
}

/// Per-vector statistics kept for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(
    x: &[f64],
    d: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    y: &mut [f64],
) -> NormStats {
    let vectors = x.len() / d;
    let mut mean = Vec::with_capacity(vectors);
    let mut rstd = Vec::with_capacity(vectors);
    for v in 0..vectors {
        let row = &x[v * d..(v + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        let out = &mut y[v * d..(v + 1) * d];
        for i in 0..d {
            out[i] = (row[i] - mu) * r * gain[i] + bias[i];
        }
        mean.push(mu);
        rstd.push(r);
    }
    NormStats { mean, rstd }
}

/// Accumulates layer-norm gradients into `dx`, `dgain`, `dbias` (any may be skipped).
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    x: &[f64],
    d: usize,
    gain: &[f64],
    stats: &NormStats,
    g: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dgain: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let vectors = x.len() / d;
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for v in 0..vectors {
        let row = &x[v * d..(v + 1) * d];
        let gr = &g[v * d..(v + 1) * d];
        let (mu, r) = (stats.mean[v], stats.rstd[v]);
        for i in 0..d {
            xhat[i] = (row[i] - mu) * r;
            dxhat[i] = gr[i] * gain[i];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for i in 0..d {
                dg[i] += gr[i] * xhat[i];
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for i in 0..d {
                db[i] += gr[i];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let sum_dxhat: f64 = dxhat.iter().sum();
            let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
            let out = &mut dx[v * d..(v + 1) * d];
            let n = d as f64;
            for i in 0..d {
                out[i] += r / n * (n * dxhat[i] - sum_dxhat - xhat[i] * sum_dxhat_xhat);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transpose_flags_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![f64::NAN; m * n];
            gemm(m, k, n, aa, ta, bb, tb, &mut c, 0.0);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
            }
        }
    }

    #[test]
    fn gemm_accumulates_with_beta_one() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [10.0];
        gemm(1, 2, 1, &a, false, &b, false, &mut c, 1.0);
        assert_eq!(c, [21.0]);
    }
}
