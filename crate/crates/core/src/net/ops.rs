//! Dense kernels on row-major buffers.

use std::f64::consts::PI;

pub const LN_EPS: f64 = 1e-5;

/// `c = a·b + beta·c` where `a` is `m×k` (or `k×m` if `ta`) and `b` is
/// `k×n` (or `n×k` if `tb`), all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address only within the asserted lengths.
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

/// `y (n×out) = x (n×in) · w (in×out) + bias`.
pub fn linear(x: &[f64], w: &[f64], bias: &[f64], n: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        y.extend_from_slice(bias);
    }
    gemm(n, d_in, d_out, x, false, w, false, &mut y, 1.0);
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    d_in: usize,
    d_out: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    gemm(d_in, n, d_out, x, true, dy, false, dw, 1.0);
    for row in dy.chunks_exact(d_out) {
        for (g, d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
    let mut dx = vec![0.0; n * d_in];
    gemm(n, d_out, d_in, dy, false, w, true, &mut dx, 0.0);
    dx
}

/// Row-wise normalisation without affine parameters. Returns `(x̂, 1/σ)`.
pub fn layer_norm(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(x.len() / d);
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in o.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (out, rstd)
}

pub fn layer_norm_backward(xhat: &[f64], rstd: &[f64], dxhat: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; xhat.len()];
    for (((xh, g), o), r) in xhat
        .chunks_exact(d)
        .zip(dxhat.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(rstd)
    {
        let mg = g.iter().sum::<f64>() / d as f64;
        let mgx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for i in 0..d {
            o[i] = r * (g[i] - mg - xh[i] * mgx);
        }
    }
    dx
}

const GELU_C: f64 = 0.044715;

/// Tanh-approximated GELU, written as `x·σ(2z)` since `1 + tanh z = 2σ(2z)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * sigmoid(2.0 * gelu_arg(x))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    let s = sigmoid(2.0 * gelu_arg(x));
    s + 2.0 * x * s * (1.0 - s) * k * (1.0 + 3.0 * GELU_C * x * x)
}

#[inline]
fn gelu_arg(x: f64) -> f64 {
    (2.0 / PI).sqrt() * (x + GELU_C * x * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable `log Σ exp`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// In-place softmax over a row; entries flagged `false` get probability 0.
pub fn masked_softmax(row: &mut [f64], keep: impl Fn(usize) -> bool) {
    let mut m = f64::NEG_INFINITY;
    for (j, v) in row.iter().enumerate() {
        if keep(j) {
            m = m.max(*v);
        }
    }
    let mut s = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - m).exp();
            s += *v;
        } else {
            *v = 0.0;
        }
    }
    if s > 0.0 {
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}
