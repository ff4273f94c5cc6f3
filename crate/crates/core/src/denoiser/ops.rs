//! Forward and backward kernels on single-sample buffers.
//!
//! Feature maps are `[channels, height * width]` row-major, token matrices are
//! `[tokens, features]` row-major. Backward functions accumulate into their
//! gradient outputs.

/// Row-major `C = alpha * op(A) op(B) + beta * C` where `op(A)` is `m x k` and
/// `op(B)` is `k x n`. `lda`/`ldb`/`ldc` are the row lengths of the stored buffers.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa, a_need) = if trans_a { (1, lda, (k.max(1) - 1) * lda + m) } else { (lda, 1, (m - 1) * lda + k) };
    let (rsb, csb, b_need) = if trans_b { (1, ldb, (n - 1) * ldb + k) } else { (ldb, 1, (k.max(1) - 1) * ldb + n) };
    assert!(k == 0 || (a.len() >= a_need && b.len() >= b_need), "gemm operand too short");
    assert!(c.len() >= (m - 1) * ldc + n, "gemm output too short");
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `dx += dy * silu'(x)`.
pub fn silu_backward(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for ((d, &v), &g) in dx.iter_mut().zip(x).zip(dy) {
        let s = sigmoid(v);
        *d += g * s * (1.0 + v * (1.0 - s));
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let mut cols = vec![0.0; g.patch() * n];
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..][..g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = &mut cols[((c * g.kernel + ky) * g.kernel + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..][..g.width];
                    let dst = &mut row[oy * wo..][..wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..][..g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = &cols[((c * g.kernel + ky) * g.kernel + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..][..g.width];
                    for (ox, &v) in row[oy * wo..][..wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and the im2col buffer (empty for pointwise convs).
pub fn conv_forward(g: &ConvGeom, w: &[f64], b: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let mut y = vec![0.0; g.out_ch * n];
    for (o, row) in y.chunks_exact_mut(n).enumerate() {
        row.iter_mut().for_each(|v| *v = b[o]);
    }
    if g.is_pointwise() {
        gemm(false, false, g.out_ch, n, g.in_ch, 1.0, w, g.in_ch, x, n, 1.0, &mut y, n);
        (y, Vec::new())
    } else {
        let cols = im2col(g, x);
        gemm(false, false, g.out_ch, n, g.patch(), 1.0, w, g.patch(), &cols, n, 1.0, &mut y, n);
        (y, cols)
    }
}

/// Accumulates weight/bias gradients and returns `dx`.
pub fn conv_backward(
    g: &ConvGeom,
    w: &[f64],
    x: &[f64],
    cols: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    for (o, row) in dy.chunks_exact(n).enumerate() {
        db[o] += row.iter().sum::<f64>();
    }
    let mut dx = vec![0.0; g.in_ch * g.height * g.width];
    if g.is_pointwise() {
        gemm(false, true, g.out_ch, g.in_ch, n, 1.0, dy, n, x, n, 1.0, dw, g.in_ch);
        gemm(true, false, g.in_ch, n, g.out_ch, 1.0, w, g.in_ch, dy, n, 0.0, &mut dx, n);
    } else {
        let p = g.patch();
        gemm(false, true, g.out_ch, p, n, 1.0, dy, n, cols, n, 1.0, dw, p);
        let mut dcols = vec![0.0; p * n];
        gemm(true, false, p, n, g.out_ch, 1.0, w, p, dy, n, 0.0, &mut dcols, n);
        col2im(g, &dcols, &mut dx);
    }
    dx
}

pub const GN_EPS: f64 = 1e-5;

pub struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn group_norm_forward(
    x: &[f64],
    channels: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, NormCache) {
    let hw = x.len() / channels;
    let cg = channels / groups;
    let n = (cg * hw) as f64;
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let span = g * cg * hw..(g + 1) * cg * hw;
        let xs = &x[span.clone()];
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + GN_EPS).sqrt();
        inv_std.push(inv);
        for (i, (&v, xh)) in xs.iter().zip(&mut xhat[span.clone()]).enumerate() {
            *xh = (v - mean) * inv;
            let c = g * cg + i / hw;
            y[span.start + i] = gamma[c] * *xh + beta[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn group_norm_backward(
    cache: &NormCache,
    channels: usize,
    groups: usize,
    gamma: &[f64],
    dy: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let hw = dy.len() / channels;
    let cg = channels / groups;
    let n = (cg * hw) as f64;
    let mut dx = vec![0.0; dy.len()];
    for c in 0..channels {
        let span = c * hw..(c + 1) * hw;
        dgamma[c] += dy[span.clone()].iter().zip(&cache.xhat[span.clone()]).map(|(a, b)| a * b).sum::<f64>();
        dbeta[c] += dy[span].iter().sum::<f64>();
    }
    for g in 0..groups {
        let span = g * cg * hw..(g + 1) * cg * hw;
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for (i, (&d, &xh)) in dy[span.clone()].iter().zip(&cache.xhat[span.clone()]).enumerate() {
            let dxh = d * gamma[g * cg + i / hw];
            sum_d += dxh;
            sum_dx += dxh * xh;
        }
        let inv = cache.inv_std[g];
        for (i, (&d, &xh)) in dy[span.clone()].iter().zip(&cache.xhat[span.clone()]).enumerate() {
            let dxh = d * gamma[g * cg + i / hw];
            dx[span.start + i] = inv / n * (n * dxh - sum_d - xh * sum_dx);
        }
    }
    dx
}

/// `Y[n, out] = X[n, in] W^T + b` with `W` stored `[out, in]`.
pub fn linear_forward(x: &[f64], rows: usize, in_f: usize, out_f: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; rows * out_f];
    for row in y.chunks_exact_mut(out_f) {
        row.copy_from_slice(b);
    }
    gemm(false, true, rows, out_f, in_f, 1.0, x, in_f, w, in_f, 1.0, &mut y, out_f);
    y
}

/// Accumulates `dW`, `db`; returns `dX` when requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    in_f: usize,
    out_f: usize,
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    need_dx: bool,
) -> Option<Vec<f64>> {
    for row in dy.chunks_exact(out_f) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    gemm(true, false, out_f, in_f, rows, 1.0, dy, out_f, x, in_f, 1.0, dw, in_f);
    need_dx.then(|| {
        let mut dx = vec![0.0; rows * in_f];
        gemm(false, false, rows, in_f, out_f, 1.0, dy, out_f, w, in_f, 0.0, &mut dx, in_f);
        dx
    })
}

/// `[c, n]` to `[n, c]`.
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Multi-head scaled dot-product attention. `q` is `[n, d]`, `k`/`v` are
/// `[m, d]`; returns `[n, d]` and the per-head probabilities `[heads, n, m]`.
pub fn attention_forward(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * n * m];
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        let p = &mut probs[h * n * m..][..n * m];
        gemm(false, true, n, m, dh, scale, &q[h * dh..], d, &k[h * dh..], d, 0.0, p, m);
        for row in p.chunks_exact_mut(m) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        gemm(false, false, n, dh, m, 1.0, p, m, &v[h * dh..], d, 0.0, &mut out[h * dh..], d);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; m * d];
    let mut dv = vec![0.0; m * d];
    let mut dp = vec![0.0; n * m];
    for h in 0..heads {
        let p = &probs[h * n * m..][..n * m];
        // dV_h = P^T dO_h ; dP = dO_h V_h^T
        gemm(true, false, m, dh, n, 1.0, p, m, &dout[h * dh..], d, 0.0, &mut dv[h * dh..], d);
        gemm(false, true, n, m, dh, 1.0, &dout[h * dh..], d, &v[h * dh..], d, 0.0, &mut dp, m);
        for (prow, drow) in p.chunks_exact(m).zip(dp.chunks_exact_mut(m)) {
            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
            for (dv_, &pv) in drow.iter_mut().zip(prow) {
                *dv_ = pv * (*dv_ - dot);
            }
        }
        gemm(false, false, n, dh, m, scale, &dp, m, &k[h * dh..], d, 0.0, &mut dq[h * dh..], d);
        gemm(true, false, m, dh, n, scale, &dp, m, &q[h * dh..], d, 0.0, &mut dk[h * dh..], d);
    }
    (dq, dk, dv)
}

/// Average-pool each `[h, w]` map by an integer factor.
pub fn avg_pool(x: &[f64], channels: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (ho, wo) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; channels * ho * wo];
    for c in 0..channels {
        for y in 0..h {
            for xx in 0..w {
                out[(c * ho + y / factor) * wo + xx / factor] += x[(c * h + y) * w + xx] * inv;
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels * 4 * h * w];
    for c in 0..channels {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(c * 2 * h + y) * 2 * w + xx] = x[(c * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let mut dx = vec![0.0; channels * h * w];
    for c in 0..channels {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dx[(c * h + y / 2) * w + xx / 2] += dy[(c * 2 * h + y) * 2 * w + xx];
            }
        }
    }
    dx
}
