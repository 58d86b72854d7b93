//! Slice-level forward and adjoint kernels.
//!
//! Layouts are row-major; images are `[H, W, C]` (channels fastest) and
//! convolution weights are `[k, k, Cin, Cout]`. Adjoint kernels accumulate
//! into their output buffers (`+=`) so several consumers can share one.

use alloc::vec;
use alloc::vec::Vec;

/// `y[n, out] = x[n, in] · w[in, out] + b[out]`.
pub fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * dout];
    for r in 0..rows {
        let yr = &mut y[r * dout..(r + 1) * dout];
        if let Some(b) = b {
            yr.copy_from_slice(b);
        }
        let xr = &x[r * din..(r + 1) * din];
        for (i, &a) in xr.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wi = &w[i * dout..(i + 1) * dout];
            for (o, &wv) in yr.iter_mut().zip(wi) {
                *o += a * wv;
            }
        }
    }
    y
}

/// Adjoint of [`linear`]; any of the outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    din: usize,
    dout: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        for r in 0..rows {
            let dyr = &dy[r * dout..(r + 1) * dout];
            for i in 0..din {
                let wi = &w[i * dout..(i + 1) * dout];
                dx[r * din + i] += dot(wi, dyr);
            }
        }
    }
    if let Some(dw) = dw {
        for r in 0..rows {
            let dyr = &dy[r * dout..(r + 1) * dout];
            for i in 0..din {
                let a = x[r * din + i];
                if a == 0.0 {
                    continue;
                }
                axpy(a, dyr, &mut dw[i * dout..(i + 1) * dout]);
            }
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            axpy(1.0, &dy[r * dout..(r + 1) * dout], db);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            y[c * rows + r] = x[r * cols + c];
        }
    }
    y
}

/// Same-padded stride-1 convolution with odd kernel size `k`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(x: &[f64], w: &[f64], b: &[f64], h: usize, wd: usize, cin: usize, cout: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut y = vec![0.0; h * wd * cout];
    for oy in 0..h {
        for ox in 0..wd {
            let out = &mut y[(oy * wd + ox) * cout..(oy * wd + ox + 1) * cout];
            out.copy_from_slice(b);
            for ky in 0..k {
                let iy = oy as isize + ky as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize + kx as isize - pad as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let base = (iy as usize * wd + ix as usize) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = x[base + ci];
                        if a == 0.0 {
                            continue;
                        }
                        axpy(a, &w[wbase + ci * cout..wbase + (ci + 1) * cout], out);
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
    k: usize,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let pad = k / 2;
    for oy in 0..h {
        for ox in 0..wd {
            let g = &dy[(oy * wd + ox) * cout..(oy * wd + ox + 1) * cout];
            for ky in 0..k {
                let iy = oy as isize + ky as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize + kx as isize - pad as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let base = (iy as usize * wd + ix as usize) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let wrow = wbase + ci * cout..wbase + (ci + 1) * cout;
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[base + ci] += dot(&w[wrow.clone()], g);
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            let a = x[base + ci];
                            if a != 0.0 {
                                axpy(a, g, &mut dw[wrow]);
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for p in 0..h * wd {
            axpy(1.0, &dy[p * cout..(p + 1) * cout], db);
        }
    }
}

/// Nearest-neighbour 2x upsampling of `[H, W, C]`.
pub fn upsample2x(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let src = ((oy / 2) * w + ox / 2) * c;
            let dst = (oy * ow + ox) * c;
            y[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    y
}

pub fn upsample2x_backward(dy: &[f64], h: usize, w: usize, c: usize, dx: &mut [f64]) {
    let ow = 2 * w;
    for oy in 0..2 * h {
        for ox in 0..ow {
            let src = ((oy / 2) * w + ox / 2) * c;
            let dst = (oy * ow + ox) * c;
            axpy(1.0, &dy[dst..dst + c], &mut dx[src..src + c]);
        }
    }
}

/// 2x2 mean pooling of `[H, W, C]` with even `H`, `W`.
pub fn avgpool2x2(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = (oy * ow + ox) * c;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                axpy(1.0, &x[src..src + c], &mut y[dst..dst + c]);
            }
            for v in &mut y[dst..dst + c] {
                *v *= 0.25;
            }
        }
    }
    y
}

pub fn avgpool2x2_backward(dy: &[f64], h: usize, w: usize, c: usize, dx: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for oy in 0..oh {
        for ox in 0..ow {
            let g = &dy[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (ddy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let dst = ((2 * oy + ddy) * w + 2 * ox + ddx) * c;
                axpy(0.25, g, &mut dx[dst..dst + c]);
            }
        }
    }
}

/// Source taps for half-pixel bilinear resampling of one axis:
/// `(lo, hi, weight_of_hi)` per output coordinate, edge-clamped.
pub fn bilinear_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let src = src.clamp(0.0, (n - 1) as f64);
            let lo = libm::floor(src) as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample_bilinear(x: &[f64], h: usize, w: usize, c: usize, factor: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let ow = w * factor;
    let mut y = vec![0.0; h * factor * ow * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let dst = (oy * ow + ox) * c;
            let out = &mut y[dst..dst + c];
            for (sy, sx, wgt) in [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ] {
                if wgt != 0.0 {
                    let src = (sy * w + sx) * c;
                    axpy(wgt, &x[src..src + c], out);
                }
            }
        }
    }
    y
}

pub fn upsample_bilinear_backward(dy: &[f64], h: usize, w: usize, c: usize, factor: usize, dx: &mut [f64]) {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let ow = w * factor;
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let g = &dy[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (sy, sx, wgt) in [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ] {
                if wgt != 0.0 {
                    let src = (sy * w + sx) * c;
                    axpy(wgt, g, &mut dx[src..src + c]);
                }
            }
        }
    }
}

/// Row-wise softmax over contiguous slices of length `n`.
pub fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
        softmax_into(xr, yr);
    }
    y
}

pub fn softmax_into(x: &[f64], y: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in y.iter_mut().zip(x) {
        *o = libm::exp(v - max);
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in y.iter_mut() {
        *o *= inv;
    }
}

/// `dx += y ⊙ (dy − <dy, y>)` row by row.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], n: usize, dx: &mut [f64]) {
    for ((yr, gr), dr) in y.chunks_exact(n).zip(dy.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
        let s = dot(yr, gr);
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d += yv * (gv - s);
        }
    }
}

/// Layer normalisation over rows of length `n`; returns `(y, xhat, rstd)`.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], n: usize, eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / n;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let mean = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rs = 1.0 / libm::sqrt(var + eps);
        rstd[r] = rs;
        for j in 0..n {
            let xh = (xr[j] - mean) * rs;
            xhat[r * n + j] = xh;
            y[r * n + j] = gamma[j] * xh + beta[j];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    dy: &[f64],
    n: usize,
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    let rows = xhat.len() / n;
    if let Some(dx) = dx {
        let mut dxh = vec![0.0; n];
        for r in 0..rows {
            let (xr, gr) = (&xhat[r * n..(r + 1) * n], &dy[r * n..(r + 1) * n]);
            for j in 0..n {
                dxh[j] = gr[j] * gamma[j];
            }
            let m1 = dxh.iter().sum::<f64>() / n as f64;
            let m2 = dot(&dxh, xr) / n as f64;
            for j in 0..n {
                dx[r * n + j] += rstd[r] * (dxh[j] - m1 - xr[j] * m2);
            }
        }
    }
    if let Some(dg) = dgamma {
        for r in 0..rows {
            for j in 0..n {
                dg[j] += dy[r * n + j] * xhat[r * n + j];
            }
        }
    }
    if let Some(db) = dbeta {
        for r in 0..rows {
            axpy(1.0, &dy[r * n..(r + 1) * n], db);
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Probability clamp used by the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 − eps]`.
pub fn bce(pred: &[f64], target: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        s -= t * libm::log(p) + (1.0 - t) * libm::log(1.0 - p);
    }
    s / pred.len() as f64
}

pub fn bce_backward(pred: &[f64], target: &[f64], g: f64, dp: &mut [f64]) {
    let scale = g / pred.len() as f64;
    for ((d, &p), &t) in dp.iter_mut().zip(pred).zip(target) {
        if p > BCE_EPS && p < 1.0 - BCE_EPS {
            *d += scale * ((1.0 - t) / (1.0 - p) - t / p);
        }
    }
}

/// Per-head scaled dot-product attention. Returns the concatenated head
/// outputs `[nq, dv]` and the weights `[heads, nq, nk]`.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut out = vec![0.0; nq * dv];
    let mut weights = vec![0.0; heads * nq * nk];
    let mut scores = vec![0.0; nk];
    for h in 0..heads {
        for i in 0..nq {
            let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..nk {
                scores[j] = scale * dot(qi, &k[j * d + h * dh..j * d + (h + 1) * dh]);
            }
            let wrow = &mut weights[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            softmax_into(&scores, wrow);
            let orow = &mut out[i * dv + h * dvh..i * dv + (h + 1) * dvh];
            for j in 0..nk {
                axpy(wrow[j], &v[j * dv + h * dvh..j * dv + (h + 1) * dvh], orow);
            }
        }
    }
    (out, weights)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    weights: &[f64],
    dout: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
    heads: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dvv: &mut [f64],
) {
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut da = vec![0.0; nk];
    for h in 0..heads {
        for i in 0..nq {
            let wrow = &weights[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let go = &dout[i * dv + h * dvh..i * dv + (h + 1) * dvh];
            for j in 0..nk {
                let vj = j * dv + h * dvh..j * dv + (h + 1) * dvh;
                da[j] = dot(go, &v[vj.clone()]);
                axpy(wrow[j], go, &mut dvv[vj]);
            }
            let s = dot(&da, wrow);
            let qi = i * d + h * dh..i * d + (h + 1) * dh;
            for j in 0..nk {
                let ds = wrow[j] * (da[j] - s) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = j * d + h * dh..j * d + (h + 1) * dh;
                axpy(ds, &k[kj.clone()], &mut dq[qi.clone()]);
                axpy(ds, &q[qi.clone()], &mut dk[kj]);
            }
        }
    }
}

/// Channel ranges used when averaging `c` channels down to `groups`.
pub fn channel_groups(c: usize, groups: usize) -> Vec<(usize, usize)> {
    (0..groups)
        .map(|g| (g * c / groups, ((g + 1) * c / groups).max(g * c / groups + 1)))
        .collect()
}
