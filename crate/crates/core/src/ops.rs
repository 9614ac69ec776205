//! Primitive kernels on row-major slices, each with its analytic backward.
//!
//! Shapes are passed explicitly. Every reduction walks its inputs in a fixed
//! order, so results do not depend on the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Norm floor used by cosine similarity.
pub const COS_EPS: f64 = 1e-6;
/// Variance epsilon of the channel layer norm.
pub const LN_EPS: f64 = 1e-5;

/// Multiply-add counter. Kernels report the multiply-adds they perform on
/// the calling thread.
pub mod flops {
    use std::cell::Cell;

    thread_local! {
        static COUNT: Cell<u64> = const { Cell::new(0) };
    }

    pub fn add(n: u64) {
        COUNT.with(|c| c.set(c.get() + n));
    }

    pub fn reset() {
        COUNT.with(|c| c.set(0));
    }

    pub fn get() -> u64 {
        COUNT.with(|c| c.get())
    }

    /// Run `f` and return its result with the multiply-adds it counted.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let before = get();
        let r = f();
        (r, get() - before)
    }
}

const PAR_THRESHOLD: usize = 1 << 15;

fn parallel_worth_it(work: usize) -> bool {
    work >= PAR_THRESHOLD && rayon::current_num_threads() > 1
}

// ---------------------------------------------------------------------------
// matrix products

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    flops::add((m * k * n) as u64);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if parallel_worth_it(m * k * n) && m >= 8 {
        let rows_per = m.div_ceil(rayon::current_num_threads() * 4).max(4);
        c.par_chunks_mut(rows_per * n)
            .zip(a.par_chunks(rows_per * k))
            .for_each(|(cc, aa)| gemm_rows(k, n, aa, b, cc));
    } else {
        gemm_rows(k, n, a, b, c);
    }
}

fn gemm_rows<T: Element>(k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let rows = c.len() / n;
    let mut i = 0;
    while i + 4 <= rows {
        let block = &mut c[i * n..(i + 4) * n];
        let (c0, rest) = block.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let ar = &a[i * k..(i + 4) * k];
        for p in 0..k {
            let (a0, a1, a2, a3) = (ar[p], ar[k + p], ar[2 * k + p], ar[3 * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            for ((((x0, x1), x2), x3), &bv) in c0
                .iter_mut()
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
                .zip(brow)
            {
                *x0 += a0 * bv;
                *x1 += a1 * bv;
                *x2 += a2 * bv;
                *x3 += a3 * bv;
            }
        }
        i += 4;
    }
    while i < rows {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (x, &bv) in crow.iter_mut().zip(brow) {
                *x += av * bv;
            }
        }
        i += 1;
    }
}

pub fn transpose<T: Element>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// `y[rows×out] = x[rows×in] · wᵀ + bias` with `w` stored `[out×in]`.
pub fn linear_forward<T: Element>(
    x: &[T],
    rows: usize,
    d_in: usize,
    w: &[T],
    bias: Option<&[T]>,
    d_out: usize,
) -> Vec<T> {
    let wt = transpose(d_out, d_in, w);
    let mut y = match bias {
        Some(b) => {
            let mut y = Vec::with_capacity(rows * d_out);
            for _ in 0..rows {
                y.extend_from_slice(b);
            }
            y
        }
        None => vec![T::zero(); rows * d_out],
    };
    gemm(rows, d_in, d_out, x, &wt, &mut y);
    y
}

pub struct LinearGrads<T> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn linear_backward<T: Element>(
    x: &[T],
    rows: usize,
    d_in: usize,
    w: &[T],
    dy: &[T],
    d_out: usize,
) -> LinearGrads<T> {
    let mut dx = vec![T::zero(); rows * d_in];
    gemm(rows, d_out, d_in, dy, w, &mut dx);
    let dyt = transpose(rows, d_out, dy);
    let mut dw = vec![T::zero(); d_out * d_in];
    gemm(d_out, rows, d_in, &dyt, x, &mut dw);
    let mut db = vec![T::zero(); d_out];
    for row in dy.chunks_exact(d_out) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    LinearGrads { dx, dw, db }
}

// ---------------------------------------------------------------------------
// pointwise activations

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    /// Pass-through; used by tests to build exact compositions.
    Identity,
}

#[inline]
fn erf<T: Element>(x: T) -> T {
    match T::DTYPE {
        crate::tensor::DType::F32 => T::lit(libm::erff(x.f64() as f32) as f64),
        _ => T::lit(libm::erf(x.f64())),
    }
}

#[inline]
pub fn gelu<T: Element>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + erf(x * T::lit(std::f64::consts::FRAC_1_SQRT_2)))
}

#[inline]
pub fn gelu_grad<T: Element>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + erf(x * T::lit(std::f64::consts::FRAC_1_SQRT_2)));
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn activate<T: Element>(act: Activation, x: &[T]) -> Vec<T> {
    match act {
        Activation::Gelu => x.iter().map(|&v| gelu(v)).collect(),
        Activation::Identity => x.to_vec(),
    }
}

pub fn activate_backward<T: Element>(act: Activation, x: &[T], dy: &[T]) -> Vec<T> {
    match act {
        Activation::Gelu => x.iter().zip(dy).map(|(&v, &g)| g * gelu_grad(v)).collect(),
        Activation::Identity => dy.to_vec(),
    }
}

// ---------------------------------------------------------------------------
// softmax and normalization

/// Row-wise softmax over the last axis, with max subtraction.
pub fn softmax_rows<T: Element>(x: &mut [T], n: usize) {
    for row in x.chunks_exact_mut(n) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Given softmax output `s` and upstream `ds`, returns the logit gradient.
pub fn softmax_rows_backward<T: Element>(s: &[T], ds: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); s.len()];
    for ((srow, grow), drow) in s
        .chunks_exact(n)
        .zip(ds.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot: T = srow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
        for ((d, &sv), &gv) in drow.iter_mut().zip(srow).zip(grow) {
            *d = sv * (gv - dot);
        }
    }
    flops::add(2 * s.len() as u64);
    dx
}

/// Rows divided by `max(‖row‖, eps)`. Returns the normalized rows and the
/// unclamped norms.
pub fn l2_normalize_rows<T: Element>(x: &[T], d: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let eps = T::lit(eps);
    let mut out = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.len() / d);
    for row in x.chunks_exact(d) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        let denom = norm.max(eps);
        out.extend(row.iter().map(|&v| v / denom));
        norms.push(norm);
    }
    flops::add(x.len() as u64);
    (out, norms)
}

/// Backward of [`l2_normalize_rows`]; the norm floor is a stop-gradient region.
pub fn l2_normalize_rows_backward<T: Element>(
    normed: &[T],
    norms: &[T],
    du: &[T],
    d: usize,
    eps: f64,
) -> Vec<T> {
    let eps = T::lit(eps);
    let mut dx = vec![T::zero(); du.len()];
    for (((u, &norm), g), out) in normed
        .chunks_exact(d)
        .zip(norms)
        .zip(du.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        if norm > eps {
            let proj: T = u.iter().zip(g).map(|(&a, &b)| a * b).sum();
            for ((o, &uv), &gv) in out.iter_mut().zip(u).zip(g) {
                *o = (gv - uv * proj) / norm;
            }
        } else {
            for (o, &gv) in out.iter_mut().zip(g) {
                *o = gv / eps;
            }
        }
    }
    dx
}

/// Cosine similarity `[m×n]` between the rows of `a[m×d]` and `b[n×d]`.
pub fn cosine_sim_rows<T: Element>(a: &[T], b: &[T], d: usize) -> Vec<T> {
    let (an, _) = l2_normalize_rows(a, d, COS_EPS);
    let (bn, _) = l2_normalize_rows(b, d, COS_EPS);
    let m = a.len() / d;
    let n = b.len() / d;
    let bt = transpose(n, d, &bn);
    let mut out = vec![T::zero(); m * n];
    gemm(m, d, n, &an, &bt, &mut out);
    out
}

/// Per-row layer norm over the channel axis with affine scale and shift.
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm_forward<T: Element>(
    x: &[T],
    d: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / d;
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = T::lit(1.0 / d as f64);
    let eps = T::lit(LN_EPS);
    for row in x.chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        for ((&v, &g), &b) in row.iter().zip(gamma).zip(beta) {
            let h = (v - mean) * r;
            xhat.push(h);
            y.push(h * g + b);
        }
        rstd.push(r);
    }
    flops::add(3 * x.len() as u64);
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Element>(
    cache: &LayerNormCache<T>,
    gamma: &[T],
    dy: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let inv_d = T::lit(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (((xh, g), &r), out) in cache
        .xhat
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(&cache.rstd)
        .zip(dx.chunks_exact_mut(d))
    {
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            dgamma[c] += g[c] * xh[c];
            dbeta[c] += g[c];
            dxhat[c] = g[c] * gamma[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for c in 0..d {
            out[c] = r * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    flops::add(5 * dy.len() as u64);
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// spatial kernels on [H×W×C] maps

/// Half-open window `[⌊i·size/out⌋, ⌊(i+1)·size/out⌋)` of adaptive pooling.
#[inline]
pub fn pool_window(size: usize, out: usize, i: usize) -> (usize, usize) {
    (i * size / out, (i + 1) * size / out)
}

/// Adaptive average pooling of one `[h_in×w_in×c]` map to `[h×w×c]`.
pub fn adaptive_pool<T: Element>(
    x: &[T],
    h_in: usize,
    w_in: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); h * w * c];
    for i in 0..h {
        let (r0, r1) = pool_window(h_in, h, i);
        for j in 0..w {
            let (c0, c1) = pool_window(w_in, w, j);
            let cell = &mut out[(i * w + j) * c..(i * w + j + 1) * c];
            for r in r0..r1 {
                for col in c0..c1 {
                    let px = &x[(r * w_in + col) * c..(r * w_in + col + 1) * c];
                    for (o, &v) in cell.iter_mut().zip(px) {
                        *o += v;
                    }
                }
            }
            let inv = T::lit(1.0 / ((r1 - r0) * (c1 - c0)) as f64);
            cell.iter_mut().for_each(|v| *v *= inv);
        }
    }
    flops::add(x.len() as u64);
    out
}

pub fn adaptive_pool_backward<T: Element>(
    dy: &[T],
    h_in: usize,
    w_in: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); h_in * w_in * c];
    for i in 0..h {
        let (r0, r1) = pool_window(h_in, h, i);
        for j in 0..w {
            let (c0, c1) = pool_window(w_in, w, j);
            let inv = T::lit(1.0 / ((r1 - r0) * (c1 - c0)) as f64);
            let g = &dy[(i * w + j) * c..(i * w + j + 1) * c];
            for r in r0..r1 {
                for col in c0..c1 {
                    let px = &mut dx[(r * w_in + col) * c..(r * w_in + col + 1) * c];
                    for (o, &v) in px.iter_mut().zip(g) {
                        *o += v * inv;
                    }
                }
            }
        }
    }
    dx
}

/// Depth-wise `k×k` convolution with zero "same" padding over a batch of
/// `[h×w×c]` maps; `kernel` is `[k×k×c]`.
pub fn dwconv_forward<T: Element>(
    x: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kernel: &[T],
    k: usize,
) -> Vec<T> {
    let half = (k / 2) as isize;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let xb = &x[b * h * w * c..(b + 1) * h * w * c];
        let ob = &mut out[b * h * w * c..(b + 1) * h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let o = &mut ob[(y * w + xx) * c..(y * w + xx + 1) * c];
                for ky in 0..k {
                    let sy = y as isize + ky as isize - half;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - half;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = (sy as usize * w + sx as usize) * c;
                        let px = &xb[src..src + c];
                        let kw = &kernel[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                        for ((ov, &pv), &kv) in o.iter_mut().zip(px).zip(kw) {
                            *ov += pv * kv;
                        }
                    }
                }
            }
        }
    }
    flops::add((x.len() * k * k) as u64);
    out
}

/// Returns `(dx, dkernel)`.
#[allow(clippy::too_many_arguments)]
pub fn dwconv_backward<T: Element>(
    x: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kernel: &[T],
    k: usize,
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let half = (k / 2) as isize;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    for b in 0..batch {
        let base = b * h * w * c;
        for y in 0..h {
            for xx in 0..w {
                let g = &dy[base + (y * w + xx) * c..base + (y * w + xx + 1) * c];
                for ky in 0..k {
                    let sy = y as isize + ky as isize - half;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - half;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = base + (sy as usize * w + sx as usize) * c;
                        let tap = (ky * k + kx) * c;
                        for ch in 0..c {
                            dx[src + ch] += kernel[tap + ch] * g[ch];
                            dk[tap + ch] += x[src + ch] * g[ch];
                        }
                    }
                }
            }
        }
    }
    flops::add((2 * x.len() * k * k) as u64);
    (dx, dk)
}

/// Non-overlapping `p×p` patches of `[batch×h×w×c]` flattened in
/// `(ky, kx, c)` order, one row per output cell.
pub fn im2col_patches<T: Element>(
    x: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    p: usize,
) -> Vec<T> {
    let (oh, ow) = (h / p, w / p);
    let mut out = Vec::with_capacity(x.len());
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..p {
                    let row = b * h * w + (oy * p + ky) * w + ox * p;
                    out.extend_from_slice(&x[row * c..(row + p) * c]);
                }
            }
        }
    }
    out
}

pub fn col2im_patches<T: Element>(
    cols: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    p: usize,
) -> Vec<T> {
    let (oh, ow) = (h / p, w / p);
    let mut out = vec![T::zero(); batch * h * w * c];
    let mut src = 0;
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..p {
                    let row = b * h * w + (oy * p + ky) * w + ox * p;
                    out[row * c..(row + p) * c].copy_from_slice(&cols[src..src + p * c]);
                    src += p * c;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// tensor-level entry points

fn expect_rank<T: Element>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Dimension(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `x[n×a] · W[b×a]ᵀ (+ bias[b])`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    expect_rank(x, 2, "linear input")?;
    expect_rank(w, 2, "linear weight")?;
    let (n, a) = (x.shape()[0], x.shape()[1]);
    let (b, a2) = (w.shape()[0], w.shape()[1]);
    if a != a2 {
        return Err(Error::Dimension(format!(
            "linear: input width {a} does not match weight {:?}",
            w.shape()
        )));
    }
    if let Some(bias) = bias {
        if bias.len() != b {
            return Err(Error::Dimension(format!(
                "linear: bias length {} for {b} outputs",
                bias.len()
            )));
        }
    }
    let y = linear_forward(x.data(), n, a, w.data(), bias.map(|t| t.data()), b);
    Tensor::from_vec(&[n, b], y)
}

/// Depth-wise convolution of `x[H×W×d]` with `kernel[k×k×d]`, same padding.
pub fn dwconv2d<T: Element>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 3, "dwconv2d input")?;
    expect_rank(kernel, 3, "dwconv2d kernel")?;
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = kernel.shape()[0];
    if k.is_multiple_of(2) {
        return Err(Error::config("kernel_size", format!("must be odd, got {k}")));
    }
    if kernel.shape()[1] != k || kernel.shape()[2] != d {
        return Err(Error::Dimension(format!(
            "dwconv2d: kernel {:?} does not fit {d} channels",
            kernel.shape()
        )));
    }
    let y = dwconv_forward(x.data(), 1, h, w, d, kernel.data(), k);
    Tensor::from_vec(&[h, w, d], y)
}

/// Adaptive average pooling of `x[H×W×d]` down to `[h×w×d]`.
pub fn adaptive_avg_pool2d<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    expect_rank(x, 3, "adaptive_avg_pool2d input")?;
    let (hi, wi, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h == 0 || w == 0 || h > hi || w > wi {
        return Err(Error::Dimension(format!(
            "adaptive_avg_pool2d: target {h}×{w} not within source {hi}×{wi}"
        )));
    }
    Tensor::from_vec(&[h, w, d], adaptive_pool(x.data(), hi, wi, d, h, w))
}

/// Softmax over the last axis.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().expect("rank ≥ 1");
    let mut out = x.clone();
    softmax_rows(out.data_mut(), n);
    out
}

/// Cosine similarity between the rows of `a[m×d]` and `b[n×d]`.
pub fn cosine_sim<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 2, "cosine_sim lhs")?;
    expect_rank(b, 2, "cosine_sim rhs")?;
    let d = a.shape()[1];
    if b.shape()[1] != d {
        return Err(Error::Dimension(format!(
            "cosine_sim: widths {} and {} differ",
            d,
            b.shape()[1]
        )));
    }
    Tensor::from_vec(
        &[a.shape()[0], b.shape()[0]],
        cosine_sim_rows(a.data(), b.data(), d),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(linear(&x, &eye, None).unwrap().data(), &[1.0, 2.0]);

        let x = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let w = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(linear(&x, &w, None).unwrap().data(), &[3.0, 5.0, 4.0, 6.0]);

        let x = t(&[3, 2], &[1.0, -2.0, 3.5, 0.1, 9.0, 2.0]);
        let zero = Tensor::<f64>::zeros(&[4, 2]);
        assert!(linear(&x, &zero, None).unwrap().data().iter().all(|&v| v == 0.0));

        assert!(matches!(
            linear(&x, &Tensor::zeros(&[4, 3]), None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, &b, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_at_two() {
        assert!((gelu(2.0f64) - 1.954_499_736).abs() < 1e-6);
        assert!((gelu(2.0f32) - 1.9545).abs() < 1e-4);
    }

    #[test]
    fn dwconv_examples() {
        // centered delta kernel is the identity
        let x = t(&[3, 3, 2], &(0..18).map(|v| v as f64).collect::<Vec<_>>());
        let mut delta = Tensor::<f64>::zeros(&[3, 3, 2]);
        delta.set(&[1, 1, 0], 1.0);
        delta.set(&[1, 1, 1], 1.0);
        assert_eq!(dwconv2d(&x, &delta).unwrap(), x);

        // single spatial cell sees only the center tap
        let x = t(&[1, 1, 2], &[2.0, -3.0]);
        let k = t(&[3, 3, 2], &(0..18).map(|v| v as f64).collect::<Vec<_>>());
        let y = dwconv2d(&x, &k).unwrap();
        assert_eq!(y.data(), &[2.0 * 8.0, -3.0 * 9.0]);

        // all-ones kernel over constant input counts the taps in range
        let x = Tensor::<f64>::full(&[3, 3, 1], 1.0);
        let k = Tensor::<f64>::full(&[3, 3, 1], 1.0);
        let y = dwconv2d(&x, &k).unwrap();
        assert_eq!(y.at(&[1, 1, 0]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 1, 0]), 6.0);

        assert!(matches!(
            dwconv2d(&x, &Tensor::zeros(&[2, 2, 1])),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn adaptive_pool_examples() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(adaptive_avg_pool2d(&x, 1, 1).unwrap().data(), &[2.5]);
        assert_eq!(adaptive_avg_pool2d(&x, 2, 2).unwrap(), x);

        let (a, b, c, d) = (1.0, -2.0, 5.0, 0.25);
        let mut q = Tensor::<f64>::zeros(&[4, 4, 1]);
        for r in 0..4 {
            for col in 0..4 {
                let v = match (r < 2, col < 2) {
                    (true, true) => a,
                    (true, false) => b,
                    (false, true) => c,
                    (false, false) => d,
                };
                q.set(&[r, col, 0], v);
            }
        }
        assert_eq!(adaptive_avg_pool2d(&q, 2, 2).unwrap().data(), &[a, b, c, d]);
        assert!(adaptive_avg_pool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn pool_windows_partition_the_input() {
        for size in 1..20 {
            for out in 1..=size {
                let mut covered = vec![0; size];
                for i in 0..out {
                    let (s, e) = pool_window(size, out, i);
                    assert!(e > s, "empty window {size}->{out}");
                    for c in &mut covered[s..e] {
                        *c += 1;
                    }
                }
                assert!(covered.iter().all(|&c| c == 1));
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[2], &[3.0, 3.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[1.0, 0.0]));
        assert!((s.data()[0] - 0.731_058_578_6).abs() < 1e-9);
        assert!((s.data()[1] - 0.268_941_421_4).abs() < 1e-9);
        assert_eq!(softmax(&t(&[1], &[-7.0])).data(), &[1.0]);
    }

    #[test]
    fn cosine_examples() {
        let a = t(&[1, 2], &[3.0, 4.0]);
        assert!((cosine_sim(&a, &a).unwrap().data()[0] - 1.0).abs() < 1e-12);
        let e1 = t(&[1, 2], &[1.0, 0.0]);
        let e2 = t(&[1, 2], &[0.0, 1.0]);
        assert_eq!(cosine_sim(&e1, &e2).unwrap().data(), &[0.0]);
        let d = t(&[1, 2], &[1.0, 1.0]);
        assert!((cosine_sim(&e1, &d).unwrap().data()[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        // zero vectors are floored, not NaN
        let z = t(&[1, 2], &[0.0, 0.0]);
        assert_eq!(cosine_sim(&z, &e1).unwrap().data(), &[0.0]);
    }

    #[test]
    fn patches_round_trip() {
        let x: Vec<f64> = (0..2 * 8 * 4 * 3).map(|v| v as f64).collect();
        let cols = im2col_patches(&x, 2, 8, 4, 3, 4);
        assert_eq!(col2im_patches(&cols, 2, 8, 4, 3, 4), x);
        // first patch row starts with the top-left pixel, then its right neighbour
        assert_eq!(&cols[..6], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }
}
