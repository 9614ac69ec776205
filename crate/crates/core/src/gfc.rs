//! Global feature clustering block.
//!
//! Centers are grid-pooled from the similarity and value projections, refined
//! by temperature-scaled cosine attention over all pixels and blended with
//! their pooled initialization through a learned gate. Every pixel then takes
//! content from its single most similar center (per head), scaled by a
//! sigmoid similarity, and the result is projected back residually. A
//! feed-forward network with a depth-wise positional residual follows.

use rand::Rng;

use crate::config::Ablation;
use crate::error::{Error, Result};
use crate::layers::{DwConv, Init, LayerNorm, Linear, Mlp, MlpCache, INIT_STD};
use crate::ops::{self, flops, Activation, LayerNormCache, COS_EPS};
use crate::tensor::{Element, FeatureMap, Module, Parameter, Tensor};

/// Lower bound of the attention temperature.
pub const TAU_MIN: f64 = 0.01;
pub const FFN_RATIO: usize = 4;
pub const FFN_KERNEL: usize = 3;

/// Hard pixel-to-center assignment: one `(column, weight)` per pixel and head,
/// stored head-major (`cols[head * n + pixel]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<T> {
    pub heads: usize,
    pub n: usize,
    pub m: usize,
    pub cols: Vec<u32>,
    pub weights: Vec<T>,
}

impl<T: Element> Assignment<T> {
    pub fn col(&self, head: usize, pixel: usize) -> usize {
        self.cols[head * self.n + pixel] as usize
    }

    pub fn weight(&self, head: usize, pixel: usize) -> T {
        self.weights[head * self.n + pixel]
    }

    /// Same columns and bit-identical weights.
    pub fn bit_eq(&self, other: &Assignment<T>) -> bool {
        self.heads == other.heads
            && self.n == other.n
            && self.m == other.m
            && self.cols == other.cols
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.f64().to_bits() == b.f64().to_bits())
    }

    /// Dense `[n×m]` view of one head; zero except the kept entries.
    pub fn to_dense(&self, head: usize) -> Tensor<T> {
        let mut t = Tensor::zeros(&[self.n, self.m]);
        for i in 0..self.n {
            t.set(&[i, self.col(head, i)], self.weight(head, i));
        }
        t
    }

    /// Pixels owned by `cluster` in `head`.
    pub fn members(&self, head: usize, cluster: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.col(head, i) == cluster).collect()
    }
}

/// Clustering state of one block for one sample.
#[derive(Clone, Debug)]
pub struct ClusterState<T> {
    /// Fused value-space centers `[m×d']`.
    pub centers_v: Tensor<T>,
    /// Per head `[m×n]` attention of centers over pixels; absent without FA.
    pub soft_sim: Option<Vec<Tensor<T>>>,
    pub assignment: Assignment<T>,
    pub heads: usize,
    pub grid: (usize, usize),
}

// ---------------------------------------------------------------------------
// kernels

fn split_head<T: Element>(x: &[T], rows: usize, width: usize, heads: usize, h: usize) -> Vec<T> {
    let dh = width / heads;
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&x[r * width + h * dh..r * width + (h + 1) * dh]);
    }
    out
}

fn add_head<T: Element>(dst: &mut [T], src: &[T], rows: usize, width: usize, heads: usize, h: usize) {
    let dh = width / heads;
    for r in 0..rows {
        for (o, &v) in dst[r * width + h * dh..r * width + (h + 1) * dh]
            .iter_mut()
            .zip(&src[r * dh..(r + 1) * dh])
        {
            *o += v;
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Similarity<T> {
    /// cosine / tau
    Cosine(T),
    /// dot · scale
    Dot(T),
}

struct HeadAttn<T> {
    a: Vec<T>,
    a_norm: Vec<T>,
    b: Vec<T>,
    b_norm: Vec<T>,
    logits: Vec<T>,
    s: Vec<T>,
}

/// Softmax over pixels of the center/pixel similarity, then `S · pv`.
fn attend<T: Element>(
    cs: &[T],
    ps: &[T],
    pv: &[T],
    m: usize,
    n: usize,
    dh: usize,
    sim: Similarity<T>,
) -> (Vec<T>, HeadAttn<T>) {
    let (a, a_norm, b, b_norm, scale) = match sim {
        Similarity::Cosine(tau) => {
            let (a, an) = ops::l2_normalize_rows(cs, dh, COS_EPS);
            let (b, bn) = ops::l2_normalize_rows(ps, dh, COS_EPS);
            (a, an, b, bn, T::one() / tau)
        }
        Similarity::Dot(scale) => (cs.to_vec(), Vec::new(), ps.to_vec(), Vec::new(), scale),
    };
    let bt = ops::transpose(n, dh, &b);
    let mut logits = vec![T::zero(); m * n];
    ops::gemm(m, dh, n, &a, &bt, &mut logits);
    logits.iter_mut().for_each(|v| *v *= scale);
    let mut s = logits.clone();
    ops::softmax_rows(&mut s, n);
    let mut out = vec![T::zero(); m * dh];
    ops::gemm(m, n, dh, &s, pv, &mut out);
    (
        out,
        HeadAttn {
            a,
            a_norm,
            b,
            b_norm,
            logits,
            s,
        },
    )
}

struct AttnGrads<T> {
    dcs: Vec<T>,
    dps: Vec<T>,
    dpv: Vec<T>,
    /// `Σ dlogits · logits`, the gradient with respect to `log(scale)`.
    dlog_scale: T,
}

#[allow(clippy::too_many_arguments)]
fn attend_backward<T: Element>(
    c: &HeadAttn<T>,
    pv: &[T],
    m: usize,
    n: usize,
    dh: usize,
    sim: Similarity<T>,
    dout: &[T],
) -> AttnGrads<T> {
    let pvt = ops::transpose(n, dh, pv);
    let mut ds = vec![T::zero(); m * n];
    ops::gemm(m, dh, n, dout, &pvt, &mut ds);
    let st = ops::transpose(m, n, &c.s);
    let mut dpv = vec![T::zero(); n * dh];
    ops::gemm(n, m, dh, &st, dout, &mut dpv);
    let dl = ops::softmax_rows_backward(&c.s, &ds, n);
    let dlog_scale = dl.iter().zip(&c.logits).map(|(&g, &l)| g * l).sum();
    let scale = match sim {
        Similarity::Cosine(tau) => T::one() / tau,
        Similarity::Dot(s) => s,
    };
    let dc: Vec<T> = dl.iter().map(|&g| g * scale).collect();
    let mut da = vec![T::zero(); m * dh];
    ops::gemm(m, n, dh, &dc, &c.b, &mut da);
    let dct = ops::transpose(m, n, &dc);
    let mut db = vec![T::zero(); n * dh];
    ops::gemm(n, m, dh, &dct, &c.a, &mut db);
    let (dcs, dps) = match sim {
        Similarity::Cosine(_) => (
            ops::l2_normalize_rows_backward(&c.a, &c.a_norm, &da, dh, COS_EPS),
            ops::l2_normalize_rows_backward(&c.b, &c.b_norm, &db, dh, COS_EPS),
        ),
        Similarity::Dot(_) => (da, db),
    };
    AttnGrads {
        dcs,
        dps,
        dpv,
        dlog_scale,
    }
}

/// Online-softmax evaluation of [`attend`] over pixel chunks; never holds
/// more than `m × chunk` similarities.
fn attend_streaming<T: Element>(
    cs: &[T],
    ps: &[T],
    pv: &[T],
    m: usize,
    n: usize,
    dh: usize,
    tau: T,
    chunk: usize,
) -> Vec<T> {
    let (a, _) = ops::l2_normalize_rows(cs, dh, COS_EPS);
    let inv_tau = T::one() / tau;
    let mut run_max = vec![T::neg_infinity(); m];
    let mut denom = vec![T::zero(); m];
    let mut acc = vec![T::zero(); m * dh];
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let (b, _) = ops::l2_normalize_rows(&ps[start * dh..(start + len) * dh], dh, COS_EPS);
        let bt = ops::transpose(len, dh, &b);
        let mut logits = vec![T::zero(); m * len];
        ops::gemm(m, dh, len, &a, &bt, &mut logits);
        for c in 0..m {
            let row = &mut logits[c * len..(c + 1) * len];
            row.iter_mut().for_each(|v| *v *= inv_tau);
            let block_max = row.iter().fold(T::neg_infinity(), |x, &y| x.max(y));
            let new_max = run_max[c].max(block_max);
            let rescale = (run_max[c] - new_max).exp();
            denom[c] *= rescale;
            let acc_row = &mut acc[c * dh..(c + 1) * dh];
            acc_row.iter_mut().for_each(|v| *v *= rescale);
            for (j, &l) in row.iter().enumerate() {
                let e = (l - new_max).exp();
                denom[c] += e;
                let pv_row = &pv[(start + j) * dh..(start + j + 1) * dh];
                for (o, &v) in acc_row.iter_mut().zip(pv_row) {
                    *o += e * v;
                }
            }
            run_max[c] = new_max;
        }
        flops::add((m * len * dh) as u64);
        start += len;
    }
    for c in 0..m {
        let inv = T::one() / denom[c];
        acc[c * dh..(c + 1) * dh].iter_mut().for_each(|v| *v *= inv);
    }
    acc
}

struct HeadAssign<T> {
    np: Vec<T>,
    np_norm: Vec<T>,
    nq: Vec<T>,
    nq_norm: Vec<T>,
    /// Cosine at the kept column, per pixel.
    cos: Vec<T>,
}

/// Dense `σ(α·cos + β)` and its per-row argmax (ties to the lowest column).
#[allow(clippy::too_many_arguments)]
fn assign_head<T: Element>(
    ps: &[T],
    q: &[T],
    n: usize,
    m: usize,
    dh: usize,
    alpha: T,
    beta: T,
    cols: &mut [u32],
    weights: &mut [T],
) -> HeadAssign<T> {
    let (np, np_norm) = ops::l2_normalize_rows(ps, dh, COS_EPS);
    let (nq, nq_norm) = ops::l2_normalize_rows(q, dh, COS_EPS);
    let nqt = ops::transpose(m, dh, &nq);
    let mut dense = vec![T::zero(); n * m];
    ops::gemm(n, dh, m, &np, &nqt, &mut dense);
    flops::add((n * m) as u64);
    let mut cos = Vec::with_capacity(n);
    for i in 0..n {
        let row = &dense[i * m..(i + 1) * m];
        let mut best = 0;
        let mut best_v = ops::sigmoid(alpha * row[0] + beta);
        for (j, &c) in row.iter().enumerate().skip(1) {
            let v = ops::sigmoid(alpha * c + beta);
            if v > best_v {
                best = j;
                best_v = v;
            }
        }
        cols[i] = best as u32;
        weights[i] = best_v;
        cos.push(row[best]);
    }
    HeadAssign {
        np,
        np_norm,
        nq,
        nq_norm,
        cos,
    }
}

/// `u[i] = w_i · centers[col_i]` per head, `[n×d']`.
fn gather<T: Element>(asg: &Assignment<T>, centers: &[T], dp: usize) -> Vec<T> {
    let n = asg.n;
    let dh = dp / asg.heads;
    let mut u = vec![T::zero(); n * dp];
    for h in 0..asg.heads {
        for i in 0..n {
            let c = asg.col(h, i);
            let w = asg.weight(h, i);
            let src = &centers[c * dp + h * dh..c * dp + (h + 1) * dh];
            for (o, &v) in u[i * dp + h * dh..i * dp + (h + 1) * dh].iter_mut().zip(src) {
                *o = w * v;
            }
        }
    }
    flops::add((n * dp) as u64);
    u
}

fn fuse<T: Element>(cv: &[T], cvp: &[T], g: &[T], dp: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(cv.len());
    for ((a, b), &gv) in cv.chunks_exact(dp).zip(cvp.chunks_exact(dp)).zip(g) {
        let keep = T::one() - gv;
        out.extend(a.iter().zip(b).map(|(&c, &p)| keep * p + gv * c));
    }
    out
}

fn concat_rows<T: Element>(a: &[T], b: &[T], rows: usize) -> Vec<T> {
    let (da, db) = (a.len() / rows, b.len() / rows);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for r in 0..rows {
        out.extend_from_slice(&a[r * da..(r + 1) * da]);
        out.extend_from_slice(&b[r * db..(r + 1) * db]);
    }
    out
}

// ---------------------------------------------------------------------------
// tensor-level operations

fn rows_cols<T: Element>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Dimension(format!("{what} must be a matrix, got {:?}", t.shape()))),
    }
}

/// Grid-pool a `[h_img×w_img×d']` map into `m = h·w` center rows.
pub fn init_centers<T: Element>(p: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (hi, wi, d) = match *p.shape() {
        [hi, wi, d] => (hi, wi, d),
        _ => return Err(Error::Dimension(format!("expected [H×W×d'], got {:?}", p.shape()))),
    };
    if h == 0 || w == 0 || h > hi || w > wi {
        return Err(Error::config(
            "cluster_grid",
            format!("{h}×{w} grid does not fit a {hi}×{wi} map"),
        ));
    }
    Tensor::from_vec(&[h * w, d], ops::adaptive_pool(p.data(), hi, wi, d, h, w))
}

fn check_aggregate_shapes<T: Element>(cs: &Tensor<T>, ps: &Tensor<T>, pv: &Tensor<T>, tau: T) -> Result<(usize, usize, usize)> {
    let (m, d) = rows_cols(cs, "centers")?;
    let (n, d2) = rows_cols(ps, "pixels")?;
    if d != d2 || ps.shape() != pv.shape() {
        return Err(Error::Dimension(format!(
            "centers {:?}, similarity {:?} and value {:?} disagree",
            cs.shape(),
            ps.shape(),
            pv.shape()
        )));
    }
    if !(tau > T::zero()) {
        return Err(Error::Argument(format!("temperature must be positive, got {}", tau.f64())));
    }
    Ok((m, n, d))
}

/// `S_C = softmax_pixels(cos(c_s, p_s) / τ)` and `c'_v = S_C · p_v`.
/// Returns `(c'_v [m×d'], S_C [m×n])`.
pub fn soft_aggregate<T: Element>(
    cs: &Tensor<T>,
    ps: &Tensor<T>,
    pv: &Tensor<T>,
    tau: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, n, d) = check_aggregate_shapes(cs, ps, pv, tau)?;
    let (out, cache) = attend(cs.data(), ps.data(), pv.data(), m, n, d, Similarity::Cosine(tau));
    Ok((Tensor::from_vec(&[m, d], out)?, Tensor::from_vec(&[m, n], cache.s)?))
}

/// [`soft_aggregate`] evaluated over pixel chunks with a running maximum and
/// denominator per center.
pub fn soft_aggregate_streaming<T: Element>(
    cs: &Tensor<T>,
    ps: &Tensor<T>,
    pv: &Tensor<T>,
    tau: T,
    chunk: usize,
) -> Result<Tensor<T>> {
    let (m, n, d) = check_aggregate_shapes(cs, ps, pv, tau)?;
    if chunk == 0 {
        return Err(Error::Argument("chunk size must be positive".into()));
    }
    Tensor::from_vec(&[m, d], attend_streaming(cs.data(), ps.data(), pv.data(), m, n, d, tau, chunk))
}

/// Per-center gate `g = σ(mlp([c_v, c'_v]))`, output `(1−g)·c'_v + g·c_v`.
pub fn gated_fuse<T: Element>(cv: &Tensor<T>, cvp: &Tensor<T>, gate: &Mlp<T>) -> Result<Tensor<T>> {
    let (m, d) = rows_cols(cv, "c_v")?;
    if cv.shape() != cvp.shape() {
        return Err(Error::Dimension(format!("c_v {:?} vs c'_v {:?}", cv.shape(), cvp.shape())));
    }
    if gate.d_in() != 2 * d || gate.d_out() != 1 {
        return Err(Error::Dimension(format!(
            "gate maps {}→{}, expected {}→1",
            gate.d_in(),
            gate.d_out(),
            2 * d
        )));
    }
    let z = concat_rows(cv.data(), cvp.data(), m);
    let (logits, _) = gate.forward(&z, m);
    let g: Vec<T> = logits.iter().map(|&l| ops::sigmoid(l)).collect();
    Tensor::from_vec(&[m, d], fuse(cv.data(), cvp.data(), &g, d))
}

/// `centers · W_qᵀ` split into `heads` channel slices of `[m×d'/heads]`.
pub fn project_queries<T: Element>(centers: &Tensor<T>, w_q: &Linear<T>, heads: usize) -> Result<Vec<Tensor<T>>> {
    let (m, d) = rows_cols(centers, "centers")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::config("heads", format!("{d} channels do not split into {heads} heads")));
    }
    if w_q.d_in != d || w_q.d_out != d {
        return Err(Error::Dimension(format!("W_q is {}×{}, centers have {d}", w_q.d_out, w_q.d_in)));
    }
    let q = w_q.forward(centers.data(), m);
    (0..heads)
        .map(|h| Tensor::from_vec(&[m, d / heads], split_head(&q, m, d, heads, h)))
        .collect()
}

/// Dense `S_P = σ(α·cos(p_s, q) + β)`, `[n×m]`, for one head.
pub fn assignment_scores<T: Element>(ps: &Tensor<T>, q: &Tensor<T>, alpha: T, beta: T) -> Result<Tensor<T>> {
    let cos = ops::cosine_sim(ps, q)?;
    let data = cos.data().iter().map(|&c| ops::sigmoid(alpha * c + beta)).collect();
    Tensor::from_vec(cos.shape(), data)
}

/// Hard assignment of every pixel to its highest-scoring query, per head.
pub fn compute_assignment<T: Element>(
    ps_heads: &[Tensor<T>],
    q_heads: &[Tensor<T>],
    alpha: T,
    beta: T,
) -> Result<Assignment<T>> {
    if ps_heads.is_empty() || ps_heads.len() != q_heads.len() {
        return Err(Error::Dimension(format!(
            "{} pixel heads vs {} query heads",
            ps_heads.len(),
            q_heads.len()
        )));
    }
    let heads = ps_heads.len();
    let (n, dh) = rows_cols(&ps_heads[0], "pixel head")?;
    let (m, _) = rows_cols(&q_heads[0], "query head")?;
    let mut cols = vec![0u32; heads * n];
    let mut weights = vec![T::zero(); heads * n];
    for h in 0..heads {
        if ps_heads[h].shape() != [n, dh] || q_heads[h].shape() != [m, dh] {
            return Err(Error::Dimension(format!("head {h} shapes disagree")));
        }
        assign_head(
            ps_heads[h].data(),
            q_heads[h].data(),
            n,
            m,
            dh,
            alpha,
            beta,
            &mut cols[h * n..(h + 1) * n],
            &mut weights[h * n..(h + 1) * n],
        );
    }
    Ok(Assignment {
        heads,
        n,
        m,
        cols,
        weights,
    })
}

/// `P + fc_out(S̃_P · C̃_v)`, heads concatenated before the projection.
pub fn dispatch<T: Element>(
    p: &Tensor<T>,
    asg: &Assignment<T>,
    centers: &Tensor<T>,
    fc_out: &Linear<T>,
) -> Result<Tensor<T>> {
    let (n, d) = rows_cols(p, "pixels")?;
    let (m, dp) = rows_cols(centers, "centers")?;
    if asg.n != n || dp % asg.heads != 0 || fc_out.d_in != dp || fc_out.d_out != d {
        return Err(Error::Dimension(format!(
            "dispatch of {n}×{d} pixels from {m}×{dp} centers over {} heads",
            asg.heads
        )));
    }
    if let Some(&c) = asg.cols.iter().find(|&&c| c as usize >= m) {
        return Err(Error::Internal(format!("assignment references center {c} of {m}")));
    }
    let u = gather(asg, centers.data(), dp);
    let f = fc_out.forward(&u, n);
    Tensor::from_vec(&[n, d], p.data().iter().zip(&f).map(|(&a, &b)| a + b).collect())
}

// ---------------------------------------------------------------------------
// block

#[derive(Clone, Debug)]
pub struct GfcBlock<T> {
    pub dim: usize,
    pub dim_prime: usize,
    pub heads: usize,
    pub grid: (usize, usize),
    pub flags: Ablation,
    pub norm1: LayerNorm<T>,
    pub w_s: Linear<T>,
    pub w_v: Linear<T>,
    /// `τ = max(exp(tau_raw), TAU_MIN)`; present with FA and cosine attention.
    pub tau_raw: Option<Parameter<T>>,
    pub gate: Option<Mlp<T>>,
    /// Query projection and cos-sigmoid scalars; absent in blocks that reuse
    /// a shared assignment.
    pub w_q: Option<Linear<T>>,
    pub alpha: Option<Parameter<T>>,
    pub beta: Option<Parameter<T>>,
    pub fc_out: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub ffn_dw: Option<DwConv<T>>,
    pub fc2: Linear<T>,
}

struct SampleCache<T> {
    cv: Vec<T>,
    attn: Vec<HeadAttn<T>>,
    cvp: Vec<T>,
    gate: Option<MlpCache<T>>,
    g: Vec<T>,
    ct: Vec<T>,
    assign: Vec<HeadAssign<T>>,
    assignment: Assignment<T>,
}

/// Intermediate values of one block forward over a batch.
pub struct GfcCache<T> {
    batch: usize,
    height: usize,
    width: usize,
    grid: (usize, usize),
    used_shared: bool,
    ln1: LayerNormCache<T>,
    xn: Vec<T>,
    pv: Vec<T>,
    u: Vec<T>,
    ln2: LayerNormCache<T>,
    xn2: Vec<T>,
    h1: Vec<T>,
    hpos: Vec<T>,
    act: Vec<T>,
    samples: Vec<SampleCache<T>>,
}

impl<T: Element> GfcCache<T> {
    /// The assignment used for each sample.
    pub fn assignments(&self) -> Vec<Assignment<T>> {
        self.samples.iter().map(|s| s.assignment.clone()).collect()
    }

    pub fn used_shared(&self) -> bool {
        self.used_shared
    }

    pub fn cluster_states(&self) -> Vec<ClusterState<T>> {
        let (gh, gw) = self.grid;
        let (m, n) = (gh * gw, self.height * self.width);
        self.samples
            .iter()
            .map(|s| {
                let dp = s.ct.len() / m;
                ClusterState {
                    centers_v: Tensor::from_vec(&[m, dp], s.ct.clone()).expect("center shape"),
                    soft_sim: (!s.attn.is_empty()).then(|| {
                        s.attn
                            .iter()
                            .map(|a| Tensor::from_vec(&[m, n], a.s.clone()).expect("S_C shape"))
                            .collect()
                    }),
                    assignment: s.assignment.clone(),
                    heads: s.assignment.heads,
                    grid: self.grid,
                }
            })
            .collect()
    }
}

fn scalar_param<T: Element>(name: String, v: f64) -> Parameter<T> {
    Parameter::new(name, Tensor::from_vec(&[1], vec![T::lit(v)]).expect("scalar"), false)
}

impl<T: Element> GfcBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        dim: usize,
        dim_prime: usize,
        heads: usize,
        grid: (usize, usize),
        flags: Ablation,
        computes_assignment: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || dim_prime == 0 {
            return Err(Error::config("dim", format!("{name}: widths must be positive")));
        }
        if heads == 0 || !dim_prime.is_multiple_of(heads) {
            return Err(Error::config(
                "heads",
                format!("{name}: {dim_prime} channels do not split into {heads} heads"),
            ));
        }
        if grid.0 == 0 || grid.1 == 0 {
            return Err(Error::config("cluster_grid", format!("{name}: empty grid")));
        }
        let tn = Init::TruncNormal(INIT_STD);
        let hidden = FFN_RATIO * dim;
        Ok(GfcBlock {
            dim,
            dim_prime,
            heads,
            grid,
            flags,
            norm1: LayerNorm::new(&format!("{name}.norm1"), dim),
            w_s: Linear::new(&format!("{name}.w_s"), dim, dim_prime, true, tn, rng),
            w_v: Linear::new(&format!("{name}.w_v"), dim, dim_prime, true, tn, rng),
            tau_raw: (flags.fa && flags.tcos).then(|| scalar_param(format!("{name}.tau_raw"), 0.0)),
            gate: (flags.fa && flags.gate)
                .then(|| Mlp::two_layer(&format!("{name}.gate"), 2 * dim_prime, dim_prime, 1, rng)),
            w_q: computes_assignment
                .then(|| Linear::new(&format!("{name}.w_q"), dim_prime, dim_prime, false, tn, rng)),
            alpha: computes_assignment.then(|| scalar_param(format!("{name}.alpha"), 1.0)),
            beta: computes_assignment.then(|| scalar_param(format!("{name}.beta"), 0.0)),
            fc_out: Linear::new(&format!("{name}.fc_out"), dim_prime, dim, true, Init::Zeros, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), dim),
            fc1: Linear::new(&format!("{name}.ffn.fc1"), dim, hidden, true, tn, rng),
            ffn_dw: if flags.pos_emb {
                Some(DwConv::new(&format!("{name}.ffn.pos"), FFN_KERNEL, hidden, tn, rng)?)
            } else {
                None
            },
            fc2: Linear::new(&format!("{name}.ffn.fc2"), hidden, dim, true, Init::Zeros, rng),
        })
    }

    pub fn computes_assignment(&self) -> bool {
        self.w_q.is_some()
    }

    fn similarity(&self) -> Similarity<T> {
        match &self.tau_raw {
            Some(raw) => Similarity::Cosine(raw.data()[0].exp().max(T::lit(TAU_MIN))),
            None => Similarity::Dot(T::lit(1.0 / ((self.dim_prime / self.heads) as f64).sqrt())),
        }
    }

    /// Current temperature (1 when cosine attention is disabled).
    pub fn tau(&self) -> T {
        match self.similarity() {
            Similarity::Cosine(t) => t,
            Similarity::Dot(_) => T::one(),
        }
    }

    /// Forward over a batch. `shared`, when given, holds one assignment per
    /// sample and is used verbatim instead of computing one.
    pub fn forward(
        &self,
        x: &FeatureMap<T>,
        shared: Option<&[Assignment<T>]>,
    ) -> Result<(FeatureMap<T>, GfcCache<T>)> {
        let (batch, hh, ww) = (x.batch, x.height, x.width);
        let (d, dp, heads) = (self.dim, self.dim_prime, self.heads);
        let dh = dp / heads;
        let (gh, gw) = self.grid;
        if x.channels != d {
            return Err(Error::Dimension(format!("block expects {d} channels, got {}", x.channels)));
        }
        if gh > hh || gw > ww {
            return Err(Error::config(
                "cluster_grid",
                format!("{gh}×{gw} grid does not fit a {hh}×{ww} map"),
            ));
        }
        let (n, m, rows) = (hh * ww, gh * gw, x.rows());
        if let Some(sh) = shared {
            if sh.len() != batch {
                return Err(Error::config("share_assignment", format!("{} shared assignments for batch {batch}", sh.len())));
            }
            if let Some(a) = sh.iter().find(|a| a.n != n || a.m != m || a.heads != heads) {
                return Err(Error::config(
                    "share_assignment",
                    format!(
                        "shared assignment (n={}, m={}, M={}) does not match block (n={n}, m={m}, M={heads})",
                        a.n, a.m, a.heads
                    ),
                ));
            }
        } else if !self.computes_assignment() {
            return Err(Error::config("share_assignment", "block reuses an assignment but none was given"));
        }

        let (xn, ln1) = self.norm1.forward(&x.data);
        let ps = self.w_s.forward(&xn, rows);
        let pv = self.w_v.forward(&xn, rows);
        let sim = self.similarity();
        let mut u = Vec::with_capacity(rows * dp);
        let mut samples = Vec::with_capacity(batch);
        for b in 0..batch {
            let ps_b = &ps[b * n * dp..(b + 1) * n * dp];
            let pv_b = &pv[b * n * dp..(b + 1) * n * dp];
            let cs = ops::adaptive_pool(ps_b, hh, ww, dp, gh, gw);
            let cv = ops::adaptive_pool(pv_b, hh, ww, dp, gh, gw);
            let mut attn = Vec::new();
            let mut cvp = Vec::new();
            let mut gate_cache = None;
            let mut g = Vec::new();
            let ct = if self.flags.fa {
                cvp = vec![T::zero(); m * dp];
                for h in 0..heads {
                    let (o, c) = attend(
                        &split_head(&cs, m, dp, heads, h),
                        &split_head(ps_b, n, dp, heads, h),
                        &split_head(pv_b, n, dp, heads, h),
                        m,
                        n,
                        dh,
                        sim,
                    );
                    add_head(&mut cvp, &o, m, dp, heads, h);
                    attn.push(c);
                }
                g = match &self.gate {
                    Some(mlp) => {
                        let (logits, c) = mlp.forward(&concat_rows(&cv, &cvp, m), m);
                        gate_cache = Some(c);
                        logits.iter().map(|&l| ops::sigmoid(l)).collect()
                    }
                    None => vec![T::lit(0.5); m],
                };
                fuse(&cv, &cvp, &g, dp)
            } else {
                cv.clone()
            };
            let mut assign = Vec::new();
            let assignment = match shared {
                Some(sh) => sh[b].clone(),
                None => {
                    let w_q = self.w_q.as_ref().expect("checked above");
                    let q = w_q.forward(&ct, m);
                    let alpha = self.alpha.as_ref().expect("alpha").data()[0];
                    let beta = self.beta.as_ref().expect("beta").data()[0];
                    let mut cols = vec![0u32; heads * n];
                    let mut weights = vec![T::zero(); heads * n];
                    for h in 0..heads {
                        assign.push(assign_head(
                            &split_head(ps_b, n, dp, heads, h),
                            &split_head(&q, m, dp, heads, h),
                            n,
                            m,
                            dh,
                            alpha,
                            beta,
                            &mut cols[h * n..(h + 1) * n],
                            &mut weights[h * n..(h + 1) * n],
                        ));
                    }
                    Assignment {
                        heads,
                        n,
                        m,
                        cols,
                        weights,
                    }
                }
            };
            u.extend(gather(&assignment, &ct, dp));
            samples.push(SampleCache {
                cv,
                attn,
                cvp,
                gate: gate_cache,
                g,
                ct,
                assign,
                assignment,
            });
        }

        let f = self.fc_out.forward(&u, rows);
        let x1: Vec<T> = x.data.iter().zip(&f).map(|(&a, &b)| a + b).collect();
        let (xn2, ln2) = self.norm2.forward(&x1);
        let h1 = self.fc1.forward(&xn2, rows);
        let hpos = match &self.ffn_dw {
            Some(dw) => {
                let mut y = dw.forward(&h1, batch, hh, ww);
                y.iter_mut().zip(&h1).for_each(|(o, &v)| *o += v);
                y
            }
            None => h1.clone(),
        };
        let act = ops::activate(Activation::Gelu, &hpos);
        let f2 = self.fc2.forward(&act, rows);
        let out: Vec<T> = x1.iter().zip(&f2).map(|(&a, &b)| a + b).collect();
        Ok((
            FeatureMap::new(batch, hh, ww, d, x.stage, out),
            GfcCache {
                batch,
                height: hh,
                width: ww,
                grid: self.grid,
                used_shared: shared.is_some(),
                ln1,
                xn,
                pv,
                u,
                ln2,
                xn2,
                h1,
                hpos,
                act,
                samples,
            },
        ))
    }

    /// Accumulates parameter gradients and returns `dx`. `extra` adds
    /// upstream gradients of this block's assignment weights (from blocks that
    /// reused it). When the forward consumed a shared assignment, the second
    /// value holds the gradient with respect to its weights, per sample.
    pub fn backward(
        &mut self,
        cache: &GfcCache<T>,
        dy: &[T],
        extra: Option<&[Vec<T>]>,
    ) -> (Vec<T>, Option<Vec<Vec<T>>>) {
        let (batch, hh, ww) = (cache.batch, cache.height, cache.width);
        let (dp, heads) = (self.dim_prime, self.heads);
        let dh = dp / heads;
        let (gh, gw) = cache.grid;
        let (n, m, rows) = (hh * ww, gh * gw, batch * hh * ww);

        // feed-forward branch
        let dact = self.fc2.backward(&cache.act, rows, dy);
        let dhpos = ops::activate_backward(Activation::Gelu, &cache.hpos, &dact);
        let mut dh1 = dhpos.clone();
        if let Some(dw) = self.ffn_dw.as_mut() {
            let g = dw.backward(&cache.h1, batch, hh, ww, &dhpos);
            dh1.iter_mut().zip(g).for_each(|(o, v)| *o += v);
        }
        let dxn2 = self.fc1.backward(&cache.xn2, rows, &dh1);
        let mut dx1 = self.norm2.backward(&cache.ln2, &dxn2);
        dx1.iter_mut().zip(dy).for_each(|(o, &v)| *o += v);

        // clustering branch
        let du = self.fc_out.backward(&cache.u, rows, &dx1);
        let mut dps = vec![T::zero(); rows * dp];
        let mut dpv = vec![T::zero(); rows * dp];
        let mut dshared = cache.used_shared.then(|| Vec::with_capacity(batch));
        let sim = self.similarity();
        let mut dalpha = T::zero();
        let mut dbeta = T::zero();
        let mut dtau = T::zero();
        for (b, s) in cache.samples.iter().enumerate() {
            let asg = &s.assignment;
            let du_b = &du[b * n * dp..(b + 1) * n * dp];
            let dps_b = &mut dps[b * n * dp..(b + 1) * n * dp];
            let mut dct = vec![T::zero(); m * dp];
            let mut dw = vec![T::zero(); heads * n];
            for h in 0..heads {
                for i in 0..n {
                    let c = asg.col(h, i);
                    let w = asg.weight(h, i);
                    let g = &du_b[i * dp + h * dh..i * dp + (h + 1) * dh];
                    let center = &s.ct[c * dp + h * dh..c * dp + (h + 1) * dh];
                    dw[h * n + i] = g.iter().zip(center).map(|(&a, &v)| a * v).sum();
                    for (o, &v) in dct[c * dp + h * dh..c * dp + (h + 1) * dh].iter_mut().zip(g) {
                        *o += w * v;
                    }
                }
            }
            if let Some(extra) = extra {
                dw.iter_mut().zip(&extra[b]).for_each(|(o, &v)| *o += v);
            }
            match dshared.as_mut() {
                Some(list) => list.push(dw),
                None => {
                    let alpha = self.alpha.as_ref().expect("alpha").data()[0];
                    let mut dq = vec![T::zero(); m * dp];
                    for (h, hc) in s.assign.iter().enumerate() {
                        let mut dnp = vec![T::zero(); n * dh];
                        let mut dnq = vec![T::zero(); m * dh];
                        for i in 0..n {
                            let c = asg.col(h, i);
                            let w = asg.weight(h, i);
                            let da = dw[h * n + i] * w * (T::one() - w);
                            dalpha += da * hc.cos[i];
                            dbeta += da;
                            let dc = alpha * da;
                            for k in 0..dh {
                                dnp[i * dh + k] += dc * hc.nq[c * dh + k];
                                dnq[c * dh + k] += dc * hc.np[i * dh + k];
                            }
                        }
                        let g = ops::l2_normalize_rows_backward(&hc.np, &hc.np_norm, &dnp, dh, COS_EPS);
                        add_head(dps_b, &g, n, dp, heads, h);
                        let g = ops::l2_normalize_rows_backward(&hc.nq, &hc.nq_norm, &dnq, dh, COS_EPS);
                        add_head(&mut dq, &g, m, dp, heads, h);
                    }
                    let w_q = self.w_q.as_mut().expect("w_q");
                    let g = w_q.backward(&s.ct, m, &dq);
                    dct.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }

            let dcv = if self.flags.fa {
                let mut dcv = vec![T::zero(); m * dp];
                let mut dcvp = vec![T::zero(); m * dp];
                let mut dg = vec![T::zero(); m];
                for c in 0..m {
                    let gv = s.g[c];
                    for k in 0..dp {
                        let idx = c * dp + k;
                        dcvp[idx] = (T::one() - gv) * dct[idx];
                        dcv[idx] = gv * dct[idx];
                        dg[c] += dct[idx] * (s.cv[idx] - s.cvp[idx]);
                    }
                }
                if let (Some(mlp), Some(gc)) = (self.gate.as_mut(), s.gate.as_ref()) {
                    let dlogit: Vec<T> = dg.iter().zip(&s.g).map(|(&d, &g)| d * g * (T::one() - g)).collect();
                    let dz = mlp.backward(gc, &dlogit);
                    for c in 0..m {
                        for k in 0..dp {
                            dcv[c * dp + k] += dz[c * 2 * dp + k];
                            dcvp[c * dp + k] += dz[c * 2 * dp + dp + k];
                        }
                    }
                }
                let pv_b = &cache.pv[b * n * dp..(b + 1) * n * dp];
                let dpv_b = &mut dpv[b * n * dp..(b + 1) * n * dp];
                let mut dcs = vec![T::zero(); m * dp];
                for (h, a) in s.attn.iter().enumerate() {
                    let gr = attend_backward(
                        a,
                        &split_head(pv_b, n, dp, heads, h),
                        m,
                        n,
                        dh,
                        sim,
                        &split_head(&dcvp, m, dp, heads, h),
                    );
                    add_head(&mut dcs, &gr.dcs, m, dp, heads, h);
                    add_head(dps_b, &gr.dps, n, dp, heads, h);
                    add_head(dpv_b, &gr.dpv, n, dp, heads, h);
                    dtau -= gr.dlog_scale;
                }
                let g = ops::adaptive_pool_backward(&dcs, hh, ww, dp, gh, gw);
                dps_b.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                dcv
            } else {
                dct
            };
            let g = ops::adaptive_pool_backward(&dcv, hh, ww, dp, gh, gw);
            dpv[b * n * dp..(b + 1) * n * dp]
                .iter_mut()
                .zip(g)
                .for_each(|(o, v)| *o += v);
        }
        if let Some(a) = self.alpha.as_mut() {
            a.accumulate(&[dalpha]);
        }
        if let Some(bp) = self.beta.as_mut() {
            bp.accumulate(&[dbeta]);
        }
        if let Some(raw) = self.tau_raw.as_mut() {
            // logits scale as exp(−raw), so dL/draw = −Σ dlogits·logits off the clamp
            let unclamped = raw.data()[0].exp() > T::lit(TAU_MIN);
            raw.accumulate(&[if unclamped { dtau } else { T::zero() }]);
        }

        let mut dxn = self.w_s.backward(&cache.xn, rows, &dps);
        let g = self.w_v.backward(&cache.xn, rows, &dpv);
        dxn.iter_mut().zip(g).for_each(|(o, v)| *o += v);
        let mut dx = self.norm1.backward(&cache.ln1, &dxn);
        dx.iter_mut().zip(&dx1).for_each(|(o, &v)| *o += v);
        (dx, dshared)
    }
}

impl<T: Element> Module<T> for GfcBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.norm1.visit(f);
        self.w_s.visit(f);
        self.w_v.visit(f);
        if let Some(p) = &self.tau_raw {
            f(p);
        }
        self.gate.visit(f);
        self.w_q.visit(f);
        if let Some(p) = &self.alpha {
            f(p);
        }
        if let Some(p) = &self.beta {
            f(p);
        }
        self.fc_out.visit(f);
        self.norm2.visit(f);
        self.fc1.visit(f);
        self.ffn_dw.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.norm1.visit_mut(f);
        self.w_s.visit_mut(f);
        self.w_v.visit_mut(f);
        if let Some(p) = &mut self.tau_raw {
            f(p);
        }
        self.gate.visit_mut(f);
        self.w_q.visit_mut(f);
        if let Some(p) = &mut self.alpha {
            f(p);
        }
        if let Some(p) = &mut self.beta {
            f(p);
        }
        self.fc_out.visit_mut(f);
        self.norm2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.ffn_dw.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// stage

/// Sequence of blocks at one resolution. With sharing, only the first block
/// computes an assignment and the rest reuse it.
#[derive(Clone, Debug)]
pub struct GfcStage<T> {
    pub blocks: Vec<GfcBlock<T>>,
    pub shared: bool,
}

pub struct StageCache<T> {
    pub blocks: Vec<GfcCache<T>>,
}

impl<T: Element> GfcStage<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        depth: usize,
        dim: usize,
        dim_prime: usize,
        heads: usize,
        grid: (usize, usize),
        flags: Ablation,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("depth", format!("{name}: depth must be at least 1")));
        }
        let blocks = (0..depth)
            .map(|j| {
                let computes = j == 0 || !flags.shared;
                GfcBlock::new(&format!("{name}.block{j}"), dim, dim_prime, heads, grid, flags, computes, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GfcStage {
            blocks,
            shared: flags.shared,
        })
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, StageCache<T>)> {
        let mut caches: Vec<GfcCache<T>> = Vec::with_capacity(self.blocks.len());
        let mut first: Option<Vec<Assignment<T>>> = None;
        let mut cur = x.clone();
        for (j, block) in self.blocks.iter().enumerate() {
            let shared = if self.shared && j > 0 { first.as_deref() } else { None };
            let (y, c) = block.forward(&cur, shared)?;
            if j == 0 && self.shared {
                first = Some(c.assignments());
            }
            caches.push(c);
            cur = y;
        }
        Ok((cur, StageCache { blocks: caches }))
    }

    pub fn backward(&mut self, cache: &StageCache<T>, dy: &[T]) -> Vec<T> {
        let mut d = dy.to_vec();
        let mut dshared: Option<Vec<Vec<T>>> = None;
        for j in (0..self.blocks.len()).rev() {
            let extra = if j == 0 { dshared.as_deref() } else { None };
            let (dx, ds) = self.blocks[j].backward(&cache.blocks[j], &d, extra);
            if let Some(ds) = ds {
                match dshared.as_mut() {
                    None => dshared = Some(ds),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(ds) {
                            a.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                        }
                    }
                }
            }
            d = dx;
        }
        d
    }
}

impl<T: Element> Module<T> for GfcStage<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.blocks.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.blocks.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::trunc_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn init_centers_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Tensor<f64> = trunc_normal(&mut rng, &[4, 4, 3], 1.0);
        let global = init_centers(&p, 1, 1).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..16).map(|i| p.data()[i * 3 + c]).sum::<f64>() / 16.0;
            assert!((global.data()[c] - mean).abs() < 1e-12);
        }
        assert_eq!(init_centers(&p, 4, 4).unwrap().data(), p.data());

        let mut q = Tensor::<f64>::zeros(&[4, 4, 1]);
        for y in 0..4 {
            for x in 0..4 {
                q.set(&[y, x, 0], [1.0, 2.0, 3.0, 4.0][(y / 2) * 2 + x / 2]);
            }
        }
        assert_eq!(init_centers(&q, 2, 2).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(init_centers(&q, 5, 1), Err(Error::Config { .. })));
    }

    #[test]
    fn soft_aggregate_examples() {
        let v = [0.3, -1.2];
        let ps = t(&[3, 2], &[0.5, 0.1, -0.2, 0.9, 1.0, 1.0]);
        let pv = t(&[3, 2], &[v[0], v[1], v[0], v[1], v[0], v[1]]);
        let cs = t(&[2, 2], &[1.0, 0.0, -0.3, 0.4]);
        let (out, s) = soft_aggregate(&cs, &ps, &pv, 0.7).unwrap();
        for row in out.data().chunks(2) {
            assert!((row[0] - v[0]).abs() < 1e-12 && (row[1] - v[1]).abs() < 1e-12);
        }
        for row in s.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        let ps = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let pv = t(&[2, 2], &[2.0, 0.0, 0.0, 4.0]);
        let (out, s) = soft_aggregate(&t(&[1, 2], &[1.0, 0.0]), &ps, &pv, 1.0).unwrap();
        assert!((s.data()[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((s.data()[1] - 0.2689414213699951).abs() < 1e-12);
        assert!((out.data()[0] - 2.0 * 0.7310585786300049).abs() < 1e-12);
        assert!((out.data()[1] - 4.0 * 0.2689414213699951).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps: Tensor<f64> = trunc_normal(&mut rng, &[7, 3], 1.0);
        let cs: Tensor<f64> = trunc_normal(&mut rng, &[2, 3], 1.0);
        let (_, s) = soft_aggregate(&cs, &ps, &ps, 1e6).unwrap();
        assert!(s.data().iter().all(|&w| (w - 1.0 / 7.0).abs() < 1e-4));
        assert!(soft_aggregate(&cs, &ps, &ps, 0.0).is_err());
    }

    #[test]
    fn streaming_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cs: Tensor<f64> = trunc_normal(&mut rng, &[5, 4], 1.0);
        let ps: Tensor<f64> = trunc_normal(&mut rng, &[37, 4], 1.0);
        let pv: Tensor<f64> = trunc_normal(&mut rng, &[37, 4], 1.0);
        let (naive, _) = soft_aggregate(&cs, &ps, &pv, 0.1).unwrap();
        for chunk in [1, 5, 16, 37, 100] {
            let s = soft_aggregate_streaming(&cs, &ps, &pv, 0.1, chunk).unwrap();
            assert!(s.max_abs_diff(&naive) < 1e-12, "chunk {chunk}");
        }
    }

    fn gate_mlp(d: usize, seed: u64) -> Mlp<f64> {
        Mlp::two_layer("gate", 2 * d, d, 1, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn gated_fuse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cv: Tensor<f64> = trunc_normal(&mut rng, &[3, 2], 1.0);
        let cvp: Tensor<f64> = trunc_normal(&mut rng, &[3, 2], 1.0);
        let mut zero = gate_mlp(2, 1);
        zero.visit_mut(&mut |p| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let out = gated_fuse(&cv, &cvp, &zero).unwrap();
        for ((o, a), b) in out.data().iter().zip(cv.data()).zip(cvp.data()) {
            assert!((o - 0.5 * (a + b)).abs() < 1e-15);
        }

        let same = gated_fuse(&cv, &cv, &gate_mlp(2, 5)).unwrap();
        assert!(same.max_abs_diff(&cv) < 1e-15);

        let mut saturated = gate_mlp(2, 6);
        saturated.layers[1].bias.as_mut().unwrap().value.data_mut()[0] = 40.0;
        let out = gated_fuse(&cv, &cvp, &saturated).unwrap();
        assert!(out.max_abs_diff(&cv) < 1e-4);
    }

    #[test]
    fn project_queries_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let centers: Tensor<f64> = trunc_normal(&mut rng, &[3, 4], 1.0);
        let mut w_q = Linear::<f64>::new("q", 4, 4, false, Init::Zeros, &mut rng);
        assert!(project_queries(&centers, &w_q, 1).unwrap()[0].data().iter().all(|&v| v == 0.0));
        for i in 0..4 {
            w_q.weight.value.set(&[i, i], 1.0);
        }
        assert_eq!(project_queries(&centers, &w_q, 1).unwrap()[0], centers);
        let halves = project_queries(&centers, &w_q, 2).unwrap();
        for r in 0..3 {
            assert_eq!(&halves[0].data()[r * 2..r * 2 + 2], &centers.data()[r * 4..r * 4 + 2]);
            assert_eq!(&halves[1].data()[r * 2..r * 2 + 2], &centers.data()[r * 4 + 2..r * 4 + 4]);
        }
        assert!(matches!(project_queries(&centers, &w_q, 3), Err(Error::Config { .. })));
    }

    #[test]
    fn assignment_examples() {
        // pixel parallel to query 1, orthogonal to queries 0 and 2
        let ps = t(&[1, 2], &[0.0, 2.0]);
        let q = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
        let a = compute_assignment(std::slice::from_ref(&ps), std::slice::from_ref(&q), 1.0, 0.0).unwrap();
        assert_eq!(a.col(0, 0), 1);
        assert!((a.weight(0, 0) - 0.7310585786300049).abs() < 1e-12);

        let a = compute_assignment(&[ps], &[q], 0.0, 0.3).unwrap();
        assert_eq!(a.col(0, 0), 0);
        assert!((a.weight(0, 0) - 1.0 / (1.0 + (-0.3f64).exp())).abs() < 1e-12);

        // dense row [0.2, 0.9, 0.5] keeps column 1
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let ps = t(&[1, 1], &[1.0]);
        let q = t(&[3, 1], &[1.0, 1.0, 1.0]);
        let mut asg = compute_assignment(&[ps], &[q], 1.0, 0.0).unwrap();
        let dense = [0.2, 0.9, 0.5];
        let best = (0..3).fold(0, |b, j| if dense[j] > dense[b] { j } else { b });
        asg.cols[0] = best as u32;
        asg.weights[0] = dense[best];
        assert_eq!((asg.col(0, 0), asg.weight(0, 0)), (1, 0.9));
        assert!((ops::sigmoid(logit(0.9)) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn dispatch_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: Tensor<f64> = trunc_normal(&mut rng, &[3, 2], 1.0);
        let centers: Tensor<f64> = trunc_normal(&mut rng, &[2, 2], 1.0);
        let asg = Assignment {
            heads: 1,
            n: 3,
            m: 2,
            cols: vec![1, 0, 1],
            weights: vec![1.0, 0.5, 1.0],
        };
        let mut fc = Linear::<f64>::new("fc", 2, 2, true, Init::Zeros, &mut rng);
        assert_eq!(dispatch(&p, &asg, &centers, &fc).unwrap(), p);
        fc.weight.value.set(&[0, 0], 1.0);
        fc.weight.value.set(&[1, 1], 1.0);
        let out = dispatch(&p, &asg, &centers, &fc).unwrap();
        for k in 0..2 {
            assert!((out.at(&[0, k]) - p.at(&[0, k]) - centers.at(&[1, k])).abs() < 1e-15);
            assert!((out.at(&[1, k]) - p.at(&[1, k]) - 0.5 * centers.at(&[0, k])).abs() < 1e-15);
            assert!(((out.at(&[0, k]) - p.at(&[0, k])) - (out.at(&[2, k]) - p.at(&[2, k]))).abs() < 1e-12);
        }
        let bad = Assignment { cols: vec![1, 0, 2], ..asg };
        assert!(matches!(dispatch(&p, &bad, &centers, &fc), Err(Error::Internal(_))));
    }

    fn map(batch: usize, h: usize, w: usize, d: usize, seed: u64) -> FeatureMap<f64> {
        let v: Tensor<f64> = trunc_normal(&mut ChaCha8Rng::seed_from_u64(seed), &[batch, h, w, d], 1.0);
        FeatureMap::new(batch, h, w, d, 1, v.into_vec())
    }

    #[test]
    fn block_is_identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = GfcBlock::<f64>::new("b", 8, 8, 2, (2, 2), Ablation::default(), true, &mut rng).unwrap();
        let x = map(2, 4, 4, 8, 10);
        let (y, _) = block.forward(&x, None).unwrap();
        assert!(y.data.iter().zip(&x.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn stage_shares_first_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stage = GfcStage::<f64>::new("s", 3, 8, 8, 2, (2, 2), Ablation::default(), &mut rng).unwrap();
        assert!(stage.blocks[0].computes_assignment());
        assert!(!stage.blocks[1].computes_assignment());
        let (_, cache) = stage.forward(&map(2, 4, 4, 8, 12)).unwrap();
        let first = cache.blocks[0].assignments();
        for c in &cache.blocks[1..] {
            assert!(c.used_shared());
            for (a, b) in c.assignments().iter().zip(&first) {
                assert!(a.bit_eq(b));
            }
        }
    }

    #[test]
    fn mismatched_shared_assignment_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let block = GfcBlock::<f64>::new("b", 8, 8, 2, (2, 2), Ablation::default(), true, &mut rng).unwrap();
        let x = map(1, 4, 4, 8, 14);
        let wrong = Assignment {
            heads: 2,
            n: 9,
            m: 4,
            cols: vec![0; 18],
            weights: vec![0.5; 18],
        };
        assert!(matches!(block.forward(&x, Some(&[wrong])), Err(Error::Config { .. })));
    }

    #[test]
    fn absent_components_have_no_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let full = GfcBlock::<f64>::new("b", 8, 8, 2, (2, 2), Ablation::default(), true, &mut rng).unwrap();
        let no_fa = GfcBlock::<f64>::new(
            "b",
            8,
            8,
            2,
            (2, 2),
            Ablation { fa: false, ..Ablation::default() },
            true,
            &mut rng,
        )
        .unwrap();
        let gate = (16 * 8 + 8) + (8 + 1);
        assert_eq!(full.num_learnable() - no_fa.num_learnable(), gate + 1);
    }
}
