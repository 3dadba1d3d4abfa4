//! Forward and backward passes of the building blocks. Activations are
//! row-major `rows × width` slices; parameters and gradients are addressed by
//! offsets into one flat store.

use super::params::{BlockIdx, LinearIdx, NormIdx};
use super::rope::Rotary;
use super::tensor::{matmul, matmul_a_bt, matmul_at_b, zeros, Scalar};

const LN_EPS: f64 = 1e-5;

pub fn linear_fwd<T: Scalar>(p: &[T], l: LinearIdx, x: &[T], rows: usize) -> Vec<T> {
    let mut y = zeros(rows * l.dout);
    let bias = &p[l.b..l.b + l.dout];
    for row in y.chunks_exact_mut(l.dout) {
        row.copy_from_slice(bias);
    }
    matmul(x, &p[l.w..l.w + l.din * l.dout], &mut y, rows, l.din, l.dout, true);
    y
}

/// Accumulates weight/bias gradients; returns `dx` when `want_dx`.
pub fn linear_bwd<T: Scalar>(
    p: &[T],
    g: &mut [T],
    l: LinearIdx,
    x: &[T],
    dy: &[T],
    rows: usize,
    want_dx: bool,
) -> Option<Vec<T>> {
    matmul_at_b(x, dy, &mut g[l.w..l.w + l.din * l.dout], rows, l.din, l.dout, true);
    let gb = &mut g[l.b..l.b + l.dout];
    for row in dy.chunks_exact(l.dout) {
        for (acc, &d) in gb.iter_mut().zip(row) {
            *acc += d;
        }
    }
    want_dx.then(|| {
        let mut dx = zeros(rows * l.din);
        matmul_a_bt(dy, &p[l.w..l.w + l.din * l.dout], &mut dx, rows, l.dout, l.din, false);
        dx
    })
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

pub fn layer_norm_fwd<T: Scalar>(p: &[T], n: NormIdx, x: &[T]) -> (Vec<T>, NormCache<T>) {
    let d = n.dim;
    let rows = x.len() / d;
    let gain = &p[n.g..n.g + d];
    let bias = &p[n.b..n.b + d];
    let inv_d = T::one() / T::of(d as f64);
    let eps = T::of(LN_EPS);
    let mut y = zeros(x.len());
    let mut xhat = zeros(x.len());
    let mut rstd = zeros(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gain[i] + bias[i];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_bwd<T: Scalar>(p: &[T], g: &mut [T], n: NormIdx, cache: &NormCache<T>, dy: &[T]) -> Vec<T> {
    let d = n.dim;
    let rows = dy.len() / d;
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = zeros(dy.len());
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for i in 0..d {
            g[n.g + i] += dyr[i] * xh[i];
            g[n.b + i] += dyr[i];
            let dxh = dyr[i] * p[n.g + i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[i];
        }
        mean_dxh *= inv_d;
        mean_dxh_xh *= inv_d;
        let rs = cache.rstd[r];
        for i in 0..d {
            let dxh = dyr[i] * p[n.g + i];
            dx[r * d + i] = rs * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    /// Rotated queries and keys, and values, per head: `heads × rows × head_dim`.
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention probabilities per head: `heads × rows × rows`.
    probs: Vec<T>,
    /// Concatenated head outputs before the output projection.
    mixed: Vec<T>,
}

pub struct AttnSpec<'a, T> {
    pub heads: usize,
    pub rotary: &'a Rotary<T>,
    pub causal: bool,
}

fn split_heads<T: Scalar>(qkv: &[T], rows: usize, d: usize, heads: usize, which: usize) -> Vec<T> {
    let dh = d / heads;
    let mut out = zeros(heads * rows * dh);
    for h in 0..heads {
        for r in 0..rows {
            let src = &qkv[r * 3 * d + which * d + h * dh..][..dh];
            out[(h * rows + r) * dh..][..dh].copy_from_slice(src);
        }
    }
    out
}

fn merge_heads<T: Scalar>(per_head: &[T], dst: &mut [T], rows: usize, d: usize, heads: usize, stride: usize, offset: usize) {
    let dh = d / heads;
    for h in 0..heads {
        for r in 0..rows {
            dst[r * stride + offset + h * dh..][..dh].copy_from_slice(&per_head[(h * rows + r) * dh..][..dh]);
        }
    }
}

/// Raw scaled dot-product logits of one head after rotation (testing aid).
pub fn rotary_logits<T: Scalar>(q: &[T], k: &[T], rows: usize, dh: usize, rotary: &Rotary<T>) -> Vec<T> {
    let mut q = q.to_vec();
    let mut k = k.to_vec();
    rotary.rotate(&mut q, rows, dh, false);
    rotary.rotate(&mut k, rows, dh, false);
    let mut s = zeros(rows * rows);
    matmul_a_bt(&q, &k, &mut s, rows, dh, rows, false);
    let scale = T::one() / T::of(dh as f64).sqrt();
    s.iter_mut().for_each(|x| *x *= scale);
    s
}

pub fn attention_fwd<T: Scalar>(
    p: &[T],
    qkv_idx: LinearIdx,
    out_idx: LinearIdx,
    x: &[T],
    rows: usize,
    spec: &AttnSpec<'_, T>,
) -> (Vec<T>, AttnCache<T>) {
    let d = out_idx.dout;
    let heads = spec.heads;
    let dh = d / heads;
    let qkv = linear_fwd(p, qkv_idx, x, rows);
    let mut q = split_heads(&qkv, rows, d, heads, 0);
    let mut k = split_heads(&qkv, rows, d, heads, 1);
    let v = split_heads(&qkv, rows, d, heads, 2);
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut probs = zeros(heads * rows * rows);
    let mut ctx = zeros(heads * rows * dh);
    for h in 0..heads {
        let qh = &mut q[h * rows * dh..(h + 1) * rows * dh];
        spec.rotary.rotate(qh, rows, dh, false);
        let kh = &mut k[h * rows * dh..(h + 1) * rows * dh];
        spec.rotary.rotate(kh, rows, dh, false);
        let ph = &mut probs[h * rows * rows..(h + 1) * rows * rows];
        matmul_a_bt(qh, kh, ph, rows, dh, rows, false);
        for i in 0..rows {
            let row = &mut ph[i * rows..(i + 1) * rows];
            let visible = if spec.causal { i + 1 } else { rows };
            let mut max = T::neg_infinity();
            for s in row[..visible].iter_mut() {
                *s *= scale;
                max = max.max(*s);
            }
            let mut sum = T::zero();
            for s in row[..visible].iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let inv = T::one() / sum;
            row[..visible].iter_mut().for_each(|s| *s *= inv);
            row[visible..].iter_mut().for_each(|s| *s = T::zero());
        }
        matmul(ph, &v[h * rows * dh..(h + 1) * rows * dh], &mut ctx[h * rows * dh..(h + 1) * rows * dh], rows, rows, dh, false);
    }
    let mut mixed = zeros(rows * d);
    merge_heads(&ctx, &mut mixed, rows, d, heads, d, 0);
    let y = linear_fwd(p, out_idx, &mixed, rows);
    (y, AttnCache { q, k, v, probs, mixed })
}

#[allow(clippy::too_many_arguments)]
pub fn attention_bwd<T: Scalar>(
    p: &[T],
    g: &mut [T],
    qkv_idx: LinearIdx,
    out_idx: LinearIdx,
    x: &[T],
    cache: &AttnCache<T>,
    dy: &[T],
    rows: usize,
    spec: &AttnSpec<'_, T>,
) -> Vec<T> {
    let d = out_idx.dout;
    let heads = spec.heads;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let dmixed = linear_bwd(p, g, out_idx, &cache.mixed, dy, rows, true).expect("dx requested");
    let dctx = split_heads_from(&dmixed, rows, d, heads);

    let mut dq = zeros(heads * rows * dh);
    let mut dk = zeros(heads * rows * dh);
    let mut dv = zeros(heads * rows * dh);
    let mut dp = zeros(rows * rows);
    for h in 0..heads {
        let hs = h * rows * dh..(h + 1) * rows * dh;
        let ph = &cache.probs[h * rows * rows..(h + 1) * rows * rows];
        let dch = &dctx[hs.clone()];
        // dP = dO Vᵀ, dV = Pᵀ dO
        matmul_a_bt(dch, &cache.v[hs.clone()], &mut dp, rows, dh, rows, false);
        matmul_at_b(ph, dch, &mut dv[hs.clone()], rows, rows, dh, false);
        // softmax backward, folded with the logit scale
        for i in 0..rows {
            let pr = &ph[i * rows..(i + 1) * rows];
            let dr = &mut dp[i * rows..(i + 1) * rows];
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (ds, &pij) in dr.iter_mut().zip(pr) {
                *ds = pij * (*ds - dot) * scale;
            }
        }
        matmul(&dp, &cache.k[hs.clone()], &mut dq[hs.clone()], rows, rows, dh, false);
        matmul_at_b(&dp, &cache.q[hs.clone()], &mut dk[hs.clone()], rows, rows, dh, false);
        spec.rotary.rotate(&mut dq[hs.clone()], rows, dh, true);
        spec.rotary.rotate(&mut dk[hs.clone()], rows, dh, true);
    }
    let mut dqkv = zeros(rows * 3 * d);
    merge_heads(&dq, &mut dqkv, rows, d, heads, 3 * d, 0);
    merge_heads(&dk, &mut dqkv, rows, d, heads, 3 * d, d);
    merge_heads(&dv, &mut dqkv, rows, d, heads, 3 * d, 2 * d);
    linear_bwd(p, g, qkv_idx, x, &dqkv, rows, true).expect("dx requested")
}

fn split_heads_from<T: Scalar>(m: &[T], rows: usize, d: usize, heads: usize) -> Vec<T> {
    let dh = d / heads;
    let mut out = zeros(heads * rows * dh);
    for h in 0..heads {
        for r in 0..rows {
            out[(h * rows + r) * dh..][..dh].copy_from_slice(&m[r * d + h * dh..][..dh]);
        }
    }
    out
}

/// Pre-norm transformer block cache.
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    ln1: NormCache<T>,
    h1: Vec<T>,
    attn: AttnCache<T>,
    ln2: NormCache<T>,
    h2: Vec<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
}

pub fn block_fwd<T: Scalar>(p: &[T], b: &BlockIdx, x: &[T], rows: usize, spec: &AttnSpec<'_, T>) -> (Vec<T>, BlockCache<T>) {
    let (h1, ln1) = layer_norm_fwd(p, b.ln1, x);
    let (a, attn) = attention_fwd(p, b.qkv, b.out, &h1, rows, spec);
    let x1: Vec<T> = x.iter().zip(&a).map(|(&u, &v)| u + v).collect();
    let (h2, ln2) = layer_norm_fwd(p, b.ln2, &x1);
    let pre_act = linear_fwd(p, b.fc1, &h2, rows);
    let act: Vec<T> = pre_act.iter().map(|&v| gelu(v)).collect();
    let m = linear_fwd(p, b.fc2, &act, rows);
    let y = x1.iter().zip(&m).map(|(&u, &v)| u + v).collect();
    (y, BlockCache { ln1, h1, attn, ln2, h2, pre_act, act })
}

pub fn block_bwd<T: Scalar>(
    p: &[T],
    g: &mut [T],
    b: &BlockIdx,
    cache: &BlockCache<T>,
    dy: &[T],
    rows: usize,
    spec: &AttnSpec<'_, T>,
) -> Vec<T> {
    let dact = linear_bwd(p, g, b.fc2, &cache.act, dy, rows, true).expect("dx requested");
    let dpre: Vec<T> = dact.iter().zip(&cache.pre_act).map(|(&d, &v)| d * gelu_grad(v)).collect();
    let dh2 = linear_bwd(p, g, b.fc1, &cache.h2, &dpre, rows, true).expect("dx requested");
    let mut dx1 = layer_norm_bwd(p, g, b.ln2, &cache.ln2, &dh2);
    dx1.iter_mut().zip(dy).for_each(|(a, &d)| *a += d);
    let dh1 = attention_bwd(p, g, b.qkv, b.out, &cache.h1, &cache.attn, &dx1, rows, spec);
    let mut dx = layer_norm_bwd(p, g, b.ln1, &cache.ln1, &dh1);
    dx.iter_mut().zip(&dx1).for_each(|(a, &d)| *a += d);
    dx
}
