//! Batched layer primitives with explicit backward passes. All tensors are
//! flat row-major slices; shapes travel as arguments.

use crate::real::Real;

pub(crate) const NORM_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn zeros<T: Real>(n: usize) -> Vec<T> {
    vec![T::zero(); n]
}

pub(crate) fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

// ---------------------------------------------------------------- conv 3x3

/// Same-padded 3×3 patches of one `[ci, h, w]` image as `[ci·9, h·w]`.
fn im2col3<T: Real>(x: &[T], ci: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for c in 0..ci {
        let img = &x[c * hw..(c + 1) * hw];
        for kh in 0..3 {
            for kw in 0..3 {
                let row = &mut cols[(c * 9 + kh * 3 + kw) * hw..(c * 9 + kh * 3 + kw + 1) * hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + kh as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &img[sy as usize * w..(sy as usize + 1) * w];
                    match kw {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`], accumulating into `gx`.
fn col2im3<T: Real>(cols: &[T], ci: usize, h: usize, w: usize, gx: &mut [T]) {
    let hw = h * w;
    for c in 0..ci {
        let img = &mut gx[c * hw..(c + 1) * hw];
        for kh in 0..3 {
            for kw in 0..3 {
                let row = &cols[(c * 9 + kh * 3 + kw) * hw..(c * 9 + kh * 3 + kw + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + kh as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut img[sy as usize * w..(sy as usize + 1) * w];
                    match kw {
                        0 => add_into(&mut dst[..w - 1], &src[1..]),
                        1 => add_into(dst, src),
                        _ => add_into(&mut dst[1..], &src[..w - 1]),
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvShape {
    pub batch: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
}

/// `y[b, o] = Σ_i W[o, i] ⋆ x[b, i] + bias[o]` with weights `[co, ci, 3, 3]`.
pub(crate) fn conv3x3_fwd<T: Real>(x: &[T], s: &ConvShape, weight: &[T], bias: &[T]) -> Vec<T> {
    let hw = s.h * s.w;
    let k = s.ci * 9;
    let mut cols = zeros(k * hw);
    let mut y = zeros(s.batch * s.co * hw);
    for b in 0..s.batch {
        im2col3(&x[b * s.ci * hw..(b + 1) * s.ci * hw], s.ci, s.h, s.w, &mut cols);
        let out = &mut y[b * s.co * hw..(b + 1) * s.co * hw];
        T::gemm(s.co, k, hw, T::one(), weight, k as isize, 1, &cols, hw as isize, 1, T::zero(), out, hw as isize, 1);
        for o in 0..s.co {
            out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bias[o]);
        }
    }
    y
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub(crate) fn conv3x3_bwd<T: Real>(x: &[T], s: &ConvShape, weight: &[T], gy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = s.h * s.w;
    let k = s.ci * 9;
    let mut cols = zeros(k * hw);
    let mut gcols = zeros(k * hw);
    let mut gx = zeros(s.batch * s.ci * hw);
    let mut gw = zeros(s.co * k);
    let mut gb = zeros(s.co);
    for b in 0..s.batch {
        let gyb = &gy[b * s.co * hw..(b + 1) * s.co * hw];
        for o in 0..s.co {
            gb[o] += gyb[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
        im2col3(&x[b * s.ci * hw..(b + 1) * s.ci * hw], s.ci, s.h, s.w, &mut cols);
        T::gemm(s.co, hw, k, T::one(), gyb, hw as isize, 1, &cols, 1, hw as isize, T::one(), &mut gw, k as isize, 1);
        T::gemm(k, s.co, hw, T::one(), weight, 1, k as isize, gyb, hw as isize, 1, T::zero(), &mut gcols, hw as isize, 1);
        col2im3(&gcols, s.ci, s.h, s.w, &mut gx[b * s.ci * hw..(b + 1) * s.ci * hw]);
    }
    (gx, gw, gb)
}

/// Pointwise channel mixing `y[b] = W x[b]`, weights `[co, ci]`, no bias.
pub(crate) fn conv1x1_fwd<T: Real>(x: &[T], s: &ConvShape, weight: &[T]) -> Vec<T> {
    let hw = s.h * s.w;
    let mut y = zeros(s.batch * s.co * hw);
    for b in 0..s.batch {
        T::gemm(
            s.co, s.ci, hw, T::one(), weight, s.ci as isize, 1,
            &x[b * s.ci * hw..(b + 1) * s.ci * hw], hw as isize, 1,
            T::zero(), &mut y[b * s.co * hw..(b + 1) * s.co * hw], hw as isize, 1,
        );
    }
    y
}

pub(crate) fn conv1x1_bwd<T: Real>(x: &[T], s: &ConvShape, weight: &[T], gy: &[T]) -> (Vec<T>, Vec<T>) {
    let hw = s.h * s.w;
    let mut gx = zeros(s.batch * s.ci * hw);
    let mut gw = zeros(s.co * s.ci);
    for b in 0..s.batch {
        let gyb = &gy[b * s.co * hw..(b + 1) * s.co * hw];
        let xb = &x[b * s.ci * hw..(b + 1) * s.ci * hw];
        T::gemm(s.co, hw, s.ci, T::one(), gyb, hw as isize, 1, xb, 1, hw as isize, T::one(), &mut gw, s.ci as isize, 1);
        T::gemm(
            s.ci, s.co, hw, T::one(), weight, 1, s.ci as isize, gyb, hw as isize, 1,
            T::zero(), &mut gx[b * s.ci * hw..(b + 1) * s.ci * hw], hw as isize, 1,
        );
    }
    (gx, gw)
}

// --------------------------------------------------------------- batchnorm

pub(crate) struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
    train: bool,
}

/// Per-channel standardization over `[batch, c, s]`. Train mode uses batch
/// statistics; eval mode uses the supplied running statistics.
pub(crate) fn bn_fwd<T: Real>(
    x: &[T],
    batch: usize,
    c: usize,
    s: usize,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> (Vec<T>, BnCache<T>) {
    let n = batch * s;
    let eps = T::of(NORM_EPS);
    let (mean, var) = match running {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let mut mean = zeros(c);
            let mut var = zeros(c);
            for ch in 0..c {
                let mut acc = T::zero();
                for b in 0..batch {
                    acc += x[(b * c + ch) * s..(b * c + ch + 1) * s].iter().copied().sum::<T>();
                }
                let m = acc / T::of(n as f64);
                let mut sq = T::zero();
                for b in 0..batch {
                    sq += x[(b * c + ch) * s..(b * c + ch + 1) * s]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>();
                }
                mean[ch] = m;
                var[ch] = sq / T::of(n as f64);
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = zeros(x.len());
    let mut y = zeros(x.len());
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    let cache = BnCache {
        xhat,
        inv_std,
        mean,
        var,
        count: n,
        train: running.is_none(),
    };
    (y, cache)
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub(crate) fn bn_bwd<T: Real>(cache: &BnCache<T>, gy: &[T], batch: usize, c: usize, s: usize, gamma: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gg = zeros(c);
    let mut gbeta = zeros(c);
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                gg[ch] += gy[i] * cache.xhat[i];
                gbeta[ch] += gy[i];
            }
        }
    }
    let n = T::of(cache.count as f64);
    let mut gx = zeros(gy.len());
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            let k = gamma[ch] * cache.inv_std[ch];
            for i in off..off + s {
                gx[i] = if cache.train {
                    k * (gy[i] - gbeta[ch] / n - cache.xhat[i] * gg[ch] / n)
                } else {
                    k * gy[i]
                };
            }
        }
    }
    (gx, gg, gbeta)
}

// --------------------------------------------------------------- layernorm

pub(crate) struct LnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Normalizes each length-`d` row.
pub(crate) fn ln_fwd<T: Real>(x: &[T], d: usize, gamma: &[T], beta: &[T]) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / d;
    let eps = T::of(NORM_EPS);
    let mut xhat = zeros(x.len());
    let mut y = zeros(x.len());
    let mut inv_std = zeros(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / T::of(d as f64);
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(d as f64);
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

pub(crate) fn ln_bwd<T: Real>(cache: &LnCache<T>, gy: &[T], d: usize, gamma: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = gy.len() / d;
    let mut gx = zeros(gy.len());
    let mut gg = zeros(d);
    let mut gb = zeros(d);
    let dn = T::of(d as f64);
    for r in 0..rows {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..d {
            let i = r * d + j;
            gg[j] += gy[i] * cache.xhat[i];
            gb[j] += gy[i];
            let gh = gy[i] * gamma[j];
            sum_g += gh;
            sum_gx += gh * cache.xhat[i];
        }
        for j in 0..d {
            let i = r * d + j;
            let gh = gy[i] * gamma[j];
            gx[i] = cache.inv_std[r] * (gh - sum_g / dn - cache.xhat[i] * sum_gx / dn);
        }
    }
    (gx, gg, gb)
}

// ------------------------------------------------------------ elementwise

pub(crate) fn silu_fwd<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub(crate) fn silu_bwd<T: Real>(x: &[T], gy: &[T]) -> Vec<T> {
    x.iter()
        .zip(gy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

/// `[rows, 2d] → [rows, d]`: first half gated by the sigmoid of the second.
pub(crate) fn glu_fwd<T: Real>(x: &[T], d: usize) -> Vec<T> {
    let rows = x.len() / (2 * d);
    let mut y = zeros(rows * d);
    for r in 0..rows {
        for j in 0..d {
            y[r * d + j] = x[r * 2 * d + j] * sigmoid(x[r * 2 * d + d + j]);
        }
    }
    y
}

pub(crate) fn glu_bwd<T: Real>(x: &[T], d: usize, gy: &[T]) -> Vec<T> {
    let rows = x.len() / (2 * d);
    let mut gx = zeros(x.len());
    for r in 0..rows {
        for j in 0..d {
            let a = x[r * 2 * d + j];
            let s = sigmoid(x[r * 2 * d + d + j]);
            let g = gy[r * d + j];
            gx[r * 2 * d + j] = g * s;
            gx[r * 2 * d + d + j] = g * a * s * (T::one() - s);
        }
    }
    gx
}

/// Inverted dropout. Returns the scaled mask, or `None` when inactive.
pub(crate) fn dropout_mask<T: Real, R: rand::Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Option<Vec<T>> {
    if p <= 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - p));
    Some((0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect())
}

pub(crate) fn apply_mask<T: Real>(x: &mut [T], mask: Option<&Vec<T>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
    }
}

// ----------------------------------------------------------------- pooling

/// 2×2 max pooling with floor semantics over `[planes, h, w]`; returns the
/// pooled tensor and the flat argmax index for every output cell.
pub(crate) fn maxpool_fwd<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = zeros(planes * ho * wo);
    let mut idx = vec![0u32; planes * ho * wo];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * i + di) * w + 2 * j + dj;
                    if x[k] > x[best] {
                        best = k;
                    }
                }
                let o = (p * ho + i) * wo + j;
                y[o] = x[best];
                idx[o] = best as u32;
            }
        }
    }
    (y, idx)
}

pub(crate) fn maxpool_bwd<T: Real>(idx: &[u32], gy: &[T], input_len: usize) -> Vec<T> {
    let mut gx = zeros(input_len);
    for (&i, &g) in idx.iter().zip(gy) {
        gx[i as usize] += g;
    }
    gx
}

// ------------------------------------------------------------------ linear

/// `y = x Wᵀ + b` for `x [rows, din]`, `W [dout, din]`.
pub(crate) fn linear_fwd<T: Real>(x: &[T], din: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let dout = bias.len();
    let rows = x.len() / din;
    let mut y = zeros(rows * dout);
    T::gemm(rows, din, dout, T::one(), x, din as isize, 1, weight, 1, din as isize, T::zero(), &mut y, dout as isize, 1);
    for r in 0..rows {
        add_into(&mut y[r * dout..(r + 1) * dout], bias);
    }
    y
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub(crate) fn linear_bwd<T: Real>(x: &[T], din: usize, weight: &[T], gy: &[T], dout: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / din;
    let mut gx = zeros(rows * din);
    let mut gw = zeros(dout * din);
    let mut gb = zeros(dout);
    T::gemm(rows, dout, din, T::one(), gy, dout as isize, 1, weight, din as isize, 1, T::zero(), &mut gx, din as isize, 1);
    T::gemm(dout, rows, din, T::one(), gy, 1, dout as isize, x, din as isize, 1, T::zero(), &mut gw, din as isize, 1);
    for r in 0..rows {
        add_into(&mut gb, &gy[r * dout..(r + 1) * dout]);
    }
    (gx, gw, gb)
}

// --------------------------------------------------------- depthwise conv

/// Same-padded depthwise temporal convolution over `[batch, c, t]` with
/// weights `[c, k]`.
pub(crate) fn dwconv_fwd<T: Real>(x: &[T], batch: usize, c: usize, t: usize, weight: &[T], bias: &[T], k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let mut y = zeros(x.len());
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * t;
            let wr = &weight[ch * k..(ch + 1) * k];
            for i in 0..t {
                let mut acc = bias[ch];
                for (j, &wv) in wr.iter().enumerate() {
                    let src = i as isize + j as isize - pad;
                    if src >= 0 && (src as usize) < t {
                        acc += wv * x[off + src as usize];
                    }
                }
                y[off + i] = acc;
            }
        }
    }
    y
}

pub(crate) fn dwconv_bwd<T: Real>(x: &[T], batch: usize, c: usize, t: usize, weight: &[T], k: usize, gy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let pad = (k / 2) as isize;
    let mut gx = zeros(x.len());
    let mut gw = zeros(c * k);
    let mut gb = zeros(c);
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * t;
            for i in 0..t {
                let g = gy[off + i];
                gb[ch] += g;
                for j in 0..k {
                    let src = i as isize + j as isize - pad;
                    if src >= 0 && (src as usize) < t {
                        gw[ch * k + j] += g * x[off + src as usize];
                        gx[off + src as usize] += g * weight[ch * k + j];
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// `[batch, a, b] → [batch, b, a]`.
pub(crate) fn transpose12<T: Real>(x: &[T], batch: usize, a: usize, b: usize) -> Vec<T> {
    let mut y = zeros(x.len());
    for n in 0..batch {
        for i in 0..a {
            for j in 0..b {
                y[n * a * b + j * a + i] = x[n * a * b + i * b + j];
            }
        }
    }
    y
}

// --------------------------------------------------------------- attention

pub(crate) struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
}

/// Scaled dot-product attention over `[batch, t, d]` projections split into
/// `heads` heads; returns the concatenated head outputs `[batch, t, d]`.
pub(crate) fn attention_fwd<T: Real>(q: Vec<T>, k: Vec<T>, v: Vec<T>, batch: usize, t: usize, d: usize, heads: usize) -> (Vec<T>, AttnCache<T>) {
    let dk = d / heads;
    let scale = T::one() / T::of(dk as f64).sqrt();
    let mut probs = zeros(batch * heads * t * t);
    let mut out = zeros(batch * t * d);
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
            for i in 0..t {
                let qi = &q[(b * t + i) * d + h * dk..(b * t + i) * d + (h + 1) * dk];
                let row = &mut p[i * t..(i + 1) * t];
                for j in 0..t {
                    let kj = &k[(b * t + j) * d + h * dk..(b * t + j) * d + (h + 1) * dk];
                    row[j] = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
                }
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - mx).exp();
                    z += *r;
                }
                row.iter_mut().for_each(|r| *r /= z);
                let o = &mut out[(b * t + i) * d + h * dk..(b * t + i) * d + (h + 1) * dk];
                for j in 0..t {
                    let vj = &v[(b * t + j) * d + h * dk..(b * t + j) * d + (h + 1) * dk];
                    for (oo, &vv) in o.iter_mut().zip(vj) {
                        *oo += row[j] * vv;
                    }
                }
            }
        }
    }
    (out, AttnCache { q, k, v, probs })
}

/// Returns `(grad_q, grad_k, grad_v)`.
pub(crate) fn attention_bwd<T: Real>(c: &AttnCache<T>, gout: &[T], batch: usize, t: usize, d: usize, heads: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dk = d / heads;
    let scale = T::one() / T::of(dk as f64).sqrt();
    let mut gq = zeros(c.q.len());
    let mut gk = zeros(c.k.len());
    let mut gv = zeros(c.v.len());
    let mut gp = zeros(t);
    for b in 0..batch {
        for h in 0..heads {
            let p = &c.probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
            let head = |x: usize| (b * t + x) * d + h * dk;
            for i in 0..t {
                let go = &gout[head(i)..head(i) + dk];
                let row = &p[i * t..(i + 1) * t];
                for j in 0..t {
                    let vj = &c.v[head(j)..head(j) + dk];
                    gp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    for (x, &g) in gv[head(j)..head(j) + dk].iter_mut().zip(go) {
                        *x += row[j] * g;
                    }
                }
                let dot: T = row.iter().zip(&gp).map(|(&a, &b)| a * b).sum();
                for j in 0..t {
                    let gs = row[j] * (gp[j] - dot) * scale;
                    for x in 0..dk {
                        gq[head(i) + x] += gs * c.k[head(j) + x];
                        gk[head(j) + x] += gs * c.q[head(i) + x];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
