//! Forward and reverse passes of the dual-branch regressor.

use std::collections::BTreeMap;

use rand::RngCore;

use super::layers::*;
use super::params::{block_key, conformer_key, conv_key, shared_key, NetParams, CENTER, RING};
use super::{Branch, InputShape};
use crate::agc::{agc_in_place, AgcParams};
use crate::error::{Error, Result};
use crate::features::FeaturePair;
use crate::real::Real;

const BN_MOMENTUM: f64 = 0.1;

/// Packed batch: `mel [batch, mel_channels, frames, mel_bins]` and
/// `gcc [batch, gcc_pairs, frames, gcc_bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInput<T> {
    pub batch: usize,
    pub shape: InputShape,
    pub mel: Vec<T>,
    pub gcc: Vec<T>,
}

impl<T: Real> BatchInput<T> {
    /// Packs feature pairs, applying the gain stage to each branch tensor of
    /// each segment independently when `agc` is given.
    pub fn from_pairs(pairs: &[&FeaturePair], agc: Option<&AgcParams>) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let shape = input_shape_of(first);
        let mut mel = Vec::with_capacity(pairs.len() * first.logmel.len());
        let mut gcc = Vec::with_capacity(pairs.len() * first.gcc.len());
        for p in pairs {
            if !p.same_shape(first) {
                return Err(Error::Shape(format!(
                    "segment {} shape differs from segment {}",
                    p.index, first.index
                )));
            }
            let mut m: Vec<T> = p.logmel.iter().map(|&v| T::of(v as f64)).collect();
            let mut g: Vec<T> = p.gcc.iter().map(|&v| T::of(v as f64)).collect();
            if let Some(a) = agc {
                agc_in_place(&mut m, a)?;
                agc_in_place(&mut g, a)?;
            }
            mel.extend(m);
            gcc.extend(g);
        }
        Ok(Self {
            batch: pairs.len(),
            shape,
            mel,
            gcc,
        })
    }
}

/// Network input shape implied by a feature pair.
pub fn input_shape_of(p: &FeaturePair) -> InputShape {
    InputShape {
        mel_channels: p.channels,
        mel_bins: p.n_mels,
        gcc_pairs: p.pairs,
        gcc_bins: p.lags,
        frames: p.frames,
    }
}

/// Gradients keyed like the learnable parameters.
pub type Gradients<T> = BTreeMap<String, Vec<T>>;

struct BlockCache<T> {
    x: Vec<T>,
    w1: Vec<T>,
    n1: Vec<T>,
    a1: Vec<T>,
    bn1: BnCache<T>,
    w2: Vec<T>,
    bn2: BnCache<T>,
    n2: Vec<T>,
    pool_idx: Vec<u32>,
    pool_in_len: usize,
    mask: Option<Vec<T>>,
}

struct FfnCache<T> {
    ln: LnCache<T>,
    xl: Vec<T>,
    h_pre: Vec<T>,
    h: Vec<T>,
    mask_h: Option<Vec<T>>,
    mask_out: Option<Vec<T>>,
}

struct AttnModCache<T> {
    ln: LnCache<T>,
    xl: Vec<T>,
    attn: AttnCache<T>,
    o: Vec<T>,
    mask: Option<Vec<T>>,
}

struct ConvModCache<T> {
    ln: LnCache<T>,
    xl: Vec<T>,
    p1: Vec<T>,
    gt: Vec<T>,
    bn: BnCache<T>,
    bn_out: Vec<T>,
    st: Vec<T>,
    mask: Option<Vec<T>>,
}

struct ConformerCache<T> {
    ffn1: FfnCache<T>,
    attn: AttnModCache<T>,
    conv: ConvModCache<T>,
    ffn2: FfnCache<T>,
    final_ln: LnCache<T>,
}

/// Intermediates of a training-mode forward pass, consumed by [`backward`].
pub struct ForwardCache<T> {
    batch: usize,
    branches: Vec<(Branch, Vec<BlockCache<T>>)>,
    tokens: Vec<T>,
    conformers: Vec<ConformerCache<T>>,
    pooled: Vec<T>,
    head_pre: Vec<T>,
    head_act: Vec<T>,
    bn_stats: Vec<(String, Vec<T>, Vec<T>, usize)>,
}

struct Pass<'a, 'r, T: Real> {
    p: &'a NetParams<T>,
    train: bool,
    rng: Option<&'r mut dyn RngCore>,
    bn_stats: Vec<(String, Vec<T>, Vec<T>, usize)>,
}

fn finite<T: Real>(x: &[T], layer: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activations of {layer}")))
    }
}

impl<T: Real> Pass<'_, '_, T> {
    fn mask(&mut self, n: usize) -> Option<Vec<T>> {
        let p = self.p.config.dropout_p;
        match (self.train, self.rng.as_deref_mut()) {
            (true, Some(rng)) => dropout_mask(n, p, rng),
            _ => None,
        }
    }

    fn bn(&mut self, prefix: &str, x: &[T], batch: usize, c: usize, s: usize) -> (Vec<T>, BnCache<T>) {
        let gamma = self.p.param(&format!("{prefix}.gamma"));
        let beta = self.p.param(&format!("{prefix}.beta"));
        if self.train {
            let (y, cache) = bn_fwd(x, batch, c, s, gamma, beta, None);
            self.bn_stats
                .push((prefix.to_string(), cache.mean.clone(), cache.var.clone(), cache.count));
            (y, cache)
        } else {
            let rm = self.p.buffer(&format!("{prefix}.running_mean"));
            let rv = self.p.buffer(&format!("{prefix}.running_var"));
            bn_fwd(x, batch, c, s, gamma, beta, Some((rm, rv)))
        }
    }

    fn linear(&self, prefix: &str, x: &[T], din: usize) -> Vec<T> {
        linear_fwd(
            x,
            din,
            self.p.param(&format!("{prefix}.weight")),
            self.p.param(&format!("{prefix}.bias")),
        )
    }

    fn ln(&self, prefix: &str, x: &[T], d: usize) -> (Vec<T>, LnCache<T>) {
        ln_fwd(
            x,
            d,
            self.p.param(&format!("{prefix}.gamma")),
            self.p.param(&format!("{prefix}.beta")),
        )
    }

    fn block(&mut self, b: Branch, k: usize, x: Vec<T>, batch: usize) -> Result<(Vec<T>, BlockCache<T>)> {
        let l = self.p.config.block_layouts(b)[k];
        let s1 = ConvShape { batch, ci: l.ci, co: l.co, h: l.h, w: l.w };
        let w1 = self.p.conv_weight(b, k, 1);
        let z1 = conv3x3_fwd(&x, &s1, &w1, self.p.param(&conv_key(b, k, 1, "bias")));
        let (n1, bn1) = self.bn(&block_key(b, k, "bn1"), &z1, batch, l.co, l.h * l.w);
        let a1 = silu_fwd(&n1);
        let s2 = ConvShape { ci: l.co, ..s1 };
        let w2 = self.p.conv_weight(b, k, 2);
        let z2 = conv3x3_fwd(&a1, &s2, &w2, self.p.param(&conv_key(b, k, 2, "bias")));
        let (n2, bn2) = self.bn(&block_key(b, k, "bn2"), &z2, batch, l.co, l.h * l.w);
        let mut r = if l.ci == l.co {
            x.clone()
        } else {
            conv1x1_fwd(&x, &s1, self.p.param(&block_key(b, k, "skip.weight")))
        };
        let lambda = self.p.param(&block_key(b, k, "res_scale"))[0];
        r.iter_mut().zip(&n2).for_each(|(v, &f)| *v += lambda * f);
        let (mut out, pool_idx) = maxpool_fwd(&r, batch * l.co, l.h, l.w);
        let mask = self.mask(out.len());
        apply_mask(&mut out, mask.as_ref());
        finite(&out, &block_key(b, k, "out"))?;
        Ok((
            out,
            BlockCache {
                x,
                w1,
                n1,
                a1,
                bn1,
                w2,
                bn2,
                n2,
                pool_idx,
                pool_in_len: r.len(),
                mask,
            },
        ))
    }

    fn ffn(&mut self, prefix: &str, x: &[T], d: usize) -> (Vec<T>, FfnCache<T>) {
        let hid = d * self.p.config.ff_expansion;
        let (xl, ln) = self.ln(&format!("{prefix}.ln"), x, d);
        let h_pre = self.linear(&format!("{prefix}.fc1"), &xl, d);
        let mut h = silu_fwd(&h_pre);
        let mask_h = self.mask(h.len());
        apply_mask(&mut h, mask_h.as_ref());
        let mut y = self.linear(&format!("{prefix}.fc2"), &h, hid);
        let mask_out = self.mask(y.len());
        apply_mask(&mut y, mask_out.as_ref());
        (y, FfnCache { ln, xl, h_pre, h, mask_h, mask_out })
    }

    fn attn(&mut self, i: usize, x: &[T], batch: usize, t: usize, d: usize) -> (Vec<T>, AttnModCache<T>) {
        let (xl, ln) = self.ln(&conformer_key(i, "attn.ln"), x, d);
        let q = self.linear(&conformer_key(i, "attn.q"), &xl, d);
        let k = self.linear(&conformer_key(i, "attn.k"), &xl, d);
        let v = self.linear(&conformer_key(i, "attn.v"), &xl, d);
        let (o, attn) = attention_fwd(q, k, v, batch, t, d, self.p.config.attn_heads);
        let mut y = self.linear(&conformer_key(i, "attn.out"), &o, d);
        let mask = self.mask(y.len());
        apply_mask(&mut y, mask.as_ref());
        (y, AttnModCache { ln, xl, attn, o, mask })
    }

    fn conv_module(&mut self, i: usize, x: &[T], batch: usize, t: usize, d: usize) -> (Vec<T>, ConvModCache<T>) {
        let k = self.p.config.conv_kernel_temporal;
        let (xl, ln) = self.ln(&conformer_key(i, "conv.ln"), x, d);
        let p1 = self.linear(&conformer_key(i, "conv.pw1"), &xl, d);
        let g = glu_fwd(&p1, d);
        let gt = transpose12(&g, batch, t, d);
        let dw = dwconv_fwd(
            &gt,
            batch,
            d,
            t,
            self.p.param(&conformer_key(i, "conv.dw.weight")),
            self.p.param(&conformer_key(i, "conv.dw.bias")),
            k,
        );
        let (bn_out, bn) = self.bn(&conformer_key(i, "conv.bn"), &dw, batch, d, t);
        let s = silu_fwd(&bn_out);
        let st = transpose12(&s, batch, d, t);
        let mut y = self.linear(&conformer_key(i, "conv.pw2"), &st, d);
        let mask = self.mask(y.len());
        apply_mask(&mut y, mask.as_ref());
        (y, ConvModCache { ln, xl, p1, gt, bn, bn_out, st, mask })
    }

    fn conformer(&mut self, i: usize, x: Vec<T>, batch: usize, t: usize) -> Result<(Vec<T>, ConformerCache<T>)> {
        let d = self.p.config.model_dim;
        let half = T::of(0.5);
        let (y, ffn1) = self.ffn(&conformer_key(i, "ffn1"), &x, d);
        let x1: Vec<T> = x.iter().zip(&y).map(|(&a, &b)| a + half * b).collect();
        let (y, attn) = self.attn(i, &x1, batch, t, d);
        let x2: Vec<T> = x1.iter().zip(&y).map(|(&a, &b)| a + b).collect();
        let (y, conv) = self.conv_module(i, &x2, batch, t, d);
        let x3: Vec<T> = x2.iter().zip(&y).map(|(&a, &b)| a + b).collect();
        let (y, ffn2) = self.ffn(&conformer_key(i, "ffn2"), &x3, d);
        let x4: Vec<T> = x3.iter().zip(&y).map(|(&a, &b)| a + half * b).collect();
        let (out, final_ln) = self.ln(&conformer_key(i, "final_ln"), &x4, d);
        finite(&out, &conformer_key(i, "out"))?;
        Ok((out, ConformerCache { ffn1, attn, conv, ffn2, final_ln }))
    }
}

fn run<T: Real>(
    p: &NetParams<T>,
    input: &BatchInput<T>,
    train: bool,
    rng: Option<&mut dyn RngCore>,
) -> Result<(Vec<T>, ForwardCache<T>)> {
    let cfg = &p.config;
    if input.shape != cfg.input {
        return Err(Error::Shape(format!(
            "batch shape {:?} does not match model input {:?}",
            input.shape, cfg.input
        )));
    }
    let batch = input.batch;
    let expect_mel = batch * cfg.input.mel_channels * cfg.input.frames * cfg.input.mel_bins;
    let expect_gcc = batch * cfg.input.gcc_pairs * cfg.input.frames * cfg.input.gcc_bins;
    if input.mel.len() != expect_mel || (cfg.use_gcc && input.gcc.len() != expect_gcc) {
        return Err(Error::Shape("batch tensor sizes disagree with its shape".into()));
    }
    let mut pass = Pass {
        p,
        train,
        rng,
        bn_stats: Vec::new(),
    };

    let mut branch_caches = Vec::new();
    let mut branch_outs = Vec::new();
    for b in cfg.branches() {
        let mut x = match b {
            Branch::Mel => input.mel.clone(),
            Branch::Gcc => input.gcc.clone(),
        };
        let mut caches = Vec::with_capacity(cfg.conv_blocks);
        for k in 0..cfg.conv_blocks {
            let (y, c) = pass.block(b, k, x, batch)?;
            caches.push(c);
            x = y;
        }
        branch_caches.push((b, caches));
        branch_outs.push((b, x));
    }

    // [batch, c, t, w] per branch → tokens [batch·t, Σ c·w]
    let t = cfg.input.frames >> cfg.conv_blocks;
    let din = cfg.fused_width();
    let mut tokens = vec![T::zero(); batch * t * din];
    let mut offset = 0;
    for (b, out) in &branch_outs {
        let (c, _, w) = cfg.branch_output(*b);
        for n in 0..batch {
            for ch in 0..c {
                for f in 0..t {
                    let src = &out[((n * c + ch) * t + f) * w..((n * c + ch) * t + f + 1) * w];
                    let dst = (n * t + f) * din + offset + ch * w;
                    tokens[dst..dst + w].copy_from_slice(src);
                }
            }
        }
        offset += c * w;
    }

    let d = cfg.model_dim;
    let mut x = pass.linear("trunk.proj", &tokens, din);
    finite(&x, "trunk.proj")?;
    let mut conformers = Vec::with_capacity(cfg.conformer_blocks);
    for i in 0..cfg.conformer_blocks {
        let (y, c) = pass.conformer(i, x, batch, t)?;
        conformers.push(c);
        x = y;
    }

    let mut pooled = vec![T::zero(); batch * d];
    let inv_t = T::one() / T::of(t as f64);
    for n in 0..batch {
        for f in 0..t {
            for j in 0..d {
                pooled[n * d + j] += x[(n * t + f) * d + j] * inv_t;
            }
        }
    }

    let (head_pre, head_act, out) = if cfg.head_hidden > 0 {
        let pre = pass.linear("head.fc1", &pooled, d);
        let act = silu_fwd(&pre);
        let out = pass.linear("head.out", &act, cfg.head_hidden);
        (pre, act, out)
    } else {
        (Vec::new(), Vec::new(), pass.linear("head.out", &pooled, d))
    };
    finite(&out, "head.out")?;

    let bn_stats = std::mem::take(&mut pass.bn_stats);
    Ok((
        out,
        ForwardCache {
            batch,
            branches: branch_caches,
            tokens,
            conformers,
            pooled,
            head_pre,
            head_act,
            bn_stats,
        },
    ))
}

/// Training-mode forward: batch statistics, dropout drawn from `rng`.
pub fn forward_train<T: Real>(
    p: &NetParams<T>,
    input: &BatchInput<T>,
    rng: &mut dyn RngCore,
) -> Result<(Vec<T>, ForwardCache<T>)> {
    run(p, input, true, Some(rng))
}

/// Deterministic inference with running statistics and no dropout.
pub fn forward_eval<T: Real>(p: &NetParams<T>, input: &BatchInput<T>) -> Result<Vec<T>> {
    Ok(run(p, input, false, None)?.0)
}

impl<T: Real> ForwardCache<T> {
    /// Folds this pass's batch statistics into the running statistics.
    pub fn update_running_stats(&self, p: &mut NetParams<T>) {
        let m = T::of(BN_MOMENTUM);
        for (prefix, mean, var, count) in &self.bn_stats {
            let unbias = if *count > 1 {
                T::of(*count as f64 / (*count - 1) as f64)
            } else {
                T::one()
            };
            let rm = p.buffer_mut(&format!("{prefix}.running_mean"));
            rm.iter_mut().zip(mean).for_each(|(r, &v)| *r = (T::one() - m) * *r + m * v);
            let rv = p.buffer_mut(&format!("{prefix}.running_var"));
            rv.iter_mut()
                .zip(var)
                .for_each(|(r, &v)| *r = (T::one() - m) * *r + m * v * unbias);
        }
    }
}

struct Grads<'a, T: Real> {
    p: &'a NetParams<T>,
    g: Gradients<T>,
}

impl<'a, T: Real> Grads<'a, T> {
    fn acc(&mut self, key: &str, grad: &[T]) {
        let slot = self
            .g
            .get_mut(key)
            .unwrap_or_else(|| panic!("gradient for unknown parameter {key}"));
        add_into(slot, grad);
    }

    fn linear(&mut self, prefix: &str, x: &[T], din: usize, gy: &[T], dout: usize) -> Vec<T> {
        let (gx, gw, gb) = linear_bwd(x, din, self.p.param(&format!("{prefix}.weight")), gy, dout);
        self.acc(&format!("{prefix}.weight"), &gw);
        self.acc(&format!("{prefix}.bias"), &gb);
        gx
    }

    fn ln(&mut self, prefix: &str, c: &LnCache<T>, gy: &[T], d: usize) -> Vec<T> {
        let (gx, gg, gb) = ln_bwd(c, gy, d, self.p.param(&format!("{prefix}.gamma")));
        self.acc(&format!("{prefix}.gamma"), &gg);
        self.acc(&format!("{prefix}.beta"), &gb);
        gx
    }

    fn bn(&mut self, prefix: &str, c: &BnCache<T>, gy: &[T], batch: usize, ch: usize, s: usize) -> Vec<T> {
        let (gx, gg, gb) = bn_bwd(c, gy, batch, ch, s, self.p.param(&format!("{prefix}.gamma")));
        self.acc(&format!("{prefix}.gamma"), &gg);
        self.acc(&format!("{prefix}.beta"), &gb);
        gx
    }

    /// Splits an effective-kernel gradient into ring, private and shared parts.
    fn conv_weight(&mut self, b: Branch, k: usize, conv: usize, gw: &[T]) {
        let l = self.p.config.block_layouts(b)[k];
        let (ci, tied) = if conv == 1 { (l.ci, l.tied1) } else { (l.co, l.tied2) };
        let mut ring = vec![T::zero(); l.co * ci * 5];
        let mut shared = vec![T::zero(); l.co * tied * 4];
        let mut private = vec![T::zero(); l.co * (ci - tied) * 4];
        for o in 0..l.co {
            for i in 0..ci {
                let kern = &gw[(o * ci + i) * 9..(o * ci + i + 1) * 9];
                for (r, &(y, x)) in RING.iter().enumerate() {
                    ring[(o * ci + i) * 5 + r] = kern[y * 3 + x];
                }
                let dst = if i < tied {
                    &mut shared[(o * tied + i) * 4..(o * tied + i + 1) * 4]
                } else {
                    let np = ci - tied;
                    &mut private[(o * np + i - tied) * 4..(o * np + i - tied + 1) * 4]
                };
                for (c, &(y, x)) in CENTER.iter().enumerate() {
                    dst[c] = kern[y * 3 + x];
                }
            }
        }
        self.acc(&conv_key(b, k, conv, "ring"), &ring);
        if tied > 0 {
            self.acc(&shared_key(k, conv), &shared);
        }
        if ci > tied {
            self.acc(&conv_key(b, k, conv, "center"), &private);
        }
    }

    fn block(&mut self, b: Branch, k: usize, c: &BlockCache<T>, mut gy: Vec<T>, batch: usize) -> Vec<T> {
        let l = self.p.config.block_layouts(b)[k];
        let hw = l.h * l.w;
        apply_mask(&mut gy, c.mask.as_ref());
        let gr = maxpool_bwd(&c.pool_idx, &gy, c.pool_in_len);
        let lambda = self.p.param(&block_key(b, k, "res_scale"))[0];
        let glambda: T = gr.iter().zip(&c.n2).map(|(&a, &b)| a * b).sum();
        self.acc(&block_key(b, k, "res_scale"), &[glambda]);
        let gn2: Vec<T> = gr.iter().map(|&v| v * lambda).collect();
        let gz2 = self.bn(&block_key(b, k, "bn2"), &c.bn2, &gn2, batch, l.co, hw);
        let s1 = ConvShape { batch, ci: l.ci, co: l.co, h: l.h, w: l.w };
        let s2 = ConvShape { ci: l.co, ..s1 };
        let (ga1, gw2, gb2) = conv3x3_bwd(&c.a1, &s2, &c.w2, &gz2);
        self.conv_weight(b, k, 2, &gw2);
        self.acc(&conv_key(b, k, 2, "bias"), &gb2);
        let gn1 = silu_bwd(&c.n1, &ga1);
        let gz1 = self.bn(&block_key(b, k, "bn1"), &c.bn1, &gn1, batch, l.co, hw);
        let (mut gx, gw1, gb1) = conv3x3_bwd(&c.x, &s1, &c.w1, &gz1);
        self.conv_weight(b, k, 1, &gw1);
        self.acc(&conv_key(b, k, 1, "bias"), &gb1);
        if l.ci == l.co {
            add_into(&mut gx, &gr);
        } else {
            let key = block_key(b, k, "skip.weight");
            let (gskip, gw) = conv1x1_bwd(&c.x, &s1, self.p.param(&key), &gr);
            self.acc(&key, &gw);
            add_into(&mut gx, &gskip);
        }
        gx
    }

    fn ffn(&mut self, prefix: &str, c: &FfnCache<T>, mut gy: Vec<T>, d: usize) -> Vec<T> {
        let hid = d * self.p.config.ff_expansion;
        apply_mask(&mut gy, c.mask_out.as_ref());
        let mut gh = self.linear(&format!("{prefix}.fc2"), &c.h, hid, &gy, d);
        apply_mask(&mut gh, c.mask_h.as_ref());
        let gpre = silu_bwd(&c.h_pre, &gh);
        let gxl = self.linear(&format!("{prefix}.fc1"), &c.xl, d, &gpre, hid);
        self.ln(&format!("{prefix}.ln"), &c.ln, &gxl, d)
    }

    fn attn(&mut self, i: usize, c: &AttnModCache<T>, mut gy: Vec<T>, batch: usize, t: usize, d: usize) -> Vec<T> {
        apply_mask(&mut gy, c.mask.as_ref());
        let go = self.linear(&conformer_key(i, "attn.out"), &c.o, d, &gy, d);
        let (gq, gk, gv) = attention_bwd(&c.attn, &go, batch, t, d, self.p.config.attn_heads);
        let mut gxl = self.linear(&conformer_key(i, "attn.q"), &c.xl, d, &gq, d);
        add_into(&mut gxl, &self.linear(&conformer_key(i, "attn.k"), &c.xl, d, &gk, d));
        add_into(&mut gxl, &self.linear(&conformer_key(i, "attn.v"), &c.xl, d, &gv, d));
        self.ln(&conformer_key(i, "attn.ln"), &c.ln, &gxl, d)
    }

    fn conv_module(&mut self, i: usize, c: &ConvModCache<T>, mut gy: Vec<T>, batch: usize, t: usize, d: usize) -> Vec<T> {
        let k = self.p.config.conv_kernel_temporal;
        apply_mask(&mut gy, c.mask.as_ref());
        let gst = self.linear(&conformer_key(i, "conv.pw2"), &c.st, d, &gy, d);
        let gs = transpose12(&gst, batch, t, d);
        let gbn = silu_bwd(&c.bn_out, &gs);
        let gdw = self.bn(&conformer_key(i, "conv.bn"), &c.bn, &gbn, batch, d, t);
        let (ggt, gw, gb) = dwconv_bwd(&c.gt, batch, d, t, self.p.param(&conformer_key(i, "conv.dw.weight")), k, &gdw);
        self.acc(&conformer_key(i, "conv.dw.weight"), &gw);
        self.acc(&conformer_key(i, "conv.dw.bias"), &gb);
        let gg = transpose12(&ggt, batch, d, t);
        let gp1 = glu_bwd(&c.p1, d, &gg);
        let gxl = self.linear(&conformer_key(i, "conv.pw1"), &c.xl, d, &gp1, 2 * d);
        self.ln(&conformer_key(i, "conv.ln"), &c.ln, &gxl, d)
    }

    fn conformer(&mut self, i: usize, c: &ConformerCache<T>, gy: &[T], batch: usize, t: usize) -> Vec<T> {
        let d = self.p.config.model_dim;
        let half = T::of(0.5);
        let g4 = self.ln(&conformer_key(i, "final_ln"), &c.final_ln, gy, d);
        let mut g3 = g4.clone();
        let gf2 = self.ffn(&conformer_key(i, "ffn2"), &c.ffn2, g4.iter().map(|&v| v * half).collect(), d);
        add_into(&mut g3, &gf2);
        let mut g2 = g3.clone();
        add_into(&mut g2, &self.conv_module(i, &c.conv, g3, batch, t, d));
        let mut g1 = g2.clone();
        add_into(&mut g1, &self.attn(i, &c.attn, g2, batch, t, d));
        let mut g0 = g1.clone();
        let gf1 = self.ffn(&conformer_key(i, "ffn1"), &c.ffn1, g1.iter().map(|&v| v * half).collect(), d);
        add_into(&mut g0, &gf1);
        g0
    }
}

/// Reverse pass: gradient of `Σ grad_out[n]·prediction[n]` with respect to
/// every learnable tensor. Shared centers receive the sum of both branches'
/// contributions.
pub fn backward<T: Real>(p: &NetParams<T>, cache: &ForwardCache<T>, grad_out: &[T]) -> Result<Gradients<T>> {
    let cfg = &p.config;
    let batch = cache.batch;
    if grad_out.len() != batch {
        return Err(Error::Shape(format!(
            "grad_out has {} entries for a batch of {batch}",
            grad_out.len()
        )));
    }
    let mut g = Grads {
        p,
        g: p.params
            .iter()
            .map(|(k, v)| (k.clone(), vec![T::zero(); v.data.len()]))
            .collect(),
    };
    let d = cfg.model_dim;
    let gpooled = if cfg.head_hidden > 0 {
        let gact = g.linear("head.out", &cache.head_act, cfg.head_hidden, grad_out, 1);
        let gpre = silu_bwd(&cache.head_pre, &gact);
        g.linear("head.fc1", &cache.pooled, d, &gpre, cfg.head_hidden)
    } else {
        g.linear("head.out", &cache.pooled, d, grad_out, 1)
    };

    let t = cfg.input.frames >> cfg.conv_blocks;
    let inv_t = T::one() / T::of(t as f64);
    let mut gx = vec![T::zero(); batch * t * d];
    for n in 0..batch {
        for f in 0..t {
            for j in 0..d {
                gx[(n * t + f) * d + j] = gpooled[n * d + j] * inv_t;
            }
        }
    }
    for (i, c) in cache.conformers.iter().enumerate().rev() {
        gx = g.conformer(i, c, &gx, batch, t);
    }
    let din = cfg.fused_width();
    let gtokens = g.linear("trunk.proj", &cache.tokens, din, &gx, d);

    let mut offset = 0;
    for (b, blocks) in &cache.branches {
        let (c, _, w) = cfg.branch_output(*b);
        let mut gy = vec![T::zero(); batch * c * t * w];
        for n in 0..batch {
            for ch in 0..c {
                for f in 0..t {
                    let src = (n * t + f) * din + offset + ch * w;
                    gy[((n * c + ch) * t + f) * w..((n * c + ch) * t + f + 1) * w]
                        .copy_from_slice(&gtokens[src..src + w]);
                }
            }
        }
        offset += c * w;
        for (k, bc) in blocks.iter().enumerate().rev() {
            gy = g.block(*b, k, bc, gy, batch);
        }
    }
    Ok(g.g)
}

/// Eval-mode output of one convolution branch, `[batch, c, t, w]`, before
/// fusion. Useful for inspecting what each branch sees.
pub fn branch_activations<T: Real>(p: &NetParams<T>, input: &BatchInput<T>, b: Branch) -> Result<Vec<T>> {
    if input.shape != p.config.input {
        return Err(Error::Shape("batch shape does not match model input".into()));
    }
    if b == Branch::Gcc && !p.config.use_gcc {
        return Err(Error::InvalidInput("model has no gcc branch".into()));
    }
    let mut pass = Pass {
        p,
        train: false,
        rng: None,
        bn_stats: Vec::new(),
    };
    let mut x = match b {
        Branch::Mel => input.mel.clone(),
        Branch::Gcc => input.gcc.clone(),
    };
    for k in 0..p.config.conv_blocks {
        x = pass.block(b, k, x, input.batch)?.0;
    }
    Ok(x)
}
