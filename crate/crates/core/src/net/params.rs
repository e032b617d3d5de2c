use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Branch, NetConfig};
use crate::error::Result;
use crate::real::Real;

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Uniform(f64),
    Const(f64),
}

/// Declared parameter or buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub key: String,
    pub shape: Vec<usize>,
    /// Buffers (running statistics) are stored but not learned.
    pub trainable: bool,
    pub(crate) init: Init,
}

/// Ring taps of a 3×3 kernel that are never shared, as (row, col).
pub(crate) const RING: [(usize, usize); 5] = [(0, 0), (0, 1), (0, 2), (1, 0), (2, 0)];
/// Central 2×2 taps that may be shared across branches.
pub(crate) const CENTER: [(usize, usize); 4] = [(1, 1), (1, 2), (2, 1), (2, 2)];

pub(crate) fn conv_key(b: Branch, block: usize, conv: usize, part: &str) -> String {
    format!("branch.{}.block{block}.conv{conv}.{part}", b.name())
}

pub(crate) fn shared_key(block: usize, conv: usize) -> String {
    format!("shared.block{block}.conv{conv}.center")
}

pub(crate) fn block_key(b: Branch, block: usize, part: &str) -> String {
    format!("branch.{}.block{block}.{part}", b.name())
}

pub(crate) fn conformer_key(i: usize, part: &str) -> String {
    format!("trunk.conformer{i}.{part}")
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn weight(&mut self, key: String, shape: &[usize], fan_in: usize) {
        self.0.push(ParamSpec {
            key,
            shape: shape.to_vec(),
            trainable: true,
            init: Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt()),
        });
    }

    fn constant(&mut self, key: String, shape: &[usize], v: f64, trainable: bool) {
        self.0.push(ParamSpec {
            key,
            shape: shape.to_vec(),
            trainable,
            init: Init::Const(v),
        });
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        self.weight(format!("{prefix}.weight"), &[dout, din], din);
        self.constant(format!("{prefix}.bias"), &[dout], 0.0, true);
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.constant(format!("{prefix}.gamma"), &[d], 1.0, true);
        self.constant(format!("{prefix}.beta"), &[d], 0.0, true);
    }

    fn running(&mut self, prefix: &str, d: usize) {
        self.constant(format!("{prefix}.running_mean"), &[d], 0.0, false);
        self.constant(format!("{prefix}.running_var"), &[d], 1.0, false);
    }
}

/// Every tensor the configuration declares, in construction order.
pub fn param_specs(cfg: &NetConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut s = Specs(Vec::new());
    let branches = cfg.branches();
    for k in 0..cfg.conv_blocks {
        // shared centers first so both branches see them at the same spot
        if cfg.sharing_active() {
            let l = cfg.block_layouts(Branch::Mel)[k];
            s.weight(shared_key(k, 1), &[l.co, l.tied1, 4], l.ci * 9);
            s.weight(shared_key(k, 2), &[l.co, l.tied2, 4], l.co * 9);
        }
        for &b in &branches {
            let l = cfg.block_layouts(b)[k];
            for (conv, ci, tied) in [(1, l.ci, l.tied1), (2, l.co, l.tied2)] {
                s.weight(conv_key(b, k, conv, "ring"), &[l.co, ci, 5], ci * 9);
                if ci > tied {
                    s.weight(conv_key(b, k, conv, "center"), &[l.co, ci - tied, 4], ci * 9);
                }
                s.constant(conv_key(b, k, conv, "bias"), &[l.co], 0.0, true);
                let bn = block_key(b, k, &format!("bn{conv}"));
                s.norm(&bn, l.co);
                s.running(&bn, l.co);
            }
            if l.ci != l.co {
                s.weight(block_key(b, k, "skip.weight"), &[l.co, l.ci], l.ci);
            }
            s.constant(block_key(b, k, "res_scale"), &[1], cfg.residual_scale_init, true);
        }
    }
    let d = cfg.model_dim;
    s.linear("trunk.proj", cfg.fused_width(), d);
    for i in 0..cfg.conformer_blocks {
        let hid = d * cfg.ff_expansion;
        for ffn in ["ffn1", "ffn2"] {
            s.norm(&conformer_key(i, &format!("{ffn}.ln")), d);
            s.linear(&conformer_key(i, &format!("{ffn}.fc1")), d, hid);
            s.linear(&conformer_key(i, &format!("{ffn}.fc2")), hid, d);
        }
        s.norm(&conformer_key(i, "attn.ln"), d);
        for p in ["q", "k", "v", "out"] {
            s.linear(&conformer_key(i, &format!("attn.{p}")), d, d);
        }
        s.norm(&conformer_key(i, "conv.ln"), d);
        s.linear(&conformer_key(i, "conv.pw1"), d, 2 * d);
        let k = cfg.conv_kernel_temporal;
        s.weight(conformer_key(i, "conv.dw.weight"), &[d, k], k);
        s.constant(conformer_key(i, "conv.dw.bias"), &[d], 0.0, true);
        s.norm(&conformer_key(i, "conv.bn"), d);
        s.running(&conformer_key(i, "conv.bn"), d);
        s.linear(&conformer_key(i, "conv.pw2"), d, d);
        s.norm(&conformer_key(i, "final_ln"), d);
    }
    if cfg.head_hidden > 0 {
        s.linear("head.fc1", d, cfg.head_hidden);
        s.linear("head.out", cfg.head_hidden, 1);
    } else {
        s.linear("head.out", d, 1);
    }
    // BTreeMap storage must not silently merge keys
    let mut seen = std::collections::BTreeSet::new();
    for p in &s.0 {
        assert!(seen.insert(p.key.clone()), "duplicate parameter key {}", p.key);
    }
    Ok(s.0)
}

/// Number of learnable scalars; each shared tensor is counted once.
pub fn param_count(cfg: &NetConfig) -> Result<usize> {
    Ok(param_specs(cfg)?
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.shape.iter().product::<usize>())
        .sum())
}

/// Learnable tensors, running statistics and the configuration that built them.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T = f32> {
    pub config: NetConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

/// Builds and deterministically initializes a model from `cfg.seed`.
pub fn build_model<T: Real>(cfg: &NetConfig) -> Result<NetParams<T>> {
    let specs = param_specs(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data: Vec<T> = match spec.init {
            Init::Uniform(bound) => (0..n)
                .map(|_| T::of(rng.gen_range(-bound..bound) as f32 as f64))
                .collect(),
            Init::Const(v) => vec![T::of(v); n],
        };
        let t = Tensor {
            shape: spec.shape,
            data,
        };
        if spec.trainable {
            params.insert(spec.key, t);
        } else {
            buffers.insert(spec.key, t);
        }
    }
    Ok(NetParams {
        config: cfg.clone(),
        params,
        buffers,
    })
}

impl<T: Real> NetParams<T> {
    pub fn param(&self, key: &str) -> &[T] {
        &self
            .params
            .get(key)
            .unwrap_or_else(|| panic!("missing parameter {key}"))
            .data
    }

    pub(crate) fn buffer(&self, key: &str) -> &[T] {
        &self
            .buffers
            .get(key)
            .unwrap_or_else(|| panic!("missing buffer {key}"))
            .data
    }

    pub(crate) fn buffer_mut(&mut self, key: &str) -> &mut [T] {
        &mut self
            .buffers
            .get_mut(key)
            .unwrap_or_else(|| panic!("missing buffer {key}"))
            .data
    }

    /// Stored learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .values()
            .chain(self.buffers.values())
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Effective `[co, ci, 3, 3]` kernel of one branch convolution, assembled
    /// from its private ring, private centers and the shared centers.
    pub fn conv_weight(&self, b: Branch, block: usize, conv: usize) -> Vec<T> {
        let l = self.config.block_layouts(b)[block];
        let (ci, tied) = if conv == 1 { (l.ci, l.tied1) } else { (l.co, l.tied2) };
        let ring = self.param(&conv_key(b, block, conv, "ring"));
        let shared = (tied > 0).then(|| self.param(&shared_key(block, conv)));
        let private = (ci > tied).then(|| self.param(&conv_key(b, block, conv, "center")));
        let mut w = vec![T::zero(); l.co * ci * 9];
        for o in 0..l.co {
            for i in 0..ci {
                let kern = &mut w[(o * ci + i) * 9..(o * ci + i + 1) * 9];
                for (r, &(y, x)) in RING.iter().enumerate() {
                    kern[y * 3 + x] = ring[(o * ci + i) * 5 + r];
                }
                let center = if i < tied {
                    &shared.unwrap()[(o * tied + i) * 4..(o * tied + i + 1) * 4]
                } else {
                    let np = ci - tied;
                    let j = i - tied;
                    &private.unwrap()[(o * np + j) * 4..(o * np + j + 1) * 4]
                };
                for (c, &(y, x)) in CENTER.iter().enumerate() {
                    kern[y * 3 + x] = center[c];
                }
            }
        }
        w
    }
}
