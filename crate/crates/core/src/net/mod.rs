//! Dual-branch range regressor.
//!
//! Each branch (log-mel, GCC-PHAT) is a stack of rescaled residual
//! convolution blocks. Corresponding 3×3 kernels in the two branches share
//! their central 2×2 sub-window (rows 1..=2, cols 1..=2); the other five taps
//! are private to each branch. Branch outputs are concatenated per frame,
//! projected to the model width, passed through Conformer blocks, averaged
//! over time and mapped to one range value by an MLP head.

mod checkpoint;
mod layers;
mod model;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, checkpoint_bytes, parse_checkpoint};
pub use model::{backward, branch_activations, forward_eval, forward_train, input_shape_of, BatchInput, ForwardCache, Gradients};
pub use params::{build_model, param_count, param_specs, NetParams, ParamSpec, Tensor};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shapes of the two branch inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub mel_channels: usize,
    pub mel_bins: usize,
    pub gcc_pairs: usize,
    pub gcc_bins: usize,
    pub frames: usize,
}

impl InputShape {
    pub fn is_unset(&self) -> bool {
        *self == InputShape::default()
    }
}

/// Architecture hyperparameters plus the input shape they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub conv_blocks: usize,
    /// Filters of the first block; each further block doubles them.
    pub base_filters: usize,
    pub dropout_p: f64,
    pub conformer_blocks: usize,
    pub model_dim: usize,
    pub attn_heads: usize,
    pub ff_expansion: usize,
    pub conv_kernel_temporal: usize,
    /// Hidden width of the head; 0 maps the pooled features straight to the
    /// output neuron.
    pub head_hidden: usize,
    pub residual_scale_init: f64,
    /// Tie the central 2×2 taps of corresponding kernels across branches.
    pub share_centers: bool,
    /// Include the GCC-PHAT branch.
    pub use_gcc: bool,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "InputShape::is_unset")]
    pub input: InputShape,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            conv_blocks: 3,
            base_filters: 4,
            dropout_p: 0.2,
            conformer_blocks: 2,
            model_dim: 64,
            attn_heads: 4,
            ff_expansion: 4,
            conv_kernel_temporal: 7,
            head_hidden: 128,
            residual_scale_init: 0.5,
            share_centers: true,
            use_gcc: true,
            seed: 0,
            input: InputShape::default(),
        }
    }
}

/// Which input branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Mel,
    Gcc,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Mel => "mel",
            Branch::Gcc => "gcc",
        }
    }
}

/// Static layout of one convolution block in one branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockLayout {
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    /// Leading input channels of conv1 whose centers are shared.
    pub tied1: usize,
    /// Same for conv2.
    pub tied2: usize,
}

impl NetConfig {
    /// A deliberately small configuration for gradient checks and overfit
    /// tests (well under 5k parameters for 2-channel, 8×8 inputs).
    pub fn micro() -> Self {
        Self {
            conv_blocks: 1,
            base_filters: 2,
            dropout_p: 0.0,
            conformer_blocks: 1,
            model_dim: 8,
            attn_heads: 2,
            ff_expansion: 2,
            conv_kernel_temporal: 3,
            head_hidden: 8,
            ..Self::default()
        }
    }

    pub fn with_input(mut self, input: InputShape) -> Self {
        self.input = input;
        self
    }

    pub fn branches(&self) -> Vec<Branch> {
        if self.use_gcc {
            vec![Branch::Mel, Branch::Gcc]
        } else {
            vec![Branch::Mel]
        }
    }

    pub(crate) fn branch_input(&self, b: Branch) -> (usize, usize) {
        match b {
            Branch::Mel => (self.input.mel_channels, self.input.mel_bins),
            Branch::Gcc => (self.input.gcc_pairs, self.input.gcc_bins),
        }
    }

    pub(crate) fn sharing_active(&self) -> bool {
        self.share_centers && self.use_gcc
    }

    pub(crate) fn block_layouts(&self, b: Branch) -> Vec<BlockLayout> {
        let (mut ci, mut w) = self.branch_input(b);
        let mut h = self.input.frames;
        let (mut other_ci, _) = self.branch_input(match b {
            Branch::Mel => Branch::Gcc,
            Branch::Gcc => Branch::Mel,
        });
        let mut out = Vec::with_capacity(self.conv_blocks);
        for k in 0..self.conv_blocks {
            let co = self.base_filters << k;
            let (tied1, tied2) = if self.sharing_active() {
                (ci.min(other_ci), co)
            } else {
                (0, 0)
            };
            out.push(BlockLayout { ci, co, h, w, tied1, tied2 });
            ci = co;
            other_ci = co;
            h /= 2;
            w /= 2;
        }
        out
    }

    /// `(channels, frames, bins)` leaving a branch.
    pub(crate) fn branch_output(&self, b: Branch) -> (usize, usize, usize) {
        let (c, w) = self.branch_input(b);
        let k = self.conv_blocks;
        let c = if k == 0 { c } else { self.base_filters << (k - 1) };
        (c, self.input.frames >> k, w >> k)
    }

    pub(crate) fn fused_width(&self) -> usize {
        self.branches()
            .into_iter()
            .map(|b| {
                let (c, _, w) = self.branch_output(b);
                c * w
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let i = &self.input;
        if i.mel_channels == 0 || i.mel_bins == 0 || i.frames == 0 {
            return bad("net input shape is unset or empty".into());
        }
        if self.use_gcc && (i.gcc_pairs == 0 || i.gcc_bins == 0) {
            return bad("net.use_gcc needs a non-empty gcc input".into());
        }
        if self.conv_blocks > 0 && self.base_filters == 0 {
            return bad("net.base_filters must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("net.dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.model_dim == 0 || self.attn_heads == 0 || self.model_dim % self.attn_heads != 0 {
            return bad(format!(
                "net.model_dim {} must be a positive multiple of net.attn_heads {}",
                self.model_dim, self.attn_heads
            ));
        }
        if self.conformer_blocks > 0 && (self.ff_expansion == 0 || self.conv_kernel_temporal % 2 == 0) {
            return bad("conformer needs ff_expansion > 0 and an odd temporal kernel".into());
        }
        for b in self.branches() {
            let (_, t, w) = self.branch_output(b);
            if t == 0 || w == 0 {
                let (_, w0) = self.branch_input(b);
                return bad(format!(
                    "{} conv blocks pool a {}x{} {} input below one cell",
                    self.conv_blocks,
                    self.input.frames,
                    w0,
                    b.name()
                ));
            }
        }
        Ok(())
    }
}
