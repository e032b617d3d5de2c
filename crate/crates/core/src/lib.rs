//! Underwater acoustic range estimation.
//!
//! The pipeline runs from multi-channel recordings (or synthetic tow paths)
//! through log-mel and GCC-PHAT features, an adaptive gain control stage and a
//! dual-branch convolution + Conformer regressor that predicts source range in
//! kilometres. The [`learn`] module holds the fold protocol, training loop,
//! fine-tuning and metrics.

pub mod agc;
pub mod error;
pub mod features;
pub mod learn;
pub mod net;
pub mod real;
pub mod signal_io;
pub mod synthgen;

pub use agc::AgcParams;
pub use error::{Error, Result};
pub use features::{FeatureConfig, FeaturePair, MelConfig, StftConfig};
pub use learn::{Hyper, MetricsReport};
pub use net::{NetConfig, NetParams};
pub use real::Real;
pub use signal_io::{ArrayTag, LabelTable, LabeledSegment, MultiChannelClip};
pub use synthgen::Scenario;
