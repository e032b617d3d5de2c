//! Fixtures shared by the benchmarks.

use uwloc_core::features::featurize_all;
use uwloc_core::signal_io::{attach_labels, segment_clip};
use uwloc_core::synthgen::synth_towpath;
use uwloc_core::{FeatureConfig, FeaturePair, LabeledSegment, Scenario};

/// `n` labeled one-second segments from a short synthetic tow.
pub fn segments(n: usize) -> Vec<LabeledSegment> {
    let minutes = n.div_ceil(60).max(1) as u32;
    let s = Scenario {
        duration_min: minutes,
        range_start_km: 5.0,
        range_end_km: 5.0 - 0.15 * minutes as f64,
        ..Scenario::default()
    };
    let (clip, labels) = synth_towpath(&s).expect("synthetic scenario");
    let mut segs = attach_labels(segment_clip(&clip).expect("segments"), &labels).expect("labels");
    segs.truncate(n);
    segs
}

pub fn features(n: usize) -> Vec<FeaturePair> {
    featurize_all(&segments(n), &FeatureConfig::default()).expect("features")
}
