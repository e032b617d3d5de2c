#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uwloc_core::net::InputShape;
use uwloc_core::FeaturePair;

pub fn shape(mel_channels: usize, gcc_pairs: usize, bins: usize, frames: usize) -> InputShape {
    InputShape {
        mel_channels,
        mel_bins: bins,
        gcc_pairs,
        gcc_bins: bins,
        frames,
    }
}

/// Random feature pairs whose target depends on the input mean.
pub fn random_pairs(n: usize, s: InputShape, seed: u64) -> Vec<FeaturePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|index| {
            let level: f32 = rng.gen_range(-1.0..1.0);
            let logmel = (0..s.mel_channels * s.frames * s.mel_bins)
                .map(|_| level + rng.gen_range(-1.0f32..1.0))
                .collect();
            let gcc = (0..s.gcc_pairs * s.frames * s.gcc_bins)
                .map(|_| rng.gen_range(-1.0f32..1.0))
                .collect();
            FeaturePair {
                index,
                range_km: 5.0 + 3.0 * level,
                channels: s.mel_channels,
                frames: s.frames,
                n_mels: s.mel_bins,
                pairs: s.gcc_pairs,
                lags: s.gcc_bins,
                logmel,
                gcc,
            }
        })
        .collect()
}
