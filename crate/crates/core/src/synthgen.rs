//! Synthetic tow-path scenarios.
//!
//! A tonal source moves along a piecewise-linear range trajectory. Every
//! channel receives the tone set with amplitude proportional to 1/range, a
//! Doppler shift driven by the radial speed, a range-dependent inter-channel
//! delay and a seeded per-tone phase shared by every channel. White Gaussian
//! noise and a stationary interferer can be mixed in. Ground truth is exact.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{ArrayTag, LabelTable, MultiChannelClip};

/// Nominal sound speed used by the Doppler relation.
pub const SOUND_SPEED_MPS: f64 = 1500.0;

/// Default pilot-tone set (low-frequency tones spanning 49–388 Hz).
pub const DEFAULT_TONES_HZ: [f64; 13] = [
    49.0, 64.0, 79.0, 94.0, 112.0, 130.0, 148.0, 166.0, 201.0, 235.0, 283.0, 338.0, 388.0,
];

/// Per-tone amplitude at the 1 km reference range.
const REFERENCE_AMPLITUDE: f64 = 0.05;

/// Inter-channel delay scale: the last channel lags the first by this many
/// samples when the source is 1 km away.
const DELAY_SAMPLES_AT_1KM: f64 = 12.0;

/// Upper bound on the end-to-end array delay, well inside a 64-lag window.
const MAX_ARRAY_DELAY_SAMPLES: f64 = 24.0;

/// Doppler shift of a tone for radial speed `v_mps` (positive when
/// approaching): `Δf = (v/c)·f`.
pub fn doppler_shift(f_hz: f64, v_mps: f64, c_mps: f64) -> f64 {
    v_mps / c_mps * f_hz
}

/// Intermediate waypoint of a two-leg trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub minute: f64,
    pub range_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interferer {
    pub tones_hz: Vec<f64>,
    /// Level relative to the source at 1 km.
    pub level_db: f64,
    pub range_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub duration_min: u32,
    pub sample_rate_hz: f64,
    pub tones_hz: Vec<f64>,
    /// Magnitude of the radial speed used for Doppler; the sign follows the
    /// trajectory (approaching positive).
    pub source_speed_mps: f64,
    pub range_start_km: f64,
    pub range_end_km: f64,
    /// Optional turning point; without it range is linear start → end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<Waypoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interferer: Option<Interferer>,
    /// Per-channel SNR referenced to the source at 1 km; `inf` disables noise.
    pub snr_db: f64,
    /// When set, the inter-channel delay pattern flips sign on receding legs,
    /// emulating the source passing to the other side of the array.
    #[serde(default)]
    pub bearing_flip: bool,
    pub channels: usize,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            duration_min: 75,
            sample_rate_hz: 1500.0,
            tones_hz: DEFAULT_TONES_HZ.to_vec(),
            source_speed_mps: 2.51,
            range_start_km: 9.0,
            range_end_km: 1.0,
            turn: None,
            interferer: None,
            snr_db: 10.0,
            bearing_flip: false,
            channels: 3,
            seed: 0,
        }
    }
}

impl Scenario {
    /// Approaching for the first 60 minutes, receding for the last 15.
    pub fn doppler_preset() -> Self {
        Self {
            range_start_km: 9.0,
            turn: Some(Waypoint {
                minute: 60.0,
                range_km: 1.0,
            }),
            range_end_km: 3.0,
            ..Self::default()
        }
    }

    /// 65-minute tow with a loud stationary interferer.
    pub fn interferer_preset() -> Self {
        Self {
            duration_min: 65,
            range_start_km: 8.0,
            range_end_km: 1.2,
            interferer: Some(Interferer {
                tones_hz: vec![57.0, 103.0, 187.0, 251.0],
                level_db: 12.0,
                range_km: 2.0,
            }),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz / 2.0;
        if self.duration_min == 0 {
            return Err(Error::Config("scenario.duration_min must be positive".into()));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Config("scenario.sample_rate_hz must be positive".into()));
        }
        if self.channels < 2 {
            return Err(Error::Config("scenario.channels must be at least 2".into()));
        }
        let tones = self
            .tones_hz
            .iter()
            .chain(self.interferer.iter().flat_map(|i| i.tones_hz.iter()));
        for &f in tones {
            if !(f > 0.0 && f < nyquist) {
                return Err(Error::Config(format!("tone {f} Hz outside (0, {nyquist})")));
            }
        }
        let mut ranges = vec![self.range_start_km, self.range_end_km];
        if let Some(t) = self.turn {
            if !(t.minute > 0.0 && t.minute < self.duration_min as f64) {
                return Err(Error::Config(format!("turn minute {} outside the tow", t.minute)));
            }
            ranges.push(t.range_km);
        }
        if let Some(i) = &self.interferer {
            ranges.push(i.range_km);
        }
        if ranges.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("all ranges must be positive".into()));
        }
        Ok(())
    }

    fn legs(&self) -> Vec<(f64, f64, f64, f64)> {
        let end_s = self.duration_min as f64 * 60.0;
        match self.turn {
            None => vec![(0.0, end_s, self.range_start_km, self.range_end_km)],
            Some(w) => {
                let t = w.minute * 60.0;
                vec![
                    (0.0, t, self.range_start_km, w.range_km),
                    (t, end_s, w.range_km, self.range_end_km),
                ]
            }
        }
    }

    /// Source range in km at time `t_s`.
    pub fn range_at(&self, t_s: f64) -> f64 {
        let legs = self.legs();
        let leg = legs
            .iter()
            .find(|l| t_s <= l.1)
            .unwrap_or(&legs[legs.len() - 1]);
        let (t0, t1, r0, r1) = *leg;
        r0 + (r1 - r0) * ((t_s - t0) / (t1 - t0)).clamp(0.0, 1.0)
    }

    /// Signed radial speed (approaching positive) at time `t_s`.
    fn radial_speed(&self, t_s: f64) -> f64 {
        let legs = self.legs();
        let leg = legs
            .iter()
            .find(|l| t_s < l.1)
            .unwrap_or(&legs[legs.len() - 1]);
        let dr = leg.3 - leg.2;
        if dr == 0.0 {
            0.0
        } else {
            -dr.signum() * self.source_speed_mps.abs()
        }
    }

    /// ∫₀ᵗ v dτ in metres for the signed radial speed.
    fn radial_travel_m(&self, t_s: f64) -> f64 {
        let mut acc = 0.0;
        for (t0, t1, _, _) in self.legs() {
            if t_s <= t0 {
                break;
            }
            let upto = t_s.min(t1);
            acc += self.radial_speed(t0) * (upto - t0);
        }
        acc
    }
}

fn channel_delay_samples(range_km: f64, channel: usize, channels: usize, sign: f64) -> f64 {
    let array = (DELAY_SAMPLES_AT_1KM / range_km).min(MAX_ARRAY_DELAY_SAMPLES);
    sign * array * channel as f64 / (channels - 1) as f64
}

/// Renders a scenario into a multi-channel clip and its per-minute label table.
pub fn synth_towpath(s: &Scenario) -> Result<(MultiChannelClip, LabelTable)> {
    s.validate()?;
    let fs = s.sample_rate_hz;
    let n_samples = (s.duration_min as f64 * 60.0 * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);

    // one wavefront: every channel sees the same tone phases, only delayed
    let phases: Vec<f64> = (0..s.tones_hz.len()).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let interferer_phases: Vec<Vec<f64>> = match &s.interferer {
        Some(i) => (0..s.channels)
            .map(|_| (0..i.tones_hz.len()).map(|_| rng.gen_range(0.0..2.0 * PI)).collect())
            .collect(),
        None => Vec::new(),
    };
    let noise_std = if s.snr_db.is_finite() {
        let p_ref = s.tones_hz.len() as f64 * REFERENCE_AMPLITUDE * REFERENCE_AMPLITUDE / 2.0;
        Some((p_ref / 10f64.powf(s.snr_db / 10.0)).sqrt())
    } else {
        None
    };

    // Per-sample trajectory quantities shared by every channel.
    let mut range = Vec::with_capacity(n_samples);
    let mut travel = Vec::with_capacity(n_samples);
    let mut bearing = Vec::with_capacity(n_samples);
    for n in 0..n_samples {
        let t = n as f64 / fs;
        range.push(s.range_at(t));
        travel.push(s.radial_travel_m(t));
        let receding = s.radial_speed(t) < 0.0;
        bearing.push(if s.bearing_flip && receding { -1.0 } else { 1.0 });
    }

    let mut samples = Vec::with_capacity(s.channels);
    for ch in 0..s.channels {
        let mut out = vec![0f32; n_samples];
        for (n, o) in out.iter_mut().enumerate() {
            let t = n as f64 / fs;
            let r = range[n];
            let amp = REFERENCE_AMPLITUDE / r;
            let delay_s = channel_delay_samples(r, ch, s.channels, bearing[n]) / fs;
            // Doppler: instantaneous frequency f(1 + v/c), integrated.
            let warped = t + travel[n] / SOUND_SPEED_MPS - delay_s;
            let mut v = 0.0;
            for (k, &f) in s.tones_hz.iter().enumerate() {
                v += amp * (2.0 * PI * f * warped + phases[k]).cos();
            }
            if let Some(i) = &s.interferer {
                let a = REFERENCE_AMPLITUDE * 10f64.powf(i.level_db / 20.0) / i.range_km;
                let d = -channel_delay_samples(i.range_km, ch, s.channels, 1.0) / fs;
                for (k, &f) in i.tones_hz.iter().enumerate() {
                    v += a * (2.0 * PI * f * (t - d) + interferer_phases[ch][k]).cos();
                }
            }
            *o = v as f32;
        }
        if let Some(std) = noise_std {
            for o in out.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *o += (std * z) as f32;
            }
        }
        samples.push(out);
    }

    let clip = MultiChannelClip::new(samples, fs, ArrayTag::Synth)?;
    let labels = LabelTable::new(
        (0..=s.duration_min)
            .map(|m| (m, s.range_at(m as f64 * 60.0)))
            .collect(),
    )?;
    Ok((clip, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doppler_examples() {
        assert!((doppler_shift(49.0, 2.51, SOUND_SPEED_MPS) - 0.0820).abs() < 1e-4);
        assert_eq!(doppler_shift(0.0, 2.51, SOUND_SPEED_MPS), 0.0);
        let neg = doppler_shift(200.0, -2.51, SOUND_SPEED_MPS);
        assert!((neg - (-0.334_666_666_666_666_7)).abs() < 1e-12);
        // upper end of the pilot-tone range
        assert!((doppler_shift(400.0, 2.51, SOUND_SPEED_MPS) - 0.669).abs() < 1e-3);
    }

    #[test]
    fn trajectory_with_turn() {
        let s = Scenario::doppler_preset();
        assert_eq!(s.range_at(0.0), 9.0);
        assert!((s.range_at(3600.0) - 1.0).abs() < 1e-12);
        assert!((s.range_at(4500.0) - 3.0).abs() < 1e-12);
        assert_eq!(s.radial_speed(10.0), 2.51);
        assert_eq!(s.radial_speed(3700.0), -2.51);
        assert!((s.radial_travel_m(3700.0) - (2.51 * 3600.0 - 2.51 * 100.0)).abs() < 1e-6);
    }

    #[test]
    fn label_table_has_one_row_per_minute() {
        let s = Scenario {
            duration_min: 3,
            ..Scenario::default()
        };
        let (clip, labels) = synth_towpath(&s).unwrap();
        assert_eq!(labels.rows().len(), 4);
        assert_eq!(clip.frames(), 3 * 60 * 1500);
        assert_eq!(clip.channels(), 3);
    }

    #[test]
    fn invalid_scenarios() {
        let tone = Scenario {
            tones_hz: vec![800.0],
            ..Scenario::default()
        };
        assert!(tone.validate().is_err());
        let range = Scenario {
            range_end_km: 0.0,
            ..Scenario::default()
        };
        assert!(range.validate().is_err());
    }
}
