//! Multi-channel audio ingestion, one-second segmentation and nearest-minute
//! range labeling.
//!
//! Two on-disk audio formats are understood: RIFF WAV (16/24/32-bit integer
//! or 32-bit float PCM) and a raw channel-interleaved little-endian `f32`
//! stream `<name>.f32` with a `<name>.meta` text sidecar carrying
//! `rate=<hz>`, `channels=<n>` and `array=<tag>` lines.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Receiving array geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArrayTag {
    #[serde(rename = "VLA")]
    Vla,
    #[serde(rename = "TLA")]
    Tla,
    #[serde(rename = "HLA_N")]
    HlaN,
    #[serde(rename = "HLA_S")]
    HlaS,
    #[serde(rename = "SYNTH")]
    Synth,
}

impl fmt::Display for ArrayTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ArrayTag::Vla => "VLA",
            ArrayTag::Tla => "TLA",
            ArrayTag::HlaN => "HLA_N",
            ArrayTag::HlaS => "HLA_S",
            ArrayTag::Synth => "SYNTH",
        };
        f.write_str(s)
    }
}

impl FromStr for ArrayTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "VLA" => Ok(ArrayTag::Vla),
            "TLA" => Ok(ArrayTag::Tla),
            "HLA_N" => Ok(ArrayTag::HlaN),
            "HLA_S" => Ok(ArrayTag::HlaS),
            "SYNTH" => Ok(ArrayTag::Synth),
            other => Err(Error::Format(format!("unknown array tag {other:?}"))),
        }
    }
}

/// Synchronized multi-channel waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelClip {
    samples: Vec<Vec<f32>>,
    sample_rate_hz: f64,
    array_tag: ArrayTag,
}

impl MultiChannelClip {
    /// Builds a clip from per-channel sample vectors. All channels must have
    /// the same length and there must be at least two of them.
    pub fn new(samples: Vec<Vec<f32>>, sample_rate_hz: f64, array_tag: ArrayTag) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InsufficientChannels(samples.len()));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::Audio(format!("invalid sample rate {sample_rate_hz}")));
        }
        let len = samples[0].len();
        if samples.iter().any(|c| c.len() != len) {
            return Err(Error::Audio("channels have unequal lengths".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
            array_tag,
        })
    }

    pub fn samples(&self) -> &[Vec<f32>] {
        &self.samples
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn frames(&self) -> usize {
        self.samples[0].len()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn array_tag(&self) -> ArrayTag {
        self.array_tag
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.sample_rate_hz
    }
}

/// Per-minute ground-truth ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTable {
    rows: Vec<(u32, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    minute: u32,
    range_km: f64,
}

impl LabelTable {
    pub fn new(rows: Vec<(u32, f64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Labels("table is empty".into()));
        }
        for w in rows.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Labels(format!(
                    "minutes not strictly increasing at minute {}",
                    w[1].0
                )));
            }
        }
        if let Some(&(m, r)) = rows.iter().find(|(_, r)| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Labels(format!("range {r} at minute {m} is not positive")));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[(u32, f64)] {
        &self.rows
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Labels(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Labels(e.to_string()))?
            .clone();
        if headers.iter().map(str::trim).collect::<Vec<_>>() != ["minute", "range_km"] {
            return Err(Error::Labels(format!(
                "expected header `minute,range_km`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for rec in reader.deserialize::<LabelRow>() {
            let rec = rec.map_err(|e| Error::Labels(e.to_string()))?;
            rows.push((rec.minute, rec.range_km));
        }
        Self::new(rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer =
            csv::Writer::from_path(path).map_err(|e| Error::Labels(format!("{}: {e}", path.display())))?;
        for &(minute, range_km) in &self.rows {
            writer
                .serialize(LabelRow { minute, range_km })
                .map_err(|e| Error::Labels(e.to_string()))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    /// Range of the row whose minute is nearest to `time_s`. A time exactly
    /// halfway between two minutes takes the earlier one.
    pub fn range_at(&self, time_s: f64) -> Option<f64> {
        let first = self.rows[0].0 as f64 * 60.0;
        let last = self.rows[self.rows.len() - 1].0 as f64 * 60.0;
        if !(time_s >= first - 30.0 && time_s <= last + 30.0) {
            return None;
        }
        let mut best = self.rows[0];
        let mut best_dist = (time_s - first).abs();
        for &row in &self.rows[1..] {
            let dist = (time_s - row.0 as f64 * 60.0).abs();
            // strict comparison keeps the earlier minute on ties
            if dist < best_dist {
                best = row;
                best_dist = dist;
            }
        }
        Some(best.1)
    }
}

/// One-second multi-channel segment before labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub index: usize,
    pub samples: Vec<Vec<f32>>,
    pub sample_rate_hz: f64,
}

impl Segment {
    /// Time of the segment center in seconds from clip start.
    pub fn center_s(&self) -> f64 {
        self.index as f64 + 0.5
    }
}

/// A one-second segment with its ground-truth range.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSegment {
    pub index: usize,
    pub samples: Vec<Vec<f32>>,
    pub sample_rate_hz: f64,
    pub range_km: f64,
}

impl LabeledSegment {
    pub fn channels(&self) -> usize {
        self.samples.len()
    }
}

fn samples_per_second(rate: f64) -> Result<usize> {
    let n = rate.round();
    if (rate - n).abs() > 1e-9 || n < 1.0 {
        return Err(Error::InvalidInput(format!(
            "sample rate {rate} Hz is not a whole number of samples per second"
        )));
    }
    Ok(n as usize)
}

/// Cuts a clip into non-overlapping one-second segments. A trailing partial
/// second is dropped.
pub fn segment_clip(clip: &MultiChannelClip) -> Result<Vec<Segment>> {
    let fs = samples_per_second(clip.sample_rate_hz)?;
    let count = clip.frames() / fs;
    if count == 0 {
        return Err(Error::InvalidInput(format!(
            "clip of {:.3} s is shorter than one second",
            clip.duration_s()
        )));
    }
    Ok((0..count)
        .map(|k| Segment {
            index: k,
            samples: clip
                .samples
                .iter()
                .map(|ch| ch[k * fs..(k + 1) * fs].to_vec())
                .collect(),
            sample_rate_hz: clip.sample_rate_hz,
        })
        .collect())
}

/// Labels each segment with the range of the minute nearest its center time.
pub fn attach_labels(segments: Vec<Segment>, table: &LabelTable) -> Result<Vec<LabeledSegment>> {
    segments
        .into_iter()
        .map(|seg| {
            let t = seg.center_s();
            let range_km = table.range_at(t).ok_or(Error::OutsideLabelCoverage {
                index: seg.index,
                time_s: t,
            })?;
            Ok(LabeledSegment {
                index: seg.index,
                samples: seg.samples,
                sample_rate_hz: seg.sample_rate_hz,
                range_km,
            })
        })
        .collect()
}

/// Loads a WAV file or a raw `.f32` stream with its `.meta` sidecar.
pub fn load_multichannel_audio(path: &Path, expected_rate: Option<f64>) -> Result<MultiChannelClip> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let clip = match ext.as_deref() {
        Some("wav") => load_wav(path)?,
        Some("f32") => load_raw(path)?,
        _ => {
            return Err(Error::Audio(format!(
                "{}: unsupported extension (expected .wav or .f32)",
                path.display()
            )))
        }
    };
    if let Some(expected) = expected_rate {
        if (clip.sample_rate_hz - expected).abs() > 1e-9 {
            return Err(Error::RateMismatch {
                found: clip.sample_rate_hz,
                expected,
            });
        }
    }
    Ok(clip)
}

fn deinterleave(interleaved: Vec<f32>, channels: usize) -> Vec<Vec<f32>> {
    let frames = interleaved.len() / channels;
    let mut out = vec![Vec::with_capacity(frames); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (ch, &v) in out.iter_mut().zip(frame) {
            ch.push(v);
        }
    }
    out
}

fn load_wav(path: &Path) -> Result<MultiChannelClip> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        e => Error::Audio(format!("{}: {e}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels < 2 {
        return Err(Error::InsufficientChannels(channels));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::Audio(format!(
                    "unsupported float width {}",
                    spec.bits_per_sample
                )));
            }
            reader
                .into_samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Audio(e.to_string()))?
        }
        hound::SampleFormat::Int => {
            let bits = spec.bits_per_sample;
            if !matches!(bits, 16 | 24 | 32) {
                return Err(Error::Audio(format!("unsupported integer width {bits}")));
            }
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Audio(e.to_string()))?
        }
    };
    let tag = read_meta(&path.with_extension("meta"))
        .ok()
        .and_then(|m| m.array)
        .unwrap_or(ArrayTag::Synth);
    MultiChannelClip::new(
        deinterleave(interleaved, channels),
        spec.sample_rate as f64,
        tag,
    )
}

#[derive(Debug, Default)]
struct RawMeta {
    rate: Option<f64>,
    channels: Option<usize>,
    array: Option<ArrayTag>,
}

fn read_meta(path: &Path) -> Result<RawMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut meta = RawMeta::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad sidecar line {line:?}")))?;
        let value = value.trim();
        match key.trim() {
            "rate" => {
                meta.rate = Some(
                    value
                        .parse()
                        .map_err(|_| Error::Format(format!("bad rate {value:?}")))?,
                )
            }
            "channels" => {
                meta.channels = Some(
                    value
                        .parse()
                        .map_err(|_| Error::Format(format!("bad channel count {value:?}")))?,
                )
            }
            "array" => meta.array = Some(value.parse()?),
            other => return Err(Error::Format(format!("unknown sidecar key {other:?}"))),
        }
    }
    Ok(meta)
}

/// Sidecar path belonging to a raw `.f32` file.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("meta")
}

fn load_raw(path: &Path) -> Result<MultiChannelClip> {
    let meta = read_meta(&sidecar_path(path))?;
    let rate = meta
        .rate
        .ok_or_else(|| Error::Format("sidecar lacks rate".into()))?;
    let channels = meta
        .channels
        .ok_or_else(|| Error::Format("sidecar lacks channels".into()))?;
    if channels < 2 {
        return Err(Error::InsufficientChannels(channels));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % (4 * channels) != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {channels}-channel f32 frames",
            bytes.len()
        )));
    }
    let interleaved = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    MultiChannelClip::new(
        deinterleave(interleaved, channels),
        rate,
        meta.array.unwrap_or(ArrayTag::Synth),
    )
}

/// Writes `clip` as `<path>` (interleaved little-endian f32) plus the
/// `.meta` sidecar next to it.
pub fn write_raw(clip: &MultiChannelClip, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for n in 0..clip.frames() {
        for ch in &clip.samples {
            w.write_all(&ch[n].to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let meta = sidecar_path(path);
    let text = format!(
        "rate={}\nchannels={}\narray={}\n",
        clip.sample_rate_hz,
        clip.channels(),
        clip.array_tag
    );
    fs::write(&meta, text).map_err(|e| Error::io(meta, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(frames: usize, rate: f64) -> MultiChannelClip {
        let ch0: Vec<f32> = (0..frames).map(|n| n as f32).collect();
        let ch1: Vec<f32> = (0..frames).map(|n| -(n as f32)).collect();
        MultiChannelClip::new(vec![ch0, ch1], rate, ArrayTag::Synth).unwrap()
    }

    #[test]
    fn one_and_a_half_seconds_gives_one_segment() {
        let segs = segment_clip(&clip(15, 10.0)).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].samples[0].len(), 10);
    }

    #[test]
    fn shorter_than_a_second_is_rejected() {
        assert!(segment_clip(&clip(9, 10.0)).is_err());
    }

    #[test]
    fn segmentation_partitions_the_prefix() {
        let c = clip(57, 10.0);
        let segs = segment_clip(&c).unwrap();
        for ch in 0..2 {
            let joined: Vec<f32> = segs.iter().flat_map(|s| s.samples[ch].clone()).collect();
            assert_eq!(joined, c.samples()[ch][..50]);
        }
        assert!(segs.iter().enumerate().all(|(k, s)| s.index == k));
    }

    #[test]
    fn mono_is_rejected() {
        let err = MultiChannelClip::new(vec![vec![0.0; 4]], 1.0, ArrayTag::Vla).unwrap_err();
        assert!(err.to_string().contains("insufficient channels"));
    }

    #[test]
    fn nearest_minute_with_earlier_tie() {
        let t = LabelTable::new(vec![(1, 2.0), (2, 2.5)]).unwrap();
        assert_eq!(t.range_at(61.0), Some(2.0));
        assert_eq!(t.range_at(90.0), Some(2.0));
        assert_eq!(t.range_at(90.001), Some(2.5));
        assert_eq!(t.range_at(150.0), Some(2.5));
        assert_eq!(t.range_at(29.9), None);
        assert_eq!(t.range_at(150.1), None);
    }

    #[test]
    fn label_table_invariants() {
        assert!(LabelTable::new(vec![]).is_err());
        assert!(LabelTable::new(vec![(2, 1.0), (2, 1.5)]).is_err());
        assert!(LabelTable::new(vec![(0, 1.0), (1, 0.0)]).is_err());
    }

    #[test]
    fn uncovered_segment_errors() {
        let segs = segment_clip(&clip(200, 1.0)).unwrap();
        let table = LabelTable::new(vec![(0, 1.0), (1, 2.0)]).unwrap();
        assert!(matches!(
            attach_labels(segs, &table),
            Err(Error::OutsideLabelCoverage { index: 90, .. })
        ));
    }

    #[test]
    fn full_tow_is_labeled_at_most_sixty_times_per_minute() {
        // 75 minutes at 1 Hz keeps the test light; labeling depends only on
        // segment times.
        let c = MultiChannelClip::new(vec![vec![0.0; 4500]; 2], 1.0, ArrayTag::Synth).unwrap();
        let table = LabelTable::new((0..=75).map(|m| (m, 1.0 + m as f64)).collect()).unwrap();
        let labeled = attach_labels(segment_clip(&c).unwrap(), &table).unwrap();
        assert_eq!(labeled.len(), 4500);
        let mut counts = vec![0usize; 76];
        for s in &labeled {
            counts[(s.range_km - 1.0) as usize] += 1;
        }
        assert!(counts.iter().all(|&n| n <= 60));
        assert_eq!(counts[0], 30);
        assert_eq!(counts[75], 30);
        assert!(labeled.windows(2).all(|w| w[0].range_km <= w[1].range_km));
    }
}
