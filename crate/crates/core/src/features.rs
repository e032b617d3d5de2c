//! Branch inputs: per-channel log-mel spectrograms and per-pair GCC-PHAT lag
//! maps, plus the binary feature cache.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::LabeledSegment;

/// Regularizer added to the cross-spectrum magnitude before whitening.
pub const PHAT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    /// DFT length; frames are zero-padded from `window_len` up to it.
    pub n_fft: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 40,
            hop: 20,
            n_fft: 128,
        }
    }
}

impl StftConfig {
    /// Transform without zero padding.
    pub fn unpadded(window_len: usize, hop: usize) -> Self {
        Self {
            window_len,
            hop,
            n_fft: window_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.hop == 0 || self.hop > self.window_len {
            return Err(Error::Config(format!(
                "stft needs 0 < hop ({}) <= window_len ({})",
                self.hop, self.window_len
            )));
        }
        if self.n_fft < self.window_len || self.n_fft % 2 != 0 {
            return Err(Error::Config(format!(
                "stft.n_fft {} must be even and at least window_len {}",
                self.n_fft, self.window_len
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper band edge; `None` means Nyquist.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_max: Option<f64>,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            f_min: 0.0,
            f_max: None,
            log_floor: 1e-10,
        }
    }
}

/// Short-time spectrum, row-major `[frames × bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub n_fft: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn stft(x: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    let mut planner = FftPlanner::new();
    stft_with(&mut planner, x, cfg)
}

fn stft_with(planner: &mut FftPlanner<f64>, x: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if x.len() < cfg.window_len {
        return Err(Error::InvalidInput(format!(
            "signal of {} samples is shorter than one {}-sample window",
            x.len(),
            cfg.window_len
        )));
    }
    let frames = cfg.frames(x.len());
    let bins = cfg.bins();
    let window = hann(cfg.window_len);
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.n_fft];
    let mut data = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let start = t * cfg.hop;
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (i, w) in window.iter().enumerate() {
            buf[i].re = w * x[start + i];
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram {
        frames,
        bins,
        n_fft: cfg.n_fft,
        data,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, row-major `[n_mels × bins]`. Each filter
/// rises linearly from its lower edge to 1 at its center and falls back to 0
/// at its upper edge.
pub fn mel_filterbank(mel: &MelConfig, n_fft: usize, fs: f64) -> Result<Vec<f64>> {
    let f_max = mel.f_max.unwrap_or(fs / 2.0);
    if !(mel.f_min >= 0.0 && mel.f_min < f_max && f_max <= fs / 2.0 + 1e-9) {
        return Err(Error::Config(format!(
            "mel band [{}, {f_max}] invalid for fs {fs}",
            mel.f_min
        )));
    }
    if mel.n_mels == 0 || !(mel.log_floor > 0.0) {
        return Err(Error::Config("mel needs n_mels > 0 and a positive log floor".into()));
    }
    let bins = n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(mel.f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..mel.n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (mel.n_mels + 1) as f64))
        .collect();
    let mut bank = vec![0.0; mel.n_mels * bins];
    for m in 0..mel.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..bins {
            let f = b as f64 * fs / n_fft as f64;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            bank[m * bins + b] = w;
        }
        if bank[m * bins..(m + 1) * bins].iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "mel filter {m} covers no DFT bin; raise stft.n_fft or lower mel.n_mels"
            )));
        }
    }
    Ok(bank)
}

/// Log-mel energies `[frames × n_mels]` of a spectrogram.
pub fn logmel(spec: &Spectrogram, mel: &MelConfig, fs: f64) -> Result<Vec<f64>> {
    let bank = mel_filterbank(mel, spec.n_fft, fs)?;
    Ok(logmel_with(spec, &bank, mel))
}

fn logmel_with(spec: &Spectrogram, bank: &[f64], mel: &MelConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.frames * mel.n_mels);
    for t in 0..spec.frames {
        let power: Vec<f64> = spec.frame(t).iter().map(|c| c.norm_sqr()).collect();
        for m in 0..mel.n_mels {
            let row = &bank[m * spec.bins..(m + 1) * spec.bins];
            let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push(e.max(mel.log_floor).ln());
        }
    }
    out
}

/// GCC-PHAT lag maps `[frames × lags]`.
///
/// Output column `j` holds lag `ℓ = j − ⌊L/2⌋`; a positive lag means channel
/// `b` trails channel `a` by `ℓ` samples.
pub fn gcc_phat(spec_a: &Spectrogram, spec_b: &Spectrogram, lags: usize) -> Result<Vec<f64>> {
    let mut planner = FftPlanner::new();
    gcc_phat_with(&mut planner, spec_a, spec_b, lags)
}

fn gcc_phat_with(
    planner: &mut FftPlanner<f64>,
    spec_a: &Spectrogram,
    spec_b: &Spectrogram,
    lags: usize,
) -> Result<Vec<f64>> {
    if spec_a.frames != spec_b.frames || spec_a.bins != spec_b.bins || spec_a.n_fft != spec_b.n_fft {
        return Err(Error::Shape(format!(
            "gcc_phat inputs {}x{} and {}x{} differ",
            spec_a.frames, spec_a.bins, spec_b.frames, spec_b.bins
        )));
    }
    let n = spec_a.n_fft;
    if lags == 0 || lags > n {
        return Err(Error::InvalidInput(format!("lag count {lags} must be in 1..={n}")));
    }
    let ifft = planner.plan_fft_inverse(n);
    let half = lags / 2;
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    let mut out = Vec::with_capacity(spec_a.frames * lags);
    for t in 0..spec_a.frames {
        let (fa, fb) = (spec_a.frame(t), spec_b.frame(t));
        for k in 0..spec_a.bins {
            let g = fa[k] * fb[k].conj();
            let w = g / (g.norm() + PHAT_EPSILON);
            full[k] = w;
            if k > 0 && k < n - k {
                full[n - k] = w.conj();
            }
        }
        ifft.process(&mut full);
        // IDFT of a·conj(b) peaks at −d when b is delayed by d, so lag ℓ
        // reads index −ℓ mod n.
        for j in 0..lags {
            let lag = j as isize - half as isize;
            let idx = (-lag).rem_euclid(n as isize) as usize;
            out.push(full[idx].re / n as f64);
        }
    }
    Ok(out)
}

/// Feature extraction settings shared by both branches.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub stft: StftConfig,
    pub mel: MelConfig,
    /// GCC lag count; `None` matches `mel.n_mels`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gcc_lags: Option<usize>,
}

impl FeatureConfig {
    pub fn lags(&self) -> usize {
        self.gcc_lags.unwrap_or(self.mel.n_mels)
    }
}

/// Both branch inputs for one segment. Tensors are row-major `f32`:
/// `logmel [channels × frames × n_mels]`, `gcc [pairs × frames × lags]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub index: usize,
    pub range_km: f32,
    pub channels: usize,
    pub frames: usize,
    pub n_mels: usize,
    pub pairs: usize,
    pub lags: usize,
    pub logmel: Vec<f32>,
    pub gcc: Vec<f32>,
}

impl FeaturePair {
    pub fn same_shape(&self, other: &FeaturePair) -> bool {
        (self.channels, self.frames, self.n_mels, self.pairs, self.lags)
            == (other.channels, other.frames, other.n_mels, other.pairs, other.lags)
    }

    fn validate(&self) -> Result<()> {
        if self.logmel.len() != self.channels * self.frames * self.n_mels
            || self.gcc.len() != self.pairs * self.frames * self.lags
        {
            return Err(Error::Shape(format!("feature record {} has inconsistent sizes", self.index)));
        }
        Ok(())
    }
}

/// Unordered channel pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn channel_pairs(channels: usize) -> Vec<(usize, usize)> {
    (0..channels)
        .flat_map(|i| (i + 1..channels).map(move |j| (i, j)))
        .collect()
}

/// Reusable extractor holding FFT plans and the mel filterbank.
pub struct Featurizer {
    cfg: FeatureConfig,
    fs: f64,
    bank: Vec<f64>,
    planner: FftPlanner<f64>,
}

impl Featurizer {
    pub fn new(cfg: FeatureConfig, fs: f64) -> Result<Self> {
        cfg.stft.validate()?;
        let lags = cfg.lags();
        if lags == 0 || lags > cfg.stft.n_fft {
            return Err(Error::Config(format!(
                "gcc lag count {lags} must be in 1..={}",
                cfg.stft.n_fft
            )));
        }
        let bank = mel_filterbank(&cfg.mel, cfg.stft.n_fft, fs)?;
        Ok(Self {
            cfg,
            fs,
            bank,
            planner: FftPlanner::new(),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn featurize(&mut self, seg: &LabeledSegment) -> Result<FeaturePair> {
        if (seg.sample_rate_hz - self.fs).abs() > 1e-9 {
            return Err(Error::RateMismatch {
                found: seg.sample_rate_hz,
                expected: self.fs,
            });
        }
        let channels = seg.channels();
        let specs = seg
            .samples
            .iter()
            .map(|ch| {
                let x: Vec<f64> = ch.iter().map(|&v| v as f64).collect();
                stft_with(&mut self.planner, &x, &self.cfg.stft)
            })
            .collect::<Result<Vec<_>>>()?;
        let frames = specs[0].frames;
        let n_mels = self.cfg.mel.n_mels;
        let lags = self.cfg.lags();

        let mut logmel = Vec::with_capacity(channels * frames * n_mels);
        for s in &specs {
            logmel.extend(logmel_with(s, &self.bank, &self.cfg.mel).into_iter().map(|v| v as f32));
        }
        let pairs = channel_pairs(channels);
        let mut gcc = Vec::with_capacity(pairs.len() * frames * lags);
        for &(i, j) in &pairs {
            let map = gcc_phat_with(&mut self.planner, &specs[i], &specs[j], lags)?;
            gcc.extend(map.into_iter().map(|v| v as f32));
        }
        let pair = FeaturePair {
            index: seg.index,
            range_km: seg.range_km as f32,
            channels,
            frames,
            n_mels,
            pairs: pairs.len(),
            lags,
            logmel,
            gcc,
        };
        if pair.logmel.iter().chain(&pair.gcc).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of segment {}", seg.index)));
        }
        Ok(pair)
    }
}

/// One-shot featurization of a single segment.
pub fn featurize_segment(seg: &LabeledSegment, cfg: &FeatureConfig) -> Result<FeaturePair> {
    Featurizer::new(*cfg, seg.sample_rate_hz)?.featurize(seg)
}

pub fn featurize_all(segs: &[LabeledSegment], cfg: &FeatureConfig) -> Result<Vec<FeaturePair>> {
    let Some(first) = segs.first() else {
        return Ok(Vec::new());
    };
    let mut f = Featurizer::new(*cfg, first.sample_rate_hz)?;
    segs.iter().map(|s| f.featurize(s)).collect()
}

const CACHE_MAGIC: &[u8; 4] = b"ACAF";
const CACHE_VERSION: u32 = 1;

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} does not fit the cache header")))
}

/// Writes the feature cache: magic, version, then one record per segment.
pub fn write_cache(path: &Path, pairs: &[FeaturePair]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    for p in pairs {
        p.validate()?;
        let index = u32::try_from(p.index)
            .map_err(|_| Error::Format(format!("segment index {} too large", p.index)))?;
        w.write_all(&index.to_le_bytes()).map_err(io)?;
        w.write_all(&p.range_km.to_le_bytes()).map_err(io)?;
        for (v, name) in [
            (p.channels, "channels"),
            (p.frames, "frames"),
            (p.n_mels, "n_mels"),
            (p.pairs, "pairs"),
            (p.lags, "lags"),
        ] {
            w.write_all(&to_u16(v, name)?.to_le_bytes()).map_err(io)?;
        }
        for v in p.logmel.iter().chain(&p.gcc) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_cache(path: &Path) -> Result<Vec<FeaturePair>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    parse_cache(&bytes)
}

fn parse_cache(bytes: &[u8]) -> Result<Vec<FeaturePair>> {
    let truncated = || Error::Format("truncated feature cache".into());
    if bytes.len() < 8 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::Format("not a feature cache (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported feature cache version {version}")));
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(truncated)?;
        pos += n;
        Ok(s)
    };
    let mut out = Vec::new();
    let mut remaining = bytes.len() - 8;
    while remaining > 0 {
        let before = remaining;
        let index = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let range_km = f32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        }
        let [channels, frames, n_mels, pairs, lags] = dims;
        let read_f32 = |raw: &[u8]| -> Vec<f32> {
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        };
        let logmel = read_f32(take(4 * channels * frames * n_mels)?);
        let gcc = read_f32(take(4 * pairs * frames * lags)?);
        remaining = before - (18 + 4 * (logmel.len() + gcc.len()));
        out.push(FeaturePair {
            index,
            range_km,
            channels,
            frames,
            n_mels,
            pairs,
            lags,
            logmel,
            gcc,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_arithmetic() {
        let cfg = StftConfig::unpadded(40, 20);
        let s = stft(&vec![0.0; 1500], &cfg).unwrap();
        assert_eq!((s.frames, s.bins), (74, 21));
        assert!(s.data.iter().all(|c| c.norm() == 0.0));
        let padded = stft(&vec![0.0; 1500], &StftConfig::default()).unwrap();
        assert_eq!((padded.frames, padded.bins), (74, 65));
    }

    #[test]
    fn short_input_rejected() {
        assert!(stft(&[0.0; 39], &StftConfig::default()).is_err());
        assert!(StftConfig { hop: 41, ..StftConfig::default() }.validate().is_err());
    }

    #[test]
    fn bin_center_cosine_has_one_dominant_bin() {
        let cfg = StftConfig::unpadded(40, 20);
        // bin 5 of a 40-point DFT
        let x: Vec<f64> = (0..400).map(|n| (2.0 * PI * 5.0 * n as f64 / 40.0).cos()).collect();
        let s = stft(&x, &cfg).unwrap();
        for t in 0..s.frames {
            let mags: Vec<f64> = s.frame(t).iter().map(|c| c.norm()).collect();
            let best = (0..mags.len()).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
            assert_eq!(best, 5);
            // Hann leaks only into the adjacent bins, at half the peak
            for (k, m) in mags.iter().enumerate() {
                if k.abs_diff(5) > 1 {
                    assert!(*m < 1e-9 * mags[5]);
                }
            }
        }
    }

    #[test]
    fn zero_spectrogram_gives_log_floor() {
        let s = stft(&vec![0.0; 200], &StftConfig::default()).unwrap();
        let lm = logmel(&s, &MelConfig::default(), 1500.0).unwrap();
        assert!(lm.iter().all(|&v| v == 1e-10f64.ln()));
    }

    #[test]
    fn filterbank_triangles() {
        let bank = mel_filterbank(&MelConfig::default(), 128, 1500.0).unwrap();
        let bins = 65;
        for m in 0..64 {
            let row = &bank[m * bins..(m + 1) * bins];
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert!(row.iter().sum::<f64>() > 0.0);
            // one contiguous run of non-zero weights that rises then falls
            let nz: Vec<usize> = (0..bins).filter(|&b| row[b] > 0.0).collect();
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len());
            let peak = nz.iter().copied().max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(nz.windows(2).all(|w| (w[1] <= peak) == (row[w[1]] >= row[w[0]]) || w[0] >= peak));
        }
        // an unpadded 40-point DFT cannot host 64 mel filters at 1500 Hz
        assert!(mel_filterbank(&MelConfig::default(), 40, 1500.0).is_err());
    }

    #[test]
    fn identical_channels_peak_at_zero_lag() {
        let x: Vec<f64> = (0..1500).map(|n| ((n * 7919) % 113) as f64 - 56.0).collect();
        let s = stft(&x, &StftConfig::default()).unwrap();
        let g = gcc_phat(&s, &s, 64).unwrap();
        for t in 0..s.frames {
            let row = &g[t * 64..(t + 1) * 64];
            let best = (0..64).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(best as isize - 32, 0);
        }
    }

    #[test]
    fn silent_channel_stays_finite() {
        let x: Vec<f64> = (0..400).map(|n| (n as f64 * 0.3).sin()).collect();
        let a = stft(&x, &StftConfig::default()).unwrap();
        let b = stft(&vec![0.0; 400], &StftConfig::default()).unwrap();
        assert!(gcc_phat(&a, &b, 64).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gcc_shape_mismatch() {
        let a = stft(&vec![0.0; 400], &StftConfig::default()).unwrap();
        let b = stft(&vec![0.0; 300], &StftConfig::default()).unwrap();
        assert!(gcc_phat(&a, &b, 64).is_err());
        assert!(gcc_phat(&a, &a, 129).is_err());
    }

    #[test]
    fn pair_enumeration() {
        assert_eq!(channel_pairs(2), vec![(0, 1)]);
        assert_eq!(channel_pairs(3), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(channel_pairs(21).len(), 210);
    }

    #[test]
    fn truncated_cache_rejected() {
        let p = FeaturePair {
            index: 3,
            range_km: 1.5,
            channels: 2,
            frames: 1,
            n_mels: 2,
            pairs: 1,
            lags: 2,
            logmel: vec![1.0, 2.0, 3.0, 4.0],
            gcc: vec![5.0, 6.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.acaf");
        write_cache(&path, &[p.clone()]).unwrap();
        assert_eq!(read_cache(&path).unwrap(), vec![p]);
        let bytes = fs::read(&path).unwrap();
        assert!(parse_cache(&bytes[..bytes.len() - 1]).is_err());
        let mut trailing = bytes.clone();
        trailing.extend([0, 0]);
        assert!(parse_cache(&trailing).is_err());
        assert!(parse_cache(b"NOPE\x01\0\0\0").is_err());
    }
}
