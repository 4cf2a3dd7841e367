//! Acoustic front end: 13 MFCCs (c0 replaced by log energy), Δ and ΔΔ,
//! and three continuous pitch features from a YIN-style estimator.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::codec::{self, ByteReader, ByteWriter};
use crate::corpus::{self, UtteranceRecord};
use crate::error::{Error, Result};

/// Floor applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-10;
pub const PREEMPHASIS: f32 = 0.97;
/// Half-width of the delta regression window.
pub const DELTA_WINDOW: usize = 2;
pub const PITCH_MIN_HZ: f64 = 60.0;
pub const PITCH_MAX_HZ: f64 = 400.0;
/// log-F0 assigned when an utterance has no voiced frame at all.
pub const DEFAULT_F0_HZ: f64 = 154.919_333_848_296_67; // sqrt(60 * 400)
const YIN_THRESHOLD: f64 = 0.15;
const VOICED_APERIODICITY: f64 = 0.3;
const MEL_LOW_HZ: f64 = 20.0;

const CACHE_MAGIC: &[u8; 4] = b"LFEF";
const CACHE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub n_mel_filters: usize,
    pub n_cepstra: usize,
    pub add_deltas: bool,
    pub add_pitch: bool,
    pub cmn: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate_hz: corpus::SAMPLE_RATE_HZ,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            n_mel_filters: 23,
            n_cepstra: 13,
            add_deltas: true,
            add_pitch: true,
            cmn: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sample_rate_hz == 0 {
            return bad("sample_rate_hz must be positive".into());
        }
        if self.n_cepstra == 0 || self.n_cepstra > self.n_mel_filters {
            return bad(format!(
                "n_cepstra ({}) must be in 1..=n_mel_filters ({})",
                self.n_cepstra, self.n_mel_filters
            ));
        }
        if !(self.frame_shift_ms > 0.0 && self.frame_shift_ms <= self.frame_length_ms) {
            return bad("frame_shift_ms must be in (0, frame_length_ms]".into());
        }
        if self.frame_length() < 2 {
            return bad("frame shorter than two samples".into());
        }
        Ok(())
    }

    pub fn frame_length(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn frame_shift(&self) -> usize {
        ((self.sample_rate_hz as f64 * self.frame_shift_ms / 1000.0).round() as usize).max(1)
    }

    /// Number of frames for `n_samples`, or `None` when shorter than a frame.
    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        let len = self.frame_length();
        (n_samples >= len).then(|| (n_samples - len) / self.frame_shift() + 1)
    }

    /// Output feature dimension.
    pub fn dim(&self) -> usize {
        let base = if self.add_deltas { 3 } else { 1 } * self.n_cepstra;
        base + if self.add_pitch { 3 } else { 0 }
    }

    /// Digest identifying this configuration in cache file names.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        codec::short_hash(format!("features/v{CACHE_VERSION}/{json}").as_bytes())
    }
}

/// Frames × coefficients for one utterance, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    pub n_frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub config_hash: String,
}

impl FeatureMatrix {
    pub fn new(utterance_id: impl Into<String>, dim: usize, data: Vec<f32>) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim), "data length not a multiple of dim");
        FeatureMatrix {
            utterance_id: utterance_id.into(),
            n_frames: data.len() / dim,
            dim,
            data,
            config_hash: String::new(),
        }
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn column(&self, j: usize) -> Vec<f32> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Concatenates columns of two matrices with equal frame counts.
    pub fn hstack(&self, other: &FeatureMatrix) -> FeatureMatrix {
        assert_eq!(self.n_frames, other.n_frames, "frame counts differ");
        let dim = self.dim + other.dim;
        let mut data = Vec::with_capacity(self.n_frames * dim);
        for (a, b) in self.rows().zip(other.rows()) {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        FeatureMatrix {
            utterance_id: self.utterance_id.clone(),
            n_frames: self.n_frames,
            dim,
            data,
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(CACHE_MAGIC, CACHE_VERSION);
        w.len_u32(self.n_frames);
        w.len_u32(self.dim);
        w.f32s(&self.data);
        w.finish()
    }

    pub fn from_bytes(utterance_id: &str, config_hash: &str, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open("feature", bytes, CACHE_MAGIC, CACHE_VERSION)?;
        let n_frames = r.len()?;
        let dim = r.len()?;
        let data = r.f32s(n_frames * dim)?;
        r.finish()?;
        Ok(FeatureMatrix {
            utterance_id: utterance_id.into(),
            n_frames,
            dim,
            data,
            config_hash: config_hash.into(),
        })
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

/// Triangular filters evenly spaced on the mel scale, applied to a power
/// spectrum of `fft_len / 2 + 1` bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Per filter: first bin index and weights.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_filters: usize, fft_len: usize, sample_rate_hz: u32) -> Self {
        let nyquist = sample_rate_hz as f64 / 2.0;
        let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(nyquist));
        let step = (hi - lo) / (n_filters + 1) as f64;
        let bin_hz = sample_rate_hz as f64 / fft_len as f64;
        let n_bins = fft_len / 2 + 1;
        let mut filters = Vec::with_capacity(n_filters);
        let mut centers_hz = Vec::with_capacity(n_filters);
        for m in 0..n_filters {
            let (left, center, right) = (
                lo + m as f64 * step,
                lo + (m + 1) as f64 * step,
                lo + (m + 2) as f64 * step,
            );
            centers_hz.push(700.0 * ((center / 1127.0).exp() - 1.0));
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let mel = hz_to_mel(k as f64 * bin_hz);
                let w = if mel > left && mel <= center {
                    (mel - left) / (center - left)
                } else if mel > center && mel < right {
                    (right - mel) / (right - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    first.get_or_insert(k);
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            filters.push((first.unwrap_or(0), weights));
        }
        MelFilterbank {
            filters,
            centers_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.centers_hz[m]
    }

    /// Filter `m`'s weight at spectrum bin `k`.
    pub fn weight(&self, m: usize, k: usize) -> f64 {
        let (first, ref w) = self.filters[m];
        if k < first {
            0.0
        } else {
            w.get(k - first).copied().unwrap_or(0.0)
        }
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, (first, w)) in out.iter_mut().zip(&self.filters) {
            *o = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// Per-frame power spectrum and mel energies, shared by the MFCC path and
/// the diagnostics exposed to the demo.
pub struct SpectralFrontEnd {
    cfg: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    fft_len: usize,
    window: Vec<f64>,
    pub filterbank: MelFilterbank,
}

impl SpectralFrontEnd {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let len = cfg.frame_length();
        let fft_len = len.next_power_of_two();
        let fft = FftPlanner::new().plan_fft_forward(fft_len);
        let window = (0..len)
            .map(|n| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos()
            })
            .collect();
        Ok(SpectralFrontEnd {
            cfg: cfg.clone(),
            fft,
            fft_len,
            window,
            filterbank: MelFilterbank::new(cfg.n_mel_filters, fft_len, cfg.sample_rate_hz),
        })
    }

    pub fn fft_len(&self) -> usize {
        self.fft_len
    }

    /// Pre-emphasis, Hamming window and |FFT|² of one raw frame.
    pub fn power_spectrum(&self, frame: &[f32]) -> Vec<f64> {
        let len = self.window.len();
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        for i in 0..len {
            let prev = if i == 0 { frame[0] } else { frame[i - 1] };
            let emph = (frame[i] - PREEMPHASIS * prev) as f64;
            buf[i].re = emph * self.window[i];
        }
        self.fft.process(&mut buf);
        buf[..self.fft_len / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn mel_energies(&self, frame: &[f32]) -> Vec<f64> {
        let mut mel = vec![0.0; self.filterbank.len()];
        self.filterbank.apply(&self.power_spectrum(frame), &mut mel);
        mel
    }

    fn check_input(&self, samples: &[f32], sample_rate_hz: u32) -> Result<usize> {
        if sample_rate_hz != self.cfg.sample_rate_hz {
            return Err(Error::RateMismatch {
                expected: self.cfg.sample_rate_hz,
                actual: sample_rate_hz,
            });
        }
        self.cfg.n_frames(samples.len()).ok_or(Error::TooShort {
            n_samples: samples.len(),
            needed: self.cfg.frame_length(),
        })
    }
}

/// Base cepstra: `n_cepstra` columns, column 0 is the log energy of the raw
/// frame.
pub fn compute_mfcc(samples: &[f32], sample_rate_hz: u32, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    let fe = SpectralFrontEnd::new(cfg)?;
    let n_frames = fe.check_input(samples, sample_rate_hz)?;
    let (len, shift) = (cfg.frame_length(), cfg.frame_shift());
    let n_mel = cfg.n_mel_filters;
    let nc = cfg.n_cepstra;

    // orthonormal DCT-II basis
    let dct: Vec<f64> = (0..nc)
        .flat_map(|k| {
            let scale = if k == 0 {
                (1.0 / n_mel as f64).sqrt()
            } else {
                (2.0 / n_mel as f64).sqrt()
            };
            (0..n_mel).map(move |m| {
                scale * (std::f64::consts::PI * k as f64 * (m as f64 + 0.5) / n_mel as f64).cos()
            })
        })
        .collect();

    let mut data = Vec::with_capacity(n_frames * nc);
    let mut mel = vec![0.0; n_mel];
    for t in 0..n_frames {
        let frame = &samples[t * shift..t * shift + len];
        let energy: f64 = frame.iter().map(|&x| x as f64 * x as f64).sum();
        fe.filterbank.apply(&fe.power_spectrum(frame), &mut mel);
        for v in mel.iter_mut() {
            *v = v.max(LOG_FLOOR).ln();
        }
        data.push(energy.max(LOG_FLOOR).ln() as f32);
        for k in 1..nc {
            let row = &dct[k * n_mel..(k + 1) * n_mel];
            data.push(row.iter().zip(&mel).map(|(a, b)| a * b).sum::<f64>() as f32);
        }
    }
    let mut m = FeatureMatrix::new("", nc, data);
    m.config_hash = cfg.hash();
    Ok(m)
}

/// Regression deltas of every column over ±`DELTA_WINDOW` frames, with the
/// first and last frames replicated at the edges.
fn deltas(data: &[f32], n_frames: usize, dim: usize) -> Vec<f32> {
    let denom: f64 = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let last = n_frames as isize - 1;
    let at = |t: isize, j: usize| data[t.clamp(0, last) as usize * dim + j] as f64;
    let mut out = Vec::with_capacity(data.len());
    for t in 0..n_frames as isize {
        for j in 0..dim {
            let num: f64 = (1..=DELTA_WINDOW as isize)
                .map(|n| n as f64 * (at(t + n, j) - at(t - n, j)))
                .sum();
            out.push((num / denom) as f32);
        }
    }
    out
}

/// Appends Δ and ΔΔ columns, tripling the dimension.
pub fn append_deltas(m: &FeatureMatrix) -> FeatureMatrix {
    let d1 = deltas(&m.data, m.n_frames, m.dim);
    let d2 = deltas(&d1, m.n_frames, m.dim);
    let dim = m.dim * 3;
    let mut data = Vec::with_capacity(m.n_frames * dim);
    for t in 0..m.n_frames {
        let r = t * m.dim..(t + 1) * m.dim;
        data.extend_from_slice(&m.data[r.clone()]);
        data.extend_from_slice(&d1[r.clone()]);
        data.extend_from_slice(&d2[r]);
    }
    FeatureMatrix {
        utterance_id: m.utterance_id.clone(),
        n_frames: m.n_frames,
        dim,
        data,
        config_hash: m.config_hash.clone(),
    }
}

/// Subtracts each column's mean over the utterance.
pub fn cepstral_mean_normalize(m: &mut FeatureMatrix) {
    if m.n_frames == 0 {
        return;
    }
    let mut mean = vec![0.0f64; m.dim];
    for row in m.rows() {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += v as f64;
        }
    }
    for v in mean.iter_mut() {
        *v /= m.n_frames as f64;
    }
    for row in m.data.chunks_exact_mut(m.dim) {
        for (v, mu) in row.iter_mut().zip(&mean) {
            *v = (*v as f64 - mu) as f32;
        }
    }
}

/// Per-frame YIN estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchFrame {
    pub f0_hz: f64,
    /// Cumulative-mean-normalized difference at the chosen lag; 1 for
    /// silence.
    pub aperiodicity: f64,
}

impl PitchFrame {
    pub fn voicing(&self) -> f64 {
        (1.0 - 2.0 * self.aperiodicity).clamp(0.0, 1.0)
    }

    pub fn is_voiced(&self) -> bool {
        self.aperiodicity < VOICED_APERIODICITY
    }
}

/// YIN over one analysis window starting at `start`; samples past the end
/// of the signal read as zero.
fn yin_frame(samples: &[f32], start: usize, window: usize, tau_min: usize, tau_max: usize, sr: f64) -> PitchFrame {
    let x = |i: usize| samples.get(i).copied().unwrap_or(0.0) as f64;
    let unvoiced = PitchFrame {
        f0_hz: 0.0,
        aperiodicity: 1.0,
    };
    let energy: f64 = (start..start + window).map(|i| x(i) * x(i)).sum::<f64>() / window as f64;
    if energy < 1e-8 {
        return unvoiced;
    }
    let mut cmnd = vec![1.0; tau_max + 2];
    let mut running = 0.0;
    for tau in 1..=tau_max + 1 {
        let d: f64 = (0..window)
            .map(|j| {
                let diff = x(start + j) - x(start + j + tau);
                diff * diff
            })
            .sum();
        running += d;
        cmnd[tau] = if running > 0.0 {
            d * tau as f64 / running
        } else {
            1.0
        };
    }
    let mut best = None;
    let mut tau = tau_min;
    while tau <= tau_max {
        if cmnd[tau] < YIN_THRESHOLD {
            while tau < tau_max && cmnd[tau + 1] < cmnd[tau] {
                tau += 1;
            }
            best = Some(tau);
            break;
        }
        tau += 1;
    }
    let tau = best.unwrap_or_else(|| {
        (tau_min..=tau_max)
            .min_by(|&a, &b| cmnd[a].total_cmp(&cmnd[b]))
            .unwrap()
    });
    // parabolic refinement around the chosen lag
    let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    PitchFrame {
        f0_hz: sr / (tau as f64 + shift),
        aperiodicity: b.clamp(0.0, 1.0),
    }
}

/// Raw per-frame YIN estimates aligned with the MFCC frames.
pub fn pitch_track(samples: &[f32], sample_rate_hz: u32, cfg: &FeatureConfig) -> Result<Vec<PitchFrame>> {
    cfg.validate()?;
    if sample_rate_hz != cfg.sample_rate_hz {
        return Err(Error::RateMismatch {
            expected: cfg.sample_rate_hz,
            actual: sample_rate_hz,
        });
    }
    let n_frames = cfg.n_frames(samples.len()).ok_or(Error::TooShort {
        n_samples: samples.len(),
        needed: cfg.frame_length(),
    })?;
    let sr = sample_rate_hz as f64;
    let tau_min = (sr / PITCH_MAX_HZ).floor().max(2.0) as usize;
    let tau_max = (sr / PITCH_MIN_HZ).ceil() as usize;
    let window = cfg.frame_length();
    let shift = cfg.frame_shift();
    let starts: Vec<usize> = (0..n_frames).map(|t| t * shift).collect();
    Ok(crate::par::map(&starts, |&s| {
        yin_frame(samples, s, window, tau_min, tau_max, sr)
    }))
}

/// Three columns per frame: voicing score, log-F0 (interpolated through
/// unvoiced frames) and Δlog-F0.
pub fn compute_pitch(samples: &[f32], sample_rate_hz: u32, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    let track = pitch_track(samples, sample_rate_hz, cfg)?;
    let n = track.len();
    let voiced: Vec<usize> = (0..n).filter(|&t| track[t].is_voiced()).collect();
    let mut log_f0 = vec![DEFAULT_F0_HZ.ln(); n];
    if !voiced.is_empty() {
        let lf = |t: usize| track[t].f0_hz.ln();
        for t in 0..n {
            let next = voiced.partition_point(|&v| v < t);
            log_f0[t] = match (next.checked_sub(1).map(|i| voiced[i]), voiced.get(next)) {
                (_, Some(&r)) if r == t => lf(t),
                (Some(l), Some(&r)) => {
                    let w = (t - l) as f64 / (r - l) as f64;
                    (1.0 - w) * lf(l) + w * lf(r)
                }
                (Some(l), None) => lf(l),
                (None, Some(&r)) => lf(r),
                (None, None) => unreachable!(),
            };
        }
    }
    let lf32: Vec<f32> = log_f0.iter().map(|&v| v as f32).collect();
    let dlf = deltas(&lf32, n, 1);
    let mut data = Vec::with_capacity(n * 3);
    for t in 0..n {
        data.push(track[t].voicing() as f32);
        data.push(lf32[t]);
        data.push(dlf[t]);
    }
    let mut m = FeatureMatrix::new("", 3, data);
    m.config_hash = cfg.hash();
    Ok(m)
}

/// Full front end on raw samples.
pub fn features_from_samples(
    utterance_id: &str,
    samples: &[f32],
    sample_rate_hz: u32,
    cfg: &FeatureConfig,
) -> Result<FeatureMatrix> {
    let run = || -> Result<FeatureMatrix> {
        let mut m = compute_mfcc(samples, sample_rate_hz, cfg)?;
        if cfg.cmn {
            cepstral_mean_normalize(&mut m);
        }
        if cfg.add_deltas {
            m = append_deltas(&m);
        }
        if cfg.add_pitch {
            m = m.hstack(&compute_pitch(samples, sample_rate_hz, cfg)?);
        }
        m.utterance_id = utterance_id.to_string();
        m.config_hash = cfg.hash();
        Ok(m)
    };
    run().map_err(|e| e.for_utterance(utterance_id))
}

/// Reads the utterance's audio and runs the front end.
pub fn extract_features(rec: &UtteranceRecord, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    let samples = corpus::read_wav(&rec.audio_path).map_err(|e| e.for_utterance(&rec.utterance_id))?;
    features_from_samples(&rec.utterance_id, &samples, corpus::SAMPLE_RATE_HZ, cfg)
}

/// Directory of per-utterance feature files named `<utterance_id>.<config_hash>`.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FeatureCache { dir: dir.into() }
    }

    pub fn path(&self, utterance_id: &str, config_hash: &str) -> PathBuf {
        self.dir.join(format!("{utterance_id}.{config_hash}"))
    }

    pub fn load(&self, utterance_id: &str, config_hash: &str) -> Result<Option<FeatureMatrix>> {
        let p = self.path(utterance_id, config_hash);
        if !p.is_file() {
            return Ok(None);
        }
        let bytes = codec::read_file(&p)?;
        FeatureMatrix::from_bytes(utterance_id, config_hash, &bytes).map(Some)
    }

    pub fn store(&self, m: &FeatureMatrix) -> Result<PathBuf> {
        let p = self.path(&m.utterance_id, &m.config_hash);
        codec::write_atomic(&p, &m.to_bytes())?;
        Ok(p)
    }

    /// Returns the cached matrix, extracting and storing it on a miss.
    pub fn get_or_extract(&self, rec: &UtteranceRecord, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
        let hash = cfg.hash();
        if let Some(m) = self.load(&rec.utterance_id, &hash)? {
            return Ok(m);
        }
        let m = extract_features(rec, cfg)?;
        self.store(&m)?;
        Ok(m)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f32::consts::PI;

    fn tone(freq: f32, secs: f32, amp: f32) -> Vec<f32> {
        let n = (16_000.0 * secs) as usize;
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f32 / 16_000.0).sin())
            .collect()
    }

    #[test]
    fn frame_count_one_second() {
        let cfg = FeatureConfig::default();
        let m = compute_mfcc(&tone(300.0, 1.0, 0.3), 16_000, &cfg).unwrap();
        assert_eq!(m.n_frames, 98);
        assert_eq!(m.dim, 13);
        assert_eq!(cfg.dim(), 42);
    }

    #[test]
    fn silence_is_floored() {
        let cfg = FeatureConfig::default();
        let m = compute_mfcc(&vec![0.0; 8000], 16_000, &cfg).unwrap();
        let floor = (LOG_FLOOR.ln()) as f32;
        for row in m.rows() {
            assert_eq!(row[0], floor);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn too_short_and_rate_mismatch() {
        let cfg = FeatureConfig::default();
        assert!(matches!(
            compute_mfcc(&[0.0; 399], 16_000, &cfg),
            Err(Error::TooShort { n_samples: 399, needed: 400 })
        ));
        assert!(matches!(
            compute_mfcc(&[0.0; 800], 8_000, &cfg),
            Err(Error::RateMismatch { .. })
        ));
        assert!(matches!(
            compute_pitch(&[0.0; 10], 16_000, &cfg),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let cfg = FeatureConfig {
            n_cepstra: 30,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = FeatureConfig {
            frame_shift_ms: 30.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert_ne!(FeatureConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn deltas_of_constant_are_zero() {
        let m = FeatureMatrix::new("c", 2, [1.5f32, -2.0].repeat(10));
        let d = append_deltas(&m);
        assert_eq!(d.dim, 6);
        for row in d.rows() {
            assert_eq!(&row[2..], &[0.0; 4]);
        }
        let single = append_deltas(&FeatureMatrix::new("s", 3, vec![1.0, 2.0, 3.0]));
        assert_eq!(&single.data[3..], &[0.0; 6]);
    }

    #[test]
    fn pitch_of_silence() {
        let cfg = FeatureConfig::default();
        let p = compute_pitch(&vec![0.0; 16_000], 16_000, &cfg).unwrap();
        assert_eq!(p.n_frames, 98);
        for row in p.rows() {
            assert_eq!(row[0], 0.0);
            assert!(row[1].is_finite());
            assert_eq!(row[2], 0.0);
        }
    }

    #[test]
    fn full_front_end_shape_and_cmn() {
        let cfg = FeatureConfig::default();
        let mut samples = tone(220.0, 1.0, 0.4);
        for (i, s) in samples.iter_mut().enumerate() {
            *s += 0.05 * ((i as f32 * 0.37).sin() * (i as f32 * 0.011).cos());
        }
        let m = features_from_samples("u", &samples, 16_000, &cfg).unwrap();
        assert_eq!(m.dim, 42);
        assert_eq!(m.n_frames, 98);
        assert!(m.data.iter().all(|v| v.is_finite()));
        for j in 0..13 {
            let mean: f64 = m.column(j).iter().map(|&v| v as f64).sum::<f64>() / m.n_frames as f64;
            assert!(mean.abs() < 1e-5, "column {j} mean {mean}");
        }
    }

    #[test]
    fn cache_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("u1.wav");
        corpus::write_wav(&wav, &tone(180.0, 0.5, 0.5)).unwrap();
        let rec = UtteranceRecord {
            utterance_id: "u1".into(),
            speaker_id: "s".into(),
            language: "en".into(),
            accent: "native".into(),
            family: String::new(),
            audio_path: wav,
            duration_s: 0.5,
        };
        let cfg = FeatureConfig::default();
        let cache = FeatureCache::new(dir.path().join("feats"));
        let a = cache.get_or_extract(&rec, &cfg).unwrap();
        let bytes_a = std::fs::read(cache.path("u1", &cfg.hash())).unwrap();
        let b = extract_features(&rec, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes_a, b.to_bytes());
        assert_eq!(&bytes_a[..4], b"LFEF");
        let loaded = cache.load("u1", &cfg.hash()).unwrap().unwrap();
        assert_eq!(loaded, a);

        let missing = UtteranceRecord {
            utterance_id: "u2".into(),
            audio_path: dir.path().join("nope.wav"),
            ..rec
        };
        match extract_features(&missing, &cfg) {
            Err(Error::Utterance { id, .. }) => assert_eq!(id, "u2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_cache_rejected() {
        let m = FeatureMatrix::new("x", 2, vec![1.0, 2.0, 3.0, 4.0]);
        let mut bytes = m.to_bytes();
        bytes.pop();
        assert!(FeatureMatrix::from_bytes("x", "h", &bytes).is_err());
        bytes[0] = b'X';
        assert!(FeatureMatrix::from_bytes("x", "h", &bytes).is_err());
    }
}
