//! Log-Mel filter bank features with a duration-adaptive frame shift.
//!
//! The audio encoder expects a fixed number of frames `L_tar`. Instead of
//! a fixed hop with truncation/padding, the hop is stretched per clip so the
//! frames cover the whole clip uniformly:
//! `f_shift = n_frm · 1000 / (sr · L_tar)` milliseconds.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::corpus::AudioTokens;
use crate::error::{Error, Result};
use crate::matrix::{shape_str, Matrix};

pub const SAMPLE_RATE: u32 = 16_000;
pub const TARGET_LENGTH: usize = 1024;
pub const N_MELS: usize = 128;
pub const WINDOW_MS: f64 = 25.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const PATCH_SIZE: usize = 16;
pub const PATCH_STRIDE: usize = 10;
/// Upper edge of the Mel filter bank.
pub const MEL_HIGH_HZ: f64 = 8000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("waveform has no samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// `n_frm`, the number of samples.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a mono 16-bit PCM WAV file, scaling samples to `[-1, 1)`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bad = |reason: String| Error::Format { path: path.display().to_string(), reason };
    let mut reader = hound::WavReader::open(path).map_err(|e| bad(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(bad(format!("expected mono audio, found {} channels", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(bad(format!(
            "expected 16-bit integer PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(bad(format!("expected {SAMPLE_RATE} Hz, found {} Hz; resample upstream", spec.sample_rate)));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV file; samples are clipped to `[-1, 1]`.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io_err = |e: hound::Error| Error::Format { path: path.display().to_string(), reason: e.to_string() };
    let mut w = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &wave.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(io_err)?;
    }
    w.finalize().map_err(io_err)
}

/// Log-Mel energies, exactly `target_len` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterBank {
    pub frames: Matrix,
    pub frame_shift_ms: f64,
    pub target_len: usize,
    /// Placeholder for an item without audio (all zeros).
    pub missing: bool,
    /// The clip was shorter than one window and was zero-padded.
    pub padded_short_clip: bool,
}

impl MelFilterBank {
    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FbankConfig {
    pub target_len: usize,
    pub n_mels: usize,
    pub window_ms: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self { target_len: TARGET_LENGTH, n_mels: N_MELS, window_ms: WINDOW_MS }
    }
}

/// Frame hop in milliseconds so that `l_tar` frames span `n_frm` samples.
pub fn adaptive_frame_shift(n_frm: usize, sample_rate: u32, l_tar: usize) -> Result<f64> {
    if n_frm == 0 || sample_rate == 0 || l_tar == 0 {
        return Err(Error::InvalidArgument(format!(
            "frame shift needs positive inputs, got n_frm={n_frm}, sr={sample_rate}, L_tar={l_tar}"
        )));
    }
    Ok(n_frm as f64 * 1000.0 / (sample_rate as f64 * l_tar as f64))
}

/// Number of patch tokens on the `(l_tar × n_mels)` grid.
pub fn patch_count(l_tar: usize, n_mels: usize, patch: usize, stride: usize) -> Result<usize> {
    Ok(PatchGrid::new(l_tar, n_mels, patch, stride)?.n_tokens())
}

/// Geometry of overlapping square patches over a filter bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    pub n_time_patches: usize,
    pub n_freq_patches: usize,
}

impl PatchGrid {
    pub fn new(l_tar: usize, n_mels: usize, patch: usize, stride: usize) -> Result<Self> {
        if patch == 0 || stride == 0 {
            return Err(Error::InvalidArgument("patch size and stride must be positive".into()));
        }
        if patch > l_tar || patch > n_mels {
            return Err(Error::InvalidArgument(format!("patch {patch} does not fit a {l_tar}x{n_mels} grid")));
        }
        Ok(Self {
            patch_size: patch,
            stride,
            n_time_patches: (l_tar - patch) / stride + 1,
            n_freq_patches: (n_mels - patch) / stride + 1,
        })
    }

    /// `N_a`.
    pub fn n_tokens(&self) -> usize {
        self.n_time_patches * self.n_freq_patches
    }
}

/// All-zero filter bank marking missing audio.
pub fn zero_fbank(l_tar: usize, n_mels: usize) -> MelFilterBank {
    MelFilterBank {
        frames: Matrix::zeros(l_tar, n_mels),
        frame_shift_ms: 0.0,
        target_len: l_tar,
        missing: true,
        padded_short_clip: false,
    }
}

/// Audio tokens for an item: zeros flagged missing when the filter bank is
/// the missing-audio placeholder, otherwise the encoder's tokens.
pub fn audio_tokens_for(
    fbank: &MelFilterBank,
    encoded: Option<Matrix>,
    n_tokens: usize,
    dim: usize,
) -> Result<AudioTokens> {
    if fbank.missing {
        return Ok(AudioTokens::missing(n_tokens, dim));
    }
    match encoded {
        Some(m) if m.shape() == (n_tokens, dim) => Ok(AudioTokens::new(m)),
        Some(m) => Err(Error::Shape(format!("encoded audio is {}, expected {n_tokens}x{dim}", shape_str(&m)))),
        None => Err(Error::InvalidArgument("audio present but no encoded tokens supplied".into())),
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the `n_mels` triangular filters.
pub fn mel_center_frequencies(n_mels: usize) -> Vec<f64> {
    mel_edges(n_mels)[1..=n_mels].to_vec()
}

fn mel_edges(n_mels: usize) -> Vec<f64> {
    let top = hz_to_mel(MEL_HIGH_HZ);
    (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect()
}

/// Triangular HTK Mel filters over the `n_fft/2 + 1` DFT bins, as an
/// `n_mels × (n_fft/2 + 1)` matrix.
pub fn mel_filters(n_mels: usize, n_fft: usize, sample_rate: u32) -> Matrix {
    let edges = mel_edges(n_mels);
    let n_bins = n_fft / 2 + 1;
    let mut w = Matrix::zeros(n_mels, n_bins);
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let v = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            w[(m, k)] = v;
        }
    }
    w
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()).collect()
}

/// Log-Mel filter bank with exactly `cfg.target_len` frames.
///
/// Frame `k` starts at `round(k · f_shift · sr / 1000)`; samples past the end
/// of the clip read as zero. Each frame is Hamming-windowed, transformed with
/// a power-of-two DFT, and its magnitude spectrum projected onto the Mel
/// filters before `ln(max(e, 1e-10))`.
pub fn compute_fbank(wave: &Waveform, cfg: &FbankConfig) -> Result<MelFilterBank> {
    if wave.sample_rate != SAMPLE_RATE {
        return Err(Error::InvalidArgument(format!(
            "filter bank expects {SAMPLE_RATE} Hz audio, got {} Hz; resample upstream",
            wave.sample_rate
        )));
    }
    if cfg.target_len == 0 || cfg.n_mels == 0 || cfg.window_ms <= 0.0 {
        return Err(Error::InvalidArgument(format!("invalid filter bank configuration {cfg:?}")));
    }
    let sr = wave.sample_rate as f64;
    let win = ((cfg.window_ms * sr / 1000.0).round() as usize).max(1);
    let n_fft = win.next_power_of_two();
    let padded_short_clip = wave.len() < win;
    if padded_short_clip {
        log::warn!("clip of {} samples is shorter than one {win}-sample window; zero-padding", wave.len());
    }
    let shift_ms = adaptive_frame_shift(wave.len(), wave.sample_rate, cfg.target_len)?;
    let filters = mel_filters(cfg.n_mels, n_fft, wave.sample_rate);
    let window = hamming(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;

    let mut frames = Matrix::zeros(cfg.target_len, cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut magnitude = vec![0.0; n_bins];
    for k in 0..cfg.target_len {
        let start = (k as f64 * shift_ms * sr / 1000.0).round() as usize;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = if i < win { wave.samples.get(start + i).copied().unwrap_or(0.0) * window[i] } else { 0.0 };
            *slot = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in magnitude.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        let row = frames.row_mut(k);
        for (mel, out) in row.iter_mut().enumerate() {
            let e: f64 = filters.row(mel).iter().zip(&magnitude).map(|(w, m)| w * m).sum();
            *out = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(MelFilterBank {
        frames,
        frame_shift_ms: shift_ms,
        target_len: cfg.target_len,
        missing: false,
        padded_short_clip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let samples =
            (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()).collect();
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn frame_shift_examples() {
        assert_eq!(adaptive_frame_shift(163_840, 16_000, 1024).unwrap(), 10.0);
        assert_eq!(adaptive_frame_shift(262_144, 16_000, 1024).unwrap(), 16.0);
        let a = adaptive_frame_shift(12_345, 16_000, 1024).unwrap();
        let b = adaptive_frame_shift(24_690, 16_000, 1024).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
        assert!(adaptive_frame_shift(0, 16_000, 1024).is_err());
        assert!(adaptive_frame_shift(10, 0, 1024).is_err());
        assert!(adaptive_frame_shift(10, 16_000, 0).is_err());
    }

    #[test]
    fn patch_count_examples() {
        assert_eq!(patch_count(1024, 128, 16, 10).unwrap(), 1212);
        assert_eq!(patch_count(16, 16, 16, 10).unwrap(), 1);
        assert_eq!(patch_count(26, 16, 16, 10).unwrap(), 2);
        assert!(patch_count(15, 128, 16, 10).is_err());
        let g = PatchGrid::new(1024, 128, 16, 10).unwrap();
        assert_eq!((g.n_time_patches, g.n_freq_patches), (101, 12));
    }

    #[test]
    fn zero_fbank_is_flagged_and_propagates() {
        let z = zero_fbank(1024, 128);
        assert_eq!(z.frames.shape(), (1024, 128));
        assert_eq!(z.frames.sum(), 0.0);
        let tokens = audio_tokens_for(&z, None, 1212, 16).unwrap();
        assert!(tokens.is_missing());
        assert_eq!(tokens.as_matrix().shape(), (1212, 16));
        assert_eq!(tokens.as_matrix().sum(), 0.0);
    }

    #[test]
    fn silence_is_constant_log_floor() {
        let w = Waveform::new(vec![0.0; 16_000], SAMPLE_RATE).unwrap();
        let fb = compute_fbank(&w, &FbankConfig::default()).unwrap();
        let floor = LOG_FLOOR.ln();
        assert!(fb.frames.as_slice().iter().all(|&v| v == floor));
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let w = Waveform::new(vec![0.0; 8000], 8000).unwrap();
        let err = compute_fbank(&w, &FbankConfig::default()).unwrap_err();
        assert!(err.to_string().contains("resample"));
    }

    #[test]
    fn short_clip_is_padded() {
        let w = Waveform::new(vec![0.5; 100], SAMPLE_RATE).unwrap();
        let fb = compute_fbank(&w, &FbankConfig::default()).unwrap();
        assert!(fb.padded_short_clip);
        assert_eq!(fb.frames.rows(), TARGET_LENGTH);
    }

    #[test]
    fn row_count_is_fixed() {
        for secs in [1.0, 10.24, 60.0] {
            let fb = compute_fbank(&sine(440.0, secs), &FbankConfig::default()).unwrap();
            assert_eq!(fb.frames.shape(), (1024, 128), "{secs} s");
        }
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        let c = mel_center_frequencies(128);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert!(c[127] < MEL_HIGH_HZ);
    }
}
