//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use tefal::Matrix;

pub const SR: f64 = 16_000.0;

pub fn mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn inv_mel(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Log-Mel energies of one frame, computed directly.
pub fn oracle_frame(samples: &[f64], start: usize, n_mels: usize) -> Vec<f64> {
    let (win, n_fft) = (400usize, 512usize);
    let frame: Vec<f64> = (0..win)
        .map(|i| {
            let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / (win - 1) as f64).cos();
            samples.get(start + i).copied().unwrap_or(0.0) * w
        })
        .collect();
    let mag: Vec<f64> = (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, x) in frame.iter().enumerate() {
                let ph = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                re += x * ph.cos();
                im += x * ph.sin();
            }
            re.hypot(im)
        })
        .collect();
    let top = mel(8000.0);
    let edge = |i: usize| inv_mel(top * i as f64 / (n_mels + 1) as f64);
    (0..n_mels)
        .map(|m| {
            let (lo, c, hi) = (edge(m), edge(m + 1), edge(m + 2));
            let e: f64 = mag
                .iter()
                .enumerate()
                .map(|(k, a)| {
                    let f = k as f64 * SR / n_fft as f64;
                    let tri = if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    };
                    tri * a
                })
                .sum();
            e.max(1e-10).ln()
        })
        .collect()
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

/// Brute-force metrics: sort each candidate list and count.
pub fn oracle_metrics(sim: &Matrix) -> (f64, f64, f64, f64, f64) {
    let n = sim.rows();
    let mut ranks = Vec::new();
    for q in 0..n {
        let mut idx: Vec<usize> = (0..sim.cols()).collect();
        idx.sort_by(|&a, &b| sim[(q, b)].partial_cmp(&sim[(q, a)]).unwrap().then(a.cmp(&b)));
        ranks.push(idx.iter().position(|&c| c == q).unwrap() + 1);
    }
    let pct = |k| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    let mut sorted = ranks.clone();
    sorted.sort();
    let median = if n % 2 == 1 { sorted[n / 2] } else { sorted[n / 2 - 1] };
    let mean = ranks.iter().sum::<usize>() as f64 / n as f64;
    (pct(1), pct(5), pct(10), median as f64, mean)
}

/// Index of the Mel filter whose centre lies closest to `hz` on the Mel scale.
pub fn nearest_mel_bin(hz: f64, n_mels: usize) -> usize {
    let top = mel(8000.0);
    let d = |m: usize| (top * (m + 1) as f64 / (n_mels + 1) as f64 - mel(hz)).abs();
    (0..n_mels).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap()
}

/// Runs a 1 kHz sine through `compute_fbank` and compares several frames
/// with the naive oracle. Returns the peak bin.
pub fn check_sine_peak() -> Result<usize, String> {
    use tefal::audiofront::{compute_fbank, FbankConfig, Waveform};
    let samples: Vec<f64> = (0..32_000).map(|i| (2.0 * PI * 1000.0 * i as f64 / SR).sin()).collect();
    let fb = compute_fbank(&Waveform::new(samples.clone(), 16_000).unwrap(), &FbankConfig::default())
        .map_err(|e| e.to_string())?;
    let expected = nearest_mel_bin(1000.0, 128);
    for k in [0usize, 100, 512, 900] {
        let start = (k as f64 * fb.frame_shift_ms * SR / 1000.0).round() as usize;
        let want = oracle_frame(&samples, start, 128);
        let got = fb.frames.row(k);
        for (g, w) in got.iter().zip(&want) {
            if (g - w).abs() > 1e-6 * w.abs().max(1.0) {
                return Err(format!("frame {k}: {g} vs oracle {w}"));
            }
        }
        if argmax(got) != expected {
            return Err(format!("frame {k}: peak in bin {} instead of {expected}", argmax(got)));
        }
    }
    Ok(expected)
}
