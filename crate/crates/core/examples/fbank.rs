//! Log-mel filter bank of a synthetic 1 kHz tone, written as an FBANK file.
//!
//! cargo run --example fbank -- [seconds]

use tefal::audiofront::{compute_fbank, mel_center_frequencies, FbankConfig, Waveform, SAMPLE_RATE};
use tefal::io::{read_fbank, write_fbank};

fn main() -> tefal::Result<()> {
    let seconds: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10.24);
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let samples =
        (0..n).map(|i| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / SAMPLE_RATE as f64).sin()).collect();
    let wave = Waveform::new(samples, SAMPLE_RATE)?;
    let cfg = FbankConfig::default();
    let fbank = compute_fbank(&wave, &cfg)?;
    println!(
        "{seconds} s -> {}x{} frames, shift {:.4} ms",
        fbank.frames.rows(),
        fbank.frames.cols(),
        fbank.frame_shift_ms
    );

    let row = fbank.frames.row(fbank.frames.rows() / 2);
    let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
    println!("peak mel bin {peak} (centre {:.1} Hz)", mel_center_frequencies(cfg.n_mels)[peak]);

    let path = std::env::temp_dir().join("tone.fbank");
    write_fbank(&path, &fbank.frames)?;
    let back = read_fbank(&path)?;
    println!("wrote {} ({} rows read back)", path.display(), back.rows());
    Ok(())
}
