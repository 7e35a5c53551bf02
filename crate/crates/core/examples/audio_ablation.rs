//! Trains the full model and both single-modality ablations on a synthetic
//! corpus and prints held-out retrieval metrics.
//!
//! cargo run --release --example audio_ablation -- [noise] [lr] [epochs]

use std::time::Instant;

use tefal::model::Modalities;
use tefal::synth::{synth_corpus, SynthConfig};
use tefal::trainer::{evaluate, train, EvalOptions, TrainConfig};

fn main() -> tefal::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let noise = args.first().copied().unwrap_or(0.5);
    let lr = args.get(1).copied().unwrap_or(1e-3);
    let epochs = args.get(2).copied().unwrap_or(20.0) as usize;

    let data = synth_corpus(&SynthConfig { n_items: 3000, noise, ..SynthConfig::default() })?;
    let (train_set, eval_set) = data.corpus.split_at(2000);

    for modalities in [Modalities::Both, Modalities::VideoOnly, Modalities::AudioOnly] {
        let start = Instant::now();
        let cfg = TrainConfig { modalities, lr, epochs, ..TrainConfig::default() };
        let out = train(&cfg, &train_set)?;
        let report = evaluate(&out.checkpoint.model, &eval_set, &EvalOptions::default())?;
        println!(
            "{:<6} loss {:.3} -> {:.3}  R@1 {:5.1}  R@5 {:5.1}  MdR {:4}  ({:.1}s)",
            modalities.as_str(),
            out.epochs[0].mean_loss,
            out.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN),
            report.t2v.r1,
            report.t2v.r5,
            report.t2v.median_rank,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
