//! Trains one model per fusion kind on the same synthetic corpus and prints
//! held-out text-to-video R@1, best first.
//!
//! cargo run --release --example fusion_ablation -- [lr] [epochs]

use tefal::fusion::FusionKind;
use tefal::synth::{synth_corpus, SynthConfig};
use tefal::trainer::{evaluate, train, EvalOptions, TrainConfig};

fn main() -> tefal::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let lr = args.first().copied().unwrap_or(1e-3);
    let epochs = args.get(1).copied().unwrap_or(20.0) as usize;

    let data = synth_corpus(&SynthConfig { n_items: 3000, ..SynthConfig::default() })?;
    let (train_set, eval_set) = data.corpus.split_at(2000);

    let mut rows = Vec::new();
    for fusion in FusionKind::ALL {
        let cfg = TrainConfig { fusion, lr, epochs, ..TrainConfig::default() };
        let model = train(&cfg, &train_set)?.checkpoint.model;
        let r1 = evaluate(&model, &eval_set, &EvalOptions::default())?.t2v.r1;
        rows.push((fusion, r1));
    }
    rows.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (fusion, r1) in rows {
        println!("{:<10} R@1 {r1:5.1}", fusion.as_str());
    }
    Ok(())
}
