//! Train on a synthetic corpus, evaluate on held-out items, save the
//! checkpoint.
//!
//! cargo run --release --example train_eval

use tefal::io::{load_checkpoint, save_checkpoint};
use tefal::synth::{synth_corpus, SynthConfig};
use tefal::trainer::{evaluate, train_with_validation, EvalOptions, TrainConfig};

fn main() -> tefal::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let data = synth_corpus(&SynthConfig { n_items: 1500, ..SynthConfig::default() })?;
    let (train_set, eval_set) = data.corpus.split_at(1000);

    let cfg = TrainConfig { epochs: 10, lr: 1e-3, ..TrainConfig::default() };
    let out = train_with_validation(&cfg, &train_set, Some(&eval_set))?;
    let report = evaluate(&out.checkpoint.model, &eval_set, &EvalOptions::default())?;
    for m in [&report.t2v, &report.v2t] {
        println!(
            "{:?}: R@1 {:.1}  R@5 {:.1}  R@10 {:.1}  MdR {}  MnR {:.1}",
            m.direction, m.r1, m.r5, m.r10, m.median_rank, m.mean_rank
        );
    }

    let path = std::env::temp_dir().join("tefal-example.tfck");
    save_checkpoint(&path, &out.checkpoint)?;
    let back = load_checkpoint(&path)?;
    println!("saved {} after {} steps (reloaded step {})", path.display(), out.checkpoint.step, back.step);
    Ok(())
}
