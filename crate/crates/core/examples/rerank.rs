//! Two-stage retrieval: a mean-pooled frame shortlist re-scored by the
//! trained model, compared with exhaustive ranking.
//!
//! cargo run --release --example rerank -- [shortlist, e.g. 10%]

use std::time::Instant;

use tefal::retrieval::ShortlistSize;
use tefal::synth::{synth_corpus, SynthConfig};
use tefal::trainer::{evaluate, train, EvalOptions, TrainConfig};

fn main() -> tefal::Result<()> {
    let k: ShortlistSize = std::env::args().nth(1).unwrap_or_else(|| "10%".into()).parse()?;

    let data = synth_corpus(&SynthConfig { n_items: 3000, ..SynthConfig::default() })?;
    let (train_set, eval_set) = data.corpus.split_at(2000);
    let model = train(&TrainConfig { lr: 1e-3, ..TrainConfig::default() }, &train_set)?.checkpoint.model;

    let t = Instant::now();
    let full = evaluate(&model, &eval_set, &EvalOptions::default())?;
    let full_time = t.elapsed();
    let t = Instant::now();
    let short = evaluate(&model, &eval_set, &EvalOptions { shortlist: Some(k), ..Default::default() })?;
    let short_time = t.elapsed();

    println!(
        "exhaustive   R@1 {:5.1}  MnR {:6.1}  model calls {:8}  {:?}",
        full.t2v.r1, full.t2v.mean_rank, full.model_evaluations, full_time
    );
    println!(
        "shortlist {k:<4} R@1 {:5.1}  MnR {:6.1}  model calls {:8}  {:?}",
        short.t2v.r1, short.t2v.mean_rank, short.model_evaluations, short_time
    );
    Ok(())
}
