//! Dual-softmax re-scoring of the similarity matrix before ranking.
//!
//! cargo run --release --example dual_softmax

use tefal::retrieval::PostProcess;
use tefal::synth::{synth_corpus, SynthConfig};
use tefal::trainer::{evaluate, train, EvalOptions, TrainConfig};

fn main() -> tefal::Result<()> {
    let data = synth_corpus(&SynthConfig { n_items: 1500, ..SynthConfig::default() })?;
    let (train_set, eval_set) = data.corpus.split_at(1000);
    let model = train(&TrainConfig { epochs: 10, lr: 1e-3, ..TrainConfig::default() }, &train_set)?.checkpoint.model;

    let plain = evaluate(&model, &eval_set, &EvalOptions::default())?;
    println!("plain          t2v R@1 {:5.1}  v2t R@1 {:5.1}", plain.t2v.r1, plain.v2t.r1);
    for temperature in [10.0, 30.0, 100.0] {
        let opts = EvalOptions { postprocess: vec![PostProcess::DualSoftmax { temperature }], ..Default::default() };
        let r = evaluate(&model, &eval_set, &opts)?;
        println!("dsl temp {temperature:>5}  t2v R@1 {:5.1}  v2t R@1 {:5.1}", r.t2v.r1, r.v2t.r1);
    }
    Ok(())
}
