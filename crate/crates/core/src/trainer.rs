//! Mini-batch contrastive training and evaluation.

use std::collections::BTreeMap;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusItem};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::matrix::Matrix;
use crate::model::{ItemEncoding, Modalities, Model, ModelConfig, QueryEncoding};
use crate::objective::TEMPERATURE_INIT;
use crate::params::{ParamStore, Parameters};
use crate::retrieval::{
    apply_postprocessing, compute_metrics, ranks_from_similarity, rerank_two_stage, Direction, PostProcess,
    RankingMetrics, ScoreMatrixShortlist, ShortlistSize,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub fusion: FusionKind,
    pub modalities: Modalities,
    /// Must equal the corpus embedding width.
    pub dim: usize,
    pub proj_dim: usize,
    pub out_affine: bool,
    pub temperature_init: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            epochs: 20,
            lr: 1e-4,
            seed: 0,
            fusion: FusionKind::Addition,
            modalities: Modalities::Both,
            dim: 32,
            proj_dim: 32,
            out_affine: true,
            temperature_init: TEMPERATURE_INIT,
            grad_clip: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            proj_dim: self.proj_dim,
            fusion: self.fusion,
            modalities: self.modalities,
            out_affine: self.out_affine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let checks = [
            ("lr", self.lr >= 0.0 && self.lr.is_finite()),
            ("grad_clip", self.grad_clip > 0.0),
            ("weight_decay", self.weight_decay >= 0.0 && self.weight_decay.is_finite()),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("eps", self.eps > 0.0),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::Config(format!("invalid value for `{name}`"))),
            None => Ok(()),
        }
    }
}

/// A trained model and the number of optimizer steps behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub temperature: f64,
    /// Largest pre-clip global gradient norm seen in the epoch.
    pub max_grad_norm: f64,
    /// Text-to-video R@1 on the validation corpus, when one is given.
    pub validation_r1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochLog>,
    pub step_losses: Vec<f64>,
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    first: BTreeMap<String, Matrix>,
    second: BTreeMap<String, Matrix>,
    t: u64,
}

/// Weight decay is applied to weight matrices only, not to LayerNorm
/// affines, biases or the temperature.
pub fn decays(name: &str) -> bool {
    !(name.contains("ln_") || name.ends_with("bias") || name.ends_with("log_scale"))
}

impl AdamW {
    pub fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, p, g) in store.iter_mut_with_grads() {
            let m = self.first.entry(name.to_string()).or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            let v = self.second.entry(name.to_string()).or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for (i, (w, &gi)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps) + wd * *w;
                *w -= lr * update;
            }
        }
    }
}

/// Learning rate at `step` of `total` under cosine decay to zero.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Shuffled batches for one epoch; the last partial batch is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

/// One optimizer step on `batch`. Returns the loss and the pre-clip
/// gradient norm.
pub fn train_step(
    model: &mut Model,
    store: &mut ParamStore,
    optimizer: &mut AdamW,
    cfg: &TrainConfig,
    batch: &[&CorpusItem],
    lr: f64,
) -> Result<(f64, f64)> {
    let out = model.batch_gradients(batch)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: store.step(),
            loss: out.loss,
            items: batch.iter().map(|it| it.id.clone()).collect(),
        });
    }
    store.zero_grads();
    store.accumulate_from(&out.grads)?;
    let norm = store.clip_grad_norm(cfg.grad_clip);
    optimizer.step(store, cfg, lr);
    store.write_into(model)?;
    model.temperature.clamp();
    let name = "temperature.log_scale";
    store.insert(name, model.temperature.log_scale.clone());
    store.set_step(store.step() + 1);
    Ok((out.loss, norm))
}

pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    train_with_validation(cfg, corpus, None)
}

/// Trains from a fresh seeded model. Deterministic for a given config and
/// corpus, independent of the thread count.
pub fn train_with_validation(cfg: &TrainConfig, corpus: &Corpus, validation: Option<&Corpus>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::init(cfg.model_config(), cfg.temperature_init, cfg.seed)?;
    continue_training(cfg, Checkpoint { model, step: 0 }, corpus, validation)
}

/// Runs `cfg.epochs` epochs starting from `start`.
pub fn continue_training(
    cfg: &TrainConfig,
    start: Checkpoint,
    corpus: &Corpus,
    validation: Option<&Corpus>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("cannot train on an empty corpus".into()));
    }
    if corpus.len() < cfg.batch_size {
        return Err(Error::Config(format!("batch size {} exceeds corpus size {}", cfg.batch_size, corpus.len())));
    }
    let Checkpoint { mut model, step } = start;
    if model.config != cfg.model_config() {
        return Err(Error::Config("checkpoint model config differs from the training config".into()));
    }
    model.check_corpus(corpus)?;
    let mut store = ParamStore::from_parameters(&model);
    store.set_step(step);
    let mut optimizer = AdamW::default();
    let per_epoch = corpus.len() / cfg.batch_size;
    let total = (per_epoch * cfg.epochs) as u64;
    let mut step_losses = Vec::with_capacity(total as usize);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut local = 0u64;

    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut max_norm = 0.0f64;
        for batch in epoch_batches(corpus.len(), cfg.batch_size, cfg.seed, epoch) {
            let items: Vec<&CorpusItem> = batch.iter().map(|&i| corpus.item(i)).collect();
            let lr = cosine_lr(cfg.lr, local, total);
            let (loss, norm) = train_step(&mut model, &mut store, &mut optimizer, cfg, &items, lr)?;
            sum += loss;
            max_norm = max_norm.max(norm);
            step_losses.push(loss);
            local += 1;
        }
        let validation_r1 = match validation {
            Some(v) => Some(evaluate(&model, v, &EvalOptions::default())?.t2v.r1),
            None => None,
        };
        let log = EpochLog {
            epoch: epoch + 1,
            mean_loss: sum / per_epoch as f64,
            temperature: model.temperature.value(),
            max_grad_norm: max_norm,
            validation_r1,
        };
        info!(
            "epoch {} loss {:.4} tau {:.3} grad-norm {:.3}{}",
            log.epoch,
            log.mean_loss,
            log.temperature,
            log.max_grad_norm,
            log.validation_r1.map(|r| format!(" val-R1 {r:.1}")).unwrap_or_default()
        );
        epochs.push(log);
    }
    Ok(TrainOutcome { checkpoint: Checkpoint { model, step: store.step() }, epochs, step_losses })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOptions {
    /// Two-stage retrieval with this shortlist; exhaustive when absent.
    pub shortlist: Option<ShortlistSize>,
    pub postprocess: Vec<PostProcess>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub t2v: RankingMetrics,
    pub v2t: RankingMetrics,
    pub t2v_ranks: Vec<usize>,
    pub v2t_ranks: Vec<usize>,
    /// Shortlist size used, if two-stage.
    pub shortlist: Option<usize>,
    pub postprocess: Vec<PostProcess>,
    /// Full-model pair evaluations, summed over both directions.
    pub model_evaluations: usize,
}

/// Text-to-video and video-to-text metrics over `corpus`, item `i`
/// being the ground truth for text `i`.
pub fn evaluate(model: &Model, corpus: &Corpus, opts: &EvalOptions) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("cannot evaluate on an empty corpus".into()));
    }
    let n = corpus.len();
    let items = model.encode_items(corpus)?;
    let texts: Vec<&Matrix> = corpus.items().iter().map(|it| it.text.as_matrix()).collect();

    match opts.shortlist {
        None => {
            let sim = model.similarity_matrix(&texts, &items)?;
            let t2v = apply_postprocessing(&sim, &opts.postprocess)?;
            let v2t = apply_postprocessing(&sim.transpose(), &opts.postprocess)?;
            let t2v_ranks = ranks_from_similarity(&t2v)?;
            let v2t_ranks = ranks_from_similarity(&v2t)?;
            report(t2v_ranks, v2t_ranks, n, None, opts, n * n)
        }
        Some(size) => {
            if !opts.postprocess.is_empty() {
                return Err(Error::Config(
                    "post-processing needs the full similarity matrix; drop the shortlist".into(),
                ));
            }
            let k = size.resolve(n)?;
            let queries: Vec<QueryEncoding> = texts.iter().map(|t| model.encode_query(t)).collect::<Result<_>>()?;
            let frames: Vec<&Matrix> = corpus.items().iter().map(|it| it.frames.as_matrix()).collect();
            let stage1 = ScoreMatrixShortlist::mean_pool(&texts, &frames)?;
            let score = |q: &QueryEncoding, it: &ItemEncoding| model.score(q, it);
            let t2v = rerank_two_stage(n, n, k, &stage1, |q, c| score(&queries[q], &items[c]))?;
            let v2t = rerank_two_stage(n, n, k, &stage1.transposed(), |v, t| score(&queries[t], &items[v]))?;
            let calls = t2v.stage_two_calls.iter().chain(&v2t.stage_two_calls).sum();
            report(t2v.ranks, v2t.ranks, n, Some(k), opts, calls)
        }
    }
}

fn report(
    t2v_ranks: Vec<usize>,
    v2t_ranks: Vec<usize>,
    n: usize,
    shortlist: Option<usize>,
    opts: &EvalOptions,
    model_evaluations: usize,
) -> Result<EvalReport> {
    Ok(EvalReport {
        t2v: compute_metrics(&t2v_ranks, n, Direction::TextToVideo)?,
        v2t: compute_metrics(&v2t_ranks, n, Direction::VideoToText)?,
        t2v_ranks,
        v2t_ranks,
        shortlist,
        postprocess: opts.postprocess.clone(),
        model_evaluations,
    })
}

/// Named snapshot of every parameter, for comparisons in tests and tools.
pub fn parameter_snapshot(model: &Model) -> BTreeMap<String, Matrix> {
    let mut out = BTreeMap::new();
    model.visit("", &mut |name, m| {
        out.insert(name.to_string(), m.clone());
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AudioTokens, FrameEmbeddings, TextEmbedding};
    use crate::synth::{synth_corpus, SynthConfig};

    fn corpus(n: usize, seed: u64) -> Corpus {
        synth_corpus(&SynthConfig {
            n_items: n,
            seed,
            dim: 16,
            frames: 4,
            audio_tokens: 6,
            relevant_frames: 2,
            ..SynthConfig::default()
        })
        .unwrap()
        .corpus
    }

    fn cfg() -> TrainConfig {
        TrainConfig { dim: 16, proj_dim: 16, epochs: 2, batch_size: 8, lr: 1e-3, ..TrainConfig::default() }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let c = corpus(48, 1);
        let config = TrainConfig { lr: 0.0, epochs: 1, ..cfg() };
        let before = Model::init(config.model_config(), config.temperature_init, config.seed).unwrap();
        let after = train(&config, &c).unwrap().checkpoint.model;
        assert_eq!(parameter_snapshot(&before), parameter_snapshot(&after));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let c = corpus(48, 2);
        let a = train(&cfg(), &c).unwrap();
        let b = train(&cfg(), &c).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.checkpoint.step, 12);
    }

    #[test]
    fn training_reduces_loss() {
        let c = corpus(96, 3);
        let out = train(&TrainConfig { epochs: 10, ..cfg() }, &c).unwrap();
        let first = out.epochs.first().unwrap().mean_loss;
        let last = out.epochs.last().unwrap().mean_loss;
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn zero_gradient_leaves_temperature() {
        // Identical items give an all-equal similarity matrix, so dL/dτ = 0.
        let item = |i: usize| CorpusItem {
            id: format!("same{i}"),
            text: TextEmbedding::new(Matrix::row_vector(&[0.3, -0.2, 0.5, 0.1])).unwrap(),
            frames: FrameEmbeddings::new(Matrix::from_rows(&[&[0.1, 0.2, 0.3, 0.4], &[-0.5, 0.0, 0.2, 0.1]])),
            audio: AudioTokens::new(Matrix::from_rows(&[&[0.2, 0.2, -0.1, 0.0], &[0.3, -0.4, 0.1, 0.2]])),
            audio_cls_dist: None,
        };
        let c = Corpus::new((0..4).map(item).collect()).unwrap();
        let config = TrainConfig { dim: 4, proj_dim: 4, batch_size: 4, epochs: 1, lr: 1e-2, ..TrainConfig::default() };
        let before = Model::init(config.model_config(), config.temperature_init, 0).unwrap();
        let after = train(&config, &c).unwrap().checkpoint.model;
        assert_eq!(before.temperature, after.temperature);
    }

    #[test]
    fn clipped_norm_within_bound() {
        let c = corpus(24, 4);
        let config = TrainConfig { grad_clip: 1e-3, ..cfg() };
        let mut model = Model::init(config.model_config(), config.temperature_init, 0).unwrap();
        let mut store = ParamStore::from_parameters(&model);
        let batch: Vec<&CorpusItem> = c.items()[..8].iter().collect();
        let out = model.batch_gradients(&batch).unwrap();
        store.accumulate_from(&out.grads).unwrap();
        assert!(store.global_grad_norm() > 1e-3);
        store.clip_grad_norm(config.grad_clip);
        assert!(store.global_grad_norm() <= config.grad_clip);
        let mut opt = AdamW::default();
        train_step(&mut model, &mut store, &mut opt, &config, &batch, 1e-3).unwrap();
    }

    #[test]
    fn batches_drop_remainder_and_cover_without_replacement() {
        let batches = epoch_batches(26, 8, 5, 0);
        assert_eq!(batches.len(), 3);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 24);
        assert_ne!(epoch_batches(26, 8, 5, 0), epoch_batches(26, 8, 5, 1));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let items = (0..100)
            .map(|i| CorpusItem {
                id: format!("r{i}"),
                text: TextEmbedding::new(Matrix::uniform(1, 16, 1.0, &mut rng)).unwrap(),
                frames: FrameEmbeddings::new(Matrix::uniform(4, 16, 1.0, &mut rng)),
                audio: AudioTokens::new(Matrix::uniform(6, 16, 1.0, &mut rng)),
                audio_cls_dist: None,
            })
            .collect();
        let c = Corpus::new(items).unwrap();
        let model = Model::init(cfg().model_config(), TEMPERATURE_INIT, 9).unwrap();
        let report = evaluate(&model, &c, &EvalOptions::default()).unwrap();
        assert!(report.t2v.r1 < 10.0, "{}", report.t2v.r1);
    }

    #[test]
    fn single_item_and_repeat_evaluation() {
        let c = corpus(1, 7);
        let model = Model::init(cfg().model_config(), TEMPERATURE_INIT, 0).unwrap();
        let r = evaluate(&model, &c, &EvalOptions::default()).unwrap();
        assert_eq!(r.t2v.r1, 100.0);
        let c = corpus(30, 7);
        let a = evaluate(&model, &c, &EvalOptions::default()).unwrap();
        let b = evaluate(&model, &c, &EvalOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(evaluate(&model, &Corpus::default(), &EvalOptions::default()).is_err());
    }

    #[test]
    fn full_shortlist_matches_exhaustive() {
        let c = corpus(40, 8);
        let model = Model::init(cfg().model_config(), TEMPERATURE_INIT, 3).unwrap();
        let exhaustive = evaluate(&model, &c, &EvalOptions::default()).unwrap();
        let full =
            evaluate(&model, &c, &EvalOptions { shortlist: Some(ShortlistSize::Percent(100.0)), ..Default::default() })
                .unwrap();
        assert_eq!(exhaustive.t2v_ranks, full.t2v_ranks);
        assert_eq!(exhaustive.v2t_ranks, full.v2t_ranks);
        assert_eq!(exhaustive.t2v, full.t2v);
    }
}
