//! The full retrieval model: video block, audio block, fusion, temperature.
//!
//! Forward for one (text i, item j) pair:
//!
//! 1. `E_{V|T} = video_block(text_i, frames_j)` (frames plus an audio
//!    summary row for `stacking`)
//! 2. `E_{A|T} = audio_block(text_i, audio_tokens_j)`
//! 3. `fused = fuse(E_{V|T}, E_{A|T})`
//! 4. `s_ij = cos(text_i, fused)`
//!
//! Batch backward runs in the reverse order: InfoNCE → cosine → fusion →
//! per-pair attention → per-item context side → per-text query side.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusItem};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionKind, FusionParams};
use crate::matrix::Matrix;
use crate::objective::{self, cosine_backward, cosine_similarity, Temperature};
use crate::params::{join, Parameters};
use crate::xattn::{ContextCache, PairCache, PairGrads, QueryCache, SingleForward, XAttnParams};

/// Which branches contribute to the fused embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modalities {
    /// Video and audio, combined per the fusion kind.
    Both,
    /// Audio branch zeroed: the fused embedding is `E_{V|T}`.
    #[serde(rename = "video")]
    VideoOnly,
    /// Video branch zeroed: the fused embedding is `E_{A|T}`.
    #[serde(rename = "audio")]
    AudioOnly,
}

impl Modalities {
    pub fn as_str(self) -> &'static str {
        match self {
            Modalities::Both => "both",
            Modalities::VideoOnly => "video",
            Modalities::AudioOnly => "audio",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Modalities::Both => 0,
            Modalities::VideoOnly => 1,
            Modalities::AudioOnly => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        [Modalities::Both, Modalities::VideoOnly, Modalities::AudioOnly].into_iter().find(|m| m.code() == code)
    }
}

impl std::str::FromStr for Modalities {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Modalities::Both),
            "video" => Ok(Modalities::VideoOnly),
            "audio" => Ok(Modalities::AudioOnly),
            _ => Err(Error::Config(format!("unknown modalities `{s}` (expected both|video|audio)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width D of text, frames and audio tokens.
    pub dim: usize,
    /// Projection width D_p. Must equal `dim`: the fused embedding is
    /// compared to the raw text row by cosine similarity.
    pub proj_dim: usize,
    pub fusion: FusionKind,
    pub modalities: Modalities,
    /// Learnable affine on each block's output LayerNorm.
    pub out_affine: bool,
}

impl ModelConfig {
    pub fn new(dim: usize) -> Self {
        Self { dim, proj_dim: dim, fusion: FusionKind::Addition, modalities: Modalities::Both, out_affine: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.proj_dim == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.dim != self.proj_dim {
            return Err(Error::Config(format!(
                "proj_dim ({}) must equal dim ({}) so fused embeddings are comparable with text rows",
                self.proj_dim, self.dim
            )));
        }
        if self.modalities != Modalities::Both && self.fusion != FusionKind::Addition {
            return Err(Error::Config(format!("single-modality models use addition fusion, got `{}`", self.fusion)));
        }
        Ok(())
    }

    pub fn uses_video_block(&self) -> bool {
        self.modalities != Modalities::AudioOnly
    }

    pub fn uses_audio_block(&self) -> bool {
        match self.modalities {
            Modalities::Both => self.fusion.uses_audio_block(),
            Modalities::VideoOnly => false,
            Modalities::AudioOnly => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub video: XAttnParams,
    pub audio: XAttnParams,
    pub fusion: FusionParams,
    pub temperature: Temperature,
}

impl Model {
    pub fn init(config: ModelConfig, temperature: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = XAttnParams::init(config.dim, config.proj_dim, config.out_affine, &mut rng);
        let audio = XAttnParams::init(config.dim, config.proj_dim, config.out_affine, &mut rng);
        let fusion = FusionParams::init(config.fusion, config.dim, config.proj_dim, config.out_affine, &mut rng);
        // Blocks the configuration never runs are kept as zeros.
        let video = if config.uses_video_block() { video } else { video.zeros_like() };
        let audio = if config.uses_audio_block() { audio } else { audio.zeros_like() };
        let fusion = if config.modalities == Modalities::Both { fusion } else { fusion.zeros_like() };
        Ok(Self { config, video, audio, fusion, temperature: Temperature::new(temperature)? })
    }

    /// Same structure, every matrix zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            video: self.video.zeros_like(),
            audio: self.audio.zeros_like(),
            fusion: self.fusion.zeros_like(),
            temperature: self.temperature.zeros_like(),
        }
    }

    /// `self += other`, matrix by matrix.
    pub fn accumulate(&mut self, other: &Model) -> Result<()> {
        let mut mats = Vec::new();
        other.visit("", &mut |_, m| mats.push(m.clone()));
        let mut it = mats.into_iter();
        let mut result = Ok(());
        self.visit_mut("", &mut |_, m| {
            if let Some(o) = it.next() {
                if result.is_ok() {
                    result = m.add_assign(&o);
                }
            }
        });
        result
    }

    /// Checks the corpus against the model dimensions and fusion needs.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.is_empty() {
            return Ok(());
        }
        if corpus.dim() != self.config.dim {
            return Err(Error::Shape(format!(
                "corpus embeddings are {}-d, model expects {}-d",
                corpus.dim(),
                self.config.dim
            )));
        }
        if self.config.fusion.needs_audio_summary()
            && self.config.modalities == Modalities::Both
            && !corpus.has_audio_summaries()
        {
            return Err(Error::Config(
                "stacking fusion needs audio CLS/DIST summary rows, which this corpus lacks".into(),
            ));
        }
        Ok(())
    }

    /// Context-side work for one item, independent of the query.
    pub fn encode_item(&self, item: &CorpusItem) -> Result<ItemEncoding> {
        let cfg = &self.config;
        let stacking = cfg.modalities == Modalities::Both && cfg.fusion == FusionKind::Stacking;
        let video = if cfg.uses_video_block() {
            let frames = item.frames.as_matrix();
            let ctx = if stacking {
                let summary = item.audio_summary().ok_or_else(|| {
                    Error::Config(format!("item `{}` has no audio summary rows for stacking fusion", item.id))
                })??;
                self.video.encode_context(&fusion::stacking_context(frames, &summary)?)?
            } else {
                self.video.encode_context(frames)?
            };
            Some(ctx)
        } else {
            None
        };
        let audio =
            if cfg.uses_audio_block() { Some(self.audio.encode_context(item.audio.as_matrix())?) } else { None };
        let (late, audio_mean) = match (&self.fusion, cfg.modalities) {
            (FusionParams::Late { proj }, Modalities::Both) => {
                let mean = item.audio.as_matrix().column_mean();
                (Some(crate::ops::matmul(&mean, proj)?), Some(mean))
            }
            _ => (None, None),
        };
        Ok(ItemEncoding { video, audio, late, audio_mean })
    }

    pub fn encode_items(&self, corpus: &Corpus) -> Result<Vec<ItemEncoding>> {
        self.check_corpus(corpus)?;
        corpus.items().par_iter().map(|item| self.encode_item(item)).collect()
    }

    /// Query-side work for one text row.
    pub fn encode_query(&self, text: &Matrix) -> Result<QueryEncoding> {
        let video = if self.config.uses_video_block() { Some(self.video.encode_query(text)?) } else { None };
        let audio = if self.config.uses_audio_block() { Some(self.audio.encode_query(text)?) } else { None };
        Ok(QueryEncoding { text: text.clone(), video, audio })
    }

    /// Forward for one pair, keeping what backward needs.
    pub fn forward_pair(&self, q: &QueryEncoding, item: &ItemEncoding) -> Result<PairForward> {
        let video = match (&q.video, &item.video) {
            (Some(qc), Some(cc)) => Some(self.video.attend_pair(qc, cc)?),
            _ => None,
        };
        let audio = match (&q.audio, &item.audio) {
            (Some(qc), Some(cc)) => Some(self.audio.attend_pair(qc, cc)?),
            _ => None,
        };
        let mut fusion_block = None;
        let fused = match (self.config.modalities, self.config.fusion) {
            (Modalities::VideoOnly, _) | (Modalities::Both, FusionKind::Stacking) => video_out(&video)?.clone(),
            (Modalities::AudioOnly, _) => audio_out(&audio)?.clone(),
            (Modalities::Both, FusionKind::Addition) => video_out(&video)?.add(audio_out(&audio)?)?,
            (Modalities::Both, FusionKind::LateFusion) => {
                let late = item.late.as_ref().ok_or_else(|| internal("late summary missing"))?;
                video_out(&video)?.add(late)?
            }
            (Modalities::Both, FusionKind::ConcatFc) => match &self.fusion {
                FusionParams::ConcatFc { weight, bias } => {
                    fusion::concat_fc(weight, bias, video_out(&video)?, audio_out(&audio)?)?
                }
                _ => return Err(internal("concat_fc parameters missing")),
            },
            (Modalities::Both, FusionKind::XAttnFusion) => match &self.fusion {
                FusionParams::XAttn(block) => {
                    let ctx = Matrix::vstack(&[video_out(&video)?, audio_out(&audio)?])?;
                    let fwd = block.forward(&q.text, &ctx)?;
                    let out = fwd.pair.output.clone();
                    fusion_block = Some(fwd);
                    out
                }
                _ => return Err(internal("xattn fusion parameters missing")),
            },
        };
        let cos = cosine_similarity(q.text.row(0), fused.row(0));
        Ok(PairForward { video, audio, fusion_block, fused, similarity: cos.value, degenerate: cos.degenerate })
    }

    /// Similarity of one encoded query against one encoded item.
    pub fn score(&self, q: &QueryEncoding, item: &ItemEncoding) -> Result<f64> {
        Ok(self.forward_pair(q, item)?.similarity)
    }

    /// T×V similarity matrix of every query row against every item.
    /// Rows are computed in parallel; each row is deterministic.
    pub fn similarity_matrix(&self, texts: &[&Matrix], items: &[ItemEncoding]) -> Result<Matrix> {
        if texts.is_empty() || items.is_empty() {
            return Err(Error::EmptyCorpus("similarity matrix needs at least one query and one candidate".into()));
        }
        let rows: Vec<Vec<f64>> = texts
            .par_iter()
            .map(|text| {
                let q = self.encode_query(text)?;
                items.iter().map(|it| self.score(&q, it)).collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Matrix::from_vec(texts.len(), items.len(), rows.concat())
    }

    /// Attention weights of `text` over the item's frames (`video`) or audio
    /// tokens (`audio`).
    pub fn attention_weights(&self, text: &Matrix, item: &CorpusItem, modality: AttnModality) -> Result<Matrix> {
        let enc = self.encode_item(item)?;
        let (block, ctx) = match modality {
            AttnModality::Video => (&self.video, enc.video),
            AttnModality::Audio => (&self.audio, enc.audio),
        };
        let ctx = ctx.ok_or_else(|| {
            Error::InvalidArgument(format!("this model has no {} attention block", modality.as_str()))
        })?;
        let q = block.encode_query(text)?;
        let w = block.attend_pair(&q, &ctx)?.weights;
        Matrix::from_vec(1, w.len(), w)
    }

    /// Loss and parameter gradients for one batch. Text i is paired with
    /// item i; every other item in the batch is a negative.
    pub fn batch_gradients(&self, batch: &[&CorpusItem]) -> Result<BatchGradients> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::EmptyCorpus("empty batch".into()));
        }
        let items: Vec<ItemEncoding> = batch.iter().map(|it| self.encode_item(it)).collect::<Result<_>>()?;
        let queries: Vec<QueryEncoding> =
            batch.iter().map(|it| self.encode_query(it.text.as_matrix())).collect::<Result<_>>()?;

        let pairs: Vec<Vec<PairForward>> = queries
            .par_iter()
            .map(|q| items.iter().map(|it| self.forward_pair(q, it)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        let mut sim = Matrix::zeros(b, b);
        let mut degenerate = 0;
        for (i, row) in pairs.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                sim[(i, j)] = p.similarity;
                degenerate += p.degenerate as usize;
            }
        }
        let tau = self.temperature.value();
        let nce = objective::infonce(&sim, tau)?;

        let rows: Vec<RowGrads> = (0..b)
            .into_par_iter()
            .map(|i| self.backward_row(&queries[i], &items, &pairs[i], nce.d_sim.row(i)))
            .collect::<Result<_>>()?;

        // Fixed-order reduction keeps training bit-reproducible.
        let mut grads = self.zeros_like();
        let (n_v, n_a) = (
            items[0].video.as_ref().map_or(0, ContextCache::len),
            items[0].audio.as_ref().map_or(0, ContextCache::len),
        );
        let p = self.config.proj_dim;
        let mut d_keys_v = vec![Matrix::zeros(n_v.max(1), p); b];
        let mut d_values_v = d_keys_v.clone();
        let mut d_keys_a = vec![Matrix::zeros(n_a.max(1), p); b];
        let mut d_values_a = d_keys_a.clone();
        let mut d_late = vec![Matrix::zeros(1, p); b];
        for (i, row) in rows.iter().enumerate() {
            grads.accumulate(&row.params)?;
            for j in 0..b {
                if let Some(v) = &row.video {
                    d_keys_v[j].add_assign(&v.d_keys[j])?;
                    d_values_v[j].add_assign(&v.d_values[j])?;
                }
                if let Some(a) = &row.audio {
                    d_keys_a[j].add_assign(&a.d_keys[j])?;
                    d_values_a[j].add_assign(&a.d_values[j])?;
                }
                if let Some(l) = &row.d_late {
                    d_late[j].add_assign(&l[j])?;
                }
            }
            if let (Some(v), Some(qc)) = (&row.video, &queries[i].video) {
                self.video.backward_query(qc, &v.d_query, &mut grads.video)?;
            }
            if let (Some(a), Some(qc)) = (&row.audio, &queries[i].audio) {
                self.audio.backward_query(qc, &a.d_query, &mut grads.audio)?;
            }
        }
        for (j, enc) in items.iter().enumerate() {
            if let Some(cc) = &enc.video {
                self.video.backward_context(cc, &d_keys_v[j], &d_values_v[j], &mut grads.video)?;
            }
            if let Some(cc) = &enc.audio {
                self.audio.backward_context(cc, &d_keys_a[j], &d_values_a[j], &mut grads.audio)?;
            }
            if let (FusionParams::Late { proj: g }, Some(mean)) = (&mut grads.fusion, &enc.audio_mean) {
                g.add_assign(&crate::ops::matmul_tn(mean, &d_late[j])?)?;
            }
        }
        grads.temperature.log_scale[(0, 0)] = nce.d_log_scale(tau);

        Ok(BatchGradients {
            loss: nce.loss,
            loss_t2v: nce.loss_t2v,
            loss_v2t: nce.loss_v2t,
            similarity: sim,
            degenerate_pairs: degenerate,
            grads,
        })
    }

    fn backward_row(
        &self,
        q: &QueryEncoding,
        items: &[ItemEncoding],
        pairs: &[PairForward],
        d_sim: &[f64],
    ) -> Result<RowGrads> {
        let b = items.len();
        let p = self.config.proj_dim;
        let mut params = self.zeros_like();
        let mut video =
            q.video.as_ref().map(|_| BranchGrads::new(b, items[0].video.as_ref().map_or(1, |c| c.len()), p));
        let mut audio =
            q.audio.as_ref().map(|_| BranchGrads::new(b, items[0].audio.as_ref().map_or(1, |c| c.len()), p));
        let mut d_late = match (&self.fusion, self.config.modalities) {
            (FusionParams::Late { .. }, Modalities::Both) => Some(vec![Matrix::zeros(1, p); b]),
            _ => None,
        };

        for j in 0..b {
            let pair = &pairs[j];
            let (_, d_fused) = cosine_backward(q.text.row(0), pair.fused.row(0), d_sim[j]);
            let d_fused = Matrix::from_vec(1, p, d_fused)?;
            let (d_v, d_a) = match (self.config.modalities, self.config.fusion) {
                (Modalities::VideoOnly, _) | (Modalities::Both, FusionKind::Stacking) => (Some(d_fused), None),
                (Modalities::AudioOnly, _) => (None, Some(d_fused)),
                (Modalities::Both, FusionKind::Addition) => (Some(d_fused.clone()), Some(d_fused)),
                (Modalities::Both, FusionKind::LateFusion) => {
                    if let Some(l) = d_late.as_mut() {
                        l[j].add_assign(&d_fused)?;
                    }
                    (Some(d_fused), None)
                }
                (Modalities::Both, FusionKind::ConcatFc) => match (&self.fusion, &mut params.fusion) {
                    (FusionParams::ConcatFc { weight, .. }, FusionParams::ConcatFc { weight: gw, bias: gb }) => {
                        let (dv, da, dw, db) = fusion::concat_fc_backward(
                            weight,
                            video_out(&pair.video)?,
                            audio_out(&pair.audio)?,
                            &d_fused,
                        )?;
                        gw.add_assign(&dw)?;
                        gb.add_assign(&db)?;
                        (Some(dv), Some(da))
                    }
                    _ => return Err(internal("concat_fc parameters missing")),
                },
                (Modalities::Both, FusionKind::XAttnFusion) => {
                    match (&self.fusion, &mut params.fusion, &pair.fusion_block) {
                        (FusionParams::XAttn(block), FusionParams::XAttn(gblock), Some(fwd)) => {
                            let (_, d_ctx) = block.backward(fwd, &d_fused, gblock)?;
                            (Some(d_ctx.row_matrix(0)), Some(d_ctx.row_matrix(1)))
                        }
                        _ => return Err(internal("xattn fusion state missing")),
                    }
                }
            };
            if let (Some(d_v), Some(g), Some(qc), Some(cc), Some(pc)) =
                (d_v, video.as_mut(), &q.video, &items[j].video, &pair.video)
            {
                let mut acc =
                    PairGrads { d_query: &mut g.d_query, d_keys: &mut g.d_keys[j], d_values: &mut g.d_values[j] };
                self.video.backward_pair(qc, cc, pc, &d_v, &mut params.video, &mut acc)?;
            }
            if let (Some(d_a), Some(g), Some(qc), Some(cc), Some(pc)) =
                (d_a, audio.as_mut(), &q.audio, &items[j].audio, &pair.audio)
            {
                let mut acc =
                    PairGrads { d_query: &mut g.d_query, d_keys: &mut g.d_keys[j], d_values: &mut g.d_values[j] };
                self.audio.backward_pair(qc, cc, pc, &d_a, &mut params.audio, &mut acc)?;
            }
        }
        Ok(RowGrads { params, video, audio, d_late })
    }

    /// Batch loss without gradients, computed through the inference path.
    pub fn loss(&self, batch: &[&CorpusItem]) -> Result<f64> {
        let items: Vec<ItemEncoding> = batch.iter().map(|it| self.encode_item(it)).collect::<Result<_>>()?;
        let texts: Vec<&Matrix> = batch.iter().map(|it| it.text.as_matrix()).collect();
        let sim = self.similarity_matrix(&texts, &items)?;
        Ok(objective::infonce(&sim, self.temperature.value())?.loss)
    }
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        if self.config.uses_video_block() {
            self.video.visit(&join(prefix, "video"), f);
        }
        if self.config.uses_audio_block() {
            self.audio.visit(&join(prefix, "audio"), f);
        }
        if self.config.modalities == Modalities::Both {
            self.fusion.visit(&join(prefix, "fusion"), f);
        }
        self.temperature.visit(&join(prefix, "temperature"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        if self.config.uses_video_block() {
            self.video.visit_mut(&join(prefix, "video"), f);
        }
        if self.config.uses_audio_block() {
            self.audio.visit_mut(&join(prefix, "audio"), f);
        }
        if self.config.modalities == Modalities::Both {
            self.fusion.visit_mut(&join(prefix, "fusion"), f);
        }
        self.temperature.visit_mut(&join(prefix, "temperature"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnModality {
    Video,
    Audio,
}

impl AttnModality {
    pub fn as_str(self) -> &'static str {
        match self {
            AttnModality::Video => "video",
            AttnModality::Audio => "audio",
        }
    }
}

/// Query-independent encodings of one item.
#[derive(Clone, Debug)]
pub struct ItemEncoding {
    video: Option<ContextCache>,
    audio: Option<ContextCache>,
    late: Option<Matrix>,
    audio_mean: Option<Matrix>,
}

/// Item-independent encodings of one text query.
#[derive(Clone, Debug)]
pub struct QueryEncoding {
    text: Matrix,
    video: Option<QueryCache>,
    audio: Option<QueryCache>,
}

#[derive(Clone, Debug)]
pub struct PairForward {
    pub video: Option<PairCache>,
    pub audio: Option<PairCache>,
    fusion_block: Option<SingleForward>,
    pub fused: Matrix,
    pub similarity: f64,
    pub degenerate: bool,
}

pub struct BatchGradients {
    pub loss: f64,
    pub loss_t2v: f64,
    pub loss_v2t: f64,
    pub similarity: Matrix,
    /// Pairs where a zero-norm embedding made the cosine degenerate.
    pub degenerate_pairs: usize,
    /// dL/dθ, shaped like the model.
    pub grads: Model,
}

struct BranchGrads {
    d_query: Matrix,
    d_keys: Vec<Matrix>,
    d_values: Vec<Matrix>,
}

impl BranchGrads {
    fn new(b: usize, n: usize, p: usize) -> Self {
        Self {
            d_query: Matrix::zeros(1, p),
            d_keys: vec![Matrix::zeros(n, p); b],
            d_values: vec![Matrix::zeros(n, p); b],
        }
    }
}

struct RowGrads {
    params: Model,
    video: Option<BranchGrads>,
    audio: Option<BranchGrads>,
    d_late: Option<Vec<Matrix>>,
}

fn video_out(p: &Option<PairCache>) -> Result<&Matrix> {
    p.as_ref().map(|c| &c.output).ok_or_else(|| internal("video branch missing"))
}

fn audio_out(p: &Option<PairCache>) -> Result<&Matrix> {
    p.as_ref().map(|c| &c.output).ok_or_else(|| internal("audio branch missing"))
}

fn internal(msg: &str) -> Error {
    Error::InvalidArgument(format!("model state inconsistent: {msg}"))
}
