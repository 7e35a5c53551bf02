//! Synthetic aligned corpora with a controllable amount of audio-only signal.
//!
//! Every item has two latent vectors, `z_v` and `z_a`. The text embedding
//! sees both. Frames see only `z_v` (plus distractor frames that belong to no
//! item), so the `z_a` part of the text can only be matched through audio.
//! A fraction `p` of items carries `z_a` in its audio tokens, seen through a
//! fixed random rotation; the rest have noise or no audio at all.
//!
//! All values are rounded to `f32` so a corpus survives the on-disk format
//! unchanged.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{AudioTokens, Corpus, CorpusItem, FrameEmbeddings, TextEmbedding};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ops::matmul;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_items: usize,
    pub dim: usize,
    pub frames: usize,
    pub audio_tokens: usize,
    /// Fraction of items whose audio carries `z_a`.
    pub audio_fraction: f64,
    /// Noise standard deviation, relative to unit-norm latents.
    pub noise: f64,
    /// Frames per item that view `z_v`; the rest are distractors.
    pub relevant_frames: usize,
    /// Weight of `z_a` in the text embedding (`z_v` has weight 1).
    pub audio_weight: f64,
    /// Among items without audio signal, the fraction with missing audio
    /// (zero tokens, flagged) instead of noise tokens.
    pub missing_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_items: 1000,
            dim: 32,
            frames: 8,
            audio_tokens: 16,
            audio_fraction: 0.5,
            noise: 0.5,
            relevant_frames: 3,
            audio_weight: 1.0,
            missing_fraction: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        frac("audio fraction", self.audio_fraction)?;
        frac("missing fraction", self.missing_fraction)?;
        if self.dim == 0 || self.frames == 0 || self.audio_tokens == 0 {
            return Err(Error::InvalidArgument("dim, frames and audio tokens must be positive".into()));
        }
        if self.relevant_frames == 0 || self.relevant_frames > self.frames {
            return Err(Error::InvalidArgument(format!(
                "relevant frames must lie in [1, {}], got {}",
                self.frames, self.relevant_frames
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !self.audio_weight.is_finite() {
            return Err(Error::InvalidArgument("noise and audio weight must be finite, noise ≥ 0".into()));
        }
        Ok(())
    }
}

/// Which kind of audio an item received.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AudioKind {
    Informative,
    Noise,
    Missing,
}

pub struct SynthCorpus {
    pub corpus: Corpus,
    pub audio_kinds: Vec<AudioKind>,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("positive shape")
}

/// Random orthogonal matrix from Gram–Schmidt on a Gaussian matrix.
fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = gaussian(dim, dim, 1.0, rng);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for r in 0..dim {
        let mut v = g.row(r).to_vec();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    Matrix::from_vec(dim, dim, basis.concat()).expect("square")
}

/// Builds a corpus. Item ids are `item00000`, `item00001`, ...
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let latent_std = 1.0 / (d as f64).sqrt();
    let noise_std = cfg.noise * latent_std;
    let rotation = random_rotation(d, &mut rng);

    let mut items = Vec::with_capacity(cfg.n_items);
    let mut kinds = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let z_v = gaussian(1, d, latent_std, &mut rng);
        let z_a = gaussian(1, d, latent_std, &mut rng);
        let text = z_v.add(&z_a.scale(cfg.audio_weight))?.add(&gaussian(1, d, noise_std, &mut rng))?;

        let mut rows: Vec<Matrix> =
            (0..cfg.relevant_frames).map(|_| z_v.add(&gaussian(1, d, noise_std, &mut rng))).collect::<Result<_>>()?;
        rows.extend((cfg.relevant_frames..cfg.frames).map(|_| gaussian(1, d, latent_std, &mut rng)));
        rows.shuffle(&mut rng);
        let frames = Matrix::vstack(&rows.iter().collect::<Vec<_>>())?;

        let kind = if rng.gen::<f64>() < cfg.audio_fraction {
            AudioKind::Informative
        } else if rng.gen::<f64>() < cfg.missing_fraction {
            AudioKind::Missing
        } else {
            AudioKind::Noise
        };
        let (audio, cls_dist) = match kind {
            AudioKind::Informative | AudioKind::Noise => {
                let source = match kind {
                    AudioKind::Informative => z_a.clone(),
                    _ => gaussian(1, d, latent_std, &mut rng),
                };
                let rows: Vec<Matrix> = (0..cfg.audio_tokens)
                    .map(|_| source.add(&gaussian(1, d, noise_std, &mut rng)))
                    .collect::<Result<_>>()?;
                let tokens = matmul(&Matrix::vstack(&rows.iter().collect::<Vec<_>>())?, &rotation)?;
                let mean = tokens.column_mean();
                let cls = mean.add(&gaussian(1, d, noise_std, &mut rng))?;
                let dist = mean.add(&gaussian(1, d, noise_std, &mut rng))?;
                (AudioTokens::new(tokens.round_to_f32()), Matrix::vstack(&[&cls, &dist])?.round_to_f32())
            }
            AudioKind::Missing => (AudioTokens::missing(cfg.audio_tokens, d), Matrix::zeros(2, d)),
        };
        items.push(CorpusItem {
            id: format!("item{i:05}"),
            text: TextEmbedding::new(text.round_to_f32())?,
            frames: FrameEmbeddings::new(frames.round_to_f32()),
            audio,
            audio_cls_dist: Some(cls_dist),
        });
        kinds.push(kind);
    }
    Ok(SynthCorpus { corpus: Corpus::new(items)?, audio_kinds: kinds })
}
