//! Aligned (text, frames, audio) items.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::fusion;
use crate::matrix::{shape_str, Matrix};

/// The single text CLS row, 1×D.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(Matrix);

impl TextEmbedding {
    pub fn new(row: Matrix) -> Result<Self> {
        if row.rows() != 1 {
            return Err(Error::Shape(format!("text embedding must be one row, got {}", shape_str(&row))));
        }
        if !row.is_finite() {
            return Err(Error::InvalidArgument("text embedding has non-finite entries".into()));
        }
        Ok(Self(row))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Per-frame CLS rows, F×D.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEmbeddings(Matrix);

impl FrameEmbeddings {
    pub fn new(tokens: Matrix) -> Self {
        Self(tokens)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn frame_count(&self) -> usize {
        self.0.rows()
    }
}

/// Audio patch tokens, N_a×D. Missing audio is an all-zero matrix with
/// `missing` set.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioTokens {
    tokens: Matrix,
    missing: bool,
}

impl AudioTokens {
    pub fn new(tokens: Matrix) -> Self {
        Self { tokens, missing: false }
    }

    pub fn missing(n_tokens: usize, dim: usize) -> Self {
        Self { tokens: Matrix::zeros(n_tokens, dim), missing: true }
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.tokens
    }

    pub fn is_missing(&self) -> bool {
        self.missing
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub text: TextEmbedding,
    pub frames: FrameEmbeddings,
    pub audio: AudioTokens,
    /// Optional 2×D rows `[cls; dist]` from the audio encoder.
    pub audio_cls_dist: Option<Matrix>,
}

impl CorpusItem {
    /// Mean of the CLS and DIST rows, if present.
    pub fn audio_summary(&self) -> Option<Result<Matrix>> {
        self.audio_cls_dist.as_ref().map(|m| fusion::audio_summary(&m.row_matrix(0), &m.row_matrix(1)))
    }
}

/// A validated list of items with consistent dimensions and unique ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn new(items: Vec<CorpusItem>) -> Result<Self> {
        let corpus = Self { items };
        corpus.validate()?;
        Ok(corpus)
    }

    fn validate(&self) -> Result<()> {
        let Some(first) = self.items.first() else { return Ok(()) };
        let dim = first.text.as_matrix().cols();
        let frames = first.frames.frame_count();
        let tokens = first.audio.as_matrix().rows();
        let has_summary = first.audio_cls_dist.is_some();
        let mut seen = HashSet::new();
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate item id `{}`", item.id)));
            }
            let shapes = [
                ("text", item.text.as_matrix().shape(), (1, dim)),
                ("frames", item.frames.as_matrix().shape(), (frames, dim)),
                ("audio", item.audio.as_matrix().shape(), (tokens, dim)),
            ];
            for (what, got, want) in shapes {
                if got != want {
                    return Err(Error::Shape(format!(
                        "item `{}` {what} is {}x{}, expected {}x{}",
                        item.id, got.0, got.1, want.0, want.1
                    )));
                }
            }
            match &item.audio_cls_dist {
                Some(m) if m.shape() != (2, dim) => {
                    return Err(Error::Shape(format!("item `{}` cls/dist rows are {}", item.id, shape_str(m))))
                }
                s if s.is_some() != has_summary => {
                    return Err(Error::InvalidArgument(
                        "audio summary rows must be present for all items or none".into(),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn items(&self) -> &[CorpusItem] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &CorpusItem {
        &self.items[i]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Embedding width D (0 when empty).
    pub fn dim(&self) -> usize {
        self.items.first().map_or(0, |i| i.text.as_matrix().cols())
    }

    pub fn frame_count(&self) -> usize {
        self.items.first().map_or(0, |i| i.frames.frame_count())
    }

    pub fn audio_token_count(&self) -> usize {
        self.items.first().map_or(0, |i| i.audio.as_matrix().rows())
    }

    pub fn has_audio_summaries(&self) -> bool {
        self.items.first().is_some_and(|i| i.audio_cls_dist.is_some())
    }

    pub fn missing_audio_count(&self) -> usize {
        self.items.iter().filter(|i| i.audio.is_missing()).count()
    }

    /// Splits into the first `n` items and the rest.
    pub fn split_at(&self, n: usize) -> (Corpus, Corpus) {
        let n = n.min(self.items.len());
        (Corpus { items: self.items[..n].to_vec() }, Corpus { items: self.items[n..].to_vec() })
    }

    pub fn into_items(self) -> Vec<CorpusItem> {
        self.items
    }
}
