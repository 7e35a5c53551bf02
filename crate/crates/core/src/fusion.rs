//! Combining the text-conditioned video and audio embeddings.
//!
//! `Addition` is the main model. The other four kinds are ablations:
//!
//! | kind        | fused embedding                                  |
//! |-------------|--------------------------------------------------|
//! | `addition`  | `E_{V|T} + E_{A|T}`                              |
//! | `late`      | `E_{V|T} + mean(E_A)·W_late`                     |
//! | `concat_fc` | `[E_{V|T}, E_{A|T}]·W_fc + b_fc`                 |
//! | `xattn`     | `XAttn(E_T, [E_{V|T}; E_{A|T}])` (third block)   |
//! | `stacking`  | video block over `[E_V; mean(cls, dist)]`        |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{shape_str, Matrix};
use crate::ops;
use crate::params::{join, Parameters};
use crate::xattn::XAttnParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Addition,
    #[serde(rename = "late")]
    LateFusion,
    ConcatFc,
    #[serde(rename = "xattn")]
    XAttnFusion,
    Stacking,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] = [
        FusionKind::Addition,
        FusionKind::LateFusion,
        FusionKind::ConcatFc,
        FusionKind::XAttnFusion,
        FusionKind::Stacking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Addition => "addition",
            FusionKind::LateFusion => "late",
            FusionKind::ConcatFc => "concat_fc",
            FusionKind::XAttnFusion => "xattn",
            FusionKind::Stacking => "stacking",
        }
    }

    /// Whether this kind runs the text-conditioned audio block.
    pub fn uses_audio_block(self) -> bool {
        matches!(self, FusionKind::Addition | FusionKind::ConcatFc | FusionKind::XAttnFusion)
    }

    /// Whether this kind needs per-item audio summary rows (CLS/DIST).
    pub fn needs_audio_summary(self) -> bool {
        self == FusionKind::Stacking
    }

    pub fn code(self) -> u32 {
        match self {
            FusionKind::Addition => 0,
            FusionKind::LateFusion => 1,
            FusionKind::ConcatFc => 2,
            FusionKind::XAttnFusion => 3,
            FusionKind::Stacking => 4,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::Config(format!("unknown fusion `{s}` (expected addition|late|concat_fc|xattn|stacking)"))
        })
    }
}

/// Extra learnable parameters owned by a fusion kind.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionParams {
    /// `addition` and `stacking` add no parameters.
    None,
    /// D×D_p projection of the mean-pooled raw audio tokens.
    Late { proj: Matrix },
    /// 2·D_p×D_p weight and 1×D_p bias.
    ConcatFc { weight: Matrix, bias: Matrix },
    /// A third cross-attention block with D = D_p.
    XAttn(Box<XAttnParams>),
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(kind: FusionKind, dim: usize, proj_dim: usize, out_affine: bool, rng: &mut R) -> Self {
        match kind {
            FusionKind::Addition | FusionKind::Stacking => FusionParams::None,
            FusionKind::LateFusion => {
                FusionParams::Late { proj: Matrix::uniform(dim, proj_dim, 1.0 / (dim as f64).sqrt(), rng) }
            }
            FusionKind::ConcatFc => FusionParams::ConcatFc {
                weight: Matrix::uniform(2 * proj_dim, proj_dim, 1.0 / ((2 * proj_dim) as f64).sqrt(), rng),
                bias: Matrix::zeros(1, proj_dim),
            },
            FusionKind::XAttnFusion => {
                FusionParams::XAttn(Box::new(XAttnParams::init(proj_dim, proj_dim, out_affine, rng)))
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            FusionParams::None => FusionParams::None,
            FusionParams::Late { proj } => FusionParams::Late { proj: Matrix::zeros(proj.rows(), proj.cols()) },
            FusionParams::ConcatFc { weight, bias } => FusionParams::ConcatFc {
                weight: Matrix::zeros(weight.rows(), weight.cols()),
                bias: Matrix::zeros(1, bias.cols()),
            },
            FusionParams::XAttn(p) => FusionParams::XAttn(Box::new(p.zeros_like())),
        }
    }

    /// Checks that the parameters are exactly the ones `kind` requires.
    pub fn check_kind(&self, kind: FusionKind) -> Result<()> {
        let ok = matches!(
            (kind, self),
            (FusionKind::Addition | FusionKind::Stacking, FusionParams::None)
                | (FusionKind::LateFusion, FusionParams::Late { .. })
                | (FusionKind::ConcatFc, FusionParams::ConcatFc { .. })
                | (FusionKind::XAttnFusion, FusionParams::XAttn(_))
        );
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("fusion `{kind}` does not match the supplied fusion parameters")))
        }
    }
}

impl Parameters for FusionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        match self {
            FusionParams::None => {}
            FusionParams::Late { proj } => f(&join(prefix, "late.proj"), proj),
            FusionParams::ConcatFc { weight, bias } => {
                f(&join(prefix, "fc.weight"), weight);
                f(&join(prefix, "fc.bias"), bias);
            }
            FusionParams::XAttn(p) => p.visit(&join(prefix, "xattn"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        match self {
            FusionParams::None => {}
            FusionParams::Late { proj } => f(&join(prefix, "late.proj"), proj),
            FusionParams::ConcatFc { weight, bias } => {
                f(&join(prefix, "fc.weight"), weight);
                f(&join(prefix, "fc.bias"), bias);
            }
            FusionParams::XAttn(p) => p.visit_mut(&join(prefix, "xattn"), f),
        }
    }
}

/// Inputs to [`fuse`]; which variant applies depends on the kind.
pub enum FusionInputs<'a> {
    /// `addition`, `concat_fc`: the two conditioned embeddings.
    Conditioned { video: &'a Matrix, audio: &'a Matrix },
    /// `xattn`: the text row plus the two conditioned embeddings.
    ConditionedWithText { text: &'a Matrix, video: &'a Matrix, audio: &'a Matrix },
    /// `late`: conditioned video plus the raw audio tokens.
    Late { video: &'a Matrix, audio_tokens: &'a Matrix },
    /// `stacking`: text, raw frames, an audio summary row and the video block.
    Stacking { text: &'a Matrix, frames: &'a Matrix, audio_summary: &'a Matrix, video_block: &'a XAttnParams },
}

/// Fuses per `kind`, always producing a 1×D_p row.
pub fn fuse(kind: FusionKind, params: &FusionParams, inputs: FusionInputs<'_>) -> Result<Matrix> {
    params.check_kind(kind)?;
    match (kind, params, inputs) {
        (FusionKind::Addition, _, FusionInputs::Conditioned { video, audio }) => add_rows(video, audio),
        (FusionKind::ConcatFc, FusionParams::ConcatFc { weight, bias }, FusionInputs::Conditioned { video, audio }) => {
            concat_fc(weight, bias, video, audio)
        }
        (
            FusionKind::XAttnFusion,
            FusionParams::XAttn(block),
            FusionInputs::ConditionedWithText { text, video, audio },
        ) => {
            add_rows(video, audio)?; // shape check
            Ok(block.forward(text, &Matrix::vstack(&[video, audio])?)?.pair.output)
        }
        (FusionKind::LateFusion, FusionParams::Late { proj }, FusionInputs::Late { video, audio_tokens }) => {
            add_rows(video, &late_audio_summary(audio_tokens, proj)?)
        }
        (FusionKind::Stacking, _, FusionInputs::Stacking { text, frames, audio_summary, video_block }) => {
            Ok(video_block.forward(text, &stacking_context(frames, audio_summary)?)?.pair.output)
        }
        (kind, _, _) => Err(Error::InvalidArgument(format!("wrong input form for fusion `{kind}`"))),
    }
}

fn add_rows(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != 1 || a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "fusion inputs must be matching single rows, got {} and {}",
            shape_str(a),
            shape_str(b)
        )));
    }
    a.add(b)
}

/// `[video, audio]·weight + bias`.
pub fn concat_fc(weight: &Matrix, bias: &Matrix, video: &Matrix, audio: &Matrix) -> Result<Matrix> {
    add_rows(video, audio)?;
    let joined = Matrix::hstack(&[video, audio])?;
    ops::matmul(&joined, weight)?.add(bias)
}

/// Gradients of [`concat_fc`]: `(d_video, d_audio, d_weight, d_bias)`.
pub fn concat_fc_backward(
    weight: &Matrix,
    video: &Matrix,
    audio: &Matrix,
    d_out: &Matrix,
) -> Result<(Matrix, Matrix, Matrix, Matrix)> {
    let joined = Matrix::hstack(&[video, audio])?;
    let (d_joined, d_weight) = ops::matmul_backward(&joined, weight, d_out)?;
    let p = video.cols();
    Ok((d_joined.slice_cols(0, p), d_joined.slice_cols(p, 2 * p), d_weight, d_out.clone()))
}

/// Raw audio summary for late fusion: token mean projected to D_p.
pub fn late_audio_summary(tokens: &Matrix, proj: &Matrix) -> Result<Matrix> {
    ops::matmul(&tokens.column_mean(), proj)
}

/// Gradient of [`late_audio_summary`] w.r.t. `proj`.
pub fn late_audio_summary_backward(tokens: &Matrix, d_out: &Matrix) -> Result<Matrix> {
    ops::matmul_tn(&tokens.column_mean(), d_out)
}

/// Elementwise mean of the CLS and DIST rows.
pub fn audio_summary(cls: &Matrix, dist: &Matrix) -> Result<Matrix> {
    if cls.shape() != dist.shape() {
        return Err(Error::Shape(format!("cls {} and dist {} differ in shape", shape_str(cls), shape_str(dist))));
    }
    cls.zip_with(dist, |a, b| (a + b) / 2.0)
}

/// Frames with the audio summary appended as one more row.
pub fn stacking_context(frames: &Matrix, audio_summary: &Matrix) -> Result<Matrix> {
    if audio_summary.rows() != 1 {
        return Err(Error::Shape(format!("audio summary must be one row, got {}", shape_str(audio_summary))));
    }
    Matrix::vstack(&[frames, audio_summary])
}
