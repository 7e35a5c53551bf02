//! Central finite-difference verification of the analytic backward rules.
//!
//! Every check reduces the operation's output to a scalar through a fixed
//! random projection `L = Σ R ⊙ f(x)`, feeds `R` to the backward rule, and
//! compares each analytic coordinate against `(L(x+h) − L(x−h)) / 2h`.
//!
//! Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-3)`; the floor
//! keeps coordinates whose true gradient is ~0 from dividing noise by noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{AudioTokens, Corpus, CorpusItem, FrameEmbeddings, TextEmbedding};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionKind};
use crate::matrix::Matrix;
use crate::model::{Modalities, Model, ModelConfig};
use crate::objective::{self, cosine_backward, cosine_similarity};
use crate::ops::{self, LN_EPS};
use crate::params::Parameters;
use crate::xattn::{self, XAttnParams};

const DENOM_FLOOR: f64 = 1e-3;

/// Names accepted by [`grad_check`].
pub const OPS: &[&str] = &[
    "matmul",
    "softmax_rows",
    "layernorm_rows",
    "cosine",
    "infonce",
    "attend",
    "fusion_addition",
    "concat_fc",
    "late_audio_summary",
];

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Max relative error between `analytic` (one gradient per input) and central
/// differences of `f` at `inputs`.
pub fn compare_with_finite_differences(
    inputs: &[Matrix],
    analytic: &[Matrix],
    step: f64,
    f: impl Fn(&[Matrix]) -> Result<f64>,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    if inputs.len() != analytic.len() {
        return Err(Error::InvalidArgument("one analytic gradient per input is required".into()));
    }
    let mut worst: f64 = 0.0;
    let mut point = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        inputs[k].check_same_shape(grad)?;
        for c in 0..inputs[k].len() {
            let orig = inputs[k].as_slice()[c];
            point[k].as_mut_slice()[c] = orig + step;
            let plus = f(&point)?;
            point[k].as_mut_slice()[c] = orig - step;
            let minus = f(&point)?;
            point[k].as_mut_slice()[c] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad.as_slice()[c], numeric));
        }
    }
    Ok(worst)
}

/// Same as [`compare_with_finite_differences`] but over every named matrix of
/// a [`Parameters`] value. `analytic` must have the same structure.
pub fn compare_parameters<P: Parameters + Clone>(
    params: &P,
    analytic: &P,
    step: f64,
    f: impl Fn(&P) -> Result<f64>,
) -> Result<f64> {
    let mut grads = Vec::new();
    analytic.visit("", &mut |_, m| grads.push(m.clone()));
    let mut shapes = Vec::new();
    params.visit("", &mut |_, m| shapes.push(m.len()));
    if shapes.len() != grads.len() {
        return Err(Error::InvalidArgument("analytic gradient structure differs from parameters".into()));
    }
    let perturbed = |k: usize, c: usize, delta: f64| {
        let mut p = params.clone();
        let mut idx = 0;
        p.visit_mut("", &mut |_, m| {
            if idx == k {
                m.as_mut_slice()[c] += delta;
            }
            idx += 1;
        });
        p
    };
    let mut worst: f64 = 0.0;
    for (k, &len) in shapes.iter().enumerate() {
        for c in 0..len {
            let plus = f(&perturbed(k, c, step))?;
            let minus = f(&perturbed(k, c, -step))?;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grads[k].as_slice()[c], numeric));
        }
    }
    Ok(worst)
}

fn projection(shape: (usize, usize), salt: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ salt);
    Matrix::uniform(shape.0, shape.1, 1.0, &mut rng)
}

fn project_out(out: &Matrix, r: &Matrix) -> Result<f64> {
    out.dot(r)
}

fn arity(op: &str, point: &[Matrix], n: usize) -> Result<()> {
    if point.len() != n {
        return Err(Error::InvalidArgument(format!("`{op}` takes {n} input matrices, got {}", point.len())));
    }
    Ok(())
}

/// Finite-difference check of one named primitive at `point`. Returns the max
/// relative error over all input coordinates.
///
/// Inputs per op: `matmul` [a, b]; `softmax_rows` [x]; `layernorm_rows`
/// [x, gain, bias]; `cosine` [a, b] (single rows); `infonce` [sim, log τ];
/// `attend` [q, k, v]; `fusion_addition` [v, a]; `concat_fc` [w, b, v, a];
/// `late_audio_summary` [tokens, proj].
pub fn grad_check(op: &str, point: &[Matrix], step: f64) -> Result<f64> {
    match op {
        "matmul" => {
            arity(op, point, 2)?;
            let out = ops::matmul(&point[0], &point[1])?;
            let r = projection(out.shape(), 1);
            let (da, db) = ops::matmul_backward(&point[0], &point[1], &r)?;
            compare_with_finite_differences(point, &[da, db], step, |x| project_out(&ops::matmul(&x[0], &x[1])?, &r))
        }
        "softmax_rows" => {
            arity(op, point, 1)?;
            let y = ops::softmax_rows(&point[0]);
            let r = projection(y.shape(), 2);
            let dx = ops::softmax_rows_backward(&y, &r)?;
            compare_with_finite_differences(point, &[dx], step, |x| project_out(&ops::softmax_rows(&x[0]), &r))
        }
        "layernorm_rows" => {
            arity(op, point, 3)?;
            let (y, cache) = ops::layernorm_rows_cached(&point[0], &point[1], &point[2], LN_EPS)?;
            let r = projection(y.shape(), 3);
            let (dx, dg, db) = ops::layernorm_rows_backward(&cache, &point[1], &r)?;
            compare_with_finite_differences(point, &[dx, dg, db], step, |x| {
                project_out(&ops::layernorm_rows(&x[0], &x[1], &x[2], LN_EPS)?, &r)
            })
        }
        "cosine" => {
            arity(op, point, 2)?;
            let (a, b) = (&point[0], &point[1]);
            if a.rows() != 1 || a.shape() != b.shape() {
                return Err(Error::Shape("cosine check takes two matching single rows".into()));
            }
            let (da, db) = cosine_backward(a.row(0), b.row(0), 1.0);
            let da = Matrix::from_vec(1, a.cols(), da)?;
            let db = Matrix::from_vec(1, b.cols(), db)?;
            compare_with_finite_differences(point, &[da, db], step, |x| {
                Ok(cosine_similarity(x[0].row(0), x[1].row(0)).value)
            })
        }
        "infonce" => {
            arity(op, point, 2)?;
            let log_tau = point[1][(0, 0)];
            let out = objective::infonce(&point[0], log_tau.exp())?;
            let d_log = Matrix::filled(1, 1, out.d_log_scale(log_tau.exp()));
            compare_with_finite_differences(point, &[out.d_sim, d_log], step, |x| {
                Ok(objective::infonce(&x[0], x[1][(0, 0)].exp())?.loss)
            })
        }
        "attend" => {
            arity(op, point, 3)?;
            let (pooled, weights) = xattn::attend(&point[0], &point[1], &point[2])?;
            let r = projection(pooled.shape(), 4);
            let r_w = projection(weights.shape(), 5);
            // Analytic: d pooled = r, d weights = r_w + r·Vᵀ, then softmax backward.
            let (q, k, v) = (&point[0], &point[1], &point[2]);
            let scale = 1.0 / (q.cols() as f64).sqrt();
            let mut d_w = ops::matmul_nt(&r, v)?;
            d_w.add_assign(&r_w)?;
            let d_logits = ops::softmax_rows_backward(&weights, &d_w)?.scale(scale);
            let dq = ops::matmul(&d_logits, k)?;
            let dk = ops::matmul_tn(&d_logits, q)?;
            let dv = ops::matmul_tn(&weights, &r)?;
            compare_with_finite_differences(point, &[dq, dk, dv], step, |x| {
                let (p, w) = xattn::attend(&x[0], &x[1], &x[2])?;
                Ok(p.dot(&r)? + w.dot(&r_w)?)
            })
        }
        "fusion_addition" => {
            arity(op, point, 2)?;
            let r = projection(point[0].shape(), 6);
            let fuse = |x: &[Matrix]| {
                fusion::fuse(
                    FusionKind::Addition,
                    &fusion::FusionParams::None,
                    fusion::FusionInputs::Conditioned { video: &x[0], audio: &x[1] },
                )
            };
            // d/dv and d/da of (v + a)·r are both r: the identity Jacobian.
            compare_with_finite_differences(point, &[r.clone(), r.clone()], step, |x| project_out(&fuse(x)?, &r))
        }
        "concat_fc" => {
            arity(op, point, 4)?;
            let out = fusion::concat_fc(&point[0], &point[1], &point[2], &point[3])?;
            let r = projection(out.shape(), 7);
            let (dv, da, dw, db) = fusion::concat_fc_backward(&point[0], &point[2], &point[3], &r)?;
            compare_with_finite_differences(point, &[dw, db, dv, da], step, |x| {
                project_out(&fusion::concat_fc(&x[0], &x[1], &x[2], &x[3])?, &r)
            })
        }
        "late_audio_summary" => {
            arity(op, point, 2)?;
            let out = fusion::late_audio_summary(&point[0], &point[1])?;
            let r = projection(out.shape(), 8);
            let dproj = fusion::late_audio_summary_backward(&point[0], &r)?;
            let dtok = Matrix::vstack(&vec![
                &ops::matmul_nt(&r, &point[1])?.scale(1.0 / point[0].rows() as f64);
                point[0].rows()
            ])?;
            compare_with_finite_differences(point, &[dtok, dproj], step, |x| {
                project_out(&fusion::late_audio_summary(&x[0], &x[1])?, &r)
            })
        }
        other => Err(Error::UnknownOp(other.to_string())),
    }
}

/// End-to-end check of one cross-attention block: gradient of
/// `conditioned_embedding` w.r.t. every block parameter, the text row and the
/// context rows.
pub fn check_xattn_block(params: &XAttnParams, text: &Matrix, context: &Matrix, step: f64) -> Result<f64> {
    let fwd = params.forward(text, context)?;
    let r = projection(fwd.output().shape(), 9);
    let mut grads = params.zeros_like();
    let (d_text, d_ctx) = params.backward(&fwd, &r, &mut grads)?;
    let wrt_params = compare_parameters(params, &grads, step, |p| {
        project_out(&xattn::conditioned_embedding(p, text, context)?, &r)
    })?;
    let wrt_inputs = compare_with_finite_differences(&[text.clone(), context.clone()], &[d_text, d_ctx], step, |x| {
        project_out(&xattn::conditioned_embedding(params, &x[0], &x[1])?, &r)
    })?;
    Ok(wrt_params.max(wrt_inputs))
}

/// End-to-end check of the full model: dL/dθ of the batch InfoNCE loss for
/// every parameter.
pub fn check_model(model: &Model, batch: &[&CorpusItem], step: f64) -> Result<f64> {
    let analytic = model.batch_gradients(batch)?.grads;
    compare_parameters(model, &analytic, step, |m| m.loss(batch))
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Tolerance for primitive and single-block checks.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
/// Tolerance for end-to-end model checks.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_STEP: f64 = 1e-5;

/// A small model and batch: B=2, D=8, F=3, N_a=5.
pub fn toy_problem(kind: FusionKind, modalities: Modalities, seed: u64) -> Result<(Model, Corpus)> {
    let (b, d, f, n_a) = (2, 8, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..b)
        .map(|i| {
            Ok(CorpusItem {
                id: format!("toy{i}"),
                text: TextEmbedding::new(Matrix::uniform(1, d, 1.0, &mut rng))?,
                frames: FrameEmbeddings::new(Matrix::uniform(f, d, 1.0, &mut rng)),
                audio: AudioTokens::new(Matrix::uniform(n_a, d, 1.0, &mut rng)),
                audio_cls_dist: Some(Matrix::uniform(2, d, 1.0, &mut rng)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = ModelConfig::new(d);
    cfg.fusion = kind;
    cfg.modalities = modalities;
    let mut model = Model::init(cfg, 3.0, seed.wrapping_add(1))?;
    // Move LayerNorm affines off identity so their gradients are exercised.
    model.visit_mut("", &mut |name, m| {
        if name.contains("ln_") {
            let jitter = Matrix::uniform(m.rows(), m.cols(), 0.2, &mut rng);
            m.add_assign(&jitter).expect("same shape");
        }
    });
    Ok((model, Corpus::new(items)?))
}

/// The full suite: every primitive, one block end to end, and the toy model
/// for each fusion kind and single-modality ablation.
pub fn run_suite(seed: u64, step: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |r, c, s| Matrix::uniform(r, c, s, &mut rng);
    let mut reports = Vec::new();
    let mut push = |name: String, err: f64, tol: f64| {
        reports.push(GradCheckReport { name, max_relative_error: err, tolerance: tol, passed: err < tol });
    };

    let points: Vec<(&str, Vec<Matrix>)> = vec![
        ("matmul", vec![u(3, 4, 1.0), u(4, 2, 1.0)]),
        ("softmax_rows", vec![u(2, 5, 2.0)]),
        ("layernorm_rows", vec![u(2, 8, 2.0), u(1, 8, 1.5), u(1, 8, 1.0)]),
        ("cosine", vec![u(1, 6, 1.0), u(1, 6, 1.0)]),
        ("infonce", vec![u(6, 6, 1.0), Matrix::filled(1, 1, 1.7)]),
        ("attend", vec![u(1, 4, 1.0), u(5, 4, 1.0), u(5, 4, 1.0)]),
        ("fusion_addition", vec![u(1, 6, 1.0), u(1, 6, 1.0)]),
        ("concat_fc", vec![u(8, 4, 0.5), u(1, 4, 0.5), u(1, 4, 1.0), u(1, 4, 1.0)]),
        ("late_audio_summary", vec![u(5, 6, 1.0), u(6, 4, 0.5)]),
    ];
    for (op, point) in points {
        push(op.to_string(), grad_check(op, &point, step)?, PRIMITIVE_TOLERANCE);
    }

    let (model, corpus) = toy_problem(FusionKind::Addition, Modalities::Both, seed)?;
    let text = corpus.item(0).text.as_matrix();
    push(
        "conditioned_embedding".to_string(),
        check_xattn_block(&model.video, text, corpus.item(0).frames.as_matrix(), step)?,
        PRIMITIVE_TOLERANCE,
    );

    let variants = FusionKind::ALL
        .into_iter()
        .map(|k| (k, Modalities::Both))
        .chain([(FusionKind::Addition, Modalities::VideoOnly), (FusionKind::Addition, Modalities::AudioOnly)]);
    for (kind, modalities) in variants {
        let (model, corpus) = toy_problem(kind, modalities, seed)?;
        let batch: Vec<&CorpusItem> = corpus.items().iter().collect();
        push(
            format!("model[{}/{}]", modalities.as_str(), kind),
            check_model(&model, &batch, step)?,
            END_TO_END_TOLERANCE,
        );
    }
    Ok(reports)
}
