//! Cosine similarity and the symmetric contrastive (InfoNCE) objective.

use crate::error::{Error, Result};
use crate::matrix::{dot, shape_str, Matrix};
use crate::params::{join, Parameters};

/// Lower and upper bound on the effective temperature.
pub const TEMPERATURE_MIN: f64 = 1.0;
pub const TEMPERATURE_MAX: f64 = 100.0;
/// Initial temperature, `1/0.07`.
pub const TEMPERATURE_INIT: f64 = 1.0 / 0.07;

/// Result of a cosine similarity. `degenerate` is set when either input has
/// zero norm, in which case the value is defined as 0 and the gradient as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Cosine {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Cosine { value: 0.0, degenerate: true };
    }
    let value = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Cosine { value, degenerate: false }
}

/// Gradients of `cos(a, b)` w.r.t. `a` and `b`, scaled by `upstream`.
/// Returns zeros for degenerate inputs.
pub fn cosine_backward(a: &[f64], b: &[f64], upstream: f64) -> (Vec<f64>, Vec<f64>) {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let s = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let da = a.iter().zip(b).map(|(&x, &y)| upstream * (y * inv - s * x / (na * na))).collect();
    let db = a.iter().zip(b).map(|(&x, &y)| upstream * (x * inv - s * y / (nb * nb))).collect();
    (da, db)
}

/// Learnable temperature `τ = exp(log_scale)`, kept inside
/// `[TEMPERATURE_MIN, TEMPERATURE_MAX]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Temperature {
    /// 1×1 matrix holding `log τ`.
    pub log_scale: Matrix,
}

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        let mut t = Self { log_scale: Matrix::filled(1, 1, tau.ln()) };
        t.clamp();
        Ok(t)
    }

    pub fn value(&self) -> f64 {
        self.log_scale[(0, 0)].exp().clamp(TEMPERATURE_MIN, TEMPERATURE_MAX)
    }

    /// Pulls `log_scale` back inside the allowed range.
    pub fn clamp(&mut self) {
        let v = &mut self.log_scale[(0, 0)];
        *v = v.clamp(TEMPERATURE_MIN.ln(), TEMPERATURE_MAX.ln());
    }

    pub fn zeros_like(&self) -> Self {
        Self { log_scale: Matrix::zeros(1, 1) }
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::new(TEMPERATURE_INIT).expect("valid default")
    }
}

impl Parameters for Temperature {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "log_scale"), &self.log_scale);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "log_scale"), &mut self.log_scale);
    }
}

/// Output of [`infonce`].
#[derive(Clone, Debug)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub loss_t2v: f64,
    pub loss_v2t: f64,
    /// dL/d sim, same shape as the similarity matrix.
    pub d_sim: Matrix,
    /// dL/dτ.
    pub d_tau: f64,
}

impl InfoNceOutput {
    /// dL/d log τ, for the chain through `τ = exp(log_scale)`.
    pub fn d_log_scale(&self, tau: f64) -> f64 {
        self.d_tau * tau
    }
}

/// Symmetric InfoNCE over a B×B similarity matrix whose diagonal holds the
/// positive pairs (rows: text queries, columns: candidates).
///
/// `L = L_t2v + L_v2t`, each the mean negative log-softmax of the diagonal
/// entry over its row (t2v) or column (v2t) of `sim·τ`.
pub fn infonce(sim: &Matrix, tau: f64) -> Result<InfoNceOutput> {
    let b = sim.rows();
    if sim.cols() != b {
        return Err(Error::Shape(format!("similarity matrix must be square, got {}", shape_str(sim))));
    }
    let bf = b as f64;
    let logits = sim.scale(tau);

    // Softmax probabilities along rows and along columns.
    let mut p_row = logits.clone();
    let mut loss_t2v = 0.0;
    for i in 0..b {
        let row = p_row.row_mut(i);
        let (lse, max) = log_sum_exp(row.iter().copied());
        loss_t2v -= (logits[(i, i)] - max) - lse;
        for v in row.iter_mut() {
            *v = (*v - max - lse).exp();
        }
    }
    let mut p_col = Matrix::zeros(b, b);
    let mut loss_v2t = 0.0;
    for j in 0..b {
        let (lse, max) = log_sum_exp((0..b).map(|i| logits[(i, j)]));
        loss_v2t -= (logits[(j, j)] - max) - lse;
        for i in 0..b {
            p_col[(i, j)] = (logits[(i, j)] - max - lse).exp();
        }
    }
    loss_t2v /= bf;
    loss_v2t /= bf;

    // dL/dlogits = (P_row − I)/B + (P_col − I)/B.
    let mut d_logits = p_row.add(&p_col)?;
    for i in 0..b {
        d_logits[(i, i)] -= 2.0;
    }
    d_logits.scale_in_place(1.0 / bf);
    // dL/dτ, written per row/column relative to the positive entry so that
    // an all-equal similarity matrix gives exactly zero.
    let mut d_tau = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| p_row[(i, j)] * (sim[(i, j)] - sim[(i, i)])).sum();
        let col: f64 = (0..b).map(|k| p_col[(k, i)] * (sim[(k, i)] - sim[(i, i)])).sum();
        d_tau += (row + col) / bf;
    }
    let d_sim = d_logits.scale(tau);
    Ok(InfoNceOutput { loss: loss_t2v + loss_v2t, loss_t2v, loss_v2t, d_sim, d_tau })
}

/// Returns `(log Σ exp(x − max), max)`.
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values.map(|v| (v - max).exp()).sum();
    (s.ln(), max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        let a = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&a, &a).value - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).value, 0.0);
        let b = [1.0, 2.0, 3.0];
        let base = cosine_similarity(&a, &b).value;
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let scaled: Vec<f64> = b.iter().map(|v| v * c).collect();
            assert!((cosine_similarity(&a, &scaled).value - base).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_zero_vector_is_flagged() {
        let c = cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]);
        assert_eq!(c, Cosine { value: 0.0, degenerate: true });
        let (da, db) = cosine_backward(&[0.0, 0.0], &[1.0, 2.0], 1.0);
        assert!(da.iter().chain(&db).all(|&v| v == 0.0));
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let out = infonce(&Matrix::filled(1, 1, 0.37), 14.0).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn identity_pattern_two_by_two() {
        let out = infonce(&Matrix::identity(2), 1.0).unwrap();
        let expected = 2.0 * -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((out.loss - 0.62652).abs() < 1e-5);
    }

    #[test]
    fn transpose_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sim = Matrix::uniform(5, 5, 1.0, &mut rng);
        let a = infonce(&sim, 7.0).unwrap();
        let b = infonce(&sim.transpose(), 7.0).unwrap();
        assert_eq!(a.loss_t2v, b.loss_v2t);
        assert_eq!(a.loss_v2t, b.loss_t2v);
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn rejects_non_square() {
        assert!(matches!(infonce(&Matrix::zeros(2, 3), 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn diagonal_boost_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sim = Matrix::uniform(4, 4, 1.0, &mut rng);
        let mut last = infonce(&sim, 5.0).unwrap().loss;
        for _ in 0..20 {
            for i in 0..4 {
                sim[(i, i)] += 0.5;
            }
            let now = infonce(&sim, 5.0).unwrap().loss;
            assert!(now < last || now == 0.0, "{now} !< {last}");
            last = now;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn row_shift_leaves_t2v_row_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sim = Matrix::uniform(4, 4, 1.0, &mut rng);
        // Per-row t2v term: −log softmax(row_i)[i].
        let row_term = |m: &Matrix, i: usize| {
            let row = m.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| ((v - max) * 3.0).exp()).sum();
            -((row[i] - max) * 3.0 - s.ln())
        };
        for i in 0..4 {
            let mut shifted = sim.clone();
            shifted.row_mut(i).iter_mut().for_each(|v| *v += 0.25);
            assert!((row_term(&sim, i) - row_term(&shifted, i)).abs() < 1e-12);
        }
        // Whole-row shift changes only the v2t part of the total.
        let mut shifted = sim.clone();
        shifted.row_mut(2).iter_mut().for_each(|v| *v += 0.25);
        let a = infonce(&sim, 3.0).unwrap();
        let b = infonce(&shifted, 3.0).unwrap();
        assert!((a.loss_t2v - b.loss_t2v).abs() < 1e-12);
    }

    #[test]
    fn temperature_is_clamped() {
        assert_eq!(Temperature::new(1e6).unwrap().value(), TEMPERATURE_MAX);
        assert_eq!(Temperature::new(0.01).unwrap().value(), TEMPERATURE_MIN);
        assert!(Temperature::new(0.0).is_err());
        assert!((Temperature::default().value() - 1.0 / 0.07).abs() < 1e-12);
    }

    #[test]
    fn symmetric_sim_has_zero_temperature_gradient() {
        let out = infonce(&Matrix::filled(4, 4, 0.3), 9.0).unwrap();
        assert_eq!(out.d_tau, 0.0);
    }
}
