//! Text-conditioned cross-attention pooling.
//!
//! One block maps a text row (1×D) and a context matrix (n×D frame or audio
//! tokens) to a single text-conditioned embedding (1×D_p):
//!
//! ```text
//! Q = LN_q(text)·W_Q          K = LN_c(ctx)·W_K          V = LN_c(ctx)·W_V
//! w = softmax(Q·Kᵀ / √D_p)    pooled = w·V
//! out = LN_o(pooled·W_O)
//! ```
//!
//! The forward pass is split into a query side, a context side and a pair
//! step so that batched training can encode each text and each context once
//! and reuse them across all B×B pairs. Backward mirrors the same split.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{dot, shape_str, Matrix};
use crate::ops::{self, LnCache, LN_EPS};
use crate::params::{join, Parameters};

/// Gain and bias of one LayerNorm, each 1×dim.
#[derive(Clone, Debug, PartialEq)]
pub struct LnAffine {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LnAffine {
    pub fn identity(dim: usize) -> Self {
        Self { gain: Matrix::filled(1, dim, 1.0), bias: Matrix::zeros(1, dim) }
    }

    fn zeros(dim: usize) -> Self {
        Self { gain: Matrix::zeros(1, dim), bias: Matrix::zeros(1, dim) }
    }

    fn forward(&self, x: &Matrix) -> Result<(Matrix, LnCache)> {
        ops::layernorm_rows_cached(x, &self.gain, &self.bias, LN_EPS)
    }

    fn backward(&self, cache: &LnCache, d_out: &Matrix, grads: &mut LnAffine) -> Result<Matrix> {
        let (dx, dg, db) = ops::layernorm_rows_backward(cache, &self.gain, d_out)?;
        grads.gain.add_assign(&dg)?;
        grads.bias.add_assign(&db)?;
        Ok(dx)
    }
}

/// Learnable weights of one cross-attention block.
///
/// The video and audio branches each own a separate instance.
#[derive(Clone, Debug, PartialEq)]
pub struct XAttnParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    /// LayerNorm on the text query.
    pub ln_query: LnAffine,
    /// LayerNorm on the context, shared by the key and value projections.
    pub ln_context: LnAffine,
    /// LayerNorm on the projected output.
    pub ln_out: LnAffine,
    /// When false the output LayerNorm has no learnable affine: it stays at
    /// unit gain / zero bias and is not exposed as a parameter.
    pub out_affine: bool,
}

impl XAttnParams {
    /// Random weights in `±1/√fan_in`, LayerNorms at identity.
    pub fn init<R: Rng + ?Sized>(dim: usize, proj_dim: usize, out_affine: bool, rng: &mut R) -> Self {
        let in_bound = 1.0 / (dim as f64).sqrt();
        let out_bound = 1.0 / (proj_dim as f64).sqrt();
        Self {
            w_q: Matrix::uniform(dim, proj_dim, in_bound, rng),
            w_k: Matrix::uniform(dim, proj_dim, in_bound, rng),
            w_v: Matrix::uniform(dim, proj_dim, in_bound, rng),
            w_o: Matrix::uniform(proj_dim, proj_dim, out_bound, rng),
            ln_query: LnAffine::identity(dim),
            ln_context: LnAffine::identity(dim),
            ln_out: LnAffine::identity(proj_dim),
            out_affine,
        }
    }

    /// Identity projections (requires `dim == proj_dim`), identity LayerNorms.
    pub fn identity(dim: usize) -> Self {
        Self {
            w_q: Matrix::identity(dim),
            w_k: Matrix::identity(dim),
            w_v: Matrix::identity(dim),
            w_o: Matrix::identity(dim),
            ln_query: LnAffine::identity(dim),
            ln_context: LnAffine::identity(dim),
            ln_out: LnAffine::identity(dim),
            out_affine: true,
        }
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            w_q: Matrix::zeros(self.dim(), self.proj_dim()),
            w_k: Matrix::zeros(self.dim(), self.proj_dim()),
            w_v: Matrix::zeros(self.dim(), self.proj_dim()),
            w_o: Matrix::zeros(self.proj_dim(), self.proj_dim()),
            ln_query: LnAffine::zeros(self.dim()),
            ln_context: LnAffine::zeros(self.dim()),
            ln_out: LnAffine::zeros(self.proj_dim()),
            out_affine: self.out_affine,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn proj_dim(&self) -> usize {
        self.w_q.cols()
    }

    /// Checks every weight shape against `w_q`.
    pub fn validate(&self) -> Result<()> {
        let (d, p) = (self.dim(), self.proj_dim());
        let expect = [
            ("w_k", &self.w_k, (d, p)),
            ("w_v", &self.w_v, (d, p)),
            ("w_o", &self.w_o, (p, p)),
            ("ln_query.gain", &self.ln_query.gain, (1, d)),
            ("ln_query.bias", &self.ln_query.bias, (1, d)),
            ("ln_context.gain", &self.ln_context.gain, (1, d)),
            ("ln_context.bias", &self.ln_context.bias, (1, d)),
            ("ln_out.gain", &self.ln_out.gain, (1, p)),
            ("ln_out.bias", &self.ln_out.bias, (1, p)),
        ];
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::Shape(format!(
                    "{name} is {} but D={d}, D_p={p} requires {}x{}",
                    shape_str(m),
                    shape.0,
                    shape.1
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, what: &str, m: &Matrix) -> Result<()> {
        if m.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "{what} is {} but the block expects {} columns",
                shape_str(m),
                self.dim()
            )));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        1.0 / (self.proj_dim() as f64).sqrt()
    }

    /// Query side: `Q = LN_q(text)·W_Q`.
    pub fn encode_query(&self, text: &Matrix) -> Result<QueryCache> {
        self.check_input("text", text)?;
        if text.rows() != 1 {
            return Err(Error::Shape(format!("text query must be one row, got {}", shape_str(text))));
        }
        let (normalized, ln) = self.ln_query.forward(text)?;
        let query = ops::matmul(&normalized, &self.w_q)?;
        Ok(QueryCache { normalized, ln, query })
    }

    /// Context side: `K = LN_c(ctx)·W_K`, `V = LN_c(ctx)·W_V`.
    pub fn encode_context(&self, context: &Matrix) -> Result<ContextCache> {
        self.check_input("context", context)?;
        let (normalized, ln) = self.ln_context.forward(context)?;
        let keys = ops::matmul(&normalized, &self.w_k)?;
        let values = ops::matmul(&normalized, &self.w_v)?;
        let order = canonical_order(&keys, &values);
        Ok(ContextCache { normalized, ln, keys, values, order })
    }

    /// Attention of one encoded query over one encoded context, then the
    /// output projection and LayerNorm.
    pub fn attend_pair(&self, query: &QueryCache, context: &ContextCache) -> Result<PairCache> {
        let (weights, pooled) =
            attend_ordered(query.query.row(0), &context.keys, &context.values, &context.order, self.scale());
        let pooled = Matrix::from_vec(1, self.proj_dim(), pooled)?;
        let projected = ops::matmul(&pooled, &self.w_o)?;
        let (output, out_ln) = self.out_norm().forward(&projected)?;
        Ok(PairCache { weights, pooled, out_ln, output })
    }

    fn out_norm(&self) -> std::borrow::Cow<'_, LnAffine> {
        if self.out_affine {
            std::borrow::Cow::Borrowed(&self.ln_out)
        } else {
            std::borrow::Cow::Owned(LnAffine::identity(self.proj_dim()))
        }
    }

    /// Backward through one pair step. Accumulates into `grads.w_o`,
    /// `grads.ln_out`, and the per-query / per-context gradient buffers.
    pub fn backward_pair(
        &self,
        query: &QueryCache,
        context: &ContextCache,
        pair: &PairCache,
        d_output: &Matrix,
        grads: &mut XAttnParams,
        acc: &mut PairGrads<'_>,
    ) -> Result<()> {
        let mut out_grads = LnAffine::zeros(self.proj_dim());
        let d_projected = self.out_norm().backward(&pair.out_ln, d_output, &mut out_grads)?;
        if self.out_affine {
            grads.ln_out.gain.add_assign(&out_grads.gain)?;
            grads.ln_out.bias.add_assign(&out_grads.bias)?;
        }
        let (d_pooled, d_wo) = ops::matmul_backward(&pair.pooled, &self.w_o, &d_projected)?;
        grads.w_o.add_assign(&d_wo)?;

        let n = context.keys.rows();
        let dp = d_pooled.row(0);
        let mut d_weights = vec![0.0; n];
        for (j, dw) in d_weights.iter_mut().enumerate() {
            *dw = dot(dp, context.values.row(j));
            let w = pair.weights[j];
            for (o, &g) in acc.d_values.row_mut(j).iter_mut().zip(dp) {
                *o += w * g;
            }
        }
        let mut d_logits = vec![0.0; n];
        ops::softmax_row_backward(&pair.weights, &d_weights, &mut d_logits);
        let scale = self.scale();
        let q = query.query.row(0);
        for (j, &dl) in d_logits.iter().enumerate() {
            let g = dl * scale;
            for (o, &kv) in acc.d_query.as_mut_slice().iter_mut().zip(context.keys.row(j)) {
                *o += g * kv;
            }
            for (o, &qv) in acc.d_keys.row_mut(j).iter_mut().zip(q) {
                *o += g * qv;
            }
        }
        Ok(())
    }

    /// Backward through the context side given accumulated `dK`, `dV`.
    /// Returns the gradient w.r.t. the raw context rows.
    pub fn backward_context(
        &self,
        context: &ContextCache,
        d_keys: &Matrix,
        d_values: &Matrix,
        grads: &mut XAttnParams,
    ) -> Result<Matrix> {
        let (mut d_norm, d_wk) = ops::matmul_backward(&context.normalized, &self.w_k, d_keys)?;
        grads.w_k.add_assign(&d_wk)?;
        let (d_norm_v, d_wv) = ops::matmul_backward(&context.normalized, &self.w_v, d_values)?;
        grads.w_v.add_assign(&d_wv)?;
        d_norm.add_assign(&d_norm_v)?;
        self.ln_context.backward(&context.ln, &d_norm, &mut grads.ln_context)
    }

    /// Backward through the query side given accumulated `dQ`. Returns the
    /// gradient w.r.t. the text row.
    pub fn backward_query(&self, query: &QueryCache, d_query: &Matrix, grads: &mut XAttnParams) -> Result<Matrix> {
        let (d_norm, d_wq) = ops::matmul_backward(&query.normalized, &self.w_q, d_query)?;
        grads.w_q.add_assign(&d_wq)?;
        self.ln_query.backward(&query.ln, &d_norm, &mut grads.ln_query)
    }

    /// Forward for a single (text, context) pair.
    pub fn forward(&self, text: &Matrix, context: &Matrix) -> Result<SingleForward> {
        let query = self.encode_query(text)?;
        let ctx = self.encode_context(context)?;
        let pair = self.attend_pair(&query, &ctx)?;
        Ok(SingleForward { query, context: ctx, pair })
    }

    /// Full backward for a single pair: returns `(d_text, d_context)` and
    /// accumulates parameter gradients into `grads`.
    pub fn backward(
        &self,
        fwd: &SingleForward,
        d_output: &Matrix,
        grads: &mut XAttnParams,
    ) -> Result<(Matrix, Matrix)> {
        let mut d_query = Matrix::zeros(1, self.proj_dim());
        let n = fwd.context.keys.rows();
        let mut d_keys = Matrix::zeros(n, self.proj_dim());
        let mut d_values = Matrix::zeros(n, self.proj_dim());
        let mut acc = PairGrads { d_query: &mut d_query, d_keys: &mut d_keys, d_values: &mut d_values };
        self.backward_pair(&fwd.query, &fwd.context, &fwd.pair, d_output, grads, &mut acc)?;
        let d_ctx = self.backward_context(&fwd.context, &d_keys, &d_values, grads)?;
        let d_text = self.backward_query(&fwd.query, &d_query, grads)?;
        Ok((d_text, d_ctx))
    }
}

impl Parameters for XAttnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "w_q"), &self.w_q);
        f(&join(prefix, "w_k"), &self.w_k);
        f(&join(prefix, "w_v"), &self.w_v);
        f(&join(prefix, "w_o"), &self.w_o);
        f(&join(prefix, "ln_query.gain"), &self.ln_query.gain);
        f(&join(prefix, "ln_query.bias"), &self.ln_query.bias);
        f(&join(prefix, "ln_context.gain"), &self.ln_context.gain);
        f(&join(prefix, "ln_context.bias"), &self.ln_context.bias);
        if self.out_affine {
            f(&join(prefix, "ln_out.gain"), &self.ln_out.gain);
            f(&join(prefix, "ln_out.bias"), &self.ln_out.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "w_q"), &mut self.w_q);
        f(&join(prefix, "w_k"), &mut self.w_k);
        f(&join(prefix, "w_v"), &mut self.w_v);
        f(&join(prefix, "w_o"), &mut self.w_o);
        f(&join(prefix, "ln_query.gain"), &mut self.ln_query.gain);
        f(&join(prefix, "ln_query.bias"), &mut self.ln_query.bias);
        f(&join(prefix, "ln_context.gain"), &mut self.ln_context.gain);
        f(&join(prefix, "ln_context.bias"), &mut self.ln_context.bias);
        if self.out_affine {
            f(&join(prefix, "ln_out.gain"), &mut self.ln_out.gain);
            f(&join(prefix, "ln_out.bias"), &mut self.ln_out.bias);
        }
    }
}

#[derive(Clone, Debug)]
pub struct QueryCache {
    normalized: Matrix,
    ln: LnCache,
    /// `Q`, 1×D_p.
    pub query: Matrix,
}

#[derive(Clone, Debug)]
pub struct ContextCache {
    normalized: Matrix,
    ln: LnCache,
    /// `K`, n×D_p.
    pub keys: Matrix,
    /// `V`, n×D_p.
    pub values: Matrix,
    order: Vec<usize>,
}

impl ContextCache {
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug)]
pub struct PairCache {
    /// Attention weights over context rows, in context order.
    pub weights: Vec<f64>,
    pub pooled: Matrix,
    out_ln: LnCache,
    /// The conditioned embedding, 1×D_p.
    pub output: Matrix,
}

/// Gradient buffers for one query and one context.
pub struct PairGrads<'a> {
    pub d_query: &'a mut Matrix,
    pub d_keys: &'a mut Matrix,
    pub d_values: &'a mut Matrix,
}

#[derive(Clone, Debug)]
pub struct SingleForward {
    pub query: QueryCache,
    pub context: ContextCache,
    pub pair: PairCache,
}

impl SingleForward {
    pub fn output(&self) -> &Matrix {
        &self.pair.output
    }
}

/// Row order used for every reduction over context rows: lexicographic on
/// the (key, value) rows. Identical rows tie, and their contributions are
/// identical, so sums come out bit-identical under any row permutation.
fn canonical_order(keys: &Matrix, values: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.rows()).collect();
    let cmp_rows = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| *o != Ordering::Equal).unwrap_or(Ordering::Equal)
    };
    order.sort_by(|&a, &b| cmp_rows(keys.row(a), keys.row(b)).then_with(|| cmp_rows(values.row(a), values.row(b))));
    order
}

fn attend_ordered(q: &[f64], keys: &Matrix, values: &Matrix, order: &[usize], scale: f64) -> (Vec<f64>, Vec<f64>) {
    let mut weights: Vec<f64> = (0..keys.rows()).map(|j| dot(q, keys.row(j)) * scale).collect();
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for w in &mut weights {
        *w = (*w - max).exp();
    }
    let total: f64 = order.iter().map(|&j| weights[j]).sum();
    for w in &mut weights {
        *w /= total;
    }
    let mut pooled = vec![0.0; values.cols()];
    for &j in order {
        let w = weights[j];
        for (p, &v) in pooled.iter_mut().zip(values.row(j)) {
            *p += w * v;
        }
    }
    (weights, pooled)
}

/// Query, key and value projections of one block.
pub fn project(params: &XAttnParams, text: &Matrix, context: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    let q = params.encode_query(text)?;
    let c = params.encode_context(context)?;
    Ok((q.query, c.keys, c.values))
}

/// Scaled dot-product attention of a single query row. Returns
/// `(pooled 1×D_p, weights 1×n)`.
pub fn attend(query: &Matrix, keys: &Matrix, values: &Matrix) -> Result<(Matrix, Matrix)> {
    if query.rows() != 1 || query.cols() != keys.cols() || keys.shape() != values.shape() {
        return Err(Error::Shape(format!(
            "attend needs Q 1xP, K and V nxP; got Q {}, K {}, V {}",
            shape_str(query),
            shape_str(keys),
            shape_str(values)
        )));
    }
    let order = canonical_order(keys, values);
    let scale = 1.0 / (query.cols() as f64).sqrt();
    let (w, pooled) = attend_ordered(query.row(0), keys, values, &order, scale);
    Ok((Matrix::from_vec(1, values.cols(), pooled)?, Matrix::from_vec(1, keys.rows(), w)?))
}

/// The text-conditioned embedding of `context` (frames or audio tokens).
pub fn conditioned_embedding(params: &XAttnParams, text: &Matrix, context: &Matrix) -> Result<Matrix> {
    Ok(params.forward(text, context)?.pair.output)
}

/// Attention weights of `text` over the rows of `context`, as 1×n.
pub fn export_attention_weights(params: &XAttnParams, text: &Matrix, context: &Matrix) -> Result<Matrix> {
    let w = params.forward(text, context)?.pair.weights;
    Matrix::from_vec(1, w.len(), w)
}
