//! Ranking, recall/rank metrics, two-stage re-ranking and score
//! post-processing.
//!
//! Ground truth is positional: query `i` matches candidate `i`. Ties in
//! similarity are broken by ascending candidate index, so every ranking here
//! is deterministic.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{shape_str, Matrix};
use crate::objective::cosine_similarity;
use crate::ops::softmax_in_place;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "t2v")]
    TextToVideo,
    #[serde(rename = "v2t")]
    VideoToText,
}

/// Recall@{1,5,10} in percent, median and mean rank of the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub direction: Direction,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
    #[serde(rename = "MdR")]
    pub median_rank: f64,
    #[serde(rename = "MnR")]
    pub mean_rank: f64,
    pub queries: usize,
    pub candidates: usize,
}

impl RankingMetrics {
    /// Copy with every float rounded to four decimals, the precision used in
    /// reports and JSON output.
    pub fn rounded(&self) -> Self {
        let r = |v: f64| (v * 1e4).round() / 1e4;
        Self {
            r1: r(self.r1),
            r5: r(self.r5),
            r10: r(self.r10),
            median_rank: r(self.median_rank),
            mean_rank: r(self.mean_rank),
            ..self.clone()
        }
    }
}

/// Metrics from 1-based ground-truth ranks. The median of an even-length
/// list is the lower of the two middle values.
pub fn compute_metrics(ranks: &[usize], candidates: usize, direction: Direction) -> Result<RankingMetrics> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("no ranks to summarize".into()));
    }
    if let Some(&bad) = ranks.iter().find(|&&r| r == 0 || r > candidates) {
        return Err(Error::InvalidArgument(format!("rank {bad} outside [1, {candidates}]")));
    }
    let n = ranks.len() as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let median = sorted[(sorted.len() - 1) / 2];
    let mean = ranks.iter().map(|&r| r as f64).sum::<f64>() / n;
    Ok(RankingMetrics {
        direction,
        r1: recall(1),
        r5: recall(5),
        r10: recall(10),
        median_rank: median as f64,
        mean_rank: mean,
        queries: ranks.len(),
        candidates,
    })
}

/// Column mean of the frame rows.
pub fn mean_pool(frames: &Matrix) -> Matrix {
    frames.column_mean()
}

/// Total order on scores where `-0.0` and `0.0` tie.
fn cmp_score(a: f64, b: f64) -> Ordering {
    (a + 0.0).total_cmp(&(b + 0.0))
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| cmp_score(scores[b], scores[a]).then(a.cmp(&b))
}

/// Candidate indices sorted by descending score, ties by ascending index.
pub fn ranking_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(by_score_then_index(scores));
    order
}

/// 1-based rank of `target` under [`ranking_order`], without sorting.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| match cmp_score(v, s) {
            Ordering::Greater => true,
            Ordering::Equal => j < target,
            Ordering::Less => false,
        })
        .count()
}

/// Ground-truth rank of each row of a similarity matrix (query `i` ↔ column `i`).
pub fn ranks_from_similarity(sim: &Matrix) -> Result<Vec<usize>> {
    if sim.rows() > sim.cols() {
        return Err(Error::Shape(format!(
            "ground truth needs at least as many candidates as queries, got {}",
            shape_str(sim)
        )));
    }
    Ok((0..sim.rows()).map(|i| rank_of(sim.row(i), i)).collect())
}

/// Full similarity matrix and ground-truth ranks, scoring every
/// (query, candidate) pair with `score`.
pub fn rank_exhaustive<F>(n_queries: usize, n_candidates: usize, score: F) -> Result<(Matrix, Vec<usize>)>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    if n_candidates == 0 || n_queries == 0 {
        return Err(Error::EmptyCorpus("ranking needs at least one query and one candidate".into()));
    }
    let rows: Vec<Vec<f64>> = (0..n_queries)
        .into_par_iter()
        .map(|q| (0..n_candidates).map(|c| score(q, c)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let sim = Matrix::from_vec(n_queries, n_candidates, rows.concat())?;
    let ranks = ranks_from_similarity(&sim)?;
    Ok((sim, ranks))
}

/// First-stage candidate ordering for two-stage retrieval.
pub trait ShortlistProvider: Sync {
    /// Candidates for `query`, best first. Must contain at least the top `k`;
    /// candidates left out are treated as ranked after all returned ones, by
    /// ascending index.
    fn order(&self, query: usize, k: usize) -> Result<Vec<usize>>;
}

/// Exact first stage over a precomputed query×candidate score matrix.
pub struct ScoreMatrixShortlist {
    scores: Matrix,
    evaluations: AtomicUsize,
}

impl ScoreMatrixShortlist {
    pub fn new(scores: Matrix) -> Self {
        Self { scores, evaluations: AtomicUsize::new(0) }
    }

    /// Exact cosine of each query row against the mean-pooled frames of each
    /// candidate.
    pub fn mean_pool(texts: &[&Matrix], frames: &[&Matrix]) -> Result<Self> {
        if texts.is_empty() || frames.is_empty() {
            return Err(Error::EmptyCorpus("mean-pool shortlist needs queries and candidates".into()));
        }
        let pooled: Vec<Matrix> = frames.iter().map(|f| mean_pool(f)).collect();
        let rows: Vec<Vec<f64>> = texts
            .par_iter()
            .map(|t| pooled.iter().map(|p| cosine_similarity(t.row(0), p.row(0)).value).collect())
            .collect();
        Ok(Self::new(Matrix::from_vec(texts.len(), frames.len(), rows.concat())?))
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn transposed(&self) -> Self {
        Self::new(self.scores.transpose())
    }

    /// Number of first-stage score lookups made so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(AtomicOrdering::Relaxed)
    }
}

impl ShortlistProvider for ScoreMatrixShortlist {
    fn order(&self, query: usize, _k: usize) -> Result<Vec<usize>> {
        let row = self.scores.row(query);
        self.evaluations.fetch_add(row.len(), AtomicOrdering::Relaxed);
        Ok(ranking_order(row))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankOutcome {
    pub ranks: Vec<usize>,
    /// Full-model evaluations per query (each ≤ K).
    pub stage_two_calls: Vec<usize>,
}

/// Two-stage retrieval: the provider's top `k` candidates are re-scored with
/// `score` and sorted (descending, ties by index); every other candidate
/// keeps its first-stage order below the shortlist.
pub fn rerank_two_stage<F>(
    n_queries: usize,
    n_candidates: usize,
    k: usize,
    provider: &dyn ShortlistProvider,
    score: F,
) -> Result<RerankOutcome>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    if n_candidates == 0 || n_queries == 0 {
        return Err(Error::EmptyCorpus("ranking needs at least one query and one candidate".into()));
    }
    if k == 0 || k > n_candidates {
        return Err(Error::InvalidArgument(format!("shortlist size {k} outside [1, {n_candidates}]")));
    }
    let per_query: Vec<(usize, usize)> = (0..n_queries)
        .into_par_iter()
        .map(|q| {
            let mut order = provider.order(q, k)?;
            if order.len() < k {
                return Err(Error::InvalidArgument(format!(
                    "shortlist provider returned {} candidates, need {k}",
                    order.len()
                )));
            }
            let shortlist: Vec<usize> = order.drain(..k).collect();
            let scores: Vec<f64> = shortlist.iter().map(|&c| score(q, c)).collect::<Result<_>>()?;
            let mut idx: Vec<usize> = (0..k).collect();
            idx.sort_by(|&a, &b| cmp_score(scores[b], scores[a]).then(shortlist[a].cmp(&shortlist[b])));
            let rank = if let Some(pos) = idx.iter().position(|&i| shortlist[i] == q) {
                pos + 1
            } else if let Some(pos) = order.iter().position(|&c| c == q) {
                k + pos + 1
            } else {
                // Not returned by the provider at all: after every returned
                // candidate, by ascending index among the omitted ones.
                let returned = k + order.len();
                let mut seen = vec![false; n_candidates];
                shortlist.iter().chain(&order).for_each(|&c| seen[c] = true);
                returned + 1 + (0..q).filter(|&c| !seen[c]).count()
            };
            Ok((rank, k))
        })
        .collect::<Result<_>>()?;
    let (ranks, stage_two_calls) = per_query.into_iter().unzip();
    Ok(RerankOutcome { ranks, stage_two_calls })
}

/// Shortlist size for two-stage retrieval: an absolute count or a
/// percentage of the candidate pool (`"100"`, `"10%"`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShortlistSize {
    Count(usize),
    Percent(f64),
}

impl ShortlistSize {
    /// Number of candidates for a pool of `n`. Percentages round up.
    pub fn resolve(self, n: usize) -> Result<usize> {
        let k = match self {
            ShortlistSize::Count(k) => k,
            ShortlistSize::Percent(p) => {
                if !(p > 0.0 && p <= 100.0) {
                    return Err(Error::InvalidArgument(format!("shortlist percentage must lie in (0, 100], got {p}")));
                }
                ((n as f64) * p / 100.0).ceil() as usize
            }
        };
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!("shortlist size {k} outside [1, {n}]")));
        }
        Ok(k)
    }
}

impl std::str::FromStr for ShortlistSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad shortlist size `{s}` (expected N or N%)"));
        match s.strip_suffix('%') {
            Some(p) => match p.trim().parse::<f64>() {
                Ok(p) if p > 0.0 && p <= 100.0 => Ok(ShortlistSize::Percent(p)),
                _ => Err(bad()),
            },
            None => match s.trim().parse::<usize>() {
                Ok(k) if k > 0 => Ok(ShortlistSize::Count(k)),
                _ => Err(bad()),
            },
        }
    }
}

impl std::fmt::Display for ShortlistSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShortlistSize::Count(k) => write!(f, "{k}"),
            ShortlistSize::Percent(p) => write!(f, "{p}%"),
        }
    }
}

/// Dual-softmax re-scoring: each score is multiplied by its softmax over
/// the query axis (column-wise) of `sim · temperature`.
pub fn dual_softmax_postprocess(sim: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("dual-softmax temperature must be positive, got {temperature}")));
    }
    let mut prior = sim.transpose().scale(temperature);
    for r in 0..prior.rows() {
        softmax_in_place(prior.row_mut(r));
    }
    sim.hadamard(&prior.transpose())
}

/// Similarity post-processing steps, applied in order before ranking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PostProcess {
    DualSoftmax { temperature: f64 },
}

pub fn apply_postprocessing(sim: &Matrix, chain: &[PostProcess]) -> Result<Matrix> {
    chain.iter().try_fold(sim.clone(), |acc, step| match step {
        PostProcess::DualSoftmax { temperature } => dual_softmax_postprocess(&acc, *temperature),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shortlist_parsing() {
        assert_eq!("7".parse::<ShortlistSize>().unwrap(), ShortlistSize::Count(7));
        assert_eq!("12.5%".parse::<ShortlistSize>().unwrap(), ShortlistSize::Percent(12.5));
        for bad in ["0", "0%", "101%", "-3", "x", "nan%"] {
            assert!(bad.parse::<ShortlistSize>().is_err(), "{bad}");
        }
    }

    #[test]
    fn signed_zeros_tie() {
        assert_eq!(rank_of(&[0.0, -0.0], 1), 2);
        assert_eq!(rank_of(&[-0.0, 0.0], 1), 2);
        assert_eq!(ranking_order(&[-0.0, 0.0]), vec![0, 1]);
    }

    #[test]
    fn metrics_examples() {
        let m = compute_metrics(&[1, 1, 1, 1], 10, Direction::TextToVideo).unwrap();
        assert_eq!((m.r1, m.r5, m.r10, m.median_rank, m.mean_rank), (100.0, 100.0, 100.0, 1.0, 1.0));

        let m = compute_metrics(&[1, 6, 11], 20, Direction::TextToVideo).unwrap().rounded();
        assert_eq!(m.r1, 33.3333);
        assert_eq!(m.r5, 33.3333);
        assert_eq!(m.r10, 66.6667);
        assert_eq!(m.median_rank, 6.0);
        assert_eq!(m.mean_rank, 6.0);
    }

    #[test]
    fn even_median_takes_lower_middle() {
        let m = compute_metrics(&[4, 1, 3, 2], 5, Direction::TextToVideo).unwrap();
        assert_eq!(m.median_rank, 2.0);
    }

    #[test]
    fn metrics_reject_bad_ranks() {
        assert!(compute_metrics(&[], 5, Direction::TextToVideo).is_err());
        assert!(compute_metrics(&[0], 5, Direction::TextToVideo).is_err());
        assert!(compute_metrics(&[6], 5, Direction::TextToVideo).is_err());
    }

    #[test]
    fn mean_pool_examples() {
        let r = Matrix::row_vector(&[1.0, -2.0, 3.5]);
        assert_eq!(mean_pool(&r), r);
        let sym = Matrix::vstack(&[&r, &r.scale(-1.0)]).unwrap();
        assert_eq!(mean_pool(&sym).as_slice(), &[0.0, 0.0, 0.0]);
        let m = Matrix::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], &[0.5, 0.25, -1.0, 2.0]]);
        let expected = [6.5 / 3.0, 8.25 / 3.0, 9.0 / 3.0, 14.0 / 3.0];
        for (a, b) in mean_pool(&m).as_slice().iter().zip(expected) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn ranks_of_trivial_cases() {
        let (_, ranks) = rank_exhaustive(1, 1, |_, _| Ok(0.3)).unwrap();
        assert_eq!(ranks, vec![1]);
        let eye = Matrix::identity(5);
        let (_, ranks) = rank_exhaustive(5, 5, |q, c| Ok(eye[(q, c)])).unwrap();
        assert_eq!(ranks, vec![1; 5]);
        assert!(rank_exhaustive(0, 0, |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn ties_break_by_index() {
        let scores = [0.5, 0.9, 0.5, 0.5];
        assert_eq!(ranking_order(&scores), vec![1, 0, 2, 3]);
        assert_eq!(rank_of(&scores, 0), 2);
        assert_eq!(rank_of(&scores, 3), 4);
    }

    #[test]
    fn ranks_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sim = Matrix::uniform(10, 10, 1.0, &mut rng);
        let ranks = ranks_from_similarity(&sim).unwrap();
        for (i, &r) in ranks.iter().enumerate() {
            let mut idx: Vec<usize> = (0..10).collect();
            idx.sort_by(|&a, &b| sim[(i, b)].partial_cmp(&sim[(i, a)]).unwrap().then(a.cmp(&b)));
            assert_eq!(idx.iter().position(|&c| c == i).unwrap() + 1, r);
        }
    }

    #[test]
    fn full_shortlist_equals_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let full = Matrix::from_vec(12, 12, (0..144).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect()).unwrap();
        let stage1 = ScoreMatrixShortlist::new(Matrix::uniform(12, 12, 1.0, &mut rng));
        let (_, exhaustive) = rank_exhaustive(12, 12, |q, c| Ok(full[(q, c)])).unwrap();
        let out = rerank_two_stage(12, 12, 12, &stage1, |q, c| Ok(full[(q, c)])).unwrap();
        assert_eq!(out.ranks, exhaustive);
        assert!(out.stage_two_calls.iter().all(|&n| n == 12));
        assert_eq!(stage1.evaluations(), 144);
    }

    #[test]
    fn shortlist_of_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stage1 = ScoreMatrixShortlist::new(Matrix::uniform(8, 8, 1.0, &mut rng));
        let full = Matrix::uniform(8, 8, 1.0, &mut rng);
        let out = rerank_two_stage(8, 8, 1, &stage1, |q, c| Ok(full[(q, c)])).unwrap();
        for q in 0..8 {
            let top1 = ranking_order(stage1.scores().row(q))[0];
            assert_eq!(out.ranks[q] == 1, top1 == q);
            // Outside the shortlist the first-stage order is kept.
            assert_eq!(out.ranks[q], rank_of(stage1.scores().row(q), q));
        }
        assert!(rerank_two_stage(8, 8, 0, &stage1, |_, _| Ok(0.0)).is_err());
        assert!(rerank_two_stage(8, 8, 9, &stage1, |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn shortlist_sizes() {
        assert_eq!("100%".parse::<ShortlistSize>().unwrap().resolve(1000).unwrap(), 1000);
        assert_eq!("10%".parse::<ShortlistSize>().unwrap().resolve(1000).unwrap(), 100);
        assert_eq!("10%".parse::<ShortlistSize>().unwrap().resolve(5).unwrap(), 1);
        assert_eq!("7".parse::<ShortlistSize>().unwrap().resolve(10).unwrap(), 7);
        assert!("11".parse::<ShortlistSize>().unwrap().resolve(10).is_err());
        assert!(ShortlistSize::Percent(0.0).resolve(10).is_err());
        assert!("ten".parse::<ShortlistSize>().is_err());
    }

    #[test]
    fn dsl_examples() {
        let one = Matrix::filled(1, 1, 0.42);
        assert_eq!(dual_softmax_postprocess(&one, 3.0).unwrap(), one);

        let row = Matrix::row_vector(&[0.1, 0.7, -0.3]);
        let same = Matrix::vstack(&[&row, &row, &row, &row]).unwrap();
        let out = dual_softmax_postprocess(&same, 5.0).unwrap();
        for r in 0..4 {
            for (a, b) in out.row(r).iter().zip(row.as_slice()) {
                assert!((a - b * 0.25).abs() < 1e-15);
            }
            assert_eq!(ranking_order(out.row(r)), ranking_order(row.as_slice()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let sim = Matrix::uniform(4, 4, 1.0, &mut rng);
        let out = dual_softmax_postprocess(&sim, 20.0).unwrap();
        for j in 0..4 {
            let denom: f64 = (0..4).map(|i| (sim[(i, j)] * 20.0).exp()).sum();
            for i in 0..4 {
                let expect = sim[(i, j)] * (sim[(i, j)] * 20.0).exp() / denom;
                assert!((out[(i, j)] - expect).abs() <= 1e-12);
            }
        }
        assert!(dual_softmax_postprocess(&sim, 0.0).is_err());
    }
}
