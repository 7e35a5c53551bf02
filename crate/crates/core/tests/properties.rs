//! Property tests for the numeric kernels, attention, fusion, loss,
//! audio front end, ranking and file formats.

mod common;

use common::oracle_metrics;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tefal::audiofront::{adaptive_frame_shift, compute_fbank, FbankConfig, Waveform};
use tefal::fusion::{fuse, FusionInputs, FusionKind, FusionParams};
use tefal::io::{decode_embeddings, encode_embeddings, EmbeddingFile};
use tefal::model::{Model, ModelConfig};
use tefal::objective::{cosine_similarity, infonce};
use tefal::ops::{layernorm_rows, matmul, softmax_rows, LN_EPS};
use tefal::retrieval::{
    compute_metrics, rank_exhaustive, ranks_from_similarity, rerank_two_stage, Direction, ScoreMatrixShortlist,
};
use tefal::synth::{synth_corpus, SynthConfig};
use tefal::xattn::{attend, conditioned_embedding, XAttnParams};
use tefal::Matrix;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng(seed));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..40, scale in 0.01f64..80.0, seed: u64) {
        let m = Matrix::uniform(rows, cols, scale, &mut rng(seed));
        let s = softmax_rows(&m);
        for r in 0..rows {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_invariant(n in 1usize..24, d in 1usize..16, seed: u64, pseed: u64) {
        let mut g = rng(seed);
        let q = Matrix::uniform(1, d, 3.0, &mut g);
        let k = Matrix::uniform(n, d, 3.0, &mut g);
        let v = Matrix::uniform(n, d, 3.0, &mut g);
        let (pooled, w) = attend(&q, &k, &v).unwrap();
        prop_assert!((w.sum() - 1.0).abs() <= 1e-12);
        let p = permutation(n, pseed);
        let (pooled2, w2) = attend(&q, &k.select_rows(&p), &v.select_rows(&p)).unwrap();
        prop_assert_eq!(pooled.as_slice(), pooled2.as_slice());
        for (i, &j) in p.iter().enumerate() {
            prop_assert_eq!(w2[(0, i)], w[(0, j)]);
        }
        if n == 1 {
            prop_assert_eq!(w.as_slice(), &[1.0]);
        }
    }

    #[test]
    fn block_is_permutation_invariant(n in 1usize..12, seed: u64, pseed: u64) {
        let d = 8;
        let mut g = rng(seed);
        let block = XAttnParams::init(d, d, true, &mut g);
        let text = Matrix::uniform(1, d, 1.0, &mut g);
        let ctx = Matrix::uniform(n, d, 1.0, &mut g);
        let a = conditioned_embedding(&block, &text, &ctx).unwrap();
        let b = conditioned_embedding(&block, &text, &ctx.select_rows(&permutation(n, pseed))).unwrap();
        prop_assert_eq!(a.as_slice(), b.as_slice());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..20, k in 1usize..20, n in 1usize..20, seed: u64) {
        let mut g = rng(seed);
        let a = Matrix::uniform(m, k, 2.0, &mut g);
        let b = Matrix::uniform(k, n, 2.0, &mut g);
        let c = matmul(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[(i, t)] * b[(t, j)];
                }
                prop_assert!((c[(i, j)] - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn layernorm_rows_are_centred(rows in 1usize..5, cols in 2usize..40, seed: u64) {
        let m = Matrix::uniform(rows, cols, 10.0, &mut rng(seed));
        let out = layernorm_rows(&m, &Matrix::filled(1, cols, 1.0), &Matrix::zeros(1, cols), LN_EPS).unwrap();
        for r in 0..rows {
            let mean = out.row(r).iter().sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() <= 1e-12);
        }
    }

    #[test]
    fn unit_affine_block_output_is_centred(n in 1usize..8, seed: u64) {
        let d = 6;
        let mut g = rng(seed);
        let mut block = XAttnParams::init(d, d, true, &mut g);
        block.ln_out = tefal::xattn::LnAffine::identity(d);
        let out = conditioned_embedding(&block, &Matrix::uniform(1, d, 1.0, &mut g), &Matrix::uniform(n, d, 1.0, &mut g)).unwrap();
        prop_assert!((out.sum() / d as f64).abs() <= 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant(d in 1usize..20, c in 1e-3f64..1e3, seed: u64) {
        let mut g = rng(seed);
        let a = Matrix::uniform(1, d, 1.0, &mut g);
        let b = Matrix::uniform(1, d, 1.0, &mut g);
        let base = cosine_similarity(a.row(0), b.row(0)).value;
        let scaled = cosine_similarity(a.row(0), b.scale(c).row(0)).value;
        prop_assert!((base - scaled).abs() <= 1e-12);
    }

    #[test]
    fn infonce_transpose_symmetry(b in 1usize..9, tau in 1.0f64..100.0, seed: u64) {
        let sim = Matrix::uniform(b, b, 1.0, &mut rng(seed));
        let x = infonce(&sim, tau).unwrap();
        let y = infonce(&sim.transpose(), tau).unwrap();
        prop_assert_eq!(x.loss_t2v, y.loss_v2t);
        prop_assert_eq!(x.loss_v2t, y.loss_t2v);
    }

    #[test]
    fn addition_fusion_is_linear(d in 1usize..10, a in -3.0f64..3.0, seed: u64) {
        let mut g = rng(seed);
        let mut draw = || Matrix::uniform(1, d, 1.0, &mut g);
        let (v1, a1, v2, a2) = (draw(), draw(), draw(), draw());
        let f = |v: &Matrix, au: &Matrix| fuse(FusionKind::Addition, &FusionParams::None, FusionInputs::Conditioned { video: v, audio: au }).unwrap();
        let lhs = f(&v1.scale(a).add(&v2).unwrap(), &a1.scale(a).add(&a2).unwrap());
        let rhs = f(&v1, &a1).scale(a).add(&f(&v2, &a2)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn metrics_match_sort_oracle(n in 1usize..60, levels in 1u32..50, seed: u64) {
        // Quantized scores produce plenty of ties.
        let mut g = rng(seed);
        let sim = Matrix::uniform(n, n, 1.0, &mut g).map(|v| (v * levels as f64).round());
        let ranks = ranks_from_similarity(&sim).unwrap();
        let m = compute_metrics(&ranks, n, Direction::TextToVideo).unwrap();
        let (r1, r5, r10, md, mn) = oracle_metrics(&sim);
        prop_assert_eq!((m.r1, m.r5, m.r10, m.median_rank), (r1, r5, r10, md));
        prop_assert!((m.mean_rank - mn).abs() <= 1e-12);
        prop_assert!(m.r1 <= m.r5 && m.r5 <= m.r10 && m.r10 <= 100.0);

        let mut shuffled = ranks.clone();
        shuffled.shuffle(&mut g);
        prop_assert_eq!(compute_metrics(&shuffled, n, Direction::TextToVideo).unwrap(), m);
    }

    #[test]
    fn ranks_survive_monotone_transforms(n in 1usize..30, seed: u64) {
        let sim = Matrix::uniform(n, n, 1.0, &mut rng(seed));
        let base = ranks_from_similarity(&sim).unwrap();
        prop_assert_eq!(ranks_from_similarity(&sim.map(|v| (3.0 * v).exp())).unwrap(), base.clone());
        prop_assert_eq!(ranks_from_similarity(&sim.map(|v| 2.0 * v - 7.0)).unwrap(), base);
    }

    #[test]
    fn relabelling_candidates_keeps_metrics(n in 2usize..30, seed: u64, pseed: u64) {
        let sim = Matrix::uniform(n, n, 1.0, &mut rng(seed));
        let p = permutation(n, pseed);
        // Relabel queries and candidates together so ground truth moves with them.
        let relabelled = Matrix::from_vec(n, n, (0..n * n).map(|i| sim[(p[i / n], p[i % n])]).collect()).unwrap();
        let a = compute_metrics(&ranks_from_similarity(&sim).unwrap(), n, Direction::TextToVideo).unwrap();
        let b = compute_metrics(&ranks_from_similarity(&relabelled).unwrap(), n, Direction::TextToVideo).unwrap();
        prop_assert_eq!((a.r1, a.r5, a.r10, a.median_rank), (b.r1, b.r5, b.r10, b.median_rank));
        prop_assert!((a.mean_rank - b.mean_rank).abs() < 1e-9);
    }

    #[test]
    fn full_shortlist_equals_exhaustive(n in 1usize..40, levels in 1u32..20, seed: u64) {
        let mut g = rng(seed);
        let full = Matrix::uniform(n, n, 1.0, &mut g).map(|v| (v * levels as f64).round());
        let stage1 = ScoreMatrixShortlist::new(Matrix::uniform(n, n, 1.0, &mut g));
        let (_, exhaustive) = rank_exhaustive(n, n, |q, c| Ok(full[(q, c)])).unwrap();
        let two = rerank_two_stage(n, n, n, &stage1, |q, c| Ok(full[(q, c)])).unwrap();
        prop_assert_eq!(two.ranks, exhaustive);
    }

    #[test]
    fn shortlist_stage_counts(n in 1usize..40, kf in 0.0f64..1.0, seed: u64) {
        let k = 1 + ((n - 1) as f64 * kf) as usize;
        let mut g = rng(seed);
        let full = Matrix::uniform(n, n, 1.0, &mut g);
        let stage1 = ScoreMatrixShortlist::new(Matrix::uniform(n, n, 1.0, &mut g));
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let out = rerank_two_stage(n, n, k, &stage1, |q, c| {
            calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            Ok(full[(q, c)])
        })
        .unwrap();
        prop_assert!(out.stage_two_calls.iter().all(|&c| c <= k));
        prop_assert_eq!(calls.into_inner(), n * k);
        prop_assert_eq!(stage1.evaluations(), n * n);
    }

    #[test]
    fn v2t_is_t2v_of_transpose(n in 1usize..30, seed: u64) {
        let sim = Matrix::uniform(n, n, 1.0, &mut rng(seed));
        let v2t = ranks_from_similarity(&sim.transpose()).unwrap();
        let (_, t2v_of_t) = rank_exhaustive(n, n, |q, c| Ok(sim[(c, q)])).unwrap();
        prop_assert_eq!(v2t, t2v_of_t);
    }

    #[test]
    fn emb1_round_trip(count in 0usize..6, rows in 1usize..5, cols in 1usize..9, seed: u64, flip in any::<prop::sample::Index>()) {
        let mut g = rng(seed);
        let items = (0..count).map(|_| Matrix::uniform(rows, cols, 100.0, &mut g).round_to_f32()).collect();
        let file = EmbeddingFile::new(rows, cols, items).unwrap();
        let bytes = encode_embeddings(&file).unwrap();
        prop_assert_eq!(&decode_embeddings(&bytes, "mem").unwrap(), &file);
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x01;
        prop_assert!(decode_embeddings(&bad, "mem").is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn frame_shift_is_monotone(n in 16_000usize..9_600_000, dn in 1usize..1000, l in 16usize..4096) {
        let a = adaptive_frame_shift(n, 16_000, l).unwrap();
        prop_assert!(adaptive_frame_shift(n + dn, 16_000, l).unwrap() > a);
        prop_assert!(adaptive_frame_shift(n, 16_000, l + 1).unwrap() < a);
    }

    #[test]
    fn video_block_ignores_audio(seed: u64) {
        let data = synth_corpus(&SynthConfig { n_items: 2, dim: 8, frames: 3, audio_tokens: 4, relevant_frames: 1, seed, ..SynthConfig::default() }).unwrap();
        let model = Model::init(ModelConfig::new(8), 10.0, seed).unwrap();
        let mut item = data.corpus.item(0).clone();
        let q = model.encode_query(item.text.as_matrix()).unwrap();
        let before = model.forward_pair(&q, &model.encode_item(&item).unwrap()).unwrap();
        item.audio = tefal::corpus::AudioTokens::new(Matrix::uniform(4, 8, 5.0, &mut rng(seed ^ 1)));
        let after = model.forward_pair(&q, &model.encode_item(&item).unwrap()).unwrap();
        prop_assert_eq!(&before.video.unwrap().output, &after.video.unwrap().output);
        prop_assert_ne!(&before.audio.unwrap().output, &after.audio.unwrap().output);
    }

    #[test]
    fn every_fusion_outputs_one_row(kind_idx in 0usize..5, seed: u64) {
        let kind = FusionKind::ALL[kind_idx];
        let (model, corpus) = tefal::gradcheck::toy_problem(kind, tefal::model::Modalities::Both, seed).unwrap();
        let q = model.encode_query(corpus.item(0).text.as_matrix()).unwrap();
        let fwd = model.forward_pair(&q, &model.encode_item(corpus.item(1)).unwrap()).unwrap();
        prop_assert_eq!(fwd.fused.shape(), (1, model.config.proj_dim));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn fbank_has_fixed_length(seconds in 1.0f64..600.0, seed: u64) {
        let n = (seconds * 16_000.0) as usize;
        let mut g = rng(seed);
        let noise = Matrix::uniform(1, n, 0.5, &mut g).into_vec();
        let fb = compute_fbank(&Waveform::new(noise, 16_000).unwrap(), &FbankConfig::default()).unwrap();
        prop_assert_eq!(fb.frames.shape(), (1024, 128));
        prop_assert!(fb.frames.is_finite());
    }
}
