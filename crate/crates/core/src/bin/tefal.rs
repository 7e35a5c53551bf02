//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.
//! `TEFAL_THREADS` caps the worker pool.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use tefal::audiofront::{compute_fbank, read_wav, FbankConfig};
use tefal::config::{apply_train, render_train, set_train_key, KeyValues};
use tefal::fusion::FusionKind;
use tefal::gradcheck::{run_suite, DEFAULT_STEP};
use tefal::io::{load_checkpoint, load_corpus, save_checkpoint, to_fixed_json, write_corpus, write_fbank};
use tefal::model::{AttnModality, Modalities};
use tefal::retrieval::{PostProcess, RankingMetrics, ShortlistSize};
use tefal::synth::{synth_corpus, SynthConfig};
use tefal::trainer::{evaluate, train_with_validation, EpochLog, EvalOptions, TrainConfig};
use tefal::{Error, Result};

#[derive(Parser)]
#[command(name = "tefal", version, about = "Text-conditioned audio/video retrieval: train, evaluate, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a corpus and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (exhaustive, or two-stage with --k).
    Eval(EvalArgs),
    /// Two-stage retrieval with a mean-pool shortlist of size K.
    Rerank(RerankArgs),
    /// Compute a log-mel filter bank from a 16 kHz mono WAV file.
    Fbank(FbankArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic corpus (EMB1 files and a manifest).
    Synth(SynthArgs),
    /// Write text-to-frame and text-to-audio attention weights as CSV.
    ExportAttn(ExportAttnArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus manifest.
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set lr=0.001.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionKind>,
    #[arg(long, value_parser = parse_modalities)]
    modalities: Option<Modalities>,
    /// Validation corpus manifest, evaluated after every epoch.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Write the per-epoch log as JSON here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Shortlist size, N or N%; exhaustive when absent.
    #[arg(long, value_parser = parse_k)]
    k: Option<ShortlistSize>,
    /// Dual-softmax post-processing with this temperature.
    #[arg(long, value_name = "TEMP")]
    dsl: Option<f64>,
    /// Include per-query ranks in the output.
    #[arg(long)]
    ranks: bool,
    /// Output JSON path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Shortlist size, N or N%.
    #[arg(long, value_parser = parse_k)]
    k: ShortlistSize,
    #[arg(long)]
    ranks: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FbankArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = tefal::audiofront::TARGET_LENGTH)]
    target_len: usize,
    #[arg(long, default_value_t = tefal::audiofront::N_MELS)]
    mels: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    items: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 16)]
    audio_tokens: usize,
    /// Fraction of items with informative audio.
    #[arg(long, default_value_t = 0.5)]
    audio_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    /// Split off the last N items into a second corpus under OUT/eval.
    #[arg(long)]
    eval_items: Option<usize>,
}

#[derive(Args)]
struct ExportAttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of (text, item) ground-truth pairs to export.
    #[arg(long, default_value_t = 10)]
    items: usize,
}

fn parse_k(s: &str) -> std::result::Result<ShortlistSize, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_fusion(s: &str) -> std::result::Result<FusionKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_modalities(s: &str) -> std::result::Result<Modalities, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::File { path: path.display().to_string(), source })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(format!("{} has no items", a.corpus.display())));
    }
    let mut cfg = TrainConfig { dim: corpus.dim(), proj_dim: corpus.dim(), ..TrainConfig::default() };
    if let Some(p) = &a.config {
        apply_train(&mut cfg, &KeyValues::load(p)?)?;
    }
    for o in &a.overrides {
        let (k, v) = KeyValues::parse_override(o)?;
        set_train_key(&mut cfg, &k, &v)?;
    }
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.fusion = a.fusion.unwrap_or(cfg.fusion);
    cfg.modalities = a.modalities.unwrap_or(cfg.modalities);
    let validation = a.validation.as_deref().map(load_corpus).transpose()?;

    info!("training {} items, fusion {}, modalities {}", corpus.len(), cfg.fusion, cfg.modalities.as_str());
    let out = train_with_validation(&cfg, &corpus, validation.as_ref())?;
    save_checkpoint(&a.out, &out.checkpoint)?;
    // Config values as written in a config file, so nothing is rounded.
    let config: std::collections::BTreeMap<String, String> = render_train(&cfg)
        .lines()
        .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    #[derive(Serialize)]
    struct Log<'a> {
        config: std::collections::BTreeMap<String, String>,
        epochs: &'a [EpochLog],
        steps: u64,
    }
    let json = to_fixed_json(&Log { config, epochs: &out.epochs, steps: out.checkpoint.step })?;
    match &a.log {
        Some(p) => write_text(p, &json)?,
        None => eprint!("{json}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct MetricsOut<'a> {
    t2v: &'a RankingMetrics,
    v2t: &'a RankingMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    t2v_ranks: Option<&'a [usize]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    v2t_ranks: Option<&'a [usize]>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    postprocess: Vec<PostProcess>,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let postprocess = a.dsl.map(|t| vec![PostProcess::DualSoftmax { temperature: t }]).unwrap_or_default();
    let report = evaluate(&ckpt.model, &corpus, &EvalOptions { shortlist: a.k, postprocess })?;
    info!("{} model evaluations", report.model_evaluations);
    let (t2v, v2t) = (report.t2v.rounded(), report.v2t.rounded());
    let out = MetricsOut {
        t2v: &t2v,
        v2t: &v2t,
        t2v_ranks: a.ranks.then_some(&report.t2v_ranks[..]),
        v2t_ranks: a.ranks.then_some(&report.v2t_ranks[..]),
        postprocess: report.postprocess.clone(),
    };
    emit(a.out.as_deref(), &to_fixed_json(&out)?)
}

fn cmd_rerank(a: RerankArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let report = evaluate(&ckpt.model, &corpus, &EvalOptions { shortlist: Some(a.k), postprocess: vec![] })?;
    #[derive(Serialize)]
    struct Out<'a> {
        shortlist: usize,
        model_evaluations: usize,
        #[serde(flatten)]
        metrics: MetricsOut<'a>,
    }
    let (t2v, v2t) = (report.t2v.rounded(), report.v2t.rounded());
    let out = Out {
        shortlist: report.shortlist.unwrap_or(0),
        model_evaluations: report.model_evaluations,
        metrics: MetricsOut {
            t2v: &t2v,
            v2t: &v2t,
            t2v_ranks: a.ranks.then_some(&report.t2v_ranks[..]),
            v2t_ranks: a.ranks.then_some(&report.v2t_ranks[..]),
            postprocess: vec![],
        },
    };
    emit(a.out.as_deref(), &to_fixed_json(&out)?)
}

fn cmd_fbank(a: FbankArgs) -> Result<()> {
    let wave = read_wav(&a.input)?;
    let cfg = FbankConfig { target_len: a.target_len, n_mels: a.mels, ..FbankConfig::default() };
    let fbank = compute_fbank(&wave, &cfg)?;
    info!(
        "{:.3} s, frame shift {:.4} ms, {}x{}",
        wave.duration_secs(),
        fbank.frame_shift_ms,
        fbank.frames.rows(),
        fbank.frames.cols()
    );
    write_fbank(&a.out, &fbank.frames)
}

/// Returns whether every check passed.
fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let reports = run_suite(a.seed, a.step)?;
    let max = reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let passed = reports.iter().all(|r| r.passed);
    let mut text = String::new();
    for r in &reports {
        let _ = writeln!(
            text,
            "{:<28} {:.3e}  (tol {:.0e})  {}",
            r.name,
            r.max_relative_error,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let _ = writeln!(text, "max relative error {max:.3e}");
    emit(a.out.as_deref(), &text)?;
    Ok(passed)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_items: a.items,
        dim: a.dim,
        frames: a.frames,
        audio_tokens: a.audio_tokens,
        audio_fraction: a.audio_fraction,
        noise: a.noise,
        relevant_frames: (a.frames * 3 / 8).max(1),
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&cfg)?.corpus;
    match a.eval_items {
        Some(n) if n >= corpus.len() => {
            Err(Error::InvalidArgument(format!("eval split {n} leaves no training items out of {}", corpus.len())))
        }
        Some(n) => {
            let (tr, ev) = corpus.split_at(corpus.len() - n);
            write_corpus(&a.out, &tr)?;
            write_corpus(&a.out.join("eval"), &ev)?;
            Ok(())
        }
        None => write_corpus(&a.out, &corpus).map(|_| ()),
    }
}

fn cmd_export_attn(a: ExportAttnArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let model = &ckpt.model;
    let mut csv = String::from("text_id,item_id,modality,index,weight\n");
    for item in corpus.items().iter().take(a.items) {
        let text = item.text.as_matrix();
        let modalities = [
            (AttnModality::Video, model.config.uses_video_block()),
            (AttnModality::Audio, model.config.uses_audio_block()),
        ];
        for (m, used) in modalities {
            if !used {
                continue;
            }
            let w = model.attention_weights(text, item, m)?;
            for (i, v) in w.as_slice().iter().enumerate() {
                let _ = writeln!(csv, "{},{},{},{i},{v:.6}", item.id, item.id, m.as_str());
            }
        }
    }
    write_text(&a.out, &csv)?;
    Ok(())
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var("TEFAL_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("TEFAL_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Rerank(a) => cmd_rerank(a),
        Command::Fbank(a) => cmd_fbank(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
        Command::Synth(a) => cmd_synth(a),
        Command::ExportAttn(a) => cmd_export_attn(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
