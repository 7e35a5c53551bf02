//! End-to-end runs of the `tefal` binary.

use std::path::Path;
use std::process::{Command, Output};

use tefal::audiofront::{write_wav, Waveform};
use tefal::io::read_fbank;

fn tefal(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tefal"));
    cmd.args(args).env("RUST_LOG", "warn");
    match threads {
        Some(t) => cmd.env("TEFAL_THREADS", t),
        None => cmd.env_remove("TEFAL_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tefal(args, None);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_and_train(dir: &Path, threads: Option<&str>) -> (Vec<u8>, Vec<u8>) {
    let data = dir.join("data");
    let ckpt = dir.join("model.tfck");
    for args in [
        vec![
            "synth",
            "--out",
            s(&data),
            "--items",
            "60",
            "--dim",
            "8",
            "--frames",
            "4",
            "--audio-tokens",
            "4",
            "--seed",
            "3",
        ],
        vec![
            "train",
            "--corpus",
            s(&data.join("manifest.json")),
            "--out",
            s(&ckpt),
            "--epochs",
            "2",
            "--lr",
            "0.001",
            "--log",
            s(&dir.join("log.json")),
        ],
    ] {
        let out = tefal(&args, threads);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let eval =
        tefal(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&data.join("manifest.json")), "--ranks"], threads);
    assert!(eval.status.success());
    (std::fs::read(&ckpt).unwrap(), eval.stdout)
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(tefal(&[], None).status.code(), Some(2));
    assert_eq!(tefal(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(tefal(&["eval", "--corpus", "x"], None).status.code(), Some(2));
    assert_eq!(tefal(&["rerank", "--checkpoint", "a", "--corpus", "b", "--k", "0%"], None).status.code(), Some(2));
    assert_eq!(tefal(&["gradcheck"], Some("zero")).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tfck");
    let out = tefal(&["eval", "--checkpoint", s(&missing), "--corpus", s(&missing)], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.tfck"));

    let out = tefal(&["synth", "--out", s(dir.path()), "--audio-fraction", "2"], None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runs_are_reproducible_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = synth_and_train(a.path(), Some("1"));
    let second = synth_and_train(b.path(), Some("4"));
    assert_eq!(first, second);
    assert_eq!(
        std::fs::read(a.path().join("data/video.emb")).unwrap(),
        std::fs::read(b.path().join("data/video.emb")).unwrap()
    );
    assert_eq!(std::fs::read(a.path().join("log.json")).unwrap(), std::fs::read(b.path().join("log.json")).unwrap());
}

#[test]
fn full_shortlist_matches_exhaustive_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (_, exhaustive) = synth_and_train(dir.path(), None);
    let manifest = dir.path().join("data/manifest.json");
    let ckpt = dir.path().join("model.tfck");
    let full = ok(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&manifest), "--ranks", "--k", "100%"]);
    assert_eq!(full.stdout, exhaustive);

    let rerank = ok(&["rerank", "--checkpoint", s(&ckpt), "--corpus", s(&manifest), "--k", "6"]);
    let json: serde_json::Value = serde_json::from_slice(&rerank.stdout).unwrap();
    assert_eq!(json["shortlist"], 6);
    assert_eq!(json["model_evaluations"], 2 * 60 * 6);

    let dsl = ok(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&manifest), "--dsl", "100"]);
    let json: serde_json::Value = serde_json::from_slice(&dsl.stdout).unwrap();
    assert_eq!(json["postprocess"][0]["kind"], "dual_softmax");

    let csv = dir.path().join("attn.csv");
    ok(&["export-attn", "--checkpoint", s(&ckpt), "--corpus", s(&manifest), "--out", s(&csv), "--items", "2"]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("text_id,item_id,modality,index,weight\n"));
    assert_eq!(text.lines().count(), 1 + 2 * (4 + 4));
}

#[test]
fn fbank_of_silence_is_constant() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("quiet.wav");
    let out = dir.path().join("quiet.fbank");
    write_wav(&wav, &Waveform::new(vec![0.0; 8000], 16_000).unwrap()).unwrap();
    ok(&["fbank", "--in", s(&wav), "--out", s(&out)]);
    let frames = read_fbank(&out).unwrap();
    assert_eq!(frames.shape(), (1024, 128));
    let floor = (1e-10f64.ln() as f32) as f64;
    assert!(frames.as_slice().iter().all(|&v| v == floor));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max relative error"), "{text}");
}
