//! On-disk formats: EMB1 embedding files (also used for FBANK features),
//! the JSON corpus manifest, and TFCK checkpoints.
//!
//! All numeric payloads are little-endian `f32`; every binary file ends with
//! a CRC32 of the bytes before it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{AudioTokens, Corpus, CorpusItem, FrameEmbeddings, TextEmbedding};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::matrix::{shape_str, Matrix};
use crate::model::{Modalities, Model, ModelConfig};
use crate::params::{ParamStore, Parameters};
use crate::trainer::Checkpoint;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::File { path: path.display().to_string(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::File { path: path.display().to_string(), source })
}

fn format_err(path: &str, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_string(), reason: reason.into() }
}

fn put_u32(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    for &v in m.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn seal(mut buf: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Verifies the trailing CRC and returns the body without it.
fn unseal<'a>(bytes: &'a [u8], path: &str) -> Result<&'a [u8]> {
    if bytes.len() < 4 {
        return Err(format_err(path, "file too short for a checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { path: path.to_string(), stored, computed });
    }
    Ok(body)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a str) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(self.path, format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| format_err(self.path, "matrix size overflows"))?;
        let raw = self.take(n)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        Matrix::from_vec(rows, cols, data).map_err(|e| format_err(self.path, e.to_string()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(format_err(
                self.path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_err(self.path, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// A stack of equally shaped per-item matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub rows: usize,
    pub cols: usize,
    pub items: Vec<Matrix>,
}

impl EmbeddingFile {
    pub fn new(rows: usize, cols: usize, items: Vec<Matrix>) -> Result<Self> {
        if let Some(bad) = items.iter().find(|m| m.shape() != (rows, cols)) {
            return Err(Error::Shape(format!("embedding file holds {rows}x{cols} items, got {}", shape_str(bad))));
        }
        Ok(Self { rows, cols, items })
    }
}

pub fn encode_embeddings(file: &EmbeddingFile) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(24 + file.items.len() * file.rows * file.cols * 4);
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&EMB_VERSION.to_le_bytes());
    put_u32(&mut buf, file.items.len(), "item count")?;
    put_u32(&mut buf, file.rows, "rows")?;
    put_u32(&mut buf, file.cols, "cols")?;
    for m in &file.items {
        if m.shape() != (file.rows, file.cols) {
            return Err(Error::Shape(format!("item is {}, file holds {}x{}", shape_str(m), file.rows, file.cols)));
        }
        put_matrix(&mut buf, m);
    }
    Ok(seal(buf))
}

pub fn decode_embeddings(bytes: &[u8], path: &str) -> Result<EmbeddingFile> {
    let body = unseal(bytes, path)?;
    let mut r = Reader::new(body, path);
    r.magic(EMB_MAGIC)?;
    let version = r.u32()?;
    if version != EMB_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(format_err(path, "rows and cols must be positive"));
    }
    let expected = (count as u128) * (rows as u128) * (cols as u128) * 4;
    if expected != (body.len() - r.pos) as u128 {
        return Err(format_err(path, format!("payload is {} bytes, header implies {expected}", body.len() - r.pos)));
    }
    let items = (0..count).map(|_| r.matrix(rows, cols)).collect::<Result<_>>()?;
    r.finish()?;
    Ok(EmbeddingFile { rows, cols, items })
}

pub fn write_embeddings(path: &Path, file: &EmbeddingFile) -> Result<()> {
    write_file(path, &encode_embeddings(file)?)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    decode_embeddings(&read_file(path)?, &path.display().to_string())
}

/// Writes a filter-bank matrix (L_tar × n_mels) as a one-item EMB1 file.
pub fn write_fbank(path: &Path, fbank: &Matrix) -> Result<()> {
    write_embeddings(path, &EmbeddingFile::new(fbank.rows(), fbank.cols(), vec![fbank.clone()])?)
}

pub fn read_fbank(path: &Path) -> Result<Matrix> {
    let mut file = read_embeddings(path)?;
    if file.items.len() != 1 {
        return Err(format_err(&path.display().to_string(), format!("expected one fbank, found {}", file.items.len())));
    }
    Ok(file.items.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub text_index: usize,
    pub video_index: usize,
    pub audio_index: Option<usize>,
    pub has_audio: bool,
    /// Row pair `[cls; dist]` in the summary file.
    #[serde(default)]
    pub summary_index: Option<usize>,
}

/// Corpus description. File paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub text_file: String,
    pub video_file: String,
    pub audio_file: String,
    #[serde(default)]
    pub summary_file: Option<String>,
    pub items: Vec<ManifestItem>,
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    base.join(file)
}

fn indexed<'a>(file: &'a EmbeddingFile, index: usize, what: &str, id: &str, path: &Path) -> Result<&'a Matrix> {
    file.items.get(index).ok_or_else(|| {
        format_err(
            &path.display().to_string(),
            format!("item `{id}`: {what} index {index} out of range (file has {})", file.items.len()),
        )
    })
}

/// Loads a corpus from a manifest and the EMB1 files it references. Items
/// with null audio get zero tokens and the missing flag.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let mpath = manifest_path.display().to_string();
    let manifest: Manifest =
        serde_json::from_slice(&read_file(manifest_path)?).map_err(|e| format_err(&mpath, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(format_err(&mpath, format!("unsupported manifest version {}", manifest.version)));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let text_path = resolve(base, &manifest.text_file);
    let video_path = resolve(base, &manifest.video_file);
    let audio_path = resolve(base, &manifest.audio_file);
    let texts = read_embeddings(&text_path)?;
    let videos = read_embeddings(&video_path)?;
    let audios = read_embeddings(&audio_path)?;
    let summaries = match &manifest.summary_file {
        Some(f) => {
            let p = resolve(base, f);
            Some((read_embeddings(&p)?, p))
        }
        None => None,
    };

    if texts.rows != 1 {
        return Err(format_err(
            &text_path.display().to_string(),
            format!("text embeddings must be 1 row, got {}", texts.rows),
        ));
    }
    let dim = texts.cols;
    for (file, p) in [(&videos, &video_path), (&audios, &audio_path)] {
        if file.cols != dim {
            return Err(format_err(
                &p.display().to_string(),
                format!("width {} disagrees with text width {dim}", file.cols),
            ));
        }
    }
    if let Some((s, p)) = &summaries {
        if s.rows != 2 || s.cols != dim {
            return Err(format_err(
                &p.display().to_string(),
                format!("summary items must be 2x{dim}, got {}x{}", s.rows, s.cols),
            ));
        }
    }

    let mut items = Vec::with_capacity(manifest.items.len());
    for m in &manifest.items {
        if m.has_audio != m.audio_index.is_some() {
            return Err(format_err(&mpath, format!("item `{}`: has_audio disagrees with audio_index", m.id)));
        }
        let audio = match m.audio_index {
            Some(i) => AudioTokens::new(indexed(&audios, i, "audio", &m.id, &audio_path)?.clone()),
            None => AudioTokens::missing(audios.rows, dim),
        };
        let audio_cls_dist = match (m.summary_index, &summaries) {
            (Some(i), Some((s, p))) => Some(indexed(s, i, "summary", &m.id, p)?.clone()),
            (Some(_), None) => {
                return Err(format_err(&mpath, format!("item `{}` has a summary index but no summary file", m.id)))
            }
            (None, _) => None,
        };
        items.push(CorpusItem {
            id: m.id.clone(),
            text: TextEmbedding::new(indexed(&texts, m.text_index, "text", &m.id, &text_path)?.clone())?,
            frames: FrameEmbeddings::new(indexed(&videos, m.video_index, "video", &m.id, &video_path)?.clone()),
            audio,
            audio_cls_dist,
        });
    }
    Corpus::new(items)
}

/// Writes `corpus` as `text.emb`, `video.emb`, `audio.emb`, optionally
/// `summary.emb`, and `manifest.json` inside `dir`. Returns the manifest
/// path. Values are stored as `f32`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("refusing to write an empty corpus".into()));
    }
    fs::create_dir_all(dir).map_err(|source| Error::File { path: dir.display().to_string(), source })?;
    let d = corpus.dim();
    let mut texts = Vec::new();
    let mut videos = Vec::new();
    let mut audios = Vec::new();
    let mut summaries = Vec::new();
    let mut entries = Vec::new();
    for item in corpus.items() {
        texts.push(item.text.as_matrix().clone());
        videos.push(item.frames.as_matrix().clone());
        let audio_index = if item.audio.is_missing() {
            None
        } else {
            audios.push(item.audio.as_matrix().clone());
            Some(audios.len() - 1)
        };
        let summary_index = item.audio_cls_dist.as_ref().map(|s| {
            summaries.push(s.clone());
            summaries.len() - 1
        });
        entries.push(ManifestItem {
            id: item.id.clone(),
            text_index: texts.len() - 1,
            video_index: videos.len() - 1,
            audio_index,
            has_audio: audio_index.is_some(),
            summary_index,
        });
    }
    write_embeddings(&dir.join("text.emb"), &EmbeddingFile::new(1, d, texts)?)?;
    write_embeddings(&dir.join("video.emb"), &EmbeddingFile::new(corpus.frame_count(), d, videos)?)?;
    write_embeddings(&dir.join("audio.emb"), &EmbeddingFile::new(corpus.audio_token_count(), d, audios)?)?;
    let summary_file = if summaries.is_empty() {
        None
    } else {
        write_embeddings(&dir.join("summary.emb"), &EmbeddingFile::new(2, d, summaries)?)?;
        Some("summary.emb".to_string())
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        text_file: "text.emb".into(),
        video_file: "video.emb".into(),
        audio_file: "audio.emb".into(),
        summary_file,
        items: entries,
    };
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_file(&path, json.as_bytes())?;
    Ok(path)
}

const META_STEP: &str = "meta.step";
const META_CONFIG: &str = "meta.config";

/// Serializes the model parameters in name order, followed by two metadata
/// entries: the step count as four 16-bit limbs and the model config.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut store = ParamStore::from_parameters(&ckpt.model);
    let s = ckpt.step;
    let limbs: Vec<f64> = (0..4).map(|i| ((s >> (16 * i)) & 0xFFFF) as f64).collect();
    store.insert(META_STEP, Matrix::from_vec(1, 4, limbs)?);
    let c = &ckpt.model.config;
    let config = vec![
        c.dim as f64,
        c.proj_dim as f64,
        c.fusion.code() as f64,
        c.modalities.code() as f64,
        if c.out_affine { 1.0 } else { 0.0 },
    ];
    if c.dim >= 1 << 24 || c.proj_dim >= 1 << 24 {
        return Err(Error::InvalidArgument("dimensions too large for the checkpoint format".into()));
    }
    store.insert(META_CONFIG, Matrix::from_vec(1, 5, config)?);

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, store.len(), "parameter count")?;
    for (name, m) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("parameter name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, m.rows(), "rows")?;
        put_u32(&mut buf, m.cols(), "cols")?;
        put_matrix(&mut buf, m);
    }
    Ok(seal(buf))
}

pub fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<Checkpoint> {
    let body = unseal(bytes, path)?;
    let mut r = Reader::new(body, path);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| format_err(path, "parameter name is not UTF-8"))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if rows == 0 || cols == 0 {
            return Err(format_err(path, format!("parameter `{name}` has an empty shape")));
        }
        if store.get(name).is_some() {
            return Err(format_err(path, format!("duplicate parameter `{name}`")));
        }
        let m = r.matrix(rows, cols)?;
        store.insert(name, m);
    }
    r.finish()?;

    let meta = |name: &str, cols: usize| -> Result<Vec<f64>> {
        let m = store.get(name).ok_or_else(|| format_err(path, format!("missing `{name}`")))?;
        if m.shape() != (1, cols) {
            return Err(format_err(path, format!("`{name}` must be 1x{cols}")));
        }
        Ok(m.as_slice().to_vec())
    };
    let limbs = meta(META_STEP, 4)?;
    let step = limbs.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i)));
    let c = meta(META_CONFIG, 5)?;
    let config = ModelConfig {
        dim: c[0] as usize,
        proj_dim: c[1] as usize,
        fusion: FusionKind::from_code(c[2] as u32).ok_or_else(|| format_err(path, "unknown fusion code"))?,
        modalities: Modalities::from_code(c[3] as u32).ok_or_else(|| format_err(path, "unknown modalities code"))?,
        out_affine: c[4] != 0.0,
    };
    let mut model = Model::init(config, 1.0, 0).map_err(|e| format_err(path, e.to_string()))?;
    let mut expected = 2;
    model.visit("", &mut |_, _| expected += 1);
    if expected != store.len() {
        return Err(format_err(path, format!("{} parameters stored, model has {}", store.len() - 2, expected - 2)));
    }
    store.write_into(&mut model).map_err(|e| format_err(path, e.to_string()))?;
    Ok(Checkpoint { model, step })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?, &path.display().to_string())
}

/// Pretty JSON with object keys sorted and every non-integer number printed
/// with exactly four decimals, so equal results give identical bytes.
pub fn to_fixed_json<T: Serialize>(value: &T) -> Result<String> {
    let mut out = String::new();
    render_fixed(&serde_json::to_value(value)?, 0, &mut out);
    out.push('\n');
    Ok(out)
}

fn render_fixed(v: &serde_json::Value, indent: usize, out: &mut String) {
    use serde_json::Value;
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Number(n) if n.is_f64() => out.push_str(&format!("{:.4}", n.as_f64().unwrap_or(f64::NAN))),
        Value::Array(items) if items.iter().all(|i| !i.is_array() && !i.is_object()) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                render_fixed(item, indent, out);
            }
            out.push(']');
        }
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                render_fixed(item, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (i, (k, item)) in map.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                render_fixed(item, indent + 1, out);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_corpus, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_file(seed: u64, count: usize, rows: usize, cols: usize) -> EmbeddingFile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = (0..count).map(|_| Matrix::uniform(rows, cols, 3.0, &mut rng).round_to_f32()).collect();
        EmbeddingFile::new(rows, cols, items).unwrap()
    }

    #[test]
    fn fixed_json_formatting() {
        let v = serde_json::json!({"b": 62.5, "a": [1, 2], "c": {"x": 1.0 / 3.0, "n": null}});
        let s = to_fixed_json(&v).unwrap();
        assert_eq!(
            s,
            "{\n  \"a\": [1, 2],\n  \"b\": 62.5000,\n  \"c\": {\n    \"n\": null,\n    \"x\": 0.3333\n  }\n}\n"
        );
        let parsed: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(parsed["b"], 62.5);
    }

    #[test]
    fn embeddings_round_trip() {
        let f = random_file(1, 5, 3, 7);
        let bytes = encode_embeddings(&f).unwrap();
        assert_eq!(bytes.len(), 20 + 5 * 3 * 7 * 4 + 4);
        assert_eq!(decode_embeddings(&bytes, "mem").unwrap(), f);
        let empty = EmbeddingFile::new(2, 4, vec![]).unwrap();
        assert_eq!(decode_embeddings(&encode_embeddings(&empty).unwrap(), "mem").unwrap(), empty);
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let bytes = encode_embeddings(&random_file(2, 2, 2, 3)).unwrap();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(decode_embeddings(&bad, "mem").is_err(), "flip at {i} undetected");
        }
        assert!(matches!(decode_embeddings(&bytes[..bytes.len() - 1], "mem"), Err(Error::Checksum { .. })));
    }

    #[test]
    fn header_mismatch_is_reported() {
        let mut body = encode_embeddings(&random_file(3, 2, 2, 2)).unwrap();
        body.truncate(body.len() - 4);
        body[8] = 3; // count 2 → 3
        let resealed = seal(body);
        assert!(matches!(decode_embeddings(&resealed, "mem"), Err(Error::Format { .. })));
    }

    #[test]
    fn corpus_round_trip_and_missing_audio() {
        let dir = tempfile::tempdir().unwrap();
        let c = synth_corpus(&SynthConfig {
            n_items: 30,
            dim: 8,
            frames: 3,
            audio_tokens: 4,
            relevant_frames: 1,
            ..SynthConfig::default()
        })
        .unwrap()
        .corpus;
        assert!(c.missing_audio_count() > 0);
        let path = write_corpus(dir.path(), &c).unwrap();
        let back = load_corpus(&path).unwrap();
        assert_eq!(back, c);
        let again = dir.path().join("again");
        write_corpus(&again, &back).unwrap();
        for f in ["text.emb", "video.emb", "audio.emb", "summary.emb", "manifest.json"] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = synth_corpus(&SynthConfig {
            n_items: 4,
            dim: 4,
            frames: 2,
            audio_tokens: 2,
            relevant_frames: 1,
            ..SynthConfig::default()
        })
        .unwrap()
        .corpus;
        let path = write_corpus(dir.path(), &c).unwrap();
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m.items[0].text_index = 99;
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_corpus(&path), Err(Error::Format { .. })));

        m.items.clear();
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn checkpoint_round_trip_for_every_fusion() {
        for fusion in FusionKind::ALL {
            let cfg = ModelConfig { fusion, ..ModelConfig::new(6) };
            let mut model = Model::init(cfg, 20.0, 4).unwrap();
            model.visit_mut("", &mut |_, m| *m = m.round_to_f32());
            let ckpt = Checkpoint { model, step: 123_456_789_012 };
            let bytes = encode_checkpoint(&ckpt).unwrap();
            let back = decode_checkpoint(&bytes, "mem").unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn checkpoint_corruption_is_detected() {
        let ckpt = Checkpoint { model: Model::init(ModelConfig::new(4), 10.0, 0).unwrap(), step: 3 };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        for i in (0..bytes.len()).step_by(7) {
            let mut bad = bytes.clone();
            bad[i] = bad[i].wrapping_add(1);
            assert!(decode_checkpoint(&bad, "mem").is_err());
        }
    }
}
