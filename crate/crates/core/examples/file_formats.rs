//! EMB1 corpus files, the JSON manifest and TFCK checkpoints: write, read
//! back, and catch a flipped byte.
//!
//! cargo run --example file_formats

use tefal::io::{decode_checkpoint, encode_checkpoint, load_corpus, read_embeddings, write_corpus};
use tefal::model::{Model, ModelConfig};
use tefal::synth::{synth_corpus, SynthConfig};
use tefal::trainer::Checkpoint;

fn main() -> tefal::Result<()> {
    let dir = std::env::temp_dir().join("tefal-formats");
    let corpus = synth_corpus(&SynthConfig { n_items: 50, ..SynthConfig::default() })?.corpus;
    let manifest = write_corpus(&dir, &corpus)?;
    let back = load_corpus(&manifest)?;
    println!(
        "corpus: {} items, {} without audio, identical after reload: {}",
        back.len(),
        back.missing_audio_count(),
        back == corpus
    );
    let video = read_embeddings(&dir.join("video.emb"))?;
    println!("video.emb: {} items of {}x{}", video.items.len(), video.rows, video.cols);

    let ckpt = Checkpoint { model: Model::init(ModelConfig::new(32), 1.0 / 0.07, 1)?, step: 42 };
    let mut bytes = encode_checkpoint(&ckpt)?;
    println!("checkpoint: {} bytes, step {}", bytes.len(), decode_checkpoint(&bytes, "memory")?.step);
    bytes[100] ^= 1;
    match decode_checkpoint(&bytes, "memory") {
        Err(e) => println!("after flipping one bit: {e}"),
        Ok(_) => println!("corruption went unnoticed"),
    }
    Ok(())
}
