//! Text-conditioned attention pooling over video frames with one
//! cross-attention block.
//!
//! cargo run --example attention_pooling

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tefal::xattn::{conditioned_embedding, export_attention_weights, XAttnParams};
use tefal::Matrix;

fn main() -> tefal::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dim = 8;
    let frames = Matrix::uniform(5, dim, 1.0, &mut rng);

    // A text that points at frame 2: the identity block attends to it most.
    let text = frames.row_matrix(2).scale(4.0);
    let identity = XAttnParams::identity(dim);
    let weights = export_attention_weights(&identity, &text, &frames)?;
    println!("identity block, text ≈ frame 2");
    for (i, w) in weights.as_slice().iter().enumerate() {
        println!("  frame {i}: {w:.4}");
    }

    let block = XAttnParams::init(dim, dim, true, &mut rng);
    let pooled = conditioned_embedding(&block, &text, &frames)?;
    println!("random block, conditioned embedding: {:?}", pooled.round_to_f32().as_slice());

    // Reordering the frames leaves the pooled embedding bit-identical.
    let shuffled = frames.select_rows(&[4, 2, 0, 3, 1]);
    let again = conditioned_embedding(&block, &text, &shuffled)?;
    println!("permutation invariant: {}", again == pooled);
    Ok(())
}
