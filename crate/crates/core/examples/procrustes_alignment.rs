//! Recovers a planted rotation between two embedding spaces from a small
//! seed dictionary.

use btsumm::alignment::{align_spaces, orthogonality_error, AlignConfig, AnchorPolicy};
use btsumm::corpus::{TokenId, Vocabulary};
use btsumm::embeddings::EmbeddingMatrix;
use btsumm::nn::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> btsumm::Result<()> {
    let (n, d) = (300, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vocab = Vocabulary::from_tokens((0..n).map(|i| format!("w{i}")), n);
    let mut noise = |scale: Real| (0..12).map(|_| rng.gen::<Real>()).sum::<Real>() * scale - 6.0 * scale;

    let x = Tensor::from_vec(vocab.len(), d, (0..vocab.len() * d).map(|_| noise(1.0)).collect())?;
    // A rotation in the plane of every consecutive pair of axes.
    let mut r = Tensor::identity(d);
    for i in (0..d).step_by(2) {
        let (c, s) = (0.6, 0.8);
        r.set(i, i, c);
        r.set(i, i + 1, -s);
        r.set(i + 1, i, s);
        r.set(i + 1, i + 1, c);
    }
    let mut y = x.matmul(&r)?;
    for v in y.data_mut() {
        *v += noise(0.01);
    }

    let src = EmbeddingMatrix::new(vocab.clone(), x)?;
    let tgt = EmbeddingMatrix::new(vocab.clone(), y)?;
    let cfg = AlignConfig {
        anchors: AnchorPolicy::Pairs((3..23).map(|i| (i, i)).collect()),
        top_k: n,
        ..Default::default()
    };
    let (space, report) = align_spaces(&src, &tgt, &cfg)?;
    let hits = (3..vocab.len() as TokenId).filter(|&w| space.nearest(w).word == w).count();
    println!("anchors {}, refinement rounds {}", report.anchors, report.rounds.len());
    println!("top-1 retrieval {hits}/{}", vocab.len() - 3);
    println!("max |Q^T Q - I| = {:.2e}", orthogonality_error(&space.q));
    println!("max |Q - R| = {:.2e}", space.q.max_abs_diff(&r));
    Ok(())
}
