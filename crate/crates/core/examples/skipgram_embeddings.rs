//! Trains skip-gram vectors on a synthetic summary corpus and prints the
//! nearest neighbours of a few words. Words of the same slot share their
//! contexts, so they cluster tightly.

use btsumm::corpus::{build_vocab, synth_corpus, SynthRule};
use btsumm::embeddings::{cosine, train_skipgram, SkipgramConfig};

fn main() -> btsumm::Result<()> {
    let rule = SynthRule::pseudo_words(6, 12, 20, 4, 0.0, 3);
    let synth = synth_corpus(&rule, 3000, 3)?;
    let vocab = build_vocab(&[&synth.summary], 1000)?;
    let corpus = synth.summary.encode(&vocab);
    let cfg = SkipgramConfig {
        dim: 24,
        epochs: 5,
        ..Default::default()
    };
    let (emb, stats) = train_skipgram(&corpus, &vocab, &cfg)?;
    println!("epoch losses: {:?}", stats.epoch_losses);

    for id in 3..6u32 {
        let mut scored: Vec<(f64, &str)> = (3..vocab.len() as u32)
            .filter(|&o| o != id)
            .map(|o| (cosine(emb.vector(id), emb.vector(o)) as f64, vocab.token(o)))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let top: Vec<String> = scored.iter().take(4).map(|(s, w)| format!("{w} ({s:.3})")).collect();
        println!("{:>10}: {}", vocab.token(id), top.join(", "));
    }
    Ok(())
}
