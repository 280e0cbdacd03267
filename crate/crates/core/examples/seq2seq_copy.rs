//! Trains the attention encoder-decoder on a reversal task and decodes with
//! beam search and top-k sampling.

use btsumm::corpus::{Lexicon, TokenId};
use btsumm::decode::GenerationConfig;
use btsumm::nn::Tensor;
use btsumm::seq2seq::{Direction, Seq2Seq, Seq2SeqConfig};
use btsumm::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> btsumm::Result<()> {
    let vocab = 15;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = (0..1500)
        .map(|_| {
            let len = rng.gen_range(2..=5);
            let src: Vec<TokenId> = (0..len).map(|_| rng.gen_range(3..vocab as TokenId)).collect();
            let tgt = src.iter().rev().copied().collect();
            (src, tgt)
        })
        .collect();
    let lex = Lexicon::identity(vocab);
    let emb = Tensor::uniform(vocab, 16, 0.5, &mut rng);
    let cfg = Seq2SeqConfig {
        hidden: 32,
        freeze_embeddings: false,
        train: TrainConfig {
            epochs: 8,
            batch: 32,
            lr: 0.01,
            ..Default::default()
        },
    };
    let mut model = Seq2Seq::new(cfg, Direction::FullToSummary, lex.clone(), lex, &emb, 4)?;
    let report = model.train(&pairs, None)?;
    println!("train losses: {:?}", report.train_losses);

    let tests: Vec<Vec<TokenId>> = vec![vec![3, 4, 5], vec![9, 8, 14, 6], vec![10, 11]];
    let inputs: Vec<&[TokenId]> = tests.iter().map(Vec::as_slice).collect();
    let beam = model.generate(&inputs, 0, &GenerationConfig::beam(5, 8))?;
    let sampled = model.generate(&inputs, 0, &GenerationConfig::sampling(3, 0, 8, 1))?;
    for ((i, b), s) in inputs.iter().zip(&beam).zip(&sampled) {
        println!("{i:?} -> beam {b:?}, top-3 sample {s:?}");
    }
    Ok(())
}
