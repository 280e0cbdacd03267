//! Generates a planted-rule corpus and splits it into unaligned halves.

use btsumm::corpus::{split_unaligned_count, synth_corpus, SplitRatios, SynthRule};

fn main() -> btsumm::Result<()> {
    let rule = SynthRule::pseudo_words(6, 10, 20, 3, 0.3, 7);
    let corpus = synth_corpus(&rule, 1000, 7)?;

    println!("hidden pairs:");
    for pair in corpus.aligned_pairs().iter().take(3) {
        println!("  {}\n    -> {}", pair.fulltext.join(" "), pair.summary.join(" "));
    }

    let ratios = SplitRatios {
        summary_frac: 0.45,
        fulltext_frac: 0.45,
        val: 0.05,
        test: 0.05,
    };
    let split = split_unaligned_count(1000, ratios, 7)?;
    println!(
        "split: {} full texts, {} summaries, {} validation, {} test",
        split.fulltext_only.len(),
        split.summary_only.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(())
}
