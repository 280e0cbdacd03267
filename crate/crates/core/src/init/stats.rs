use crate::corpus::{Corpus, Lexicon, TokenId, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::Real;

/// Per-word presence frequencies of the two corpora over the shared
/// vocabulary: the fraction of sequences containing the word at least once.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentStats {
    pub n_full: usize,
    pub n_summ: usize,
    pub count_f: Vec<u64>,
    pub count_s: Vec<u64>,
    pub mu_f: Vec<f64>,
    pub mu_s: Vec<f64>,
}

fn presence_counts(corpus: &Corpus, vocab_len: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; vocab_len];
    let mut last_seen = vec![usize::MAX; vocab_len];
    for (i, seq) in corpus.sequences.iter().enumerate() {
        for &t in &seq.ids {
            let t = t as usize;
            if t >= vocab_len {
                return Err(Error::InvalidArgument(format!(
                    "token id {t} outside a vocabulary of {vocab_len}"
                )));
            }
            if last_seen[t] != i {
                last_seen[t] = i;
                counts[t] += 1;
            }
        }
    }
    Ok(counts)
}

pub fn compute_moments(full: &Corpus, summ: &Corpus, vocab_len: usize) -> Result<MomentStats> {
    if full.is_empty() || summ.is_empty() {
        return Err(Error::Empty("moment statistics need both corpora".into()));
    }
    let count_f = presence_counts(full, vocab_len)?;
    let count_s = presence_counts(summ, vocab_len)?;
    let nf = full.len() as f64;
    let ns = summ.len() as f64;
    Ok(MomentStats {
        n_full: full.len(),
        n_summ: summ.len(),
        mu_f: count_f.iter().map(|&c| c as f64 / nf).collect(),
        mu_s: count_s.iter().map(|&c| c as f64 / ns).collect(),
        count_f,
        count_s,
    })
}

impl MomentStats {
    pub fn vocab_len(&self) -> usize {
        self.mu_f.len()
    }
}

/// `w_v = max(μ_v^S / μ_v^F, 1)` for summary-vocabulary words, `cap` when
/// `μ_v^F = 0`, and 0 outside the summary vocabulary. Indexed by shared id.
pub fn summary_weights(stats: &MomentStats, summary_lex: &Lexicon, cap: Real) -> Vec<Real> {
    (0..stats.vocab_len())
        .map(|v| {
            let id = v as TokenId;
            if id == EOS || id == PAD || !summary_lex.contains(id) {
                0.0
            } else if stats.mu_f[v] == 0.0 {
                cap
            } else {
                (stats.mu_s[v] / stats.mu_f[v]).max(1.0) as Real
            }
        })
        .collect()
}
