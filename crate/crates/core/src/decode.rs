//! Autoregressive decoding shared by every generator: top-k sampling and
//! length-normalized beam search over a step-wise model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Lexicon, TokenId, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// A decoder that advances a batch of hypotheses one token at a time.
/// Token indices are local to [`StepModel::lexicon`].
pub trait StepModel {
    type State;

    fn lexicon(&self) -> &Lexicon;

    /// Initial state with one row per input sequence (shared ids).
    fn start(&self, inputs: &[&[TokenId]]) -> Result<Self::State>;

    /// State restricted to (or duplicated along) `rows`.
    fn select(&self, state: &Self::State, rows: &[usize]) -> Self::State;

    /// Output scores for the next token of every row, given the previous
    /// tokens, and the advanced state.
    fn step(&self, state: &Self::State, prev: &[usize]) -> Result<(Tensor, Self::State)>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    /// Sample from the renormalized `k` highest-scoring tokens.
    TopK { k: usize },
    /// Beam search; hypothesis scores are divided by `length^len_norm`.
    Beam { width: usize, len_norm: Real },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationConfig {
    pub mode: DecodeMode,
    /// `EOS` is unavailable before this many tokens.
    pub min_len: usize,
    /// Hard cap on emitted tokens.
    pub max_len: usize,
    pub seed: u64,
}

impl GenerationConfig {
    pub fn sampling(k: usize, min_len: usize, max_len: usize, seed: u64) -> Self {
        GenerationConfig {
            mode: DecodeMode::TopK { k },
            min_len,
            max_len,
            seed,
        }
    }

    pub fn beam(width: usize, max_len: usize) -> Self {
        GenerationConfig {
            mode: DecodeMode::Beam {
                width,
                len_norm: 0.7,
            },
            min_len: 0,
            max_len,
            seed: 0,
        }
    }

    pub fn greedy(max_len: usize) -> Self {
        Self::sampling(1, 0, max_len, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match self.mode {
            DecodeMode::TopK { k } if k == 0 => return bad("top-k needs k >= 1"),
            DecodeMode::Beam { width, .. } if width == 0 => return bad("beam width must be >= 1"),
            _ => {}
        }
        if self.max_len == 0 {
            return bad("max_len must be >= 1");
        }
        if self.min_len > self.max_len {
            return bad("min_len exceeds max_len");
        }
        Ok(())
    }
}

/// Per-sequence generator seed, independent of batching and worker layout.
pub fn sequence_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 over the pair
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mask_row(row: &mut [Real], len: usize, min_len: usize) {
    row[PAD as usize] = Real::NEG_INFINITY;
    if len < min_len {
        row[EOS as usize] = Real::NEG_INFINITY;
    }
}

/// Indices of the `k` largest entries, best first, ties to the lower index.
fn top_k(row: &[Real], k: usize) -> Vec<usize> {
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    for (i, &v) in row.iter().enumerate() {
        if v == Real::NEG_INFINITY {
            continue;
        }
        if best.len() == k && v <= row[best[k - 1]] {
            continue;
        }
        let pos = best.partition_point(|&j| row[j] >= v);
        best.insert(pos, i);
        best.truncate(k);
    }
    best
}

fn log_softmax(row: &mut [Real]) {
    let mx = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<Real>().ln();
    row.iter_mut().for_each(|v| *v -= lse);
}

/// Generates one output per input, in input order. `first_index` is the
/// corpus position of `inputs[0]`, used to derive per-sequence seeds.
pub fn generate_batch<M: StepModel>(
    model: &M,
    inputs: &[&[TokenId]],
    first_index: usize,
    cfg: &GenerationConfig,
) -> Result<Vec<Vec<TokenId>>> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let local = match cfg.mode {
        DecodeMode::TopK { k } => sample(model, inputs, first_index, k, cfg)?,
        DecodeMode::Beam { width, len_norm } => beam(model, inputs, width, len_norm, cfg)?,
    };
    let lex = model.lexicon();
    Ok(local
        .into_iter()
        .map(|seq| seq.into_iter().map(|t| lex.shared_of(t)).collect())
        .collect())
}

fn sample<M: StepModel>(
    model: &M,
    inputs: &[&[TokenId]],
    first_index: usize,
    k: usize,
    cfg: &GenerationConfig,
) -> Result<Vec<Vec<usize>>> {
    let n = inputs.len();
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| ChaCha8Rng::seed_from_u64(sequence_seed(cfg.seed, (first_index + i) as u64)))
        .collect();
    let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut state = model.start(inputs)?;
    let mut alive: Vec<usize> = (0..n).collect();
    let mut prev = vec![EOS as usize; n];
    for t in 0..cfg.max_len {
        let (mut scores, next) = model.step(&state, &prev)?;
        let mut keep = Vec::with_capacity(alive.len());
        let mut next_prev = Vec::with_capacity(alive.len());
        for (r, &seq) in alive.iter().enumerate() {
            let row = scores.row_mut(r);
            mask_row(row, t, cfg.min_len);
            let cands = top_k(row, k);
            if cands.is_empty() {
                return Err(Error::NonFinite("every token masked during sampling".into()));
            }
            let choice = if cands.len() == 1 {
                cands[0]
            } else {
                let mx = row[cands[0]];
                let w: Vec<Real> = cands.iter().map(|&c| (row[c] - mx).exp()).collect();
                let total: Real = w.iter().sum();
                let mut u = rngs[seq].gen::<Real>() * total;
                let mut pick = cands[cands.len() - 1];
                for (c, wi) in cands.iter().zip(&w) {
                    if u < *wi {
                        pick = *c;
                        break;
                    }
                    u -= wi;
                }
                pick
            };
            if choice == EOS as usize {
                continue;
            }
            outputs[seq].push(choice);
            keep.push(r);
            next_prev.push(choice);
        }
        if keep.is_empty() {
            break;
        }
        alive = keep.iter().map(|&r| alive[r]).collect();
        state = if keep.len() == scores.rows() {
            next
        } else {
            model.select(&next, &keep)
        };
        prev = next_prev;
    }
    Ok(outputs)
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    score: Real,
}

fn beam<M: StepModel>(
    model: &M,
    inputs: &[&[TokenId]],
    width: usize,
    len_norm: Real,
    cfg: &GenerationConfig,
) -> Result<Vec<Vec<usize>>> {
    let n = inputs.len();
    let mut state = model.start(inputs)?;
    // alive[b]: hypotheses of input b; their rows are laid out input by input.
    let mut alive: Vec<Vec<Hyp>> = vec![vec![Hyp { tokens: Vec::new(), score: 0.0 }]; n];
    let mut finished: Vec<Vec<Hyp>> = vec![Vec::new(); n];
    let mut prev: Vec<usize> = vec![EOS as usize; n];
    let norm = |h: &Hyp, steps: usize| h.score / (steps.max(1) as Real).powf(len_norm);
    for t in 0..cfg.max_len {
        let (mut scores, next) = model.step(&state, &prev)?;
        let mut parents = Vec::new();
        let mut next_prev = Vec::new();
        let mut row0 = 0;
        for b in 0..n {
            let hyps = std::mem::take(&mut alive[b]);
            if hyps.is_empty() {
                continue;
            }
            let mut cands: Vec<(Real, usize, usize)> = Vec::new();
            for (h, hyp) in hyps.iter().enumerate() {
                let row = scores.row_mut(row0 + h);
                mask_row(row, t, cfg.min_len);
                log_softmax(row);
                for tok in top_k(row, 2 * width) {
                    cands.push((hyp.score + row[tok], h, tok));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut new_alive = Vec::new();
            for (score, h, tok) in cands {
                if new_alive.len() == width {
                    break;
                }
                let mut tokens = hyps[h].tokens.clone();
                if tok == EOS as usize {
                    if finished[b].len() < width {
                        finished[b].push(Hyp { tokens, score });
                    }
                    continue;
                }
                tokens.push(tok);
                if t + 1 == cfg.max_len {
                    if finished[b].len() < width {
                        finished[b].push(Hyp { tokens, score });
                    }
                    continue;
                }
                parents.push(row0 + h);
                next_prev.push(tok);
                new_alive.push(Hyp { tokens, score });
            }
            row0 += hyps.len();
            if finished[b].len() < width {
                alive[b] = new_alive;
            } else {
                // Drop this input's surviving rows: it is done.
                let drop = new_alive.len();
                parents.truncate(parents.len() - drop);
                next_prev.truncate(next_prev.len() - drop);
            }
        }
        if parents.is_empty() {
            break;
        }
        state = model.select(&next, &parents);
        prev = next_prev;
    }
    Ok((0..n)
        .map(|b| {
            let pool = if finished[b].is_empty() {
                &alive[b]
            } else {
                &finished[b]
            };
            let mut best: Option<&Hyp> = None;
            for h in pool {
                let steps = h.tokens.len() + usize::from(h.tokens.len() < cfg.max_len);
                if best.is_none_or(|b| norm(h, steps) > norm(b, b.tokens.len() + usize::from(b.tokens.len() < cfg.max_len))) {
                    best = Some(h);
                }
            }
            best.map(|h| h.tokens.clone()).unwrap_or_default()
        })
        .collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// A fixed bigram table: scores depend only on the previous token.
    pub(crate) struct Bigram {
        pub lex: Lexicon,
        pub table: Tensor,
    }

    impl StepModel for Bigram {
        type State = usize;

        fn lexicon(&self) -> &Lexicon {
            &self.lex
        }

        fn start(&self, inputs: &[&[TokenId]]) -> Result<usize> {
            Ok(inputs.len())
        }

        fn select(&self, _: &usize, rows: &[usize]) -> usize {
            rows.len()
        }

        fn step(&self, state: &usize, prev: &[usize]) -> Result<(Tensor, usize)> {
            assert_eq!(*state, prev.len());
            let v = self.table.cols();
            let mut out = Tensor::zeros(prev.len(), v);
            for (r, &p) in prev.iter().enumerate() {
                out.row_mut(r).copy_from_slice(self.table.row(p));
            }
            Ok((out, prev.len()))
        }
    }

    fn bigram(seed: u64) -> Bigram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = 8;
        Bigram {
            lex: Lexicon::identity(v),
            table: Tensor::uniform(v, v, 2.0, &mut rng),
        }
    }

    #[test]
    fn min_len_masks_eos_and_max_len_truncates() {
        let mut m = bigram(1);
        for r in 0..8 {
            m.table.set(r, EOS as usize, 50.0);
        }
        let inputs: Vec<&[TokenId]> = vec![&[3]; 20];
        let cfg = GenerationConfig::sampling(15, 6, 9, 3);
        for out in generate_batch(&m, &inputs, 0, &cfg).unwrap() {
            assert_eq!(out.len(), 6);
        }
        m.table.set(3, EOS as usize, -50.0);
        for r in 0..8 {
            m.table.set(r, EOS as usize, -50.0);
        }
        for out in generate_batch(&m, &inputs, 0, &GenerationConfig::sampling(3, 0, 4, 3)).unwrap() {
            assert_eq!(out.len(), 4);
            assert!(!out.contains(&PAD));
        }
    }

    #[test]
    fn top1_sampling_equals_width1_beam() {
        for seed in 0..20 {
            let m = bigram(seed);
            let inputs: Vec<&[TokenId]> = vec![&[3]];
            let g = generate_batch(&m, &inputs, 0, &GenerationConfig::greedy(10)).unwrap();
            let b = generate_batch(&m, &inputs, 0, &GenerationConfig::beam(1, 10)).unwrap();
            assert_eq!(g, b, "seed {seed}");
        }
    }

    #[test]
    fn sampling_is_seeded_per_sequence() {
        let m = bigram(4);
        let inputs: Vec<&[TokenId]> = vec![&[3]; 12];
        let cfg = GenerationConfig::sampling(5, 0, 10, 9);
        let all = generate_batch(&m, &inputs, 0, &cfg).unwrap();
        let tail = generate_batch(&m, &inputs[5..], 5, &cfg).unwrap();
        assert_eq!(&all[5..], &tail[..]);
        assert_eq!(all, generate_batch(&m, &inputs, 0, &cfg).unwrap());
    }

    /// Exhaustive search over all sequences up to `max_len` for the best
    /// length-normalized score.
    fn brute_best(m: &Bigram, max_len: usize, alpha: Real) -> (Real, Vec<usize>) {
        let v = m.table.cols();
        let mut lp = m.table.clone();
        for r in 0..v {
            let row = lp.row_mut(r);
            row[PAD as usize] = Real::NEG_INFINITY;
            log_softmax(row);
        }
        let mut best = (Real::NEG_INFINITY, Vec::new());
        let mut stack = vec![(Vec::<usize>::new(), 0.0, EOS as usize)];
        while let Some((toks, score, prev)) = stack.pop() {
            let end = score + lp.get(prev, EOS as usize);
            let s = end / ((toks.len() + 1) as Real).powf(alpha);
            if s > best.0 {
                best = (s, toks.clone());
            }
            if toks.len() == max_len {
                continue;
            }
            for tok in 0..v {
                if tok == EOS as usize || tok == PAD as usize {
                    continue;
                }
                let mut t = toks.clone();
                t.push(tok);
                if t.len() == max_len {
                    let s = (score + lp.get(prev, tok)) / (max_len as Real).powf(alpha);
                    if s > best.0 {
                        best = (s, t.clone());
                    }
                }
                stack.push((t, score + lp.get(prev, tok), tok));
            }
        }
        best
    }

    #[test]
    fn wide_beam_finds_the_exhaustive_optimum_on_short_outputs() {
        for seed in 0..5 {
            let m = bigram(seed + 10);
            let inputs: Vec<&[TokenId]> = vec![&[3]];
            let cfg = GenerationConfig::beam(64, 3);
            let out = generate_batch(&m, &inputs, 0, &cfg).unwrap();
            let (_, best) = brute_best(&m, 3, 0.7);
            let best: Vec<TokenId> = best.into_iter().map(|t| t as TokenId).collect();
            assert_eq!(out[0], best, "seed {seed}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(GenerationConfig::sampling(0, 0, 5, 0).validate().is_err());
        assert!(GenerationConfig::sampling(3, 6, 5, 0).validate().is_err());
        assert!(GenerationConfig::beam(0, 5).validate().is_err());
    }
}
