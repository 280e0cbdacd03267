//! Skipgram word embeddings with negative sampling, and the plain-text
//! vector format (`<count> <dim>` header, then `<word> <v1> ... <vdim>`).

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_utf8_lines};
use crate::nn::{sigmoid, Real, Tensor};

/// Word vectors for every entry of a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub vocab: Vocabulary,
    pub vectors: Tensor,
}

impl EmbeddingMatrix {
    pub fn new(vocab: Vocabulary, vectors: Tensor) -> Result<Self> {
        if vectors.rows() != vocab.len() {
            return Err(Error::Shape(format!(
                "{} vectors for a vocabulary of {}",
                vectors.rows(),
                vocab.len()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("embedding matrix".into()));
        }
        Ok(EmbeddingMatrix { vocab, vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, id: u32) -> &[Real] {
        self.vectors.row(id as usize)
    }

    pub fn vector_of(&self, word: &str) -> Option<&[Real]> {
        self.vocab.id(word).map(|i| self.vector(i))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkipgramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: Real,
    pub seed: u64,
    /// Worker threads. `1` is the deterministic mode; more threads apply
    /// lock-free parallel updates and give up bit-reproducibility.
    pub threads: usize,
}

impl Default for SkipgramConfig {
    fn default() -> Self {
        SkipgramConfig {
            dim: 256,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 1,
            threads: 1,
        }
    }
}

/// Mean negative-sampling loss per (center, context) pair for each epoch.
#[derive(Clone, Debug, Default)]
pub struct SkipgramStats {
    pub epoch_losses: Vec<Real>,
}

/// Loss term `−log σ(±s)` and the SGD coefficient `label − σ(s)` for a
/// score `s = center · output`. The gradient of the term with respect to the
/// center vector is `−coeff · output`, and with respect to the output vector
/// `−coeff · center`.
#[inline]
fn sgns_term(score: Real, positive: bool) -> (Real, Real) {
    let p = sigmoid(score);
    if positive {
        (-(p.max(1e-300)).ln(), 1.0 - p)
    } else {
        (-((1.0 - p).max(1e-300)).ln(), -p)
    }
}

/// Negative-sampling loss of one (center, context, negative) triple and its
/// gradients with respect to the three vectors.
pub fn sgns_triple_loss(
    center: &[Real],
    context: &[Real],
    negative: &[Real],
) -> (Real, Vec<Real>, Vec<Real>, Vec<Real>) {
    let (lp, cp) = sgns_term(dot(center, context), true);
    let (ln, cn) = sgns_term(dot(center, negative), false);
    let d_center = context
        .iter()
        .zip(negative)
        .map(|(o, n)| -cp * o - cn * n)
        .collect();
    let d_context = center.iter().map(|c| -cp * c).collect();
    let d_negative = center.iter().map(|c| -cn * c).collect();
    (lp + ln, d_center, d_context, d_negative)
}

#[inline]
fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains on the union of `corpora`, all encoded against `vocab`.
pub fn train_skipgram_multi(
    corpora: &[&Corpus],
    vocab: &Vocabulary,
    cfg: &SkipgramConfig,
) -> Result<(EmbeddingMatrix, SkipgramStats)> {
    if cfg.dim < 1 || cfg.epochs < 1 {
        return Err(Error::InvalidArgument(
            "skipgram dim and epochs must be >= 1".into(),
        ));
    }
    let sentences: Vec<&[u32]> = corpora
        .iter()
        .flat_map(|c| c.sequences.iter())
        .map(|s| s.ids.as_slice())
        .filter(|s| s.len() > 1)
        .collect();
    if corpora.iter().all(|c| c.is_empty()) {
        return Err(Error::Empty("skipgram training corpus".into()));
    }
    let v = vocab.len();
    let dim = cfg.dim;
    let mut counts = vec![0.0f64; v];
    for s in &sentences {
        for &t in *s {
            counts[t as usize] += 1.0;
        }
    }
    let weights: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
    let negative_dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidArgument(format!("negative sampling table: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 0.5 / dim as Real;
    let mut input = Tensor::uniform(v, dim, bound, &mut rng);
    let mut output = Tensor::zeros(v, dim);

    let total_tokens: usize = sentences.iter().map(|s| s.len()).sum();
    let total_steps = (total_tokens * cfg.epochs).max(1) as Real;
    let mut stats = SkipgramStats::default();
    let threads = cfg.threads.max(1);
    for epoch in 0..cfg.epochs {
        let base = epoch * total_tokens;
        let (loss, pairs) = if threads == 1 {
            let mut ctx = Worker {
                input: input.data_mut().as_mut_ptr(),
                output: output.data_mut().as_mut_ptr(),
                dim,
                cfg,
                dist: &negative_dist,
                total_steps,
            };
            let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((epoch as u64 + 1) << 32));
            // SAFETY: single thread, pointers derived from live exclusive borrows.
            unsafe { ctx.run(&sentences, base, &mut erng) }
        } else {
            hogwild_epoch(&mut input, &mut output, &sentences, cfg, &negative_dist, base, total_steps, epoch, threads)
        };
        let mean = if pairs > 0 { loss / pairs as Real } else { 0.0 };
        info!("skipgram epoch {} loss {:.5} ({} pairs)", epoch + 1, mean, pairs);
        stats.epoch_losses.push(mean);
    }
    let emb = EmbeddingMatrix::new(vocab.clone(), input)?;
    Ok((emb, stats))
}

pub fn train_skipgram(
    corpus: &Corpus,
    vocab: &Vocabulary,
    cfg: &SkipgramConfig,
) -> Result<(EmbeddingMatrix, SkipgramStats)> {
    train_skipgram_multi(&[corpus], vocab, cfg)
}

struct Worker<'a> {
    input: *mut Real,
    output: *mut Real,
    dim: usize,
    cfg: &'a SkipgramConfig,
    dist: &'a WeightedIndex<f64>,
    total_steps: Real,
}

impl Worker<'_> {
    /// Processes `sentences` in order. `step0` is the global token index of
    /// the first token, used for the linear learning-rate decay.
    ///
    /// # Safety
    /// `input` and `output` must point at `|vocab| * dim` live values. With
    /// several workers the writes race by design (lock-free SGD).
    unsafe fn run<R: Rng>(&mut self, sentences: &[&[u32]], step0: usize, rng: &mut R) -> (Real, usize) {
        let dim = self.dim;
        let mut neu = vec![0.0; dim];
        let mut step = step0;
        let mut loss = 0.0;
        let mut pairs = 0usize;
        for sent in sentences {
            for (pos, &center) in sent.iter().enumerate() {
                let progress = step as Real / self.total_steps;
                let lr = self.cfg.lr * (1.0 - progress).max(1e-4);
                step += 1;
                if center == PAD {
                    continue;
                }
                let lo = pos.saturating_sub(self.cfg.window);
                let hi = (pos + self.cfg.window + 1).min(sent.len());
                for (cpos, &context) in sent.iter().enumerate().take(hi).skip(lo) {
                    if cpos == pos {
                        continue;
                    }
                    let vc = std::slice::from_raw_parts_mut(self.input.add(center as usize * dim), dim);
                    neu.iter_mut().for_each(|x| *x = 0.0);
                    for k in 0..=self.cfg.negatives {
                        let (target, positive) = if k == 0 {
                            (context, true)
                        } else {
                            let t = self.dist.sample(rng) as u32;
                            if t == context {
                                continue;
                            }
                            (t, false)
                        };
                        let ut = std::slice::from_raw_parts_mut(self.output.add(target as usize * dim), dim);
                        let (l, coeff) = sgns_term(dot(vc, ut), positive);
                        loss += l;
                        let g = lr * coeff;
                        for i in 0..dim {
                            neu[i] += g * ut[i];
                            ut[i] += g * vc[i];
                        }
                    }
                    for i in 0..dim {
                        vc[i] += neu[i];
                    }
                    pairs += 1;
                }
            }
        }
        (loss, pairs)
    }
}

struct SendPtr(*mut Real);
// SAFETY: shared only for lock-free SGD, where racing writes are accepted.
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

#[allow(clippy::too_many_arguments)]
fn hogwild_epoch(
    input: &mut Tensor,
    output: &mut Tensor,
    sentences: &[&[u32]],
    cfg: &SkipgramConfig,
    dist: &WeightedIndex<f64>,
    base: usize,
    total_steps: Real,
    epoch: usize,
    threads: usize,
) -> (Real, usize) {
    let inp = SendPtr(input.data_mut().as_mut_ptr());
    let out = SendPtr(output.data_mut().as_mut_ptr());
    let chunk = sentences.len().div_ceil(threads).max(1);
    let mut offsets = Vec::new();
    let mut acc = 0;
    for shard in sentences.chunks(chunk) {
        offsets.push(acc);
        acc += shard.iter().map(|s| s.len()).sum::<usize>();
    }
    let results: Vec<(Real, usize)> = std::thread::scope(|scope| {
        let handles: Vec<_> = sentences
            .chunks(chunk)
            .zip(offsets)
            .enumerate()
            .map(|(t, (shard, off))| {
                let (inp, out) = (&inp, &out);
                scope.spawn(move || {
                    let mut w = Worker {
                        input: inp.0,
                        output: out.0,
                        dim: cfg.dim,
                        cfg,
                        dist,
                        total_steps,
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        cfg.seed ^ ((epoch as u64 + 1) << 32) ^ ((t as u64 + 1) << 48),
                    );
                    // SAFETY: pointers outlive the scope; races are tolerated.
                    unsafe { w.run(shard, base + off, &mut rng) }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("skipgram worker panicked")).collect()
    });
    results
        .into_iter()
        .fold((0.0, 0), |(l, p), (l2, p2)| (l + l2, p + p2))
}

/// Outcome of reading a vector file against a vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LoadReport {
    /// File entries whose word is not in the vocabulary.
    pub skipped: usize,
    /// Vocabulary entries absent from the file (left as zero vectors).
    pub missing: usize,
}

pub fn save_embeddings(emb: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let mut s = format!("{} {}\n", emb.vocab.len(), emb.dim());
    for (i, word) in emb.vocab.tokens().iter().enumerate() {
        s.push_str(word);
        for v in emb.vectors.row(i) {
            write!(s, " {v}").unwrap();
        }
        s.push('\n');
    }
    atomic_write(path, s.as_bytes())
}

/// Reads a vector file; rows follow `vocab` order.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary) -> Result<(EmbeddingMatrix, LoadReport)> {
    let lines = read_utf8_lines(path)?;
    let bad = |d: String| Error::format("vector file", format!("{}: {d}", path.display()));
    let header = lines.first().ok_or_else(|| bad("empty file".into()))?;
    let (count, dim) = header
        .split_once(' ')
        .and_then(|(c, d)| Some((c.parse::<usize>().ok()?, d.trim().parse::<usize>().ok()?)))
        .ok_or_else(|| bad(format!("bad header {header:?}")))?;
    let body: Vec<&String> = lines[1..].iter().filter(|l| !l.trim().is_empty()).collect();
    if body.len() != count {
        return Err(bad(format!("header announces {count} vectors, found {}", body.len())));
    }
    let mut vectors = Tensor::zeros(vocab.len(), dim);
    let mut seen = vec![false; vocab.len()];
    let mut report = LoadReport::default();
    for (n, line) in body.iter().enumerate() {
        let mut parts = line.split(' ');
        let word = parts.next().unwrap_or_default();
        let values: Vec<Real> = parts
            .map(|p| p.parse::<Real>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("line {}: bad number", n + 2)))?;
        if values.len() != dim {
            return Err(bad(format!(
                "line {} has {} values, header says {dim}",
                n + 2,
                values.len()
            )));
        }
        match vocab.id(word) {
            Some(id) => {
                vectors.row_mut(id as usize).copy_from_slice(&values);
                seen[id as usize] = true;
            }
            None => report.skipped += 1,
        }
    }
    report.missing = seen.iter().filter(|s| !**s).count();
    if report.skipped > 0 {
        warn!("{}: skipped {} words not in the vocabulary", path.display(), report.skipped);
    }
    Ok((EmbeddingMatrix::new(vocab.clone(), vectors)?, report))
}

/// Cosine similarity of two vectors (0 when either is zero).
pub fn cosine(a: &[Real], b: &[Real]) -> Real {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Side, TextCorpus};
    use std::fs;

    fn toy_vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(words.iter().map(|s| s.to_string()), 100)
    }

    #[test]
    #[cfg(not(feature = "f32"))]
    fn triple_gradient_matches_finite_differences() {
        let c = vec![0.3, -0.2, 0.5, 0.1];
        let o = vec![-0.4, 0.25, 0.6, -0.3];
        let n = vec![0.2, 0.7, -0.1, 0.45];
        let (_, dc, dout, dn) = sgns_triple_loss(&c, &o, &n);
        let eps = 1e-5;
        let fd = |which: usize, i: usize| {
            let mut v = [c.clone(), o.clone(), n.clone()];
            v[which][i] += eps;
            let plus = sgns_triple_loss(&v[0], &v[1], &v[2]).0;
            v[which][i] -= 2.0 * eps;
            let minus = sgns_triple_loss(&v[0], &v[1], &v[2]).0;
            (plus - minus) / (2.0 * eps)
        };
        for (which, analytic) in [(0, &dc), (1, &dout), (2, &dn)] {
            let numeric: Vec<Real> = (0..4).map(|i| fd(which, i)).collect();
            let diff: Real = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<Real>().sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<Real>().sqrt();
            assert!(diff / scale < 1e-4, "vector {which}: {diff} / {scale}");
        }
    }

    fn shared_context_corpus() -> (Corpus, Vocabulary) {
        // "cat" and "dog" occur in exactly the same contexts.
        let mut lines = Vec::new();
        let contexts = [("the", "sat"), ("a", "ran"), ("my", "slept"), ("one", "ate")];
        for i in 0..60 {
            let (l, r) = contexts[i % contexts.len()];
            lines.push(format!("{l} cat {r}"));
            lines.push(format!("{l} dog {r}"));
            lines.push(format!("big tree grows {}", ["tall", "wide", "old"][i % 3]));
        }
        let tc = TextCorpus::from_lines("toy", Side::Summary, &lines);
        let vocab = build_vocab(&[&tc], 100).unwrap();
        (tc.encode(&vocab), vocab)
    }

    #[test]
    fn shared_contexts_give_similar_vectors() {
        let (corpus, vocab) = shared_context_corpus();
        let cfg = SkipgramConfig {
            dim: 16,
            window: 2,
            epochs: 30,
            ..Default::default()
        };
        let (emb, stats) = train_skipgram(&corpus, &vocab, &cfg).unwrap();
        let cat = emb.vector_of("cat").unwrap();
        let sim = cosine(cat, emb.vector_of("dog").unwrap());
        let other = cosine(cat, emb.vector_of("tree").unwrap());
        assert!(sim > other, "cat~dog {sim} vs cat~tree {other}");
        assert!(stats.epoch_losses.last() < stats.epoch_losses.first());
    }

    #[test]
    fn seeded_training_is_bit_reproducible() {
        let (corpus, vocab) = shared_context_corpus();
        let cfg = SkipgramConfig {
            dim: 8,
            epochs: 2,
            ..Default::default()
        };
        let a = train_skipgram(&corpus, &vocab, &cfg).unwrap().0;
        let b = train_skipgram(&corpus, &vocab, &cfg).unwrap().0;
        assert_eq!(a.vectors.data(), b.vectors.data());
    }

    #[test]
    fn parallel_mode_trains() {
        let (corpus, vocab) = shared_context_corpus();
        let cfg = SkipgramConfig {
            dim: 8,
            epochs: 3,
            threads: 3,
            ..Default::default()
        };
        let (emb, stats) = train_skipgram(&corpus, &vocab, &cfg).unwrap();
        assert!(emb.vectors.is_finite());
        assert_eq!(stats.epoch_losses.len(), 3);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (corpus, vocab) = shared_context_corpus();
        let cfg = SkipgramConfig {
            dim: 0,
            ..Default::default()
        };
        assert!(train_skipgram(&corpus, &vocab, &cfg).is_err());
    }

    #[test]
    fn text_format_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        let vocab = Vocabulary::from_tokens(Vec::<String>::new(), 10);
        let vecs = Tensor::from_vec(3, 2, vec![0.1, -0.2, 1.0 / 3.0, 2.5e-7, -9.75, 4.0]).unwrap();
        let emb = EmbeddingMatrix::new(vocab.clone(), vecs).unwrap();
        save_embeddings(&emb, &p).unwrap();
        let (back, report) = load_embeddings(&p, &vocab).unwrap();
        assert!(back.vectors.max_abs_diff(&emb.vectors) < 1e-6);
        assert_eq!(report, LoadReport::default());
    }

    #[test]
    fn header_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        fs::write(&p, "3 2\na 1 2\nb 3 4\nc 5 6\nd 7 8\n").unwrap();
        assert!(load_embeddings(&p, &toy_vocab(&["a", "b", "c", "d"])).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        fs::write(&p, "1 2\na 1 2 3\n").unwrap();
        assert!(load_embeddings(&p, &toy_vocab(&["a"])).is_err());
    }

    #[test]
    fn unknown_words_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        fs::write(&p, "2 2\na 1 2\nzzz 3 4\n").unwrap();
        let (emb, report) = load_embeddings(&p, &toy_vocab(&["a"])).unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(emb.vector_of("a").unwrap(), &[1.0, 2.0]);
    }
}
