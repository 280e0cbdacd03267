use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encoder::BowEncoder;
use super::stats::MomentStats;
use crate::corpus::{Corpus, Lexicon, TokenId, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{Adam, BatchStats, Checkpoint, Graph, Linear, ParamStore, Real, Tensor, Var};
use crate::train::{apply_update, at_step, epoch_batches, TrainConfig, TrainReport};

/// Score added to words absent from the input before the sigmoid.
pub const ABSENT_SCORE: Real = -1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentConfig {
    pub hidden: usize,
    pub eta: Real,
    pub max_len: usize,
    pub train: TrainConfig,
}

impl Default for MomentConfig {
    fn default() -> Self {
        MomentConfig {
            hidden: 256,
            eta: 0.3,
            max_len: 12,
            train: TrainConfig::default(),
        }
    }
}

/// Per-word probability of appearing in the summary of a full text, trained
/// so its corpus-level average matches the summary presence frequencies.
#[derive(Clone, Debug)]
pub struct MomentModel {
    pub cfg: MomentConfig,
    pub store: ParamStore,
    pub encoder: BowEncoder,
    head: Linear,
    pub lexicon: Lexicon,
}

impl MomentModel {
    pub fn new(cfg: MomentConfig, embeddings: &Tensor, lexicon: Lexicon, seed: u64) -> Result<Self> {
        if cfg.hidden == 0 || cfg.max_len == 0 {
            return Err(Error::InvalidArgument("moment model needs hidden and N >= 1".into()));
        }
        if embeddings.rows() != lexicon.shared_len() {
            return Err(Error::Shape("embedding rows must match the shared vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = BowEncoder::new(&mut store, "mu.enc", embeddings, cfg.hidden, &mut rng);
        let head = Linear::new(&mut store, "mu.head", cfg.hidden, lexicon.len(), true, &mut rng);
        Ok(MomentModel {
            cfg,
            store,
            encoder,
            head,
            lexicon,
        })
    }

    fn presence_mask(&self, seqs: &[&[TokenId]]) -> Tensor {
        let mut mask = Tensor::filled(seqs.len(), self.lexicon.len(), ABSENT_SCORE);
        for (r, s) in seqs.iter().enumerate() {
            let row = mask.row_mut(r);
            for &t in s.iter() {
                if let Some(l) = self.lexicon.local_of(t) {
                    if l != EOS as usize && l != PAD as usize {
                        row[l] = 0.0;
                    }
                }
            }
        }
        mask
    }

    /// `B x |lexicon|` probabilities `f(s, v)`.
    pub fn probs(&self, g: &mut Graph, seqs: &[&[TokenId]], train: bool) -> Result<(Var, Option<BatchStats>)> {
        let enc = self.encoder.forward(g, seqs, None, train)?;
        let logits = self.head.forward(g, enc.out)?;
        let masked = g.add_const(logits, &self.presence_mask(seqs))?;
        Ok((g.sigmoid(masked)?, enc.stats))
    }

    /// Targets `clamp(μ̂_v^F / μ_v^F · μ_v^S, 0, 1)` and weights (0 where
    /// `μ_v^F = 0`) for one batch, in lexicon order.
    pub fn batch_targets(&self, seqs: &[&[TokenId]], stats: &MomentStats) -> (Vec<Real>, Vec<Real>) {
        let l = self.lexicon.len();
        let mut present = vec![0usize; l];
        let mut seen = vec![usize::MAX; l];
        for (i, s) in seqs.iter().enumerate() {
            for &t in s.iter() {
                if let Some(v) = self.lexicon.local_of(t) {
                    if seen[v] != i {
                        seen[v] = i;
                        present[v] += 1;
                    }
                }
            }
        }
        let b = seqs.len() as f64;
        let mut targets = vec![0.0; l];
        let mut weights = vec![0.0; l];
        for v in 0..l {
            let id = self.lexicon.shared_of(v);
            let mu_f = stats.mu_f.get(id as usize).copied().unwrap_or(0.0);
            if id == EOS || id == PAD || mu_f == 0.0 {
                continue;
            }
            let mu_hat = present[v] as f64 / b;
            targets[v] = (mu_hat / mu_f * stats.mu_s[id as usize]).clamp(0.0, 1.0) as Real;
            weights[v] = 1.0;
        }
        (targets, weights)
    }

    /// `Σ_v BCE(mean_batch f(s, v), target_v)`.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        seqs: &[&[TokenId]],
        stats: &MomentStats,
        train: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (p, bn) = self.probs(g, seqs, train)?;
        let mean = g.col_mean(p)?;
        let (targets, weights) = self.batch_targets(seqs, stats);
        Ok((g.binary_cross_entropy(mean, &targets, &weights)?, bn))
    }

    pub fn train(&mut self, full: &Corpus, stats: &MomentStats) -> Result<TrainReport> {
        let tc = self.cfg.train.clone();
        tc.validate()?;
        let mut report = TrainReport::default();
        if tc.epochs == 0 {
            return Ok(report);
        }
        if full.is_empty() {
            return Err(Error::Empty("moment model training corpus".into()));
        }
        let mut adam = Adam::new(&self.store, tc.lr);
        for epoch in 0..tc.epochs {
            let start = std::time::Instant::now();
            let mut sum = 0.0;
            let mut batches = 0;
            for batch in epoch_batches(full.len(), tc.batch, tc.seed, epoch) {
                let seqs: Vec<&[TokenId]> = batch.iter().map(|&i| full.sequences[i].ids.as_slice()).collect();
                let step = report.steps;
                let (grads, loss, bn) = {
                    let mut g = Graph::new(&self.store).strict(true);
                    let (loss, bn) = at_step(self.batch_loss(&mut g, &seqs, stats, true), step)?;
                    (g.backward(loss)?, g.value(loss).item(), bn)
                };
                apply_update(&mut self.store, &mut adam, &grads, tc.clip, step)?;
                if let Some(s) = bn {
                    self.encoder.bn.update(&s, batch.len());
                }
                sum += loss;
                batches += 1;
                report.steps += 1;
            }
            report.train_losses.push(sum / batches as Real);
            report.best_epoch = epoch + 1;
            info!(
                "moments epoch {} loss {:.5} ({:.1}s)",
                epoch + 1,
                report.train_losses[epoch],
                start.elapsed().as_secs_f64()
            );
        }
        Ok(report)
    }

    /// Inference-mode probabilities for a batch, one row per input.
    pub fn predict(&self, seqs: &[&[TokenId]]) -> Result<Tensor> {
        let mut out = Tensor::zeros(0, self.lexicon.len());
        let mut rows = Vec::new();
        for chunk in seqs.chunks(256) {
            let mut g = Graph::inference(&self.store);
            let (p, _) = self.probs(&mut g, chunk, false)?;
            rows.extend_from_slice(g.value(p).data());
        }
        if !rows.is_empty() {
            out = Tensor::from_vec(seqs.len(), self.lexicon.len(), rows)?;
        }
        Ok(out)
    }

    /// Corpus average of `f(s, v)` per lexicon entry.
    pub fn marginals(&self, corpus: &Corpus) -> Result<Vec<Real>> {
        let seqs: Vec<&[TokenId]> = corpus.sequences.iter().map(|s| s.ids.as_slice()).collect();
        let p = self.predict(&seqs)?;
        let mut m = vec![0.0; self.lexicon.len()];
        for r in 0..p.rows() {
            for (a, v) in m.iter_mut().zip(p.row(r)) {
                *a += v;
            }
        }
        let n = p.rows().max(1) as Real;
        m.iter_mut().for_each(|v| *v /= n);
        Ok(m)
    }

    /// Input words (in order, each type once) with `f(s, v) > eta`, at most
    /// `max_len` of them.
    pub fn extract(&self, seqs: &[&[TokenId]]) -> Result<Vec<Vec<TokenId>>> {
        let p = self.predict(seqs)?;
        Ok(seqs
            .iter()
            .enumerate()
            .map(|(r, s)| {
                let row = p.row(r);
                let mut out: Vec<TokenId> = Vec::new();
                for &t in s.iter() {
                    if out.len() == self.cfg.max_len {
                        break;
                    }
                    if out.contains(&t) {
                        continue;
                    }
                    if let Some(l) = self.lexicon.local_of(t) {
                        if row[l] > self.cfg.eta {
                            out.push(t);
                        }
                    }
                }
                out
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new()
            .with_meta("kind", "moments")
            .with_meta("hidden", self.cfg.hidden)
            .with_meta("eta", self.cfg.eta)
            .with_meta("max_len", self.cfg.max_len);
        ck.add_store(&self.store);
        self.encoder.save_running(&mut ck);
        ck.push("lexicon", super::ids_tensor(self.lexicon.shared_ids()));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "moments" {
            return Err(Error::format("checkpoint", "not a moment-model checkpoint"));
        }
        let cfg = MomentConfig {
            hidden: ck.meta_parse("hidden")?,
            eta: ck.meta_parse("eta")?,
            max_len: ck.meta_parse("max_len")?,
            train: TrainConfig::default(),
        };
        let embed = ck
            .tensor("mu.enc.embed")
            .ok_or_else(|| Error::format("checkpoint", "missing mu.enc.embed"))?;
        let lexicon = super::lexicon_from(ck, embed.rows())?;
        let mut m = MomentModel::new(cfg, embed, lexicon, 0)?;
        ck.restore_into(&mut m.store)?;
        m.encoder.load_running(ck)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)?;
        super::write_sidecar(
            path,
            &[
                ("hidden", self.cfg.hidden.to_string()),
                ("eta", self.cfg.eta.to_string()),
                ("max_len", self.cfg.max_len.to_string()),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Side, TokenSequence};
    use crate::init::compute_moments;

    fn tiny() -> (MomentModel, MomentStats) {
        let lex = Lexicon::from_shared_ids(vec![0, 1, 2, 3, 4, 5], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = Tensor::uniform(8, 4, 1.0, &mut rng);
        let cfg = MomentConfig {
            hidden: 6,
            ..Default::default()
        };
        let m = MomentModel::new(cfg, &emb, lex, 1).unwrap();
        let f = Corpus::new(
            "f",
            Side::FullText,
            vec![TokenSequence::new(vec![3, 6, 4], Side::FullText), TokenSequence::new(vec![3, 7], Side::FullText)],
        )
        .unwrap();
        let s = Corpus::new("s", Side::Summary, vec![TokenSequence::new(vec![3, 5], Side::Summary)]).unwrap();
        (m, compute_moments(&f, &s, 8).unwrap())
    }

    #[test]
    fn absent_words_are_masked() {
        let (m, _) = tiny();
        let p = m.predict(&[&[3, 6]]).unwrap();
        assert!(p.get(0, 4) < 1e-6);
        assert!(p.get(0, 5) < 1e-6);
        assert!(p.get(0, 3) > 1e-6);
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn batch_targets_scale_and_clamp() {
        let (m, stats) = tiny();
        // The whole corpus as one batch: the target is exactly μ^S.
        let (t, w) = m.batch_targets(&[&[3, 6, 4], &[3, 7]], &stats);
        assert_eq!(t[3], stats.mu_s[3] as Real);
        assert_eq!(w[5], 0.0);
        // μ̂^F / μ^F = 2 for word 4, μ^S = 0 → 0; word 3 ratio 1.
        let (t, _) = m.batch_targets(&[&[4]], &stats);
        assert_eq!(t[4], 0.0);
        let mut s2 = stats.clone();
        s2.mu_f[4] = 1.0 / 3.0;
        s2.mu_s[4] = 0.5;
        let (t, _) = m.batch_targets(&[&[4]], &s2);
        assert_eq!(t[4], 1.0);
    }

    #[test]
    fn nothing_above_threshold_extracts_nothing() {
        let (mut m, _) = tiny();
        m.cfg.eta = 1.0;
        assert_eq!(m.extract(&[&[3, 4, 5]]).unwrap(), vec![Vec::<TokenId>::new()]);
        m.cfg.eta = 0.0;
        let out = m.extract(&[&[3, 4, 3, 6]]).unwrap();
        assert_eq!(out[0], vec![3, 4]);
    }

    #[cfg(not(feature = "f32"))]
    #[test]
    fn loss_gradients_match_finite_differences() {
        let (mut m, stats) = tiny();
        let seqs: Vec<&[TokenId]> = vec![&[3, 6, 4], &[3, 7], &[4, 5, 3]];
        let model = m.clone();
        let r = crate::nn::gradcheck::check_gradients(&mut m.store, None, 1e-5, |g| {
            Ok(model.batch_loss(g, &seqs, &stats, true)?.0)
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-5, "{r:?}");
    }

    #[test]
    fn training_matches_summary_frequencies() {
        let (mut m, _) = tiny();
        let f: Vec<TokenSequence> = (0..40)
            .map(|i| TokenSequence::new(if i % 2 == 0 { vec![3, 4, 6] } else { vec![3, 5, 7] }, Side::FullText))
            .collect();
        let full = Corpus::new("f", Side::FullText, f).unwrap();
        let s: Vec<TokenSequence> = (0..10)
            .map(|i| TokenSequence::new(if i < 8 { vec![3] } else { vec![4] }, Side::Summary))
            .collect();
        let summ = Corpus::new("s", Side::Summary, s).unwrap();
        let stats = compute_moments(&full, &summ, 8).unwrap();
        m.cfg.train = TrainConfig {
            epochs: 150,
            batch: 40,
            lr: 0.02,
            ..Default::default()
        };
        let report = m.train(&full, &stats).unwrap();
        assert!(report.train_losses.last() < report.train_losses.first());
        let marg = m.marginals(&full).unwrap();
        for v in [3usize, 4, 5] {
            assert!((marg[v] - stats.mu_s[v] as Real).abs() < 0.05, "{v}: {} vs {}", marg[v], stats.mu_s[v]);
        }
        let out = m.extract(&[&[3, 4, 6], &[5, 7]]).unwrap();
        // f(s, 4) ≈ μ^S/μ^F = 0.4 on inputs containing 4.
        assert_eq!(out, vec![vec![3, 4], vec![]]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mu.ckpt");
        m.save(&path).unwrap();
        let back = MomentModel::load(&path).unwrap();
        assert_eq!(back.marginals(&full).unwrap(), marg);
    }
}
