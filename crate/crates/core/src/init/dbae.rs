use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encoder::BowEncoder;
use crate::corpus::{Corpus, Lexicon, TokenId, EOS};
use crate::decode::{generate_batch, sequence_seed, GenerationConfig, StepModel};
use crate::error::{Error, Result};
use crate::nn::{Adam, BatchStats, Checkpoint, Graph, GruStack, Linear, ParamId, ParamStore, Real, Tensor, Var};
use crate::train::{apply_update, at_step, epoch_batches, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq)]
pub struct DbaeConfig {
    pub hidden: usize,
    pub layers: usize,
    pub noise_p: Real,
    /// Added to the decoder score of every word type present in the input.
    pub lambda: Real,
    pub beam: usize,
    pub max_len: usize,
    /// Weight of summary words never seen in full texts.
    pub weight_cap: Real,
    pub train: TrainConfig,
}

impl Default for DbaeConfig {
    fn default() -> Self {
        DbaeConfig {
            hidden: 256,
            layers: 2,
            noise_p: 0.2,
            lambda: 2.0,
            beam: 5,
            max_len: 15,
            weight_cap: 10.0,
            train: TrainConfig::default(),
        }
    }
}

/// Per token: drop it with probability `p/2`; independently, insert a word
/// drawn uniformly from `insert_from` after it with probability `p`.
pub fn dbae_noise(seq: &[TokenId], p: Real, insert_from: &[TokenId], seed: u64) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = p.clamp(0.0, 1.0) as f64;
    let mut out = Vec::with_capacity(seq.len() * 2);
    for &t in seq {
        let drop = rng.gen_bool(p / 2.0);
        let insert = rng.gen_bool(p);
        if !drop {
            out.push(t);
        }
        if insert && !insert_from.is_empty() {
            out.push(insert_from[rng.gen_range(0..insert_from.len())]);
        }
    }
    out
}

/// Denoising bag-of-words autoencoder over summaries.
#[derive(Clone, Debug)]
pub struct DbaeModel {
    pub cfg: DbaeConfig,
    pub store: ParamStore,
    pub encoder: BowEncoder,
    init: Vec<ParamId>,
    bridge: Vec<Linear>,
    decoder: GruStack,
    out: Linear,
    pub lexicon: Lexicon,
    /// Input weights per shared id for summarization mode.
    pub weights: Option<Vec<Real>>,
}

impl DbaeModel {
    /// `embeddings` holds one frozen row per shared id; `lexicon` is the
    /// summary vocabulary the decoder writes into.
    pub fn new(cfg: DbaeConfig, embeddings: &Tensor, lexicon: Lexicon, seed: u64) -> Result<Self> {
        if cfg.hidden == 0 || cfg.layers == 0 {
            return Err(Error::InvalidArgument("DBAE needs hidden and layers >= 1".into()));
        }
        if embeddings.rows() != lexicon.shared_len() {
            return Err(Error::Shape("embedding rows must match the shared vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let encoder = BowEncoder::new(&mut store, "dbae.enc", embeddings, h, &mut rng);
        let mut init = Vec::new();
        let mut bridge = Vec::new();
        for l in 0..cfg.layers {
            init.push(store.add(format!("dbae.init.{l}"), Tensor::zeros(1, h)));
            bridge.push(Linear::new(&mut store, &format!("dbae.bridge.{l}"), 2 * h, h, true, &mut rng));
        }
        let decoder = GruStack::new(&mut store, "dbae.dec", embeddings.cols(), h, cfg.layers, &mut rng);
        let out = Linear::new(&mut store, "dbae.out", h, lexicon.len(), true, &mut rng);
        Ok(DbaeModel {
            cfg,
            store,
            encoder,
            init,
            bridge,
            decoder,
            out,
            lexicon,
            weights: None,
        })
    }

    fn initial_states(&self, g: &mut Graph, enc: Var, batch: usize) -> Result<Vec<Var>> {
        let mut states = Vec::with_capacity(self.cfg.layers);
        for (init, bridge) in self.init.iter().zip(&self.bridge) {
            let p = g.param(*init);
            let rows = g.gather(p, &vec![0; batch])?;
            let cat = g.concat_cols(&[enc, rows])?;
            let lin = bridge.forward(g, cat)?;
            states.push(g.tanh(lin)?);
        }
        Ok(states)
    }

    /// Token-averaged cross-entropy of `targets` given `inputs`.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        inputs: &[&[TokenId]],
        targets: &[&[TokenId]],
        train: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let b = inputs.len();
        let enc = self.encoder.forward(g, inputs, None, train)?;
        let mut states = self.initial_states(g, enc.out, b)?;
        let steps = targets.iter().map(|t| t.len()).max().unwrap_or(0) + 1;
        let table = g.param(self.encoder.embed);
        let mut tops = Vec::with_capacity(steps);
        for t in 0..steps {
            let prev: Vec<usize> = targets
                .iter()
                .map(|s| if t == 0 || t > s.len() { EOS as usize } else { s[t - 1] as usize })
                .collect();
            let x = g.gather(table, &prev)?;
            states = self.decoder.step(g, x, &states, None)?;
            tops.push(*states.last().expect("at least one layer"));
        }
        let hs = g.interleave_rows(&tops)?;
        let logits = self.out.forward(g, hs)?;
        let total: usize = targets.iter().map(|t| t.len() + 1).sum();
        let mut gold = vec![0usize; b * steps];
        let mut weights = vec![0.0; b * steps];
        for (i, s) in targets.iter().enumerate() {
            for t in 0..=s.len() {
                gold[i * steps + t] = if t == s.len() {
                    EOS as usize
                } else {
                    self.lexicon.local_or_unk(s[t])
                };
                weights[i * steps + t] = 1.0 / total as Real;
            }
        }
        let loss = g.cross_entropy(logits, &gold, &weights)?;
        Ok((loss, enc.stats))
    }

    fn insertable(&self) -> Vec<TokenId> {
        self.lexicon.shared_ids()[3..].to_vec()
    }

    fn noised(&self, corpus: &Corpus, idx: &[usize], seed: u64) -> Vec<Vec<TokenId>> {
        let pool = self.insertable();
        idx.iter()
            .map(|&i| {
                dbae_noise(
                    &corpus.sequences[i].ids,
                    self.cfg.noise_p,
                    &pool,
                    sequence_seed(seed, i as u64),
                )
            })
            .collect()
    }

    /// Mean per-token loss over `corpus` with fixed noise, in inference mode.
    pub fn eval_loss(&self, corpus: &Corpus) -> Result<Real> {
        let mut total = 0.0;
        let mut tokens = 0usize;
        let idx: Vec<usize> = (0..corpus.len()).collect();
        for chunk in idx.chunks(self.cfg.train.batch.max(1)) {
            let inputs = self.noised(corpus, chunk, self.cfg.train.seed ^ 0x5eed);
            let ins: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
            let tgts: Vec<&[TokenId]> = chunk.iter().map(|&i| corpus.sequences[i].ids.as_slice()).collect();
            let n: usize = tgts.iter().map(|t| t.len() + 1).sum();
            let mut g = Graph::inference(&self.store);
            let (loss, _) = self.batch_loss(&mut g, &ins, &tgts, false)?;
            total += g.value(loss).item() * n as Real;
            tokens += n;
        }
        Ok(total / tokens.max(1) as Real)
    }

    /// Trains to reconstruct clean summaries from their noised copies.
    pub fn train(&mut self, summ: &Corpus, valid: Option<&Corpus>) -> Result<TrainReport> {
        let tc = self.cfg.train.clone();
        tc.validate()?;
        let mut report = TrainReport::default();
        if tc.epochs == 0 {
            return Ok(report);
        }
        if summ.is_empty() {
            return Err(Error::Empty("DBAE training corpus".into()));
        }
        let mut adam = Adam::new(&self.store, tc.lr);
        for epoch in 0..tc.epochs {
            let start = std::time::Instant::now();
            let mut sum = 0.0;
            let mut batches = 0;
            for batch in epoch_batches(summ.len(), tc.batch, tc.seed, epoch) {
                let inputs = self.noised(summ, &batch, sequence_seed(tc.seed, epoch as u64 + 1));
                let ins: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
                let tgts: Vec<&[TokenId]> = batch.iter().map(|&i| summ.sequences[i].ids.as_slice()).collect();
                let step = report.steps;
                let (grads, loss, stats) = {
                    let mut g = Graph::new(&self.store).strict(true);
                    let (loss, stats) = at_step(self.batch_loss(&mut g, &ins, &tgts, true), step)?;
                    (g.backward(loss)?, g.value(loss).item(), stats)
                };
                apply_update(&mut self.store, &mut adam, &grads, tc.clip, step)?;
                if let Some(s) = stats {
                    self.encoder.bn.update(&s, batch.len());
                }
                sum += loss;
                batches += 1;
                report.steps += 1;
            }
            report.train_losses.push(sum / batches as Real);
            if let Some(v) = valid {
                report.valid_losses.push(self.eval_loss(v)?);
            }
            report.best_epoch = epoch + 1;
            info!(
                "dbae epoch {} loss {:.4}{} ({:.1}s)",
                epoch + 1,
                report.train_losses[epoch],
                report
                    .valid_losses
                    .last()
                    .map(|v| format!(" valid {v:.4}"))
                    .unwrap_or_default(),
                start.elapsed().as_secs_f64()
            );
        }
        Ok(report)
    }

    fn decode(&self, seqs: &[&[TokenId]], weighted: bool, lambda: Real) -> Result<Vec<Vec<TokenId>>> {
        let dec = DbaeDecoder {
            model: self,
            weighted,
            lambda,
        };
        let cfg = GenerationConfig::beam(self.cfg.beam, self.cfg.max_len);
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            out.extend(generate_batch(&dec, chunk, 0, &cfg)?);
        }
        Ok(out)
    }

    /// Plain autoencoding: unweighted pooling, no input bias.
    pub fn reconstruct(&self, seqs: &[&[TokenId]]) -> Result<Vec<Vec<TokenId>>> {
        self.decode(seqs, false, 0.0)
    }

    /// Summarization mode: weighted pooling with the stored weights and the
    /// input-word bias. Returns the outputs and how many inputs fell back to
    /// unweighted pooling.
    pub fn summarize(&self, seqs: &[&[TokenId]]) -> Result<(Vec<Vec<TokenId>>, usize)> {
        let w = self
            .weights
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("DBAE summary weights are not set".into()))?;
        let fallbacks = seqs
            .iter()
            .filter(|s| !s.is_empty() && s.iter().all(|&t| w.get(t as usize).copied().unwrap_or(0.0) == 0.0))
            .count();
        Ok((self.decode(seqs, true, self.cfg.lambda)?, fallbacks))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.cfg;
        let mut ck = Checkpoint::new()
            .with_meta("kind", "dbae")
            .with_meta("hidden", c.hidden)
            .with_meta("layers", c.layers)
            .with_meta("noise_p", c.noise_p)
            .with_meta("lambda", c.lambda)
            .with_meta("beam", c.beam)
            .with_meta("max_len", c.max_len)
            .with_meta("weight_cap", c.weight_cap);
        ck.add_store(&self.store);
        self.encoder.save_running(&mut ck);
        ck.push("lexicon", super::ids_tensor(self.lexicon.shared_ids()));
        if let Some(w) = &self.weights {
            ck.push("weights", Tensor::row_vector(w.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "dbae" {
            return Err(Error::format("checkpoint", "not a DBAE checkpoint"));
        }
        let cfg = DbaeConfig {
            hidden: ck.meta_parse("hidden")?,
            layers: ck.meta_parse("layers")?,
            noise_p: ck.meta_parse("noise_p")?,
            lambda: ck.meta_parse("lambda")?,
            beam: ck.meta_parse("beam")?,
            max_len: ck.meta_parse("max_len")?,
            weight_cap: ck.meta_parse("weight_cap")?,
            train: TrainConfig::default(),
        };
        let embed = ck
            .tensor("dbae.enc.embed")
            .ok_or_else(|| Error::format("checkpoint", "missing dbae.enc.embed"))?;
        let lexicon = super::lexicon_from(ck, embed.rows())?;
        let mut m = DbaeModel::new(cfg, embed, lexicon, 0)?;
        ck.restore_into(&mut m.store)?;
        m.encoder.load_running(ck)?;
        m.weights = ck.tensor("weights").map(|t| t.data().to_vec());
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)?;
        let c = &self.cfg;
        super::write_sidecar(
            path,
            &[
                ("hidden", c.hidden.to_string()),
                ("layers", c.layers.to_string()),
                ("noise_p", c.noise_p.to_string()),
                ("lambda", c.lambda.to_string()),
                ("beam", c.beam.to_string()),
                ("max_len", c.max_len.to_string()),
                ("weight_cap", c.weight_cap.to_string()),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

struct DbaeDecoder<'a> {
    model: &'a DbaeModel,
    weighted: bool,
    lambda: Real,
}

pub struct DbaeState {
    layers: Vec<Tensor>,
    bias: Vec<Vec<usize>>,
}

impl StepModel for DbaeDecoder<'_> {
    type State = DbaeState;

    fn lexicon(&self) -> &Lexicon {
        &self.model.lexicon
    }

    fn start(&self, inputs: &[&[TokenId]]) -> Result<DbaeState> {
        let m = self.model;
        let mut g = Graph::inference(&m.store);
        let weights = if self.weighted { m.weights.as_deref() } else { None };
        let enc = m.encoder.forward(&mut g, inputs, weights, false)?;
        let states = m.initial_states(&mut g, enc.out, inputs.len())?;
        let bias = inputs
            .iter()
            .map(|s| {
                let mut ids: Vec<usize> = s
                    .iter()
                    .filter_map(|&t| m.lexicon.local_of(t))
                    .filter(|&l| l > 2)
                    .collect();
                ids.sort_unstable();
                ids.dedup();
                ids
            })
            .collect();
        Ok(DbaeState {
            layers: states.iter().map(|&v| g.value(v).clone()).collect(),
            bias,
        })
    }

    fn select(&self, state: &DbaeState, rows: &[usize]) -> DbaeState {
        DbaeState {
            layers: state.layers.iter().map(|t| t.select_rows(rows)).collect(),
            bias: rows.iter().map(|&r| state.bias[r].clone()).collect(),
        }
    }

    fn step(&self, state: &DbaeState, prev: &[usize]) -> Result<(Tensor, DbaeState)> {
        let m = self.model;
        let mut g = Graph::inference(&m.store);
        let states: Vec<Var> = state.layers.iter().map(|t| g.input(t.clone())).collect();
        let table = g.param(m.encoder.embed);
        let prev_shared: Vec<usize> = prev.iter().map(|&p| m.lexicon.shared_of(p) as usize).collect();
        let x = g.gather(table, &prev_shared)?;
        let next = m.decoder.step(&mut g, x, &states, None)?;
        let logits = m.out.forward(&mut g, *next.last().expect("layers"))?;
        let mut scores = g.value(logits).clone();
        for (r, ids) in state.bias.iter().enumerate() {
            let row = scores.row_mut(r);
            for &l in ids {
                row[l] += self.lambda;
            }
        }
        Ok((
            scores,
            DbaeState {
                layers: next.iter().map(|&v| g.value(v).clone()).collect(),
                bias: state.bias.clone(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Side, TokenSequence};

    #[test]
    fn zero_noise_is_identity() {
        let s = vec![5, 6, 7, 8];
        assert_eq!(dbae_noise(&s, 0.0, &[9, 10], 3), s);
    }

    #[test]
    fn fixed_seed_gives_identical_corruption() {
        let s: Vec<TokenId> = (3..20).collect();
        assert_eq!(dbae_noise(&s, 0.5, &[30, 31], 7), dbae_noise(&s, 0.5, &[30, 31], 7));
    }

    #[test]
    fn full_noise_expected_length_matches_monte_carlo() {
        let s: Vec<TokenId> = (3..13).collect();
        let trials = 10_000;
        let total: usize = (0..trials)
            .map(|i| dbae_noise(&s, 1.0, &[40, 41, 42], sequence_seed(11, i)).len())
            .sum();
        let mean = total as f64 / trials as f64;
        let expected = 1.5 * s.len() as f64;
        assert!((mean - expected).abs() / expected < 0.02, "{mean} vs {expected}");
    }

    fn tiny(hidden: usize) -> DbaeModel {
        use rand::SeedableRng;
        let lex = Lexicon::from_shared_ids((0..8).collect(), 10);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let emb = Tensor::uniform(10, 4, 1.0, &mut rng);
        let cfg = DbaeConfig {
            hidden,
            beam: 3,
            max_len: 6,
            train: TrainConfig {
                epochs: 40,
                batch: 4,
                lr: 0.02,
                ..Default::default()
            },
            ..Default::default()
        };
        DbaeModel::new(cfg, &emb, lex, 2).unwrap()
    }

    #[cfg(not(feature = "f32"))]
    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut m = tiny(3);
        let ins: Vec<&[TokenId]> = vec![&[3, 4, 9], &[5], &[6, 7]];
        let tgts: Vec<&[TokenId]> = vec![&[3, 4], &[5, 9], &[7]];
        let model = m.clone();
        let r = crate::nn::gradcheck::check_gradients(&mut m.store, None, 1e-5, |g| {
            Ok(model.batch_loss(g, &ins, &tgts, true)?.0)
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-5, "{r:?}");
    }

    #[test]
    fn learns_to_reconstruct_and_round_trips() {
        let mut m = tiny(16);
        m.cfg.noise_p = 0.0;
        let seqs: Vec<TokenSequence> = [vec![3, 4, 5], vec![6, 7], vec![5, 3], vec![7, 6, 4]]
            .into_iter()
            .map(|v| TokenSequence::new(v, Side::Summary))
            .collect();
        let corpus = Corpus::new("s", Side::Summary, seqs).unwrap();
        let before = m.eval_loss(&corpus).unwrap();
        let report = m.train(&corpus, Some(&corpus)).unwrap();
        assert_eq!(report.train_losses.len(), 40);
        let after = m.eval_loss(&corpus).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
        let ins: Vec<&[TokenId]> = corpus.sequences.iter().map(|s| s.ids.as_slice()).collect();
        let out = m.reconstruct(&ins).unwrap();
        let hits = out.iter().zip(&ins).filter(|(o, i)| o.as_slice() == **i).count();
        assert!(hits >= 3, "{out:?}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dbae.ckpt");
        m.save(&path).unwrap();
        assert!(crate::init::sidecar_path(&path).exists());
        let back = DbaeModel::load(&path).unwrap();
        assert_eq!(back.reconstruct(&ins).unwrap(), out);
    }

    #[test]
    fn input_bias_adds_exactly_lambda() {
        let m = tiny(4);
        let input: &[TokenId] = &[3, 5, 5, 9];
        let scores = |lambda: Real| {
            let dec = DbaeDecoder {
                model: &m,
                weighted: false,
                lambda,
            };
            let mut state = dec.start(&[input]).unwrap();
            let mut all = Vec::new();
            for prev in [EOS as usize, 4, 6] {
                let (s, next) = dec.step(&state, &[prev]).unwrap();
                all.push(s);
                state = next;
            }
            all
        };
        for (b, u) in scores(2.0).iter().zip(scores(0.0)) {
            for l in 0..b.cols() {
                let expected = if l == 3 || l == 5 { 2.0 } else { 0.0 };
                let diff = b.get(0, l) - u.get(0, l);
                assert!((diff - expected).abs() < 1e-5, "local {l}: {diff}");
            }
        }
    }

    #[test]
    fn summarize_needs_weights_and_counts_fallbacks() {
        let mut m = tiny(4);
        assert!(m.summarize(&[&[3]]).is_err());
        let mut w = vec![0.0; 10];
        w[3] = 1.0;
        m.weights = Some(w);
        let (out, fallbacks) = m.summarize(&[&[3, 4], &[5, 6]]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(fallbacks, 1);
    }
}
