//! Attention encoder-decoder used at every back-translation step: a
//! bidirectional GRU encoder, a GRU decoder with dot-product attention and an
//! output layer tied to the output embeddings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Lexicon, Side, TokenId, EOS, PAD, UNK};
use crate::decode::{generate_batch, GenerationConfig, StepModel};
use crate::error::{Error, Result};
use crate::nn::{Adam, Checkpoint, Graph, GruCell, Linear, ParamId, ParamStore, Real, Tensor, Var};
use crate::train::{apply_update, at_step, bucketed_batches, TrainConfig, TrainReport};

/// An (input, output) pair of shared token ids.
pub type Pair = (Vec<TokenId>, Vec<TokenId>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Summarizer.
    FullToSummary,
    /// Expander.
    SummaryToFull,
}

impl Direction {
    pub fn input_side(self) -> Side {
        match self {
            Direction::FullToSummary => Side::FullText,
            Direction::SummaryToFull => Side::Summary,
        }
    }

    pub fn output_side(self) -> Side {
        self.input_side().other()
    }

    pub fn reverse(self) -> Direction {
        match self {
            Direction::FullToSummary => Direction::SummaryToFull,
            Direction::SummaryToFull => Direction::FullToSummary,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::FullToSummary => "F2S",
            Direction::SummaryToFull => "S2F",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F2S" => Ok(Direction::FullToSummary),
            "S2F" => Ok(Direction::SummaryToFull),
            other => Err(Error::format("direction", format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqConfig {
    pub hidden: usize,
    pub freeze_embeddings: bool,
    pub train: TrainConfig,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Seq2SeqConfig {
            hidden: 256,
            freeze_embeddings: false,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub cfg: Seq2SeqConfig,
    pub direction: Direction,
    pub store: ParamStore,
    pub src_lex: Lexicon,
    pub tgt_lex: Lexicon,
    src_embed: ParamId,
    tgt_embed: ParamId,
    enc_fwd: GruCell,
    enc_bwd: GruCell,
    key: Linear,
    bridge: Linear,
    dec: GruCell,
    combine: Linear,
    out_bias: ParamId,
}

struct Encoded {
    keys: Var,
    values: Var,
    lengths: Vec<usize>,
    init: Var,
}

fn lexicon_rows(embeddings: &Tensor, lex: &Lexicon) -> Result<Tensor> {
    if embeddings.rows() != lex.shared_len() {
        return Err(Error::Shape(format!(
            "{} embedding rows for a shared vocabulary of {}",
            embeddings.rows(),
            lex.shared_len()
        )));
    }
    let rows: Vec<usize> = lex.shared_ids().iter().map(|&i| i as usize).collect();
    Ok(embeddings.select_rows(&rows))
}

impl Seq2Seq {
    /// Embedding tables start from the rows of the shared pre-trained matrix.
    pub fn new(
        cfg: Seq2SeqConfig,
        direction: Direction,
        src_lex: Lexicon,
        tgt_lex: Lexicon,
        embeddings: &Tensor,
        seed: u64,
    ) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::InvalidArgument("seq2seq hidden size must be >= 1".into()));
        }
        let e = embeddings.cols();
        let h = cfg.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let src_embed = store.add("s2s.src_embed", lexicon_rows(embeddings, &src_lex)?);
        let tgt_embed = store.add("s2s.tgt_embed", lexicon_rows(embeddings, &tgt_lex)?);
        if cfg.freeze_embeddings {
            store.set_trainable(src_embed, false);
            store.set_trainable(tgt_embed, false);
        }
        let enc_fwd = GruCell::new(&mut store, "s2s.enc_fwd", e, h, &mut rng);
        let enc_bwd = GruCell::new(&mut store, "s2s.enc_bwd", e, h, &mut rng);
        let key = Linear::new(&mut store, "s2s.key", 2 * h, h, false, &mut rng);
        let bridge = Linear::new(&mut store, "s2s.bridge", 2 * h, h, true, &mut rng);
        let dec = GruCell::new(&mut store, "s2s.dec", e, h, &mut rng);
        let combine = Linear::new(&mut store, "s2s.combine", 3 * h, e, true, &mut rng);
        let out_bias = store.add("s2s.out_bias", Tensor::zeros(1, tgt_lex.len()));
        Ok(Seq2Seq {
            cfg,
            direction,
            store,
            src_lex,
            tgt_lex,
            src_embed,
            tgt_embed,
            enc_fwd,
            enc_bwd,
            key,
            bridge,
            dec,
            combine,
            out_bias,
        })
    }

    fn encode(&self, g: &mut Graph, inputs: &[&[TokenId]]) -> Result<Encoded> {
        if inputs.is_empty() {
            return Err(Error::Empty("seq2seq batch".into()));
        }
        let b = inputs.len();
        let h = self.cfg.hidden;
        // Every source ends with EOS, so no input is empty.
        let srcs: Vec<Vec<usize>> = inputs
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&t| self.src_lex.local_or_unk(t))
                    .chain(std::iter::once(EOS as usize))
                    .collect()
            })
            .collect();
        let lengths: Vec<usize> = srcs.iter().map(Vec::len).collect();
        let t_len = *lengths.iter().max().expect("non-empty batch");
        let table = g.param(self.src_embed);
        let mut xs = Vec::with_capacity(t_len);
        let mut masks: Vec<Option<Vec<Real>>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let ids: Vec<usize> = srcs.iter().map(|s| s.get(t).copied().unwrap_or(PAD as usize)).collect();
            xs.push(g.gather(table, &ids)?);
            let mask: Vec<Real> = lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
            masks.push(if mask.iter().all(|&m| m == 1.0) { None } else { Some(mask) });
        }
        let zero = g.input(Tensor::zeros(b, h));
        let mut fwd = Vec::with_capacity(t_len);
        let mut state = zero;
        for t in 0..t_len {
            state = self.enc_fwd.forward(g, xs[t], state, masks[t].as_deref())?;
            fwd.push(state);
        }
        let mut bwd = vec![zero; t_len];
        state = zero;
        for t in (0..t_len).rev() {
            state = self.enc_bwd.forward(g, xs[t], state, masks[t].as_deref())?;
            bwd[t] = state;
        }
        let mut states = Vec::with_capacity(t_len);
        for t in 0..t_len {
            states.push(g.concat_cols(&[fwd[t], bwd[t]])?);
        }
        let values = g.interleave_rows(&states)?;
        let keys = self.key.forward(g, values)?;
        let last = g.concat_cols(&[fwd[t_len - 1], bwd[0]])?;
        let init = self.bridge.forward(g, last)?;
        let init = g.tanh(init)?;
        Ok(Encoded {
            keys,
            values,
            lengths,
            init,
        })
    }

    /// Decoder step: new state and `B x |tgt|` logits.
    fn decode_step(
        &self,
        g: &mut Graph,
        prev: &[usize],
        state: Var,
        keys: Var,
        values: Var,
        lengths: &[usize],
    ) -> Result<(Var, Var)> {
        let table = g.param(self.tgt_embed);
        let x = g.gather(table, prev)?;
        let h = self.dec.forward(g, x, state, None)?;
        let (ctx, _) = g.attention(h, keys, values, lengths)?;
        let hc = g.concat_cols(&[h, ctx])?;
        let o = self.combine.forward(g, hc)?;
        let o = g.tanh(o)?;
        let logits = g.matmul_bt(o, table)?;
        let bias = g.param(self.out_bias);
        Ok((h, g.add_row(logits, bias)?))
    }

    /// Teacher-forced logits for `targets` followed by EOS, in row layout
    /// `b * T + t`, and the gold local ids with their validity.
    fn forced(
        &self,
        g: &mut Graph,
        inputs: &[&[TokenId]],
        targets: &[&[TokenId]],
    ) -> Result<(Var, Vec<usize>, Vec<bool>)> {
        let enc = self.encode(g, inputs)?;
        let steps = targets.iter().map(|t| t.len()).max().unwrap_or(0) + 1;
        let table = g.param(self.tgt_embed);
        let mut state = enc.init;
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let prev: Vec<usize> = targets
                .iter()
                .map(|s| {
                    if t == 0 || t > s.len() {
                        EOS as usize
                    } else {
                        self.tgt_lex.local_or_unk(s[t - 1])
                    }
                })
                .collect();
            let x = g.gather(table, &prev)?;
            state = self.dec.forward(g, x, state, None)?;
            let (ctx, _) = g.attention(state, enc.keys, enc.values, &enc.lengths)?;
            let hc = g.concat_cols(&[state, ctx])?;
            let o = self.combine.forward(g, hc)?;
            outs.push(g.tanh(o)?);
        }
        let o = g.interleave_rows(&outs)?;
        let logits = g.matmul_bt(o, table)?;
        let bias = g.param(self.out_bias);
        let logits = g.add_row(logits, bias)?;
        let b = targets.len();
        let mut gold = vec![PAD as usize; b * steps];
        let mut valid = vec![false; b * steps];
        for (i, s) in targets.iter().enumerate() {
            for t in 0..=s.len() {
                gold[i * steps + t] = if t == s.len() {
                    EOS as usize
                } else {
                    self.tgt_lex.local_or_unk(s[t])
                };
                valid[i * steps + t] = true;
            }
        }
        Ok((logits, gold, valid))
    }

    /// Token-averaged cross-entropy with teacher forcing.
    pub fn batch_loss(&self, g: &mut Graph, inputs: &[&[TokenId]], targets: &[&[TokenId]]) -> Result<Var> {
        if inputs.len() != targets.len() {
            return Err(Error::Shape("inputs and targets differ in count".into()));
        }
        let (logits, gold, valid) = self.forced(g, inputs, targets)?;
        let total = valid.iter().filter(|&&v| v).count() as Real;
        let weights: Vec<Real> = valid.iter().map(|&v| if v { 1.0 / total } else { 0.0 }).collect();
        g.cross_entropy(logits, &gold, &weights)
    }

    /// Mean per-token loss and next-token accuracy under teacher forcing.
    pub fn evaluate_forced(&self, pairs: &[Pair]) -> Result<(Real, Real)> {
        if pairs.is_empty() {
            return Err(Error::Empty("evaluation pairs".into()));
        }
        let (mut loss, mut correct, mut tokens) = (0.0, 0usize, 0usize);
        for chunk in pairs.chunks(self.cfg.train.batch.max(1)) {
            let ins: Vec<&[TokenId]> = chunk.iter().map(|p| p.0.as_slice()).collect();
            let tgts: Vec<&[TokenId]> = chunk.iter().map(|p| p.1.as_slice()).collect();
            let mut g = Graph::inference(&self.store);
            let (logits, gold, valid) = self.forced(&mut g, &ins, &tgts)?;
            let lv = g.value(logits);
            for (r, (&y, &ok)) in gold.iter().zip(&valid).enumerate() {
                if !ok {
                    continue;
                }
                let row = lv.row(r);
                let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<Real>().ln();
                loss += lse - row[y];
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, Real::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a })
                    .0;
                correct += usize::from(best == y);
                tokens += 1;
            }
        }
        Ok((loss / tokens as Real, correct as Real / tokens as Real))
    }

    /// Trains on `(input, output)` pairs. With a validation set, stops after
    /// `patience` epochs without improvement and keeps the best epoch.
    pub fn train(&mut self, pairs: &[Pair], valid: Option<&[Pair]>) -> Result<TrainReport> {
        let tc = self.cfg.train.clone();
        tc.validate()?;
        if pairs.is_empty() {
            return Err(Error::Empty("seq2seq training pairs".into()));
        }
        let mut report = TrainReport::default();
        let mut adam = Adam::new(&self.store, tc.lr);
        let lengths: Vec<usize> = pairs.iter().map(|p| p.0.len().max(p.1.len())).collect();
        let mut best: Option<(Real, Vec<Tensor>)> = None;
        let mut stale = 0;
        for epoch in 0..tc.epochs {
            let start = std::time::Instant::now();
            let (mut sum, mut batches) = (0.0, 0);
            for batch in bucketed_batches(&lengths, tc.batch, tc.seed, epoch) {
                let ins: Vec<&[TokenId]> = batch.iter().map(|&i| pairs[i].0.as_slice()).collect();
                let tgts: Vec<&[TokenId]> = batch.iter().map(|&i| pairs[i].1.as_slice()).collect();
                let step = report.steps;
                let (grads, loss) = {
                    let mut g = Graph::new(&self.store).strict(true);
                    let loss = at_step(self.batch_loss(&mut g, &ins, &tgts), step)?;
                    (g.backward(loss)?, g.value(loss).item())
                };
                apply_update(&mut self.store, &mut adam, &grads, tc.clip, step)?;
                sum += loss;
                batches += 1;
                report.steps += 1;
            }
            report.train_losses.push(sum / batches as Real);
            let mut line = format!("seq2seq {} epoch {} loss {:.4}", self.direction, epoch + 1, sum / batches as Real);
            match valid {
                Some(v) if !v.is_empty() => {
                    let (vl, acc) = self.evaluate_forced(v)?;
                    report.valid_losses.push(vl);
                    line.push_str(&format!(" valid {vl:.4} acc {acc:.3}"));
                    if best.as_ref().map_or(true, |(b, _)| vl < *b) {
                        best = Some((vl, self.store.iter().map(|(_, p)| p.value.clone()).collect()));
                        report.best_epoch = epoch + 1;
                        stale = 0;
                    } else {
                        stale += 1;
                    }
                }
                _ => report.best_epoch = epoch + 1,
            }
            info!("{line} ({:.1}s)", start.elapsed().as_secs_f64());
            if stale >= tc.patience.max(1) {
                info!("seq2seq early stop after epoch {}", epoch + 1);
                break;
            }
        }
        if let Some((_, values)) = best {
            let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
            for (id, v) in ids.into_iter().zip(values) {
                self.store.get_mut(id).value = v;
            }
        }
        Ok(report)
    }

    /// Decodes every input; sequence `i` uses the seed of global index
    /// `first_index + i`, so results do not depend on chunking.
    pub fn generate(&self, inputs: &[&[TokenId]], first_index: usize, cfg: &GenerationConfig) -> Result<Vec<Vec<TokenId>>> {
        cfg.validate()?;
        let mut out = Vec::with_capacity(inputs.len());
        for (c, chunk) in inputs.chunks(GENERATION_CHUNK).enumerate() {
            out.extend(generate_batch(self, chunk, first_index + c * GENERATION_CHUNK, cfg)?);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new()
            .with_meta("kind", "seq2seq")
            .with_meta("direction", self.direction)
            .with_meta("hidden", self.cfg.hidden)
            .with_meta("freeze_embeddings", self.cfg.freeze_embeddings)
            .with_meta("shared_len", self.src_lex.shared_len());
        ck.add_store(&self.store);
        ck.push("src_lexicon", crate::init::ids_tensor(self.src_lex.shared_ids()));
        ck.push("tgt_lexicon", crate::init::ids_tensor(self.tgt_lex.shared_ids()));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "seq2seq" {
            return Err(Error::format("checkpoint", "not a seq2seq checkpoint"));
        }
        let cfg = Seq2SeqConfig {
            hidden: ck.meta_parse("hidden")?,
            freeze_embeddings: ck.meta_parse("freeze_embeddings")?,
            train: TrainConfig::default(),
        };
        let shared_len: usize = ck.meta_parse("shared_len")?;
        let src_lex = crate::init::lexicon_named(ck, "src_lexicon", shared_len)?;
        let tgt_lex = crate::init::lexicon_named(ck, "tgt_lexicon", shared_len)?;
        let e = ck
            .tensor("s2s.src_embed")
            .ok_or_else(|| Error::format("checkpoint", "missing s2s.src_embed"))?
            .cols();
        let mut m = Seq2Seq::new(
            cfg,
            ck.meta_parse("direction")?,
            src_lex,
            tgt_lex,
            &Tensor::zeros(shared_len, e),
            0,
        )?;
        ck.restore_into(&mut m.store)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

const GENERATION_CHUNK: usize = 64;

pub struct DecoderState {
    h: Tensor,
    keys: Tensor,
    values: Tensor,
    lengths: Vec<usize>,
    t_len: usize,
}

fn select_blocks(t: &Tensor, rows: &[usize], block: usize) -> Tensor {
    let idx: Vec<usize> = rows.iter().flat_map(|&r| r * block..(r + 1) * block).collect();
    t.select_rows(&idx)
}

impl StepModel for Seq2Seq {
    type State = DecoderState;

    fn lexicon(&self) -> &Lexicon {
        &self.tgt_lex
    }

    fn start(&self, inputs: &[&[TokenId]]) -> Result<DecoderState> {
        let mut g = Graph::inference(&self.store);
        let enc = self.encode(&mut g, inputs)?;
        let t_len = g.value(enc.values).rows() / inputs.len();
        Ok(DecoderState {
            h: g.value(enc.init).clone(),
            keys: g.value(enc.keys).clone(),
            values: g.value(enc.values).clone(),
            lengths: enc.lengths,
            t_len,
        })
    }

    fn select(&self, s: &DecoderState, rows: &[usize]) -> DecoderState {
        DecoderState {
            h: s.h.select_rows(rows),
            keys: select_blocks(&s.keys, rows, s.t_len),
            values: select_blocks(&s.values, rows, s.t_len),
            lengths: rows.iter().map(|&r| s.lengths[r]).collect(),
            t_len: s.t_len,
        }
    }

    fn step(&self, s: &DecoderState, prev: &[usize]) -> Result<(Tensor, DecoderState)> {
        let mut g = Graph::inference(&self.store);
        let h = g.input(s.h.clone());
        let keys = g.input(s.keys.clone());
        let values = g.input(s.values.clone());
        let (h2, logits) = self.decode_step(&mut g, prev, h, keys, values, &s.lengths)?;
        Ok((
            g.value(logits).clone(),
            DecoderState {
                h: g.value(h2).clone(),
                keys: s.keys.clone(),
                values: s.values.clone(),
                lengths: s.lengths.clone(),
                t_len: s.t_len,
            },
        ))
    }
}

/// Collapses runs of UNK to one, then cuts after the first `stop` token
/// (which is kept).
pub fn postprocess(seq: &[TokenId], stop: Option<TokenId>) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = Vec::with_capacity(seq.len());
    for &t in seq {
        if t == UNK && out.last() == Some(&UNK) {
            continue;
        }
        out.push(t);
    }
    if let Some(stop) = stop {
        if let Some(p) = out.iter().position(|&t| t == stop) {
            out.truncate(p + 1);
        }
    }
    out
}
