use rand::Rng;

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, BatchStats, Checkpoint, Graph, Linear, ParamId, ParamStore, Real, Tensor, Var};

/// Mean of frozen pre-trained word vectors, then a linear map and batch
/// normalization.
#[derive(Clone, Debug)]
pub struct BowEncoder {
    pub name: String,
    pub embed: ParamId,
    pub proj: Linear,
    pub bn: BatchNorm,
}

pub struct Encoded {
    pub out: Var,
    pub stats: Option<BatchStats>,
    /// Inputs whose weights were all zero and fell back to a plain mean.
    pub fallbacks: usize,
}

impl BowEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        embeddings: &Tensor,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let embed = store.add_frozen(format!("{name}.embed"), embeddings.clone());
        let proj = Linear::new(store, &format!("{name}.proj"), embeddings.cols(), hidden, true, rng);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), hidden);
        BowEncoder {
            name: name.to_string(),
            embed,
            proj,
            bn,
        }
    }

    pub fn embed_dim(&self, store: &ParamStore) -> usize {
        store.value(self.embed).cols()
    }

    pub fn hidden(&self) -> usize {
        self.proj.out_dim
    }

    /// Encodes a batch. `weights`, indexed by token id, turns the mean into a
    /// weighted mean.
    pub fn forward(
        &self,
        g: &mut Graph,
        seqs: &[&[TokenId]],
        weights: Option<&[Real]>,
        train: bool,
    ) -> Result<Encoded> {
        if seqs.is_empty() {
            return Err(Error::Empty("encoder batch".into()));
        }
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut start = 0;
        for s in seqs {
            segments.push((start, s.len()));
            start += s.len();
        }
        let table = g.param(self.embed);
        let x = g.gather(table, &ids)?;
        let mut fallbacks = 0;
        let pooled = match weights {
            None => g.segment_mean(x, &segments, None)?,
            Some(w) => {
                let mut tok_w: Vec<Real> = ids.iter().map(|&i| w.get(i).copied().unwrap_or(0.0)).collect();
                for &(s, l) in &segments {
                    if l > 0 && tok_w[s..s + l].iter().all(|&v| v == 0.0) {
                        tok_w[s..s + l].iter_mut().for_each(|v| *v = 1.0);
                        fallbacks += 1;
                    }
                }
                g.segment_mean(x, &segments, Some(&tok_w))?
            }
        };
        let h = self.proj.forward(g, pooled)?;
        let (out, stats) = self.bn.forward(g, h, train)?;
        Ok(Encoded {
            out,
            stats,
            fallbacks,
        })
    }

    pub fn save_running(&self, ck: &mut Checkpoint) {
        let d = self.bn.running_mean.len();
        ck.push(
            format!("{}.bn.running_mean", self.name),
            Tensor::from_vec(1, d, self.bn.running_mean.clone()).expect("1 x d"),
        );
        ck.push(
            format!("{}.bn.running_var", self.name),
            Tensor::from_vec(1, d, self.bn.running_var.clone()).expect("1 x d"),
        );
    }

    pub fn load_running(&mut self, ck: &Checkpoint) -> Result<()> {
        for (suffix, slot) in [
            ("running_mean", &mut self.bn.running_mean),
            ("running_var", &mut self.bn.running_var),
        ] {
            let name = format!("{}.bn.{suffix}", self.name);
            let t = ck
                .tensor(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing {name}")))?;
            if t.len() != slot.len() {
                return Err(Error::format("checkpoint", format!("{name} has the wrong size")));
            }
            slot.copy_from_slice(t.data());
        }
        Ok(())
    }
}
