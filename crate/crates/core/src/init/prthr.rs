use std::path::Path;

use crate::alignment::{AlignedSpace, DEFAULT_ETA};
use crate::corpus::{TokenId, Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_utf8_lines};
use crate::nn::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrThrConfig {
    pub eta: Real,
    pub max_len: usize,
}

impl Default for PrThrConfig {
    fn default() -> Self {
        PrThrConfig {
            eta: DEFAULT_ETA,
            max_len: 12,
        }
    }
}

impl PrThrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 2.0) || self.max_len < 1 {
            return Err(Error::InvalidArgument(format!(
                "Pr-Thr needs eta in (0, 2] and N >= 1, got {} and {}",
                self.eta, self.max_len
            )));
        }
        Ok(())
    }
}

/// Word-by-word projection of full texts into the summary vocabulary.
/// The replacement table is computed once over the shared vocabulary.
#[derive(Clone, Debug)]
pub struct PrThr {
    pub cfg: PrThrConfig,
    /// `table[shared id]`: shared id of the replacement, `None` to skip.
    table: Vec<Option<TokenId>>,
    /// Neighbor and distance per shared id, for inspection.
    pub neighbors: Vec<(TokenId, Real)>,
}

impl PrThr {
    pub fn new(space: &AlignedSpace, shared: &Vocabulary, cfg: PrThrConfig) -> Result<Self> {
        cfg.validate()?;
        let src_hits = space.nearest_all();
        let mut table = Vec::with_capacity(shared.len());
        let mut neighbors = Vec::with_capacity(shared.len());
        for word in shared.tokens() {
            let src = space.source.vocab.id(word).unwrap_or(UNK);
            let hit = src_hits[src as usize];
            let target_word = space.target.vocab.token(hit.word);
            let shared_id = shared.lookup(target_word);
            neighbors.push((shared_id, hit.distance));
            let special = Vocabulary::is_special(hit.word) && hit.word != UNK;
            table.push((!special && hit.distance < cfg.eta).then_some(shared_id));
        }
        Ok(PrThr {
            cfg,
            table,
            neighbors,
        })
    }

    pub fn replacement(&self, word: TokenId) -> Option<TokenId> {
        self.table.get(word as usize).copied().flatten()
    }

    /// Replaces each input word by its aligned neighbor, skipping words
    /// without one, and keeps the first `max_len` results.
    pub fn summarize(&self, seq: &[TokenId]) -> Vec<TokenId> {
        seq.iter()
            .filter_map(|&w| self.replacement(w))
            .take(self.cfg.max_len)
            .collect()
    }

    /// Writes the replacement table (`word neighbor distance kept`) and the
    /// hyperparameter sidecar.
    pub fn save(&self, path: &Path, shared: &Vocabulary) -> Result<()> {
        let mut s = String::new();
        for (i, (n, d)) in self.neighbors.iter().enumerate() {
            s.push_str(&format!(
                "{}\t{}\t{d}\t{}\n",
                shared.token(i as TokenId),
                shared.token(*n),
                u8::from(self.table[i].is_some())
            ));
        }
        atomic_write(path, s.as_bytes())?;
        super::write_sidecar(
            path,
            &[("eta", self.cfg.eta.to_string()), ("max_len", self.cfg.max_len.to_string())],
        )
    }

    pub fn load(path: &Path, shared: &Vocabulary) -> Result<Self> {
        let params = super::read_sidecar(path)?;
        let cfg = PrThrConfig {
            eta: super::sidecar_value(&params, "eta")?,
            max_len: super::sidecar_value(&params, "max_len")?,
        };
        cfg.validate()?;
        let bad = |i: usize, what: &str| Error::format("Pr-Thr table", format!("line {}: {what}", i + 1));
        let mut table = vec![None; shared.len()];
        let mut neighbors = vec![(UNK, 2.0); shared.len()];
        for (i, line) in read_utf8_lines(path)?.iter().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(i, "expected 4 columns"));
            }
            let w = shared.id(cols[0]).ok_or_else(|| bad(i, "word not in the shared vocabulary"))? as usize;
            let n = shared.lookup(cols[1]);
            let d: Real = cols[2].parse().map_err(|_| bad(i, "bad distance"))?;
            neighbors[w] = (n, d);
            table[w] = match cols[3] {
                "1" => Some(n),
                "0" => None,
                _ => return Err(bad(i, "kept flag must be 0 or 1")),
            };
        }
        Ok(PrThr {
            cfg,
            table,
            neighbors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::AlignedSpace;
    use crate::embeddings::EmbeddingMatrix;
    use crate::nn::Tensor;

    /// Source words s1..s3 point at target words t1..t3 along the axes; s4 is
    /// orthogonal to every target word.
    fn setup() -> (PrThr, Vocabulary) {
        let src_vocab = Vocabulary::from_tokens(["s1", "s2", "s3", "s4"].map(String::from), 10);
        let tgt_vocab = Vocabulary::from_tokens(["t1", "t2", "t3"].map(String::from), 10);
        let shared = Vocabulary::from_tokens(
            ["s1", "s2", "s3", "s4", "t1", "t2", "t3"].map(String::from),
            20,
        );
        let e = |rows: &[[Real; 5]]| Tensor::from_vec(rows.len(), 5, rows.iter().flatten().cloned().collect()).unwrap();
        let src = e(&[
            [0.0, 0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 0.0, -1.0],
            [0.0, 0.0, 0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, 0.0],
        ]);
        let tgt = e(&[
            [0.0, 0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 0.0, -1.0],
            [0.0, 0.0, 0.0, 0.0, 1.0],
            [0.9, 0.1, 0.0, 0.0, 0.0],
            [0.0, 0.95, 0.05, 0.0, 0.0],
            [0.0, 0.0, 0.95, 0.05, 0.0],
        ]);
        let space = AlignedSpace::new(
            Tensor::identity(5),
            EmbeddingMatrix::new(src_vocab, src).unwrap(),
            EmbeddingMatrix::new(tgt_vocab, tgt).unwrap(),
        )
        .unwrap();
        (PrThr::new(&space, &shared, PrThrConfig::default()).unwrap(), shared)
    }

    #[test]
    fn maps_to_known_neighbors_in_input_order() {
        let (p, v) = setup();
        let input = v.encode(&["s3", "s4", "s1", "s2"].map(String::from));
        let out: Vec<&str> = p.summarize(&input).iter().map(|&i| v.token(i)).collect();
        assert_eq!(out, ["t3", "t1", "t2"]);
    }

    #[test]
    fn save_load_round_trip() {
        let (p, v) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prthr.tsv");
        p.save(&path, &v).unwrap();
        let back = PrThr::load(&path, &v).unwrap();
        assert_eq!(back.table, p.table);
        assert_eq!(back.neighbors, p.neighbors);
        assert_eq!(back.cfg, p.cfg);
    }

    #[test]
    fn caps_output_length() {
        let (mut p, v) = setup();
        p.cfg.max_len = 12;
        let input: Vec<TokenId> = (0..20).map(|i| v.lookup(["s1", "s2", "s3"][i % 3])).collect();
        let out = p.summarize(&input);
        assert_eq!(out.len(), 12);
        let expected: Vec<TokenId> = input.iter().take(12).map(|&w| p.replacement(w).unwrap()).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn everything_beyond_threshold_gives_empty_output() {
        let (mut p, v) = setup();
        p = PrThr {
            table: vec![None; p.table.len()],
            ..p
        };
        assert!(p.summarize(&v.encode(&["s1".into()])).is_empty());
    }

    #[test]
    fn eos_neighbor_is_skipped() {
        let src_vocab = Vocabulary::from_tokens(["a"].map(String::from), 10);
        let tgt_vocab = Vocabulary::from_tokens(["b"].map(String::from), 10);
        let shared = Vocabulary::from_tokens(["a", "b"].map(String::from), 10);
        let src = Tensor::from_vec(4, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        // target EOS (row 1) coincides with the source word "a"
        let tgt = Tensor::from_vec(4, 2, vec![0.0, -1.0, 1.0, 0.0, 0.0, -1.0, 0.0, 1.0]).unwrap();
        let space = AlignedSpace::new(
            Tensor::identity(2),
            EmbeddingMatrix::new(src_vocab, src).unwrap(),
            EmbeddingMatrix::new(tgt_vocab, tgt).unwrap(),
        )
        .unwrap();
        let p = PrThr::new(&space, &shared, PrThrConfig::default()).unwrap();
        assert_eq!(p.replacement(shared.lookup("a")), None);
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(PrThrConfig { eta: 0.0, max_len: 3 }.validate().is_err());
        assert!(PrThrConfig { eta: 0.5, max_len: 0 }.validate().is_err());
    }
}
