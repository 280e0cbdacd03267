//! Planted-rule corpus generator: a desk-scale stand-in for a real
//! headline/title corpus with a known summarization function.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Side, TextCorpus, TextPair};
use crate::error::{Error, Result};

/// A hidden summarization rule. Full texts are built slot by slot: each slot
/// contributes one content word, preceded by a random run of filler words.
/// The summary of a full text is its first `k` content words with the
/// synonym map applied.
///
/// With `coherence > 0`, the word of slot `i + 1` is drawn from a small
/// successor set of the slot-`i` word with that probability, so every content
/// word gets its own context distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRule {
    /// Content words grouped by the slot (sentence position) they occupy.
    pub slots: Vec<Vec<String>>,
    pub fillers: Vec<String>,
    pub k: usize,
    pub synonyms: BTreeMap<String, String>,
    /// Fillers inserted before each slot and at the end: uniform in `0..=max`.
    pub max_fillers_per_gap: usize,
    /// Appended to every full text (e.g. `"."`).
    pub end_token: Option<String>,
    /// `successors[i][j]`: indices into slot `i + 1` favoured after word `j`
    /// of slot `i`. Empty when words are drawn independently.
    pub successors: Vec<Vec<Vec<usize>>>,
    pub coherence: f64,
}

const SYLLABLES: [&str; 20] = [
    "ba", "ko", "ri", "tu", "me", "sa", "lo", "ni", "da", "pe", "gu", "fa", "zo", "hi", "vu",
    "ne", "ta", "mo", "ki", "ru",
];

/// Deterministic pronounceable pseudo-word for an index.
fn pseudo_word(mut i: usize, min_syllables: usize) -> String {
    let mut w = String::new();
    let mut n = 0;
    loop {
        w.push_str(SYLLABLES[i % SYLLABLES.len()]);
        i /= SYLLABLES.len();
        n += 1;
        if i == 0 && n >= min_syllables {
            break;
        }
    }
    w
}

impl SynthRule {
    /// A rule with `n_slots` slots of `words_per_slot` pseudo-words each,
    /// `n_fillers` filler words, and a synonym for `synonym_frac` of the
    /// content words in the first `k` slots.
    pub fn pseudo_words(
        n_slots: usize,
        words_per_slot: usize,
        n_fillers: usize,
        k: usize,
        synonym_frac: f64,
        seed: u64,
    ) -> Self {
        let mut next = 0usize;
        let mut fresh = |syl: usize| {
            let w = pseudo_word(next, syl);
            next += 1;
            w
        };
        let fillers: Vec<String> = (0..n_fillers).map(|_| fresh(1)).collect();
        let slots: Vec<Vec<String>> = (0..n_slots)
            .map(|_| (0..words_per_slot).map(|_| fresh(3)).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut synonyms = BTreeMap::new();
        for slot in slots.iter().take(k) {
            for w in slot {
                if rng.gen_bool(synonym_frac.clamp(0.0, 1.0)) {
                    synonyms.insert(w.clone(), fresh(4));
                }
            }
        }
        SynthRule {
            slots,
            fillers,
            k,
            synonyms,
            max_fillers_per_gap: 2,
            end_token: Some(".".to_string()),
            successors: Vec::new(),
            coherence: 0.0,
        }
    }

    /// Gives each content word `n` favoured successors in the next slot,
    /// followed with probability `coherence`.
    pub fn with_successors(mut self, n: usize, coherence: f64, seed: u64) -> Self {
        if n == 0 || coherence <= 0.0 {
            self.successors.clear();
            self.coherence = 0.0;
            return self;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.successors = self
            .slots
            .windows(2)
            .map(|w| {
                let next: Vec<usize> = (0..w[1].len()).collect();
                (0..w[0].len())
                    .map(|_| next.choose_multiple(&mut rng, n.min(next.len())).copied().collect())
                    .collect()
            })
            .collect();
        self.coherence = coherence.min(1.0);
        self
    }

    pub fn content_words(&self) -> HashSet<&str> {
        self.slots.iter().flatten().map(String::as_str).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.slots.is_empty() || self.slots.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument(
                "synthetic rule needs k >= 1 and non-empty slots".into(),
            ));
        }
        let content = self.content_words();
        if self.fillers.iter().any(|f| content.contains(f.as_str())) {
            return Err(Error::InvalidArgument(
                "filler and content vocabularies overlap".into(),
            ));
        }
        if !self.successors.is_empty() {
            let fits = self.successors.len() + 1 == self.slots.len()
                && self.successors.iter().enumerate().all(|(i, per_word)| {
                    per_word.len() == self.slots[i].len()
                        && per_word
                            .iter()
                            .all(|s| !s.is_empty() && s.iter().all(|&j| j < self.slots[i + 1].len()))
                });
            if !fits {
                return Err(Error::InvalidArgument("successor table does not match the slots".into()));
            }
        }
        if self.max_fillers_per_gap > 0 && self.fillers.is_empty() {
            return Err(Error::InvalidArgument("fillers requested but none given".into()));
        }
        Ok(())
    }

    /// The hidden summary of a full text.
    pub fn apply(&self, fulltext: &[String]) -> Vec<String> {
        let content = self.content_words();
        fulltext
            .iter()
            .filter(|t| content.contains(t.as_str()))
            .take(self.k)
            .map(|t| self.synonyms.get(t).unwrap_or(t).clone())
            .collect()
    }

    pub fn generate_fulltext<R: Rng>(&self, rng: &mut R) -> Vec<String> {
        let mut out = Vec::new();
        let fillers = |out: &mut Vec<String>, rng: &mut R| {
            let n = rng.gen_range(0..=self.max_fillers_per_gap);
            for _ in 0..n {
                out.push(self.fillers.choose(rng).unwrap().clone());
            }
        };
        let mut prev: Option<usize> = None;
        for (i, slot) in self.slots.iter().enumerate() {
            fillers(&mut out, rng);
            let j = match prev {
                Some(p) if !self.successors.is_empty() && rng.gen_bool(self.coherence) => {
                    *self.successors[i - 1][p].choose(rng).unwrap()
                }
                _ => rng.gen_range(0..slot.len()),
            };
            out.push(slot[j].clone());
            prev = Some(j);
        }
        fillers(&mut out, rng);
        if let Some(end) = &self.end_token {
            out.push(end.clone());
        }
        out
    }
}

/// Two independently shuffled corpora plus the hidden pairing.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub fulltext: TextCorpus,
    pub summary: TextCorpus,
    /// `pairing[i]` is the summary position of full text `i`'s hidden summary.
    pub pairing: Vec<usize>,
}

impl SynthCorpus {
    /// The hidden pairs, in full-text order. For evaluation only.
    pub fn aligned_pairs(&self) -> Vec<TextPair> {
        self.pairing
            .iter()
            .enumerate()
            .map(|(i, &j)| TextPair {
                fulltext: self.fulltext.lines[i].clone(),
                summary: self.summary.lines[j].clone(),
            })
            .collect()
    }
}

/// Generates `n` hidden pairs and returns the two sides unaligned.
pub fn synth_corpus(rule: &SynthRule, n: usize, seed: u64) -> Result<SynthCorpus> {
    if n < 1 {
        return Err(Error::InvalidArgument("synthetic corpus size must be >= 1".into()));
    }
    rule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full: Vec<Vec<String>> = (0..n).map(|_| rule.generate_fulltext(&mut rng)).collect();
    let summ: Vec<Vec<String>> = full.iter().map(|f| rule.apply(f)).collect();
    let mut order_f: Vec<usize> = (0..n).collect();
    let mut order_s: Vec<usize> = (0..n).collect();
    order_f.shuffle(&mut rng);
    order_s.shuffle(&mut rng);
    let mut summary_pos = vec![0; n];
    for (pos, &orig) in order_s.iter().enumerate() {
        summary_pos[orig] = pos;
    }
    Ok(SynthCorpus {
        fulltext: TextCorpus {
            name: "synthetic-fulltext".into(),
            side: Side::FullText,
            lines: order_f.iter().map(|&i| full[i].clone()).collect(),
        },
        summary: TextCorpus {
            name: "synthetic-summary".into(),
            side: Side::Summary,
            lines: order_s.iter().map(|&i| summ[i].clone()).collect(),
        },
        pairing: order_f.iter().map(|&i| summary_pos[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn toy_rule() -> SynthRule {
        SynthRule {
            slots: vec![
                vec!["dog".into()],
                vec!["ran".into()],
                vec!["fast".into()],
                vec!["today".into()],
            ],
            fillers: vec!["filler".into()],
            k: 3,
            synonyms: [("ran".to_string(), "runs".to_string())].into_iter().collect(),
            max_fillers_per_gap: 1,
            end_token: None,
            successors: Vec::new(),
            coherence: 0.0,
        }
    }

    #[test]
    fn rule_application_maps_synonyms_and_truncates() {
        let rule = toy_rule();
        assert_eq!(
            rule.apply(&tokenize("dog ran fast today filler")),
            tokenize("dog runs fast")
        );
    }

    #[test]
    fn both_sides_have_n_sequences() {
        let c = synth_corpus(&toy_rule(), 37, 1).unwrap();
        assert_eq!(c.fulltext.len(), 37);
        assert_eq!(c.summary.len(), 37);
    }

    #[test]
    fn hidden_pairing_recovers_the_rule() {
        let rule = toy_rule();
        let c = synth_corpus(&rule, 50, 2).unwrap();
        for p in c.aligned_pairs() {
            assert_eq!(rule.apply(&p.fulltext), p.summary);
        }
    }

    #[test]
    fn sides_are_unaligned_at_almost_every_position() {
        let rule = SynthRule::pseudo_words(4, 30, 10, 3, 0.2, 5);
        let c = synth_corpus(&rule, 1000, 9).unwrap();
        let fixed = c.pairing.iter().enumerate().filter(|(i, j)| *i == **j).count();
        assert!(fixed <= 10, "{fixed} aligned positions");
    }

    #[test]
    fn zero_size_is_rejected() {
        assert!(synth_corpus(&toy_rule(), 0, 0).is_err());
    }

    #[test]
    fn pseudo_words_are_unique() {
        let rule = SynthRule::pseudo_words(5, 40, 30, 3, 0.5, 1);
        let mut all: Vec<&String> = rule.slots.iter().flatten().chain(&rule.fillers).collect();
        all.extend(rule.synonyms.values());
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        rule.validate().unwrap();
    }

    #[test]
    fn successor_structure_is_followed() {
        let rule = SynthRule::pseudo_words(3, 20, 5, 2, 0.0, 3).with_successors(2, 1.0, 4);
        rule.validate().unwrap();
        let c = synth_corpus(&rule, 200, 5).unwrap();
        let content = rule.content_words();
        for line in &c.fulltext.lines {
            let words: Vec<&String> = line.iter().filter(|t| content.contains(t.as_str())).collect();
            for i in 0..2 {
                let a = rule.slots[i].iter().position(|w| w == words[i]).unwrap();
                let b = rule.slots[i + 1].iter().position(|w| w == words[i + 1]).unwrap();
                assert!(rule.successors[i][a].contains(&b));
            }
        }
    }

    #[test]
    fn mismatched_successor_table_is_rejected() {
        let mut rule = SynthRule::pseudo_words(3, 4, 2, 2, 0.0, 1).with_successors(2, 0.5, 1);
        rule.successors[0][1] = vec![9];
        assert!(rule.validate().is_err());
        assert!(SynthRule::pseudo_words(3, 4, 2, 2, 0.0, 1).with_successors(0, 0.5, 1).successors.is_empty());
    }
}
