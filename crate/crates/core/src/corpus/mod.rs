//! Corpus ingestion, vocabularies, unaligned splitting and the synthetic
//! corpus generator.

mod lexicon;
mod split;
mod synth;
mod vocab;

use std::fmt;
use std::path::Path;

pub use lexicon::Lexicon;
pub use split::{split_unaligned, split_unaligned_count, SplitManifest, SplitRatios};
pub use synth::{synth_corpus, SynthCorpus, SynthRule};
pub use vocab::{TokenId, Vocabulary, EOS, EOS_STR, PAD, PAD_STR, UNK, UNK_STR};

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_utf8_lines};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    FullText,
    Summary,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::FullText => Side::Summary,
            Side::Summary => Side::FullText,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::FullText => "fulltext",
            Side::Summary => "summary",
        })
    }
}

/// Lowercases and splits on whitespace. The literal `UNK` placeholder used by
/// upstream preprocessing survives in either case.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace()
        .map(|t| {
            if t.eq_ignore_ascii_case(UNK_STR) {
                UNK_STR.to_string()
            } else {
                t.to_lowercase()
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub side: Side,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, side: Side) -> Self {
        TokenSequence { ids, side }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks the id range and that no `PAD` appears inside the sequence.
    pub fn validate(&self, vocab_len: usize) -> Result<()> {
        if let Some(&bad) = self.ids.iter().find(|&&i| i as usize >= vocab_len) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside a vocabulary of {vocab_len}"
            )));
        }
        if self.ids.contains(&PAD) {
            return Err(Error::InvalidArgument("PAD inside a sequence".into()));
        }
        Ok(())
    }
}

/// Tokenized text before vocabulary encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCorpus {
    pub name: String,
    pub side: Side,
    pub lines: Vec<Vec<String>>,
}

impl TextCorpus {
    pub fn from_lines<S: AsRef<str>>(name: &str, side: Side, lines: &[S]) -> Self {
        TextCorpus {
            name: name.to_string(),
            side,
            lines: lines
                .iter()
                .map(|l| tokenize(l.as_ref()))
                .filter(|t| !t.is_empty())
                .collect(),
        }
    }

    /// One whitespace-tokenized sequence per line; blank lines are dropped.
    pub fn read(path: &Path, side: Side) -> Result<Self> {
        let lines = read_utf8_lines(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self::from_lines(&name, side, &lines))
    }

    pub fn encode(&self, vocab: &Vocabulary) -> Corpus {
        Corpus {
            name: self.name.clone(),
            side: self.side,
            sequences: self
                .lines
                .iter()
                .map(|l| TokenSequence::new(vocab.encode(l), self.side))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub side: Side,
    pub sequences: Vec<TokenSequence>,
}

impl Corpus {
    pub fn new(name: &str, side: Side, sequences: Vec<TokenSequence>) -> Result<Self> {
        if let Some(s) = sequences.iter().find(|s| s.side != side) {
            return Err(Error::InvalidArgument(format!(
                "{} sequence in a {side} corpus",
                s.side
            )));
        }
        Ok(Corpus {
            name: name.to_string(),
            side,
            sequences,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TokenSequence> {
        self.sequences.iter()
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            name: self.name.clone(),
            side: self.side,
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
        }
    }

    /// Writes one detokenized sequence per line.
    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        let mut s = String::new();
        for seq in &self.sequences {
            s.push_str(&vocab.decode(&seq.ids));
            s.push('\n');
        }
        atomic_write(path, s.as_bytes())
    }
}

/// Reads a corpus file and maps it through `vocab` (out-of-vocabulary tokens become `UNK`).
pub fn load_corpus(path: &Path, side: Side, vocab: &Vocabulary) -> Result<Corpus> {
    Ok(TextCorpus::read(path, side)?.encode(vocab))
}

/// Builds a vocabulary over one or more tokenized corpora.
pub fn build_vocab(corpora: &[&TextCorpus], cap: usize) -> Result<Vocabulary> {
    if corpora.iter().all(|c| c.is_empty()) {
        return Err(Error::Empty("vocabulary source corpus".into()));
    }
    Vocabulary::build(corpora.iter().flat_map(|c| c.lines.iter()), cap)
}

/// A tokenized `fulltext<TAB>summary` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPair {
    pub fulltext: Vec<String>,
    pub summary: Vec<String>,
}

/// Reads a paired TSV file. Lines without exactly one tab are rejected.
pub fn read_pairs(path: &Path) -> Result<Vec<TextPair>> {
    read_utf8_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.split_once('\t') {
            Some((f, s)) if !s.contains('\t') => Ok(TextPair {
                fulltext: tokenize(f),
                summary: tokenize(s),
            }),
            _ => Err(Error::format(
                "paired file",
                format!("{}: line {} needs exactly one tab", path.display(), i + 1),
            )),
        })
        .collect()
}

pub fn write_pairs(path: &Path, pairs: &[TextPair]) -> Result<()> {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&p.fulltext.join(" "));
        s.push('\t');
        s.push_str(&p.summary.join(" "));
        s.push('\n');
    }
    atomic_write(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::fs;

    fn vocab_of(words: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(words.iter().map(|s| s.to_string()), 100)
    }

    #[test]
    fn known_tokens_map_directly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "the cat sat\n").unwrap();
        let v = vocab_of(&["the", "cat", "sat"]);
        let c = load_corpus(&p, Side::FullText, &v).unwrap();
        assert_eq!(
            c.sequences[0].ids,
            vec![v.lookup("the"), v.lookup("cat"), v.lookup("sat")]
        );
    }

    #[test]
    fn unknown_token_becomes_unk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "the zyzzx\n").unwrap();
        let c = load_corpus(&p, Side::Summary, &vocab_of(&["the"])).unwrap();
        assert_eq!(c.sequences[0].ids[1], UNK);
    }

    #[test]
    fn blank_lines_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "a b\n\nc\n").unwrap();
        let c = load_corpus(&p, Side::FullText, &vocab_of(&["a", "b", "c"])).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn non_utf8_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, b"fine\n\xc3\x28\n").unwrap();
        assert!(matches!(
            load_corpus(&p, Side::FullText, &vocab_of(&[])),
            Err(Error::Decode { line: 2, .. })
        ));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let r = load_corpus(Path::new("/nonexistent/x.txt"), Side::FullText, &vocab_of(&[]));
        assert!(matches!(r, Err(Error::Io { .. })));
    }

    #[test]
    fn loader_lowercases() {
        assert_eq!(tokenize("The CAT unk UNK"), vec!["the", "cat", "UNK", "UNK"]);
    }

    #[test]
    fn mixed_sides_are_rejected() {
        let s = vec![TokenSequence::new(vec![3], Side::Summary)];
        assert!(Corpus::new("x", Side::FullText, s).is_err());
    }

    #[test]
    fn pair_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.tsv");
        let pairs = vec![TextPair {
            fulltext: tokenize("a b c"),
            summary: tokenize("a c"),
        }];
        write_pairs(&p, &pairs).unwrap();
        assert_eq!(read_pairs(&p).unwrap(), pairs);
        fs::write(&p, "no tab here\n").unwrap();
        assert!(read_pairs(&p).is_err());
    }

    proptest! {
        #[test]
        fn detokenize_round_trip_up_to_unk(words in prop::collection::vec("[a-z]{1,5}", 1..12), known in prop::collection::vec("[a-z]{1,5}", 0..8)) {
            let vocab = Vocabulary::from_tokens(known.clone(), 100);
            let line = words.join(" ");
            let tc = TextCorpus::from_lines("p", Side::FullText, &[line.clone()]);
            let c = tc.encode(&vocab);
            let back = vocab.decode(&c.sequences[0].ids);
            let expected: Vec<&str> = words
                .iter()
                .map(|w| if vocab.id(w).is_some() { w.as_str() } else { UNK_STR })
                .collect();
            prop_assert_eq!(back, expected.join(" "));
        }

        #[test]
        fn vocab_is_stable_under_reordering_lines_with_equal_counts(seed in 0u64..1000) {
            // Same multiset and same first-occurrence order: appending lines
            // that only repeat already-seen words in a different order leaves
            // the vocabulary unchanged when counts tie identically.
            use rand::{seq::SliceRandom, SeedableRng};
            let base = vec![tokenize("x y z"), tokenize("w")];
            let mut tail = vec![tokenize("x"), tokenize("y"), tokenize("z"), tokenize("w")];
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            tail.shuffle(&mut rng);
            let a: Vec<Vec<String>> = base.iter().cloned().chain(tail.iter().cloned()).collect();
            let mut tail2 = tail.clone();
            tail2.shuffle(&mut rng);
            let b: Vec<Vec<String>> = base.iter().cloned().chain(tail2).collect();
            prop_assert_eq!(Vocabulary::build(&a, 10).unwrap(), Vocabulary::build(&b, 10).unwrap());
        }
    }
}
