use super::vocab::{TokenId, Vocabulary, EOS, PAD, UNK};

/// A capped side vocabulary expressed over shared token ids. Local index `i`
/// corresponds to shared id `shared[i]`; the three reserved tokens keep
/// local indices 0, 1, 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    shared: Vec<TokenId>,
    local: Vec<u32>,
}

const ABSENT: u32 = u32::MAX;

impl Lexicon {
    /// Every entry of `side` that also exists in `shared`.
    pub fn new(side: &Vocabulary, shared: &Vocabulary) -> Self {
        let mut ids = vec![UNK, EOS, PAD];
        ids.extend(
            side.tokens()
                .iter()
                .skip(3)
                .filter_map(|t| shared.id(t)),
        );
        Self::from_shared_ids(ids, shared.len())
    }

    /// The whole shared vocabulary.
    pub fn identity(shared_len: usize) -> Self {
        Self::from_shared_ids((0..shared_len as TokenId).collect(), shared_len)
    }

    pub fn from_shared_ids(ids: Vec<TokenId>, shared_len: usize) -> Self {
        let mut local = vec![ABSENT; shared_len];
        let mut shared = Vec::with_capacity(ids.len());
        for id in ids {
            if (id as usize) < shared_len && local[id as usize] == ABSENT {
                local[id as usize] = shared.len() as u32;
                shared.push(id);
            }
        }
        Lexicon { shared, local }
    }

    pub fn len(&self) -> usize {
        self.shared.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shared.is_empty()
    }

    pub fn shared_len(&self) -> usize {
        self.local.len()
    }

    pub fn shared_ids(&self) -> &[TokenId] {
        &self.shared
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.local_of(id).is_some()
    }

    pub fn local_of(&self, id: TokenId) -> Option<usize> {
        match self.local.get(id as usize) {
            Some(&l) if l != ABSENT => Some(l as usize),
            _ => None,
        }
    }

    /// Local index, with out-of-lexicon ids mapped to `UNK`.
    pub fn local_or_unk(&self, id: TokenId) -> usize {
        self.local_of(id).unwrap_or(UNK as usize)
    }

    pub fn shared_of(&self, local: usize) -> TokenId {
        self.shared[local]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_side_words_to_shared_ids() {
        let shared = Vocabulary::from_tokens(["a", "b", "c"].map(String::from), 10);
        let side = Vocabulary::from_tokens(["c", "zz", "a"].map(String::from), 10);
        let lex = Lexicon::new(&side, &shared);
        assert_eq!(lex.len(), 5);
        assert_eq!(lex.shared_of(3), shared.lookup("c"));
        assert_eq!(lex.local_of(shared.lookup("a")), Some(4));
        assert_eq!(lex.local_or_unk(shared.lookup("b")), UNK as usize);
        assert_eq!(lex.local_of(EOS), Some(1));
    }
}
