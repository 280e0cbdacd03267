use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_utf8_lines};

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;

pub const UNK_STR: &str = "UNK";
pub const EOS_STR: &str = "</s>";
pub const PAD_STR: &str = "<pad>";

const SPECIALS: [&str; 3] = [UNK_STR, EOS_STR, PAD_STR];

/// Token strings ordered by descending corpus frequency, preceded by the
/// three reserved tokens `UNK`, `EOS`, `PAD` at ids 0, 1, 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
    cap: usize,
}

impl Vocabulary {
    /// Counts tokens over every line of every corpus and keeps the `cap` most
    /// frequent, ties broken by first occurrence.
    pub fn build<'a, I, L>(lines: I, cap: usize) -> Result<Self>
    where
        I: IntoIterator<Item = L>,
        L: IntoIterator<Item = &'a String>,
    {
        if cap < 1 {
            return Err(Error::InvalidArgument("vocabulary cap must be >= 1".into()));
        }
        // token -> (count, first occurrence)
        let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut position = 0usize;
        let mut any = false;
        for line in lines {
            any = true;
            for tok in line {
                if SPECIALS.contains(&tok.as_str()) {
                    continue;
                }
                let e = stats.entry(tok.as_str()).or_insert((0, position));
                e.0 += 1;
                position += 1;
            }
        }
        if !any {
            return Err(Error::Empty("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize, usize)> =
            stats.into_iter().map(|(t, (c, f))| (t, c, f)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(cap);
        Ok(Self::from_tokens(
            ranked.into_iter().map(|(t, _, _)| t.to_string()),
            cap,
        ))
    }

    /// Builds from regular tokens in id order (specials are prepended).
    pub fn from_tokens(regular: impl IntoIterator<Item = String>, cap: usize) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(regular.into_iter().filter(|t| !SPECIALS.contains(&t.as_str())));
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, id_of, cap }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    /// Id of `token`, or `UNK` when it is out of vocabulary.
    pub fn lookup(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn is_special(id: TokenId) -> bool {
        id <= PAD
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, specials included, preceded by a `# cap` header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = format!("# cap {}\n", self.cap);
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        atomic_write(path, s.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_utf8_lines(path)?;
        let cap = lines
            .first()
            .and_then(|l| l.strip_prefix("# cap "))
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::format("vocabulary", "missing '# cap' header"))?;
        let body = &lines[1..];
        if body.len() < 3 || body[..3].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::format("vocabulary", "special tokens missing"));
        }
        Ok(Self::from_tokens(body[3..].iter().cloned(), cap))
    }
}
