//! ROUGE-1/2/L with harmonic-mean f-scores, the Lead-k baseline and report
//! tables.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_utf8_lines};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f: f64,
}

impl Prf {
    /// Scores from a match count and the two side totals; empty sides give 0.
    pub fn from_counts(matches: usize, candidate: usize, reference: usize) -> Prf {
        let p = if candidate == 0 { 0.0 } else { matches as f64 / candidate as f64 };
        let r = if reference == 0 { 0.0 } else { matches as f64 / reference as f64 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        Prf { p, r, f }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RougeScore {
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Prf {
    assert!(n >= 1, "n-gram order must be >= 1");
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let matches = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |len: usize| len.saturating_sub(n - 1);
    Prf::from_counts(matches, total(candidate.len()), total(reference.len()))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

pub fn rouge<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore {
        r1: rouge_n(candidate, reference, 1),
        r2: rouge_n(candidate, reference, 2),
        rl: rouge_l(candidate, reference),
    }
}

/// The first `k` tokens.
pub fn lead_k<T: Clone>(fulltext: &[T], k: usize) -> Vec<T> {
    fulltext[..k.min(fulltext.len())].to_vec()
}

pub fn lead8<T: Clone>(fulltext: &[T]) -> Vec<T> {
    lead_k(fulltext, 8)
}

/// Arithmetic mean of per-pair scores.
pub fn average(scores: &[RougeScore]) -> Result<RougeScore> {
    if scores.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    let n = scores.len() as f64;
    let mean = |get: fn(&RougeScore) -> Prf| {
        let (p, r, f) = scores.iter().map(get).fold((0.0, 0.0, 0.0), |a, s| (a.0 + s.p, a.1 + s.r, a.2 + s.f));
        Prf { p: p / n, r: r / n, f: f / n }
    };
    Ok(RougeScore {
        r1: mean(|s| s.r1),
        r2: mean(|s| s.r2),
        rl: mean(|s| s.rl),
    })
}

/// Scores a system on `(fulltext, summary)` test pairs.
pub fn evaluate<F>(system: F, test: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<RougeScore>
where
    F: FnOnce(&[&[TokenId]]) -> Result<Vec<Vec<TokenId>>>,
{
    if test.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    let inputs: Vec<&[TokenId]> = test.iter().map(|p| p.0.as_slice()).collect();
    let outputs = system(&inputs)?;
    if outputs.len() != test.len() {
        return Err(Error::Shape(format!("{} outputs for {} test pairs", outputs.len(), test.len())));
    }
    let scores: Vec<RougeScore> = outputs.iter().zip(test).map(|(o, p)| rouge(o, &p.1)).collect();
    average(&scores)
}

/// Named ROUGE rows plus run metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub run_id: String,
    pub test_hash: String,
    pub rows: Vec<(String, RougeScore)>,
}

const TSV_HEADER: &str = "# rouge f-measure beta=1; no stemming; no stopword removal; token-id matching; single reference";

impl EvalReport {
    pub fn new(run_id: &str, test_hash: &str) -> Self {
        EvalReport {
            run_id: run_id.to_string(),
            test_hash: test_hash.to_string(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, score: RougeScore) -> Result<()> {
        if self.rows.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(format!("duplicate report row {name:?}")));
        }
        self.rows.push((name.to_string(), score));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&RougeScore> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    /// Aligned columns of f-scores in points.
    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
        let mut s = format!("run {}  test {}\n", self.run_id, self.test_hash);
        let _ = writeln!(s, "{:<w$}  {:>6}  {:>6}  {:>6}", "system", "R-1", "R-2", "R-L");
        for (name, r) in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>6.2}  {:>6.2}  {:>6.2}",
                name,
                100.0 * r.r1.f,
                100.0 * r.r2.f,
                100.0 * r.rl.f
            );
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{TSV_HEADER}\n# run_id\t{}\n# test_hash\t{}\n", self.run_id, self.test_hash);
        s.push_str("system\tr1_p\tr1_r\tr1_f\tr2_p\tr2_r\tr2_f\trl_p\trl_r\trl_f\n");
        for (name, r) in &self.rows {
            s.push_str(name);
            for m in [r.r1, r.r2, r.rl] {
                let _ = write!(s, "\t{:?}\t{:?}\t{:?}", m.p, m.r, m.f);
            }
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut report = EvalReport::default();
        for line in text.lines() {
            if let Some(meta) = line.strip_prefix("# ") {
                if let Some((k, v)) = meta.split_once('\t') {
                    match k {
                        "run_id" => report.run_id = v.to_string(),
                        "test_hash" => report.test_hash = v.to_string(),
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() || line.starts_with("system\t") {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 10 {
                return Err(Error::format("report", format!("expected 10 columns: {line:?}")));
            }
            let v: Vec<f64> = cols[1..]
                .iter()
                .map(|c| c.parse().map_err(|_| Error::format("report", format!("bad number {c:?}"))))
                .collect::<Result<_>>()?;
            let prf = |i: usize| Prf { p: v[i], r: v[i + 1], f: v[i + 2] };
            report.push(cols[0], RougeScore { r1: prf(0), r2: prf(3), rl: prf(6) })?;
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&read_utf8_lines(path)?.join("\n"))
    }
}
