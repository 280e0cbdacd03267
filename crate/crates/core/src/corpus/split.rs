use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_utf8_lines};

/// Fractions of a paired file assigned to each role.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub summary_frac: f64,
    pub fulltext_frac: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 4] {
        [self.summary_frac, self.fulltext_frac, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidArgument(format!("negative split ratio in {a:?}")));
        }
        let total: f64 = a.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Disjoint index sets over the lines of a paired file. Training sides never
/// share an index, so no pair contributes both its full text and its summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub summary_only: Vec<usize>,
    pub fulltext_only: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder apportionment of `n` items.
fn apportion(n: usize, ratios: [f64; 4]) -> [usize; 4] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: [usize; 4] = [0; 4];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Deterministically partitions `n` paired indices.
pub fn split_unaligned_count(n: usize, ratios: SplitRatios, seed: u64) -> Result<SplitManifest> {
    ratios.validate()?;
    let counts = apportion(n, ratios.as_array());
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut parts = Vec::with_capacity(4);
    let mut start = 0;
    for c in counts {
        let mut part = idx[start..start + c].to_vec();
        part.sort_unstable();
        parts.push(part);
        start += c;
    }
    let test = parts.pop().unwrap();
    let validation = parts.pop().unwrap();
    let fulltext_only = parts.pop().unwrap();
    let summary_only = parts.pop().unwrap();
    Ok(SplitManifest {
        seed,
        ratios,
        summary_only,
        fulltext_only,
        validation,
        test,
    })
}

/// Splits the non-blank lines of a paired TSV file.
pub fn split_unaligned(paired_path: &Path, ratios: SplitRatios, seed: u64) -> Result<SplitManifest> {
    ratios.validate()?;
    let n = read_utf8_lines(paired_path)?
        .iter()
        .filter(|l| !l.trim().is_empty())
        .count();
    split_unaligned_count(n, ratios, seed)
}

impl SplitManifest {
    pub fn total(&self) -> usize {
        self.summary_only.len() + self.fulltext_only.len() + self.validation.len() + self.test.len()
    }

    pub fn to_text(&self) -> String {
        let r = &self.ratios;
        let mut s = format!(
            "# btsumm split manifest\nseed {}\nratios summary={} fulltext={} val={} test={}\n",
            self.seed, r.summary_frac, r.fulltext_frac, r.val, r.test
        );
        for (name, set) in [
            ("summary_only", &self.summary_only),
            ("fulltext_only", &self.fulltext_only),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            s.push_str(&format!("{name} {}\n", set.len()));
            let line: Vec<String> = set.iter().map(usize::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_utf8_lines(path)?;
        let bad = |d: &str| Error::format("split manifest", d.to_string());
        if lines.len() != 11 || lines[0] != "# btsumm split manifest" {
            return Err(bad("unexpected layout"));
        }
        let seed = lines[1]
            .strip_prefix("seed ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("seed line"))?;
        let mut vals = [0.0; 4];
        let ratio_fields: Vec<&str> = lines[2]
            .strip_prefix("ratios ")
            .ok_or_else(|| bad("ratios line"))?
            .split(' ')
            .collect();
        for (slot, (field, key)) in vals
            .iter_mut()
            .zip(ratio_fields.iter().zip(["summary", "fulltext", "val", "test"]))
        {
            *slot = field
                .strip_prefix(&format!("{key}="))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("ratio field"))?;
        }
        let mut sets: Vec<Vec<usize>> = Vec::with_capacity(4);
        for (k, name) in ["summary_only", "fulltext_only", "validation", "test"]
            .iter()
            .enumerate()
        {
            let header = &lines[3 + 2 * k];
            let count: usize = header
                .strip_prefix(&format!("{name} "))
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad("set header"))?;
            let set: Vec<usize> = lines[4 + 2 * k]
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("index")))
                .collect::<Result<_>>()?;
            if set.len() != count {
                return Err(bad("set size does not match its header"));
            }
            sets.push(set);
        }
        let test = sets.pop().unwrap();
        let validation = sets.pop().unwrap();
        let fulltext_only = sets.pop().unwrap();
        let summary_only = sets.pop().unwrap();
        Ok(SplitManifest {
            seed,
            ratios: SplitRatios {
                summary_frac: vals[0],
                fulltext_frac: vals[1],
                val: vals[2],
                test: vals[3],
            },
            summary_only,
            fulltext_only,
            validation,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn ratios(a: f64, b: f64, c: f64, d: f64) -> SplitRatios {
        SplitRatios {
            summary_frac: a,
            fulltext_frac: b,
            val: c,
            test: d,
        }
    }

    #[test]
    fn gigaword_sized_split_has_the_requested_sizes() {
        let n = 3_800_000;
        let m = split_unaligned_count(n, ratios(2.0 / 3.8, 1.8 / 3.8, 0.0, 0.0), 1).unwrap();
        assert_eq!(m.summary_only.len(), 2_000_000);
        assert_eq!(m.fulltext_only.len(), 1_800_000);
        let a: HashSet<_> = m.summary_only.iter().collect();
        assert!(m.fulltext_only.iter().all(|i| !a.contains(i)));
    }

    #[test]
    fn same_seed_same_manifest() {
        let r = ratios(0.5, 0.5, 0.0, 0.0);
        assert_eq!(
            split_unaligned_count(10, r, 7).unwrap(),
            split_unaligned_count(10, r, 7).unwrap()
        );
    }

    #[test]
    fn invalid_ratios_are_rejected() {
        assert!(split_unaligned_count(10, ratios(0.5, 0.6, 0.0, 0.0), 0).is_err());
        assert!(split_unaligned_count(10, ratios(-0.1, 1.1, 0.0, 0.0), 0).is_err());
    }

    #[test]
    fn text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.txt");
        let m = split_unaligned_count(37, ratios(0.4, 0.4, 0.1, 0.1), 3).unwrap();
        m.save(&p).unwrap();
        assert_eq!(SplitManifest::load(&p).unwrap(), m);
    }

    #[test]
    fn brute_force_disjointness_on_1k_pairs() {
        let m = split_unaligned_count(1000, ratios(0.45, 0.45, 0.05, 0.05), 11).unwrap();
        let sets = [&m.summary_only, &m.fulltext_only, &m.validation, &m.test];
        for a in 0..4 {
            for b in a + 1..4 {
                for x in sets[a] {
                    assert!(!sets[b].contains(x));
                }
            }
        }
        assert_eq!(m.total(), 1000);
    }

    proptest! {
        #[test]
        fn training_sides_never_overlap(n in 0usize..500, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let s = a;
            let f = (1.0 - s) * b;
            let rest = 1.0 - s - f;
            let r = ratios(s, f, rest / 2.0, rest / 2.0);
            let m = split_unaligned_count(n, r, seed).unwrap();
            let sums: HashSet<_> = m.summary_only.iter().collect();
            prop_assert!(m.fulltext_only.iter().all(|i| !sums.contains(i)));
            prop_assert_eq!(m.total(), n);
        }
    }
}
