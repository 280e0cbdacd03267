//! The iteration-0 summarizers: Pr-Thr, DBAE and μ:1, plus the corpus
//! presence statistics they share.

mod dbae;
mod encoder;
mod moments;
mod prthr;
mod stats;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

pub use dbae::{dbae_noise, DbaeConfig, DbaeModel};
pub use encoder::BowEncoder;
pub use moments::{MomentConfig, MomentModel, ABSENT_SCORE};
pub use prthr::{PrThr, PrThrConfig};
pub use stats::{compute_moments, summary_weights, MomentStats};

use crate::corpus::{Lexicon, TokenId};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_utf8_lines};
use crate::nn::{Checkpoint, Real, Tensor};

/// `<path>.params`: one `key = value` line per hyperparameter.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".params");
    PathBuf::from(s)
}

pub(crate) fn write_sidecar(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(&format!("{k} = {v}\n"));
    }
    atomic_write(&sidecar_path(path), s.as_bytes())
}

pub(crate) fn read_sidecar(path: &Path) -> Result<HashMap<String, String>> {
    let side = sidecar_path(path);
    let mut out = HashMap::new();
    for line in read_utf8_lines(&side)? {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::format("parameter sidecar", format!("{}: {line:?}", side.display())))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub(crate) fn sidecar_value<T: std::str::FromStr>(params: &HashMap<String, String>, key: &str) -> Result<T> {
    params
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format("parameter sidecar", format!("missing or invalid {key}")))
}

pub(crate) fn ids_tensor(ids: &[TokenId]) -> Tensor {
    Tensor::row_vector(ids.iter().map(|&i| i as Real).collect())
}

pub(crate) fn lexicon_from(ck: &Checkpoint, shared_len: usize) -> Result<Lexicon> {
    lexicon_named(ck, "lexicon", shared_len)
}

pub(crate) fn lexicon_named(ck: &Checkpoint, name: &str, shared_len: usize) -> Result<Lexicon> {
    let t = ck
        .tensor(name)
        .ok_or_else(|| Error::format("checkpoint", format!("missing {name}")))?;
    Ok(Lexicon::from_shared_ids(
        t.data().iter().map(|&v| v as TokenId).collect(),
        shared_len,
    ))
}
