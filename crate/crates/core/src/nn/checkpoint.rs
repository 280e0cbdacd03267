//! Versioned checkpoint container.
//!
//! ```text
//! btsumm-checkpoint 1
//! precision f64
//! meta <count>
//! <key>=<value>            (one per line)
//! tensors <count>
//! <name> <rows> <cols>     (one per line)
//! data
//! <raw little-endian values, tensors in manifest order>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::graph::ParamStore;
use super::tensor::{Real, Tensor, PRECISION};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_bytes};

const MAGIC: &str = "btsumm-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    /// Every parameter of `store`, in store order.
    pub fn add_store(&mut self, store: &ParamStore) {
        for (_, p) in store.iter() {
            self.tensors.push((p.name.clone(), p.value.clone()));
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format("checkpoint", format!("missing meta key {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::format("checkpoint", format!("bad value for {key}")))
    }

    /// Copies matching tensors into `store`; every store parameter must be present.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {name} has shape {:?}, model expects {:?}", t.shape(), p.value.shape()),
                ));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC} {VERSION}\nprecision {PRECISION}\nmeta {}\n", self.meta.len());
        for (k, v) in &self.meta {
            header.push_str(&format!("{k}={v}\n"));
        }
        header.push_str(&format!("tensors {}\n", self.tensors.len()));
        for (name, t) in &self.tensors {
            header.push_str(&format!("{name} {} {}\n", t.rows(), t.cols()));
        }
        header.push_str("data\n");
        let mut bytes = header.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::format("checkpoint", d);
        let mut pos = 0;
        let mut next_line = || -> Result<String> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| bad("header is not UTF-8".into()))?
                .to_string();
            pos += end + 1;
            Ok(line)
        };
        let first = next_line()?;
        let version = first
            .strip_prefix(&format!("{MAGIC} "))
            .ok_or_else(|| bad("missing magic line".into()))?;
        if version != VERSION.to_string() {
            return Err(bad(format!("unsupported version {version}")));
        }
        let precision = next_line()?;
        let width = match precision.as_str() {
            "precision f64" => 8,
            "precision f32" => 4,
            other => return Err(bad(format!("unknown precision line {other:?}"))),
        };
        let count = |line: String, key: &str| -> Result<usize> {
            line.strip_prefix(key)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| bad(format!("expected '{key} <count>', got {line:?}")))
        };
        let n_meta = count(next_line()?, "meta")?;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let line = next_line()?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("meta line without '=': {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let n_tensors = count(next_line()?, "tensors")?;
        let mut shapes = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let line = next_line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            let parsed = match parts.as_slice() {
                [name, r, c] => r.parse::<usize>().ok().zip(c.parse::<usize>().ok()).map(|(r, c)| (name.to_string(), r, c)),
                _ => None,
            };
            shapes.push(parsed.ok_or_else(|| bad(format!("bad tensor line {line:?}")))?);
        }
        if next_line()? != "data" {
            return Err(bad("missing data marker".into()));
        }
        let expected: usize = shapes.iter().map(|(_, r, c)| r * c * width).sum();
        if bytes.len() - pos != expected {
            return Err(bad(format!(
                "payload has {} bytes, manifest needs {expected}",
                bytes.len() - pos
            )));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for (name, r, c) in shapes {
            let n = r * c;
            let data: Vec<Real> = bytes[pos..pos + n * width]
                .chunks_exact(width)
                .map(|ch| {
                    if width == 8 {
                        f64::from_le_bytes(ch.try_into().unwrap()) as Real
                    } else {
                        f32::from_le_bytes(ch.try_into().unwrap()) as Real
                    }
                })
                .collect();
            pos += n * width;
            tensors.push((name, Tensor::from_vec(r, c, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let mut ck = Checkpoint::new().with_meta("kind", "test").with_meta("dim", 3);
        ck.push("a", Tensor::from_vec(2, 3, vec![1.0, -2.5, 3.0, 1e-9, 5.0, 6.0]).unwrap());
        ck.push("b", Tensor::zeros(0, 4));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta_parse::<usize>("dim").unwrap(), 3);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut ck = Checkpoint::new();
        ck.push("a", Tensor::filled(2, 2, 1.0));
        let mut bytes = ck.to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        assert!(Checkpoint::from_bytes(b"something else 1\n").is_err());
    }
}
