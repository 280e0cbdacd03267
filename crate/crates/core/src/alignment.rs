//! Orthogonal alignment of the full-text and summary embedding spaces and
//! thresholded nearest-neighbor lookup in the summary space.

use std::path::{Path, PathBuf};

use log::debug;
use nalgebra::DMatrix;

use crate::corpus::{TokenId, Vocabulary, PAD};
use crate::embeddings::{load_embeddings, save_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::io::{atomic_write, file_sha256, read_utf8_lines};
use crate::nn::{Real, Tensor};

/// Default cosine-distance threshold for word replacement.
pub const DEFAULT_ETA: Real = 0.9;

fn to_na(t: &Tensor) -> DMatrix<Real> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_na(m: &DMatrix<Real>) -> Tensor {
    let mut t = Tensor::zeros(m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            t.set(r, c, m[(r, c)]);
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct Procrustes {
    pub q: Tensor,
    /// `XᵀY` had numerically zero singular values; `Q` is one of several
    /// equally optimal orthogonal maps.
    pub rank_deficient: bool,
}

/// `argmin_Q ‖XQ − Y‖_F` over orthogonal `Q`, from the SVD of `XᵀY`.
pub fn orthogonal_procrustes(x: &Tensor, y: &Tensor) -> Result<Procrustes> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "procrustes inputs {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let d = x.cols();
    if d == 0 {
        return Err(Error::Shape("procrustes on zero-dimensional vectors".into()));
    }
    let m = to_na(x).transpose() * to_na(y);
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax.max(1.0) * 1e-10;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    Ok(Procrustes {
        q: from_na(&(u * vt)),
        rank_deficient: rank < d,
    })
}

/// `max |QᵀQ − I|`.
pub fn orthogonality_error(q: &Tensor) -> Real {
    let qtq = q.transpose().matmul(q).expect("square");
    qtq.max_abs_diff(&Tensor::identity(q.rows()))
}

/// How the first correspondence set is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum AnchorPolicy {
    /// Words spelled identically in both vocabularies. Errors when there are none.
    IdenticalStrings,
    /// Explicit (source id, target id) pairs.
    Pairs(Vec<(TokenId, TokenId)>),
    /// Start from `Q = I` without anchors.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    pub anchors: AnchorPolicy,
    pub refine_iters: usize,
    /// Most frequent words per side entering the transport problem.
    pub top_k: usize,
    pub sinkhorn_iters: usize,
    pub sinkhorn_reg: Real,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            anchors: AnchorPolicy::IdenticalStrings,
            refine_iters: 5,
            top_k: 2000,
            sinkhorn_iters: 50,
            sinkhorn_reg: 0.05,
            seed: 1,
        }
    }
}

/// Per-round Procrustes objective on that round's correspondences, before
/// and after solving for the new map.
#[derive(Clone, Debug, Default)]
pub struct AlignReport {
    pub anchors: usize,
    pub rounds: Vec<(Real, Real)>,
    pub rank_deficient: bool,
}

#[derive(Clone, Debug)]
pub struct AlignedSpace {
    pub q: Tensor,
    pub source: EmbeddingMatrix,
    pub target: EmbeddingMatrix,
    target_unit: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborHit {
    pub word: TokenId,
    pub distance: Real,
}

fn normalized(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<Real>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

fn rows_of(t: &Tensor, ids: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(ids.len(), t.cols());
    for (i, &id) in ids.iter().enumerate() {
        out.row_mut(i).copy_from_slice(t.row(id));
    }
    out
}

fn frobenius_residual(x: &Tensor, q: &Tensor, y: &Tensor) -> Real {
    let xq = x.matmul(q).expect("shapes checked");
    xq.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<Real>()
        .sqrt()
}

/// Entropy-regularized transport plan between uniform marginals, computed in
/// the log domain. Returns the row-argmax of the plan.
fn sinkhorn_match(cost: &Tensor, reg: Real, iters: usize) -> Vec<usize> {
    let (n, m) = cost.shape();
    let log_a = -(n as Real).ln();
    let log_b = -(m as Real).ln();
    let k: Vec<Real> = cost.data().iter().map(|c| -c / reg).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let lse = |it: &mut dyn Iterator<Item = Real>| {
        let v: Vec<Real> = it.collect();
        let mx = v.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        mx + v.iter().map(|x| (x - mx).exp()).sum::<Real>().ln()
    };
    for _ in 0..iters {
        for i in 0..n {
            let row = &k[i * m..(i + 1) * m];
            f[i] = log_a - lse(&mut row.iter().zip(&g).map(|(kij, gj)| kij + gj));
        }
        for j in 0..m {
            g[j] = log_b - lse(&mut (0..n).map(|i| k[i * m + j] + f[i]));
        }
    }
    (0..n)
        .map(|i| {
            let row = &k[i * m..(i + 1) * m];
            let mut best = 0;
            let mut bv = Real::NEG_INFINITY;
            for (j, (kij, gj)) in row.iter().zip(&g).enumerate() {
                if kij + gj > bv {
                    bv = kij + gj;
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn regular_ids(vocab: &Vocabulary, k: usize) -> Vec<usize> {
    (PAD as usize + 1..vocab.len()).take(k).collect()
}

/// Learns `Q` by alternating transport-based matching of the most frequent
/// words with Procrustes on the matched pairs.
pub fn align_spaces(
    source: &EmbeddingMatrix,
    target: &EmbeddingMatrix,
    cfg: &AlignConfig,
) -> Result<(AlignedSpace, AlignReport)> {
    let d = source.dim();
    if d != target.dim() {
        return Err(Error::Shape(format!(
            "source dim {d} vs target dim {}",
            target.dim()
        )));
    }
    let xs = normalized(&source.vectors);
    let yt = normalized(&target.vectors);
    let anchors: Vec<(usize, usize)> = match &cfg.anchors {
        AnchorPolicy::IdenticalStrings => {
            let a: Vec<(usize, usize)> = regular_ids(&source.vocab, usize::MAX)
                .into_iter()
                .filter_map(|i| {
                    target
                        .vocab
                        .id(source.vocab.token(i as TokenId))
                        .map(|j| (i, j as usize))
                })
                .collect();
            if a.is_empty() {
                return Err(Error::Empty("no identical-string anchors".into()));
            }
            a
        }
        AnchorPolicy::Pairs(p) => {
            if p.is_empty() {
                return Err(Error::Empty("empty anchor list".into()));
            }
            for &(i, j) in p {
                if i as usize >= source.vocab.len() || j as usize >= target.vocab.len() {
                    return Err(Error::InvalidArgument(format!("anchor ({i}, {j}) out of range")));
                }
            }
            p.iter().map(|&(i, j)| (i as usize, j as usize)).collect()
        }
        AnchorPolicy::Identity => Vec::new(),
    };
    let mut report = AlignReport {
        anchors: anchors.len(),
        ..Default::default()
    };
    let mut q = Tensor::identity(d);
    if !anchors.is_empty() {
        let (si, ti): (Vec<usize>, Vec<usize>) = anchors.iter().cloned().unzip();
        let p = orthogonal_procrustes(&rows_of(&xs, &si), &rows_of(&yt, &ti))?;
        report.rank_deficient |= p.rank_deficient;
        q = p.q;
    }
    let src_top = regular_ids(&source.vocab, cfg.top_k);
    let tgt_top = regular_ids(&target.vocab, cfg.top_k);
    if !src_top.is_empty() && !tgt_top.is_empty() {
        let xs_top = rows_of(&xs, &src_top);
        let yt_top = rows_of(&yt, &tgt_top);
        for round in 0..cfg.refine_iters {
            let mapped = normalized(&xs_top.matmul(&q)?);
            let sim = mapped.matmul(&yt_top.transpose())?;
            let cost = sim.map(|s| 1.0 - s);
            let matched = sinkhorn_match(&cost, cfg.sinkhorn_reg, cfg.sinkhorn_iters);
            let mut si: Vec<usize> = src_top.clone();
            let mut ti: Vec<usize> = matched.iter().map(|&j| tgt_top[j]).collect();
            for &(a, b) in &anchors {
                si.push(a);
                ti.push(b);
            }
            let x = rows_of(&xs, &si);
            let y = rows_of(&yt, &ti);
            let before = frobenius_residual(&x, &q, &y);
            let p = orthogonal_procrustes(&x, &y)?;
            report.rank_deficient |= p.rank_deficient;
            q = p.q;
            let after = frobenius_residual(&x, &q, &y);
            debug!("alignment round {} residual {before:.4} -> {after:.4}", round + 1);
            report.rounds.push((before, after));
        }
    }
    Ok((AlignedSpace::new(q, source.clone(), target.clone())?, report))
}

impl AlignedSpace {
    pub fn new(q: Tensor, source: EmbeddingMatrix, target: EmbeddingMatrix) -> Result<Self> {
        let d = source.dim();
        if target.dim() != d || q.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "map {:?} for source dim {d} and target dim {}",
                q.shape(),
                target.dim()
            )));
        }
        if orthogonality_error(&q) > 1e-6 {
            return Err(Error::InvalidArgument("alignment map is not orthogonal".into()));
        }
        let target_unit = normalized(&target.vectors);
        Ok(AlignedSpace {
            q,
            source,
            target,
            target_unit,
        })
    }

    fn mapped_unit(&self, word: TokenId) -> Vec<Real> {
        let x = self.source.vector(word);
        let d = x.len();
        let mut out = vec![0.0; d];
        for (i, xi) in x.iter().enumerate() {
            for (o, qij) in out.iter_mut().zip(self.q.row(i)) {
                *o += xi * qij;
            }
        }
        let n = out.iter().map(|v| v * v).sum::<Real>().sqrt();
        if n > 0.0 {
            out.iter_mut().for_each(|v| *v /= n);
        }
        out
    }

    /// Target word with the smallest cosine distance to the mapped source
    /// word; ties go to the lower id.
    pub fn nearest(&self, word: TokenId) -> NeighborHit {
        let v = self.mapped_unit(word);
        let mut best = NeighborHit {
            word: 0,
            distance: Real::INFINITY,
        };
        for j in 0..self.target_unit.rows() {
            let sim: Real = v.iter().zip(self.target_unit.row(j)).map(|(a, b)| a * b).sum();
            let dist = (1.0 - sim).clamp(0.0, 2.0);
            if dist < best.distance {
                best = NeighborHit {
                    word: j as TokenId,
                    distance: dist,
                };
            }
        }
        best
    }

    /// `nearest` for every source word, in source id order.
    pub fn nearest_all(&self) -> Vec<NeighborHit> {
        (0..self.source.vocab.len())
            .map(|i| self.nearest(i as TokenId))
            .collect()
    }

    /// Writes `Q` in the vector text format (header `d d`, rows labelled by
    /// index) and a `<q_path>.refs` file naming the two embedding files.
    pub fn save(&self, q_path: &Path, source_path: &Path, target_path: &Path) -> Result<()> {
        let d = self.q.rows();
        let mut s = format!("{d} {d}\n");
        for r in 0..d {
            s.push_str(&r.to_string());
            for v in self.q.row(r) {
                s.push_str(&format!(" {v}"));
            }
            s.push('\n');
        }
        atomic_write(q_path, s.as_bytes())?;
        let refs = format!(
            "source {} {}\ntarget {} {}\n",
            source_path.display(),
            file_sha256(source_path)?,
            target_path.display(),
            file_sha256(target_path)?
        );
        atomic_write(&refs_path(q_path), refs.as_bytes())
    }

    /// Reads `Q` and the referenced embedding files, checking their hashes.
    pub fn load(q_path: &Path, source_vocab: &Vocabulary, target_vocab: &Vocabulary) -> Result<Self> {
        let lines = read_utf8_lines(q_path)?;
        let bad = |d: String| Error::format("alignment map", format!("{}: {d}", q_path.display()));
        let d: usize = lines
            .first()
            .and_then(|h| h.split_once(' '))
            .filter(|(a, b)| a == b)
            .and_then(|(a, _)| a.parse().ok())
            .ok_or_else(|| bad("header must be 'd d'".into()))?;
        if lines.len() < d + 1 {
            return Err(bad(format!("expected {d} rows")));
        }
        let mut q = Tensor::zeros(d, d);
        for r in 0..d {
            let vals: Vec<Real> = lines[r + 1]
                .split(' ')
                .skip(1)
                .map(|v| v.parse().map_err(|_| bad(format!("row {r}"))))
                .collect::<Result<_>>()?;
            if vals.len() != d {
                return Err(bad(format!("row {r} has {} values", vals.len())));
            }
            q.row_mut(r).copy_from_slice(&vals);
        }
        let refs = read_utf8_lines(&refs_path(q_path))?;
        let mut paths = Vec::new();
        for (line, key) in refs.iter().zip(["source ", "target "]) {
            let rest = line.strip_prefix(key).ok_or_else(|| bad("refs file".into()))?;
            let (p, hash) = rest.rsplit_once(' ').ok_or_else(|| bad("refs file".into()))?;
            let p = PathBuf::from(p);
            if file_sha256(&p)? != hash {
                return Err(Error::format(
                    "alignment map",
                    format!("{} changed since alignment", p.display()),
                ));
            }
            paths.push(p);
        }
        if paths.len() != 2 {
            return Err(bad("refs file needs source and target lines".into()));
        }
        let (source, _) = load_embeddings(&paths[0], source_vocab)?;
        let (target, _) = load_embeddings(&paths[1], target_vocab)?;
        AlignedSpace::new(q, source, target)
    }
}

fn refs_path(q_path: &Path) -> PathBuf {
    let mut s = q_path.as_os_str().to_owned();
    s.push(".refs");
    PathBuf::from(s)
}

/// Saves both embedding matrices next to `q_path` and then the map.
pub fn save_aligned(space: &AlignedSpace, dir: &Path) -> Result<PathBuf> {
    let src = dir.join("source.vec");
    let tgt = dir.join("target.vec");
    save_embeddings(&space.source, &src)?;
    save_embeddings(&space.target, &tgt)?;
    let q = dir.join("q.txt");
    space.save(&q, &src, &tgt)?;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        // Sum of uniforms: close enough to normal for these tests.
        let data = (0..rows * cols)
            .map(|_| (0..6).map(|_| rng.gen::<Real>() - 0.5).sum::<Real>())
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Random rotation from Gram-Schmidt on a random square matrix.
    fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
        let a = to_na(&gaussian(rng, d, d));
        from_na(&a.qr().q())
    }

    fn vocab(n: usize, prefix: &str) -> Vocabulary {
        Vocabulary::from_tokens((0..n).map(|i| format!("{prefix}{i}")), n)
    }

    #[test]
    fn identical_inputs_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(&mut rng, 20, 5);
        let p = orthogonal_procrustes(&x, &x).unwrap();
        assert!(p.q.max_abs_diff(&Tensor::identity(5)) < 1e-9);
        assert!(!p.rank_deficient);
    }

    #[test]
    fn planted_rotation_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(&mut rng, 50, 8);
        let r = random_rotation(&mut rng, 8);
        let y = x.matmul(&r).unwrap();
        let p = orthogonal_procrustes(&x, &y).unwrap();
        assert!(p.q.max_abs_diff(&r) < 1e-6);
        assert!(orthogonality_error(&p.q) < 1e-9);
    }

    #[test]
    fn single_row_is_rank_deficient_but_orthogonal() {
        let x = Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let y = Tensor::from_vec(1, 2, vec![-2.0, 0.5]).unwrap();
        let p = orthogonal_procrustes(&x, &y).unwrap();
        assert!(p.rank_deficient);
        assert!(orthogonality_error(&p.q) < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let x = Tensor::zeros(3, 2);
        let y = Tensor::zeros(3, 3);
        assert!(orthogonal_procrustes(&x, &y).is_err());
    }

    fn planted_spaces(n: usize, d: usize, noise: Real, seed: u64) -> (EmbeddingMatrix, EmbeddingMatrix, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab(n, "w");
        let x = gaussian(&mut rng, v.len(), d);
        let r = random_rotation(&mut rng, d);
        let mut y = x.matmul(&r).unwrap();
        let scale = x.norm() / ((v.len() * d) as Real).sqrt();
        for val in y.data_mut() {
            *val += noise * scale * (rng.gen::<Real>() - 0.5) * 12f64.sqrt() as Real;
        }
        (
            EmbeddingMatrix::new(v.clone(), x).unwrap(),
            EmbeddingMatrix::new(v, y).unwrap(),
            r,
        )
    }

    fn retrieval(space: &AlignedSpace) -> Real {
        let n = space.source.vocab.len();
        let hits = (3..n)
            .filter(|&i| space.nearest(i as TokenId).word as usize == i)
            .count();
        hits as Real / (n - 3) as Real
    }

    #[test]
    fn identical_spaces_align_to_identity() {
        let (src, _, _) = planted_spaces(100, 6, 0.0, 3);
        let (space, _) = align_spaces(&src, &src, &AlignConfig::default()).unwrap();
        assert!(space.q.max_abs_diff(&Tensor::identity(6)) < 1e-6);
    }

    #[test]
    fn noisy_planted_rotation_retrieval_with_partial_anchors() {
        let (src, tgt, _) = planted_spaces(1000, 16, 0.01, 4);
        let cfg = AlignConfig {
            anchors: AnchorPolicy::Pairs((3..40).map(|i| (i, i)).collect()),
            top_k: 300,
            ..Default::default()
        };
        let (space, report) = align_spaces(&src, &tgt, &cfg).unwrap();
        let acc = retrieval(&space);
        assert!(acc >= 0.95, "retrieval {acc}");
        assert!(orthogonality_error(&space.q) < 1e-6);
        for (before, after) in report.rounds {
            assert!(after <= before + 1e-9);
        }
    }

    #[test]
    fn unrelated_spaces_still_return() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = vocab(200, "w");
        let a = EmbeddingMatrix::new(v.clone(), gaussian(&mut rng, v.len(), 8)).unwrap();
        let b = EmbeddingMatrix::new(v.clone(), gaussian(&mut rng, v.len(), 8)).unwrap();
        let cfg = AlignConfig {
            anchors: AnchorPolicy::Identity,
            top_k: 100,
            ..Default::default()
        };
        let (space, _) = align_spaces(&a, &b, &cfg).unwrap();
        assert!(retrieval(&space) < 0.1);
    }

    #[test]
    fn no_identical_strings_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let va = vocab(10, "a");
        let vb = vocab(10, "b");
        let a = EmbeddingMatrix::new(va.clone(), gaussian(&mut rng, va.len(), 4)).unwrap();
        let b = EmbeddingMatrix::new(vb.clone(), gaussian(&mut rng, vb.len(), 4)).unwrap();
        assert!(align_spaces(&a, &b, &AlignConfig::default()).is_err());
    }

    #[test]
    fn nearest_prefers_identical_string_and_lower_id_on_ties() {
        let (src, tgt, _) = planted_spaces(50, 6, 0.0, 7);
        let (space, _) = align_spaces(&src, &tgt, &AlignConfig::default()).unwrap();
        let hit = space.nearest(10);
        assert_eq!(hit.word, 10);
        assert!(hit.distance < 1e-6);

        let v = vocab(2, "t");
        let t = Tensor::from_vec(5, 2, vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 2.0, 0.0]).unwrap();
        let target = EmbeddingMatrix::new(v.clone(), t.clone()).unwrap();
        let space = AlignedSpace::new(Tensor::identity(2), target.clone(), target).unwrap();
        assert_eq!(space.nearest(4).word, 2);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (src, tgt, _) = planted_spaces(30, 4, 0.01, 8);
        let (space, _) = align_spaces(&src, &tgt, &AlignConfig::default()).unwrap();
        let q = save_aligned(&space, dir.path()).unwrap();
        let back = AlignedSpace::load(&q, &src.vocab, &tgt.vocab).unwrap();
        assert!(back.q.max_abs_diff(&space.q) < 1e-12);
        assert_eq!(back.nearest(5), space.nearest(5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn distances_are_bounded_and_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let (src, tgt, r) = planted_spaces(20, 4, 0.5, seed);
            let space = AlignedSpace::new(r.clone(), src.clone(), tgt.clone()).unwrap();
            let mut scaled = src.clone();
            scaled.vectors.scale_assign(scale as Real);
            let scaled_space = AlignedSpace::new(r, scaled, tgt).unwrap();
            for w in 0..src.vocab.len() as TokenId {
                let a = space.nearest(w);
                prop_assert!((0.0..=2.0).contains(&a.distance));
                prop_assert_eq!(a.word, scaled_space.nearest(w).word);
            }
        }
    }
}
