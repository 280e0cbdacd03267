//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, records every operation
//! applied during a forward pass and, on [`Graph::backward`], walks the tape in
//! reverse creation order. Node indices are assigned in creation order, so the
//! tape is already topologically sorted. Gradients for parameters are returned
//! as a [`Gradients`] value that the caller accumulates into the store.

use std::collections::HashMap;

use super::tensor::{gemm, sigmoid, softmax_in_place, Real, Tensor, Trans};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Owns every trainable tensor of a model together with its gradient accumulator.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let (r, c) = value.shape();
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: Tensor::zeros(r, c),
            trainable: true,
        });
        self.by_name.insert(name, id);
        id
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = self.add(name, value);
        self.params[id.0].trainable = false;
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds a backward pass' gradients into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.grads {
            self.params[id.0].grad.add_assign(g);
        }
    }

    /// Rescales accumulated gradients so their global L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: Real) -> Real {
        let norm = self
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<Real>())
            .sum::<Real>()
            .sqrt();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in self.params.iter_mut().filter(|p| p.trainable) {
                p.grad.scale_assign(s);
            }
        }
        norm
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(p, g)| (*p, g))
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Batch statistics computed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, Real),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gather { table: Var, ids: Vec<usize> },
    SegmentMean { x: Var, segments: Vec<(usize, usize)>, weights: Vec<Real>, norms: Vec<Real> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<Real>, train: bool },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    InterleaveRows(Vec<Var>),
    Gru(Box<GruTape>),
    Attention { query: Var, keys: Var, values: Var, lengths: Vec<usize>, alpha: Tensor },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<Real>, probs: Tensor },
    Bce { pred: Var, targets: Vec<Real>, weights: Vec<Real> },
    ColMean(Var),
    Sum(Var),
}

struct GruTape {
    gx: Var,
    gh: Var,
    h: Var,
    mask: Option<Vec<Real>>,
    r: Tensor,
    z: Tensor,
    n: Tensor,
    gh_n: Tensor,
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

const BCE_EPS: Real = 1e-12;
const BN_EPS: Real = 1e-5;

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    grad_enabled: bool,
    strict: bool,
}

impl<'s> Graph<'s> {
    /// A graph that records operations for backpropagation.
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grad_enabled: true,
            strict: cfg!(any(test, debug_assertions)),
        }
    }

    /// A graph that only evaluates values; `backward` is unavailable.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new(store)
        }
    }

    /// Enables or disables the non-finite check after every op.
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if self.strict && !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = self.grad_enabled && op_requires_grad(&op, &self.nodes);
        let op = if requires_grad { op } else { Op::Input };
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let requires_grad = self.grad_enabled && self.store.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (kb, n) = self.shape(b);
        if k != kb {
            return Err(Error::Shape(format!("matmul {m}x{k} by {kb}x{n}")));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(Trans::No, Trans::No, self.value(a), self.value(b), 0.0, &mut out);
        self.push(out, Op::MatMul { a, b, b_transposed: false }, "matmul")
    }

    /// `a · bᵀ`, used for output layers tied to an embedding table.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, kb) = self.shape(b);
        if k != kb {
            return Err(Error::Shape(format!("matmul_bt {m}x{k} by ({n}x{kb})ᵀ")));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(Trans::No, Trans::Yes, self.value(a), self.value(b), 0.0, &mut out);
        self.push(out, Op::MatMul { a, b, b_transposed: true }, "matmul_bt")
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{what} {sa:?} vs {sb:?}")));
        }
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(sa.0, sa.1, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds a `1 x n` bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(bias) != (1, c) {
            return Err(Error::Shape(format!(
                "bias {:?} for {r}x{c} input",
                self.shape(bias)
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..r {
            for (o, bb) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow { x, bias }, "add_row")
    }

    pub fn scale(&mut self, x: Var, s: Real) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), "scale")
    }

    /// Adds a constant tensor (no gradient flows into the constant).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::Shape(format!(
                "add_const {:?} vs {:?}",
                self.shape(x),
                c.shape()
            )));
        }
        let mut out = self.value(x).clone();
        out.add_assign(c);
        self.push(out, Op::AddConst(x), "add_const")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(Real::tanh);
        self.push(out, Op::Tanh(x), "tanh")
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.shape();
        let mut out = Tensor::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Shape(format!("row {id} of a {v}-row table")));
            }
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, "gather")
    }

    /// Weighted mean over contiguous row segments: output row `b` is
    /// `Σ w_i x_i / Σ w_i` over `segments[b] = (start, len)`. Segments whose
    /// weights sum to zero produce a zero row.
    pub fn segment_mean(
        &mut self,
        x: Var,
        segments: &[(usize, usize)],
        weights: Option<&[Real]>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let weights: Vec<Real> = match weights {
            Some(w) if w.len() == n => w.to_vec(),
            Some(w) => {
                return Err(Error::Shape(format!("{} weights for {n} rows", w.len())));
            }
            None => vec![1.0; n],
        };
        let mut out = Tensor::zeros(segments.len(), d);
        let mut norms = Vec::with_capacity(segments.len());
        for (b, &(start, len)) in segments.iter().enumerate() {
            if start + len > n {
                return Err(Error::Shape(format!("segment {start}+{len} beyond {n} rows")));
            }
            let total: Real = weights[start..start + len].iter().sum();
            norms.push(total);
            if total == 0.0 {
                continue;
            }
            let row = out.row_mut(b);
            for i in start..start + len {
                let w = weights[i] / total;
                for (o, v) in row.iter_mut().zip(xv.row(i)) {
                    *o += w * v;
                }
            }
        }
        self.push(
            out,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
                weights,
                norms,
            },
            "segment_mean",
        )
    }

    /// Training-mode batch normalization over rows. Returns the normalized
    /// output and the batch statistics (for running-average updates).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        if n == 0 {
            return Err(Error::Empty("batch_norm over zero rows".into()));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as Real);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as Real);
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let y = self.bn_apply(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((y, BatchStats { mean, var }))
    }

    /// Inference-mode batch normalization: a fixed affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[Real],
        running_var: &[Real],
    ) -> Result<Var> {
        let inv_std: Vec<Real> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, &inv_std, false)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[Real],
        inv_std: &[Real],
        train: bool,
    ) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(gamma) != (1, d) || self.shape(beta) != (1, d) || mean.len() != d {
            return Err(Error::Shape(format!("batch_norm over {d} features")));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let h = (xv.get(i, j) - mean[j]) * inv_std[j];
                xhat.set(i, j, h);
                out.set(i, j, g[j] * h + b[j]);
            }
        }
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                train,
            },
            "batch_norm",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Shape("concat_cols row counts differ".into()));
        }
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            for i in 0..rows {
                out.row_mut(i)[off..off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::Shape(format!("slice {start}+{len} of {c} columns")));
        }
        let v = self.value(x);
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&v.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start }, "slice_cols")
    }

    /// Stacks `T` tensors of shape `B x d` into `(B*T) x d`, with row
    /// `b*T + t` taken from `parts[t]` row `b`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let t_len = parts.len();
        let (b, d) = self.shape(parts[0]);
        if parts.iter().any(|&p| self.shape(p) != (b, d)) {
            return Err(Error::Shape("interleave_rows shapes differ".into()));
        }
        let mut out = Tensor::zeros(b * t_len, d);
        for (t, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            for i in 0..b {
                out.row_mut(i * t_len + t).copy_from_slice(v.row(i));
            }
        }
        self.push(out, Op::InterleaveRows(parts.to_vec()), "interleave_rows")
    }

    /// GRU state update from precomputed input and hidden projections
    /// (`gx = x·W + b`, `gh = h·U + c`, gate order reset|update|candidate):
    ///
    /// `r = σ(gx_r + gh_r)`, `z = σ(gx_z + gh_z)`, `n = tanh(gx_n + r ⊙ gh_n)`,
    /// `h' = (1 - z) ⊙ n + z ⊙ h`.
    ///
    /// Rows with `mask = 0` keep their previous state.
    pub fn gru_update(&mut self, gx: Var, gh: Var, h: Var, mask: Option<&[Real]>) -> Result<Var> {
        let (b, hd) = self.shape(h);
        if self.shape(gx) != (b, 3 * hd) || self.shape(gh) != (b, 3 * hd) {
            return Err(Error::Shape(format!(
                "gru gates {:?}/{:?} for state {b}x{hd}",
                self.shape(gx),
                self.shape(gh)
            )));
        }
        if mask.is_some_and(|m| m.len() != b) {
            return Err(Error::Shape("gru mask length".into()));
        }
        let gxv = self.value(gx);
        let ghv = self.value(gh);
        let hv = self.value(h);
        let mut r = Tensor::zeros(b, hd);
        let mut z = Tensor::zeros(b, hd);
        let mut n = Tensor::zeros(b, hd);
        let mut gh_n = Tensor::zeros(b, hd);
        let mut out = Tensor::zeros(b, hd);
        for i in 0..b {
            let m = mask.map_or(1.0, |m| m[i]);
            let (gxr, ghr) = (gxv.row(i), ghv.row(i));
            for j in 0..hd {
                let rj = sigmoid(gxr[j] + ghr[j]);
                let zj = sigmoid(gxr[hd + j] + ghr[hd + j]);
                let ghn = ghr[2 * hd + j];
                let nj = (gxr[2 * hd + j] + rj * ghn).tanh();
                let hp = hv.get(i, j);
                let hn = (1.0 - zj) * nj + zj * hp;
                r.set(i, j, rj);
                z.set(i, j, zj);
                n.set(i, j, nj);
                gh_n.set(i, j, ghn);
                out.set(i, j, m * hn + (1.0 - m) * hp);
            }
        }
        let tape = GruTape {
            gx,
            gh,
            h,
            mask: mask.map(<[Real]>::to_vec),
            r,
            z,
            n,
            gh_n,
        };
        self.push(out, Op::Gru(Box::new(tape)), "gru_update")
    }

    /// Dot-product attention. `query` is `B x h`; `keys` is `(B*T) x h` and
    /// `values` is `(B*T) x d` laid out as in [`Graph::interleave_rows`].
    /// Only the first `lengths[b]` positions of row `b` are attended.
    /// Returns the `B x d` context and the `B x T` attention weights.
    pub fn attention(
        &mut self,
        query: Var,
        keys: Var,
        values: Var,
        lengths: &[usize],
    ) -> Result<(Var, Tensor)> {
        let (b, h) = self.shape(query);
        let (bt, hk) = self.shape(keys);
        let (bt2, d) = self.shape(values);
        if hk != h || bt != bt2 || b == 0 || bt % b != 0 || lengths.len() != b {
            return Err(Error::Shape(format!(
                "attention query {b}x{h}, keys {bt}x{hk}, values {bt2}x{d}"
            )));
        }
        let t_len = bt / b;
        let (qv, kv, vv) = (self.value(query), self.value(keys), self.value(values));
        let mut alpha = Tensor::zeros(b, t_len);
        let mut ctx = Tensor::zeros(b, d);
        for i in 0..b {
            let len = lengths[i].min(t_len);
            if len == 0 {
                continue;
            }
            let q = qv.row(i);
            let scores = &mut alpha.row_mut(i)[..len];
            for (t, s) in scores.iter_mut().enumerate() {
                *s = dot(q, kv.row(i * t_len + t));
            }
            softmax_in_place(scores);
            let weights = alpha.row(i)[..len].to_vec();
            let c = ctx.row_mut(i);
            for (t, w) in weights.iter().enumerate() {
                for (o, v) in c.iter_mut().zip(vv.row(i * t_len + t)) {
                    *o += w * v;
                }
            }
        }
        let var = self.push(
            ctx,
            Op::Attention {
                query,
                keys,
                values,
                lengths: lengths.to_vec(),
                alpha: alpha.clone(),
            },
            "attention",
        )?;
        Ok((var, alpha))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::Softmax(x), "softmax")
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[targets_i])`, a `1 x 1` result.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[Real]) -> Result<Var> {
        let (n, v) = self.shape(logits);
        if targets.len() != n || weights.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy over {n} rows with {} targets / {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let mut probs = self.value(logits).clone();
        let mut loss = 0.0;
        for i in 0..n {
            let t = targets[i];
            if t >= v {
                return Err(Error::Shape(format!("target {t} outside {v} classes")));
            }
            let row = probs.row_mut(i);
            let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<Real>().ln();
            loss += weights[i] * (lse - row[t]);
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// `Σ_j w_j · BCE(pred_j, target_j)` over all entries of `pred`, with
    /// predictions clamped to `[ε, 1−ε]` inside the logarithms.
    pub fn binary_cross_entropy(&mut self, pred: Var, targets: &[Real], weights: &[Real]) -> Result<Var> {
        let p = self.value(pred).data();
        if targets.len() != p.len() || weights.len() != p.len() {
            return Err(Error::Shape(format!(
                "binary_cross_entropy over {} entries with {} targets / {} weights",
                p.len(),
                targets.len(),
                weights.len()
            )));
        }
        let mut loss = 0.0;
        for ((&pj, &t), &w) in p.iter().zip(targets).zip(weights) {
            if w == 0.0 {
                continue;
            }
            let pc = pj.clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= w * (t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
        }
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            "binary_cross_entropy",
        )
    }

    /// Mean over rows: `n x d -> 1 x d`.
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (n, d) = v.shape();
        if n == 0 {
            return Err(Error::Empty("col_mean over zero rows".into()));
        }
        let mut out = Tensor::zeros(1, d);
        for i in 0..n {
            for (o, x) in out.data_mut().iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        out.scale_assign(1.0 / n as Real);
        self.push(out, Op::ColMean(x), "col_mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::InvalidArgument(
                "backward on an inference graph".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Param(id) => out.grads.push((*id, g)),
                op => self.backprop(op, Var(idx), &g, &mut grads),
            }
        }
        out.grads.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let (r, c) = self.shape(v);
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
        f(slot);
    }

    fn backprop(&self, op: &Op, me: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, b_transposed } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if *b_transposed {
                    // c = a·bᵀ: da = g·b, db = gᵀ·a
                    self.acc(grads, *a, |ga| gemm(Trans::No, Trans::No, g, bv, 1.0, ga));
                    self.acc(grads, *b, |gb| gemm(Trans::Yes, Trans::No, g, av, 1.0, gb));
                } else {
                    self.acc(grads, *a, |ga| gemm(Trans::No, Trans::Yes, g, bv, 1.0, ga));
                    self.acc(grads, *b, |gb| gemm(Trans::Yes, Trans::No, av, g, 1.0, gb));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| {
                    for (x, y) in gb.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for ((x, gy), bb) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *x += gy * bb;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((x, gy), aa) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *x += gy * aa;
                    }
                });
            }
            Op::AddRow { x, bias } => {
                self.acc(grads, *x, |gx| gx.add_assign(g));
                self.acc(grads, *bias, |gb| {
                    for i in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, |gx| {
                for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                    *o += s * v;
                }
            }),
            Op::AddConst(x) => self.acc(grads, *x, |gx| gx.add_assign(g)),
            Op::Sigmoid(x) => {
                let y = self.value(me);
                self.acc(grads, *x, |gx| {
                    for ((o, gy), yy) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gy * yy * (1.0 - yy);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = self.value(me);
                self.acc(grads, *x, |gx| {
                    for ((o, gy), yy) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gy * (1.0 - yy * yy);
                    }
                });
            }
            Op::Gather { table, ids } => self.acc(grads, *table, |gt| {
                for (i, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }),
            Op::SegmentMean {
                x,
                segments,
                weights,
                norms,
            } => self.acc(grads, *x, |gx| {
                for (b, &(start, len)) in segments.iter().enumerate() {
                    if norms[b] == 0.0 {
                        continue;
                    }
                    for i in start..start + len {
                        let w = weights[i] / norms[b];
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(b)) {
                            *o += w * v;
                        }
                    }
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, d) = xhat.shape();
                let gv = self.value(*gamma).data();
                self.acc(grads, *beta, |gb| {
                    for i in 0..n {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                });
                self.acc(grads, *gamma, |gg| {
                    for i in 0..n {
                        for j in 0..d {
                            gg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                });
                self.acc(grads, *x, |gx| {
                    if *train {
                        let nf = n as Real;
                        for j in 0..d {
                            let mut sum_dh = 0.0;
                            let mut sum_dh_h = 0.0;
                            for i in 0..n {
                                let dh = g.get(i, j) * gv[j];
                                sum_dh += dh;
                                sum_dh_h += dh * xhat.get(i, j);
                            }
                            for i in 0..n {
                                let dh = g.get(i, j) * gv[j];
                                let v = inv_std[j] / nf
                                    * (nf * dh - sum_dh - xhat.get(i, j) * sum_dh_h);
                                gx.data_mut()[i * d + j] += v;
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..d {
                                gx.data_mut()[i * d + j] += g.get(i, j) * gv[j] * inv_std[j];
                            }
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    self.acc(grads, p, |gp| {
                        for i in 0..g.rows() {
                            for (o, v) in gp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + c]) {
                                *o += v;
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols { x, start } => self.acc(grads, *x, |gx| {
                let len = g.cols();
                for i in 0..g.rows() {
                    for (o, v) in gx.row_mut(i)[*start..*start + len].iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }),
            Op::InterleaveRows(parts) => {
                let t_len = parts.len();
                for (t, &p) in parts.iter().enumerate() {
                    self.acc(grads, p, |gp| {
                        for i in 0..gp.rows() {
                            for (o, v) in gp.row_mut(i).iter_mut().zip(g.row(i * t_len + t)) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::Gru(tape) => self.backprop_gru(tape, g, grads),
            Op::Attention {
                query,
                keys,
                values,
                lengths,
                alpha,
            } => self.backprop_attention(*query, *keys, *values, lengths, alpha, g, grads),
            Op::Softmax(x) => {
                let y = self.value(me);
                self.acc(grads, *x, |gx| {
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let s: Real = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yy), gg) in gx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o += yy * (gg - s);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let up = g.item();
                self.acc(grads, *logits, |gl| {
                    for i in 0..probs.rows() {
                        let w = weights[i] * up;
                        if w == 0.0 {
                            continue;
                        }
                        for (o, p) in gl.row_mut(i).iter_mut().zip(probs.row(i)) {
                            *o += w * p;
                        }
                        gl.row_mut(i)[targets[i]] -= w;
                    }
                });
            }
            Op::Bce {
                pred,
                targets,
                weights,
            } => {
                let up = g.item();
                let p = self.value(*pred).data();
                self.acc(grads, *pred, |gp| {
                    for (j, o) in gp.data_mut().iter_mut().enumerate() {
                        if weights[j] == 0.0 {
                            continue;
                        }
                        let pc = p[j].clamp(BCE_EPS, 1.0 - BCE_EPS);
                        let t = targets[j];
                        *o += up * weights[j] * (-t / pc + (1.0 - t) / (1.0 - pc));
                    }
                });
            }
            Op::ColMean(x) => self.acc(grads, *x, |gx| {
                let n = gx.rows() as Real;
                for i in 0..gx.rows() {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.data()) {
                        *o += v / n;
                    }
                }
            }),
            Op::Sum(x) => {
                let up = g.item();
                self.acc(grads, *x, |gx| gx.data_mut().iter_mut().for_each(|o| *o += up));
            }
        }
    }

    fn backprop_gru(&self, t: &GruTape, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (b, hd) = t.r.shape();
        let hv = self.value(t.h);
        let mut dgx = Tensor::zeros(b, 3 * hd);
        let mut dh = Tensor::zeros(b, hd);
        for i in 0..b {
            let m = t.mask.as_ref().map_or(1.0, |m| m[i]);
            for j in 0..hd {
                let go = g.get(i, j);
                let (r, z, n, ghn) = (t.r.get(i, j), t.z.get(i, j), t.n.get(i, j), t.gh_n.get(i, j));
                let dhn = m * go;
                let dz = dhn * (hv.get(i, j) - n);
                let dn = dhn * (1.0 - z);
                let dan = dn * (1.0 - n * n);
                let dr = dan * ghn;
                let dar = dr * r * (1.0 - r);
                let daz = dz * z * (1.0 - z);
                dgx.set(i, j, dar);
                dgx.set(i, hd + j, daz);
                dgx.set(i, 2 * hd + j, dan);
                dh.set(i, j, (1.0 - m) * go + dhn * z);
            }
        }
        let mut dgh = dgx.clone();
        for i in 0..b {
            for j in 0..hd {
                let v = dgh.get(i, 2 * hd + j) * t.r.get(i, j);
                dgh.set(i, 2 * hd + j, v);
            }
        }
        self.acc(grads, t.gx, |o| o.add_assign(&dgx));
        self.acc(grads, t.gh, |o| o.add_assign(&dgh));
        self.acc(grads, t.h, |o| o.add_assign(&dh));
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        query: Var,
        keys: Var,
        values: Var,
        lengths: &[usize],
        alpha: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(query), self.value(keys), self.value(values));
        let (b, h) = qv.shape();
        let t_len = alpha.cols();
        let d = vv.cols();
        let mut dq = Tensor::zeros(b, h);
        let mut dk = Tensor::zeros(b * t_len, h);
        let mut dv = Tensor::zeros(b * t_len, d);
        for i in 0..b {
            let len = lengths[i].min(t_len);
            if len == 0 {
                continue;
            }
            let gc = g.row(i);
            let a = &alpha.row(i)[..len];
            let da: Vec<Real> = (0..len).map(|t| dot(gc, vv.row(i * t_len + t))).collect();
            let s: Real = a.iter().zip(&da).map(|(x, y)| x * y).sum();
            for t in 0..len {
                let row = i * t_len + t;
                for (o, c) in dv.row_mut(row).iter_mut().zip(gc) {
                    *o += a[t] * c;
                }
                let ds = a[t] * (da[t] - s);
                for (o, k) in dq.row_mut(i).iter_mut().zip(kv.row(row)) {
                    *o += ds * k;
                }
                for (o, q) in dk.row_mut(row).iter_mut().zip(qv.row(i)) {
                    *o += ds * q;
                }
            }
        }
        self.acc(grads, query, |o| o.add_assign(&dq));
        self.acc(grads, keys, |o| o.add_assign(&dk));
        self.acc(grads, values, |o| o.add_assign(&dv));
    }
}

#[inline]
fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn op_requires_grad(op: &Op, nodes: &[Node]) -> bool {
    let rg = |v: &Var| nodes[v.0].requires_grad;
    match op {
        Op::Input => false,
        Op::Param(_) => true,
        Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => rg(a) || rg(b),
        Op::AddRow { x, bias } => rg(x) || rg(bias),
        Op::Scale(x, _)
        | Op::AddConst(x)
        | Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::Softmax(x)
        | Op::ColMean(x)
        | Op::Sum(x)
        | Op::SliceCols { x, .. } => rg(x),
        Op::Gather { table, .. } => rg(table),
        Op::SegmentMean { x, .. } => rg(x),
        Op::BatchNorm { x, gamma, beta, .. } => rg(x) || rg(gamma) || rg(beta),
        Op::ConcatCols(parts) | Op::InterleaveRows(parts) => parts.iter().any(rg),
        Op::Gru(t) => rg(&t.gx) || rg(&t.gh) || rg(&t.h),
        Op::Attention {
            query,
            keys,
            values,
            ..
        } => rg(query) || rg(keys) || rg(values),
        Op::CrossEntropy { logits, .. } => rg(logits),
        Op::Bce { pred, .. } => rg(pred),
    }
}
