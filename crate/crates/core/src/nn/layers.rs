use rand::Rng;

use super::graph::{BatchStats, Graph, ParamId, ParamStore, Var};
use super::tensor::{Real, Tensor};
use crate::error::Result;

fn fan_in_bound(fan_in: usize) -> Real {
    1.0 / (fan_in.max(1) as Real).sqrt()
}

/// `y = x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = fan_in_bound(in_dim);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(in_dim, out_dim, bound, rng),
        );
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), Tensor::uniform(1, out_dim, bound, rng))
        });
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Option<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let (in_dim, out_dim) = store.value(weight).shape();
        Some(Linear {
            weight,
            bias: store.id(&format!("{name}.bias")),
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Embedding table lookup.
pub fn embedding_lookup(g: &mut Graph, table: ParamId, ids: &[usize]) -> Result<Var> {
    let t = g.param(table);
    g.gather(t, ids)
}

/// Plain mean of each segment of rows.
pub fn mean_pool(g: &mut Graph, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
    g.segment_mean(x, segments, None)
}

/// Weighted mean of each segment of rows.
pub fn weighted_mean_pool(
    g: &mut Graph,
    x: Var,
    segments: &[(usize, usize)],
    weights: &[Real],
) -> Result<Var> {
    g.segment_mean(x, segments, Some(weights))
}

/// Single GRU cell with gate order reset|update|candidate.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = fan_in_bound(hidden);
        GruCell {
            w_input: store.add(
                format!("{name}.w_input"),
                Tensor::uniform(input_dim, 3 * hidden, bound, rng),
            ),
            w_hidden: store.add(
                format!("{name}.w_hidden"),
                Tensor::uniform(hidden, 3 * hidden, bound, rng),
            ),
            b_input: store.add(
                format!("{name}.b_input"),
                Tensor::uniform(1, 3 * hidden, bound, rng),
            ),
            b_hidden: store.add(
                format!("{name}.b_hidden"),
                Tensor::uniform(1, 3 * hidden, bound, rng),
            ),
            input_dim,
            hidden,
        }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Option<Self> {
        let w_input = store.id(&format!("{name}.w_input"))?;
        let w_hidden = store.id(&format!("{name}.w_hidden"))?;
        let (input_dim, three_h) = store.value(w_input).shape();
        Some(GruCell {
            w_input,
            w_hidden,
            b_input: store.id(&format!("{name}.b_input"))?,
            b_hidden: store.id(&format!("{name}.b_hidden"))?,
            input_dim,
            hidden: three_h / 3,
        })
    }

    /// Input projection `x·W + b`; can be applied to many time steps at once.
    pub fn project_input(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w_input);
        let b = g.param(self.b_input);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// One step given an already projected input.
    pub fn step_projected(&self, g: &mut Graph, gx: Var, h: Var, mask: Option<&[Real]>) -> Result<Var> {
        let w = g.param(self.w_hidden);
        let b = g.param(self.b_hidden);
        let gh = g.matmul(h, w)?;
        let gh = g.add_row(gh, b)?;
        g.gru_update(gx, gh, h, mask)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, h: Var, mask: Option<&[Real]>) -> Result<Var> {
        let gx = self.project_input(g, x)?;
        self.step_projected(g, gx, h, mask)
    }
}

/// Stacked GRU cells; the output of layer `l` is the input of layer `l + 1`.
#[derive(Clone, Debug)]
pub struct GruStack {
    pub layers: Vec<GruCell>,
}

impl GruStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let d = if l == 0 { input_dim } else { hidden };
                GruCell::new(store, &format!("{name}.{l}"), d, hidden, rng)
            })
            .collect();
        GruStack { layers }
    }

    pub fn from_store(store: &ParamStore, name: &str, num_layers: usize) -> Option<Self> {
        let layers = (0..num_layers)
            .map(|l| GruCell::from_store(store, &format!("{name}.{l}")))
            .collect::<Option<Vec<_>>>()?;
        Some(GruStack { layers })
    }

    /// Advances every layer by one step. Returns the new per-layer states.
    pub fn step(&self, g: &mut Graph, x: Var, states: &[Var], mask: Option<&[Real]>) -> Result<Vec<Var>> {
        let mut input = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for (cell, &h) in self.layers.iter().zip(states) {
            let h2 = cell.forward(g, input, h, mask)?;
            out.push(h2);
            input = h2;
        }
        Ok(out)
    }
}

/// Batch normalization with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<Real>,
    pub running_var: Vec<Real>,
    pub momentum: Real,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, train: bool) -> Result<(Var, Option<BatchStats>)> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        if train {
            let (y, stats) = g.batch_norm_train(x, gamma, beta)?;
            Ok((y, Some(stats)))
        } else {
            let y = g.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var)?;
            Ok((y, None))
        }
    }

    /// Exponential moving average of batch statistics (unbiased variance).
    pub fn update(&mut self, stats: &BatchStats, batch_rows: usize) {
        let m = self.momentum;
        let correction = if batch_rows > 1 {
            batch_rows as Real / (batch_rows - 1) as Real
        } else {
            1.0
        };
        for (r, s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * s * correction;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_cell_with_zero_weights_and_state_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
        for id in [cell.w_input, cell.w_hidden, cell.b_input, cell.b_hidden] {
            store.get_mut(id).value.fill(0.0);
        }
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::filled(2, 3, 0.7));
        let h = g.input(Tensor::zeros(2, 4));
        let h2 = cell.forward(&mut g, x, h, None).unwrap();
        assert!(g.value(h2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_rows_keep_their_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = GruCell::new(&mut store, "gru", 2, 3, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::filled(2, 2, 0.5));
        let h0 = Tensor::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let h = g.input(h0.clone());
        let h2 = cell.forward(&mut g, x, h, Some(&[1.0, 0.0])).unwrap();
        assert_eq!(g.value(h2).row(1), h0.row(1));
        assert_ne!(g.value(h2).row(0), h0.row(0));
    }

    #[test]
    fn batch_norm_inference_is_batch_independent() {
        let mut store = ParamStore::new();
        let mut bn = BatchNorm::new(&mut store, "bn", 2);
        bn.running_mean = vec![0.5, -1.0];
        bn.running_var = vec![4.0, 0.25];
        let x1 = Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let x3 = Tensor::from_vec(3, 2, vec![1.0, 2.0, 7.0, 8.0, -3.0, 0.0]).unwrap();
        let mut g = Graph::new(&store);
        let a = g.input(x1);
        let b = g.input(x3);
        let (ya, _) = bn.forward(&mut g, a, false).unwrap();
        let (yb, _) = bn.forward(&mut g, b, false).unwrap();
        assert_eq!(g.value(ya).row(0), g.value(yb).row(0));
    }
}
