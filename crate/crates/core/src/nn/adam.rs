use super::graph::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LR: Real = 5e-4;

/// Adam with bias correction. Frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    /// Allocates moment buffers shaped like every parameter of `store`.
    pub fn new(store: &ParamStore, lr: Real) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Optimizer with no buffers; [`Adam::step`] fails until [`Adam::init`] is called.
    pub fn uninitialized(lr: Real) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn init(&mut self, store: &ParamStore) {
        *self = Adam {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            ..Adam::new(store, self.lr)
        };
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "adam buffers cover {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    fn store_with(values: Vec<Real>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::row_vector(values));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = store_with(vec![1.0, -2.0, 3.0]);
        let before = s.iter().next().unwrap().1.value.clone();
        let mut adam = Adam::new(&s, DEFAULT_LR);
        adam.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value, before);
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr_times_sign() {
        // At t = 1: m̂ = g, v̂ = g², so the update is lr·g/(|g| + ε).
        let mut s = store_with(vec![0.0, 0.0, 0.0]);
        let id = s.id("x").unwrap();
        s.get_mut(id).grad = Tensor::row_vector(vec![0.3, -2.0, 1e-3]);
        let mut adam = Adam::new(&s, 0.01);
        adam.step(&mut s).unwrap();
        let v = s.value(id).data();
        let expected = [-0.01 * 0.3 / (0.3 + 1e-8), 0.01 * 2.0 / (2.0 + 1e-8), -0.01 * 1e-3 / (1e-3 + 1e-8)];
        for (a, e) in v.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn converges_on_a_convex_quadratic() {
        let mut s = store_with(vec![1.0, -0.5, 0.25, 2.0]);
        let id = s.id("x").unwrap();
        let mut adam = Adam::new(&s, 0.05);
        let mut grad_norm = Real::INFINITY;
        for _ in 0..200 {
            s.zero_grad();
            let grads = {
                let mut g = Graph::new(&s);
                let x = g.param(id);
                let sq = g.mul(x, x).unwrap();
                let loss = g.sum(sq).unwrap();
                g.backward(loss).unwrap()
            };
            s.accumulate(&grads);
            adam.step(&mut s).unwrap();
            grad_norm = s.value(id).norm() * 2.0;
        }
        assert!(grad_norm < 1e-3, "gradient norm {grad_norm}");
    }

    #[test]
    fn uninitialized_buffers_are_an_error() {
        let mut s = store_with(vec![1.0]);
        let mut adam = Adam::uninitialized(DEFAULT_LR);
        assert!(adam.step(&mut s).is_err());
        adam.init(&s);
        assert!(adam.step(&mut s).is_ok());
    }
}
