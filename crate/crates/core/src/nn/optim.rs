//! Adam optimizer and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied at every epoch boundary.
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    /// L2 penalty weight added to each parameter gradient.
    #[serde(default)]
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop when validation balanced accuracy has not improved for this many
    /// epochs.
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    /// Halve the learning rate when validation loss has not improved for this
    /// many epochs.
    #[serde(default = "default_plateau")]
    pub lr_plateau_patience: usize,
    pub rng_seed: u64,
}

fn default_lr_decay() -> f64 {
    1.0
}
fn default_patience() -> usize {
    10
}
fn default_plateau() -> usize {
    3
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            lr_decay: 1.0,
            l2_lambda: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            early_stop_patience: 10,
            lr_plateau_patience: 3,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.early_stop_patience == 0
            || self.l2_lambda < 0.0
        {
            return Err(Error::invalid(
                "train config wants positive learning_rate, batch_size, max_epochs, early_stop_patience and l2_lambda >= 0",
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments. The L2 term `lambda * w` is added to the
/// raw gradient before the moment updates.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, learning_rate: f64, l2_lambda: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for idx in 0..store.len() {
            let entry = store.entry_mut(idx);
            if !entry.trainable {
                continue;
            }
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let grad = entry.grad.data();
            for ((val, &gr), (mi, vi)) in entry
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = gr + l2_lambda * *val;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *val -= learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: Vec<f64>) -> (ParamStore, crate::nn::params::ParamId) {
        let mut store = ParamStore::new();
        let id = store.register(
            "w",
            Tensor::from_vec(&[value.len()], value).unwrap(),
            true,
        );
        (store, id)
    }

    #[test]
    fn constant_gradient_moves_parameter_opposite_sign() {
        let (mut store, id) = one_param(vec![0.0]);
        let mut adam = Adam::new(&store);
        for _ in 0..100 {
            store.zero_grads();
            store
                .accumulate_grad(id, &Tensor::from_vec(&[1], vec![2.0]).unwrap())
                .unwrap();
            adam.step(&mut store, 0.01, 0.0);
        }
        assert!(store.value(id).data()[0] < -0.5);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (mut store, id) = one_param(vec![1.5, -0.5]);
        let before = store.value(id).clone();
        let mut adam = Adam::new(&store);
        store
            .accumulate_grad(id, &Tensor::from_vec(&[2], vec![1.0, -3.0]).unwrap())
            .unwrap();
        adam.step(&mut store, 0.0, 0.1);
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn pure_l2_decays_magnitude_monotonically() {
        // lambda = 0.1, zero data gradient: |w| shrinks toward 0.
        let (mut store, id) = one_param(vec![1.0]);
        let mut adam = Adam::new(&store);
        let mut prev = 1.0f64;
        for _ in 0..50 {
            store.zero_grads();
            adam.step(&mut store, 0.01, 0.1);
            let w = store.value(id).data()[0];
            assert!(w.abs() <= prev.abs() + 1e-12, "|w| grew: {w} vs {prev}");
            prev = w;
        }
        assert!(prev.abs() < 0.6);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        // f(w) = 2(w0 - 1)^2 + 0.5(w1 + 2)^2, minimum at (1, -2).
        let (mut store, id) = one_param(vec![0.0, 0.0]);
        let mut adam = Adam::new(&store);
        let mut steps = 0;
        for _ in 0..5000 {
            steps += 1;
            let w = store.value(id).data().to_vec();
            let grad = vec![4.0 * (w[0] - 1.0), 1.0 * (w[1] + 2.0)];
            store.zero_grads();
            store
                .accumulate_grad(id, &Tensor::from_vec(&[2], grad).unwrap())
                .unwrap();
            adam.step(&mut store, 0.05, 0.0);
            let w = store.value(id).data();
            if (w[0] - 1.0).abs() < 1e-6 && (w[1] + 2.0).abs() < 1e-6 {
                break;
            }
        }
        let w = store.value(id).data();
        assert!(
            (w[0] - 1.0).abs() < 1e-6 && (w[1] + 2.0).abs() < 1e-6,
            "did not converge in {steps} steps: {w:?}"
        );
    }
}
