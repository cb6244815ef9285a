//! Layer structs: parameter registration plus a forward that records graph ops.

use rand::Rng;

use crate::error::Result;
use crate::nn::graph::{Graph, NodeId};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::Tensor;

/// Kaiming-uniform fan-in initialization, bound sqrt(6 / fan_in).
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("kaiming shape")
}

/// Fully connected layer, y = x W^T + b.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.register(
            &format!("{name}.weight"),
            kaiming_uniform(&[out_dim, in_dim], in_dim, rng),
            true,
        );
        let b = store.register(&format!("{name}.bias"), Tensor::zeros(&[out_dim]), true);
        Dense {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.fc(x, w, b)
    }
}

/// Convolution over 1..=3 trailing spatial dims.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: Vec<usize>,
}

impl ConvLayer {
    /// `kshape` = [out_channels, in_channels, k...].
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kshape: &[usize],
        stride: usize,
        pad: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in: usize = kshape[1..].iter().product();
        let w = store.register(
            &format!("{name}.weight"),
            kaiming_uniform(kshape, fan_in, rng),
            true,
        );
        let b = store.register(&format!("{name}.bias"), Tensor::zeros(&[kshape[0]]), true);
        ConvLayer {
            w,
            b,
            stride,
            pad: pad.to_vec(),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv(x, w, b, self.stride, &self.pad)
    }
}

/// Learnable linear remap of physical channels onto virtual channels,
/// applied independently at every time step. No bias; the following batch
/// norm supplies the affine shift.
#[derive(Debug, Clone)]
pub struct ChannelMapLayer {
    pub w: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ChannelMapLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.register(
            &format!("{name}.weight"),
            kaiming_uniform(&[out_ch, in_ch], in_ch, rng),
            true,
        );
        ChannelMapLayer { w, in_ch, out_ch }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        g.channel_map(x, w)
    }
}

/// Batch normalization over axis 1, with running statistics for eval mode.
///
/// Running estimates live in the [`ParamStore`] as non-trainable entries so
/// checkpoints carry them.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.register(
            &format!("{name}.gamma"),
            Tensor::filled(&[channels], 1.0),
            true,
        );
        let beta = store.register(&format!("{name}.beta"), Tensor::zeros(&[channels]), true);
        let running_mean = store.register(
            &format!("{name}.running_mean"),
            Tensor::zeros(&[channels]),
            false,
        );
        let running_var = store.register(
            &format!("{name}.running_var"),
            Tensor::filled(&[channels], 1.0),
            false,
        );
        BatchNormLayer {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Training mode uses batch statistics and updates the running estimates;
    /// eval mode normalizes with the frozen running estimates.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let xs = g.value(x).shape().to_vec();
        let ch = self.channels;
        let (mean, inv_std) = if train {
            let batch = xs[0];
            let inner: usize = xs[2..].iter().product();
            let n = (batch * inner) as f64;
            let xd = g.value(x).data();
            let mut mean = vec![0.0; ch];
            let mut var = vec![0.0; ch];
            for bi in 0..batch {
                for c in 0..ch {
                    let base = (bi * ch + c) * inner;
                    mean[c] += xd[base..base + inner].iter().sum::<f64>();
                }
            }
            for m in &mut mean {
                *m /= n;
            }
            for bi in 0..batch {
                for c in 0..ch {
                    let base = (bi * ch + c) * inner;
                    var[c] += xd[base..base + inner]
                        .iter()
                        .map(|v| (v - mean[c]).powi(2))
                        .sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= n;
            }
            // Update running estimates (unbiased variance, PyTorch convention).
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let rm = store.value_mut(self.running_mean).data_mut();
            for (r, m) in rm.iter_mut().zip(&mean) {
                *r = (1.0 - self.momentum) * *r + self.momentum * m;
            }
            let rv = store.value_mut(self.running_var).data_mut();
            for (r, v) in rv.iter_mut().zip(&var) {
                *r = (1.0 - self.momentum) * *r + self.momentum * v * unbias;
            }
            let inv_std = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
            (mean, inv_std)
        } else {
            let mean = store.value(self.running_mean).data().to_vec();
            let inv_std = store
                .value(self.running_var)
                .data()
                .iter()
                .map(|v| 1.0 / (v + self.eps).sqrt())
                .collect();
            (mean, inv_std)
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(x, gamma, beta, (mean, inv_std), train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream;

    #[test]
    fn batchnorm_normalizes_large_batch() {
        // gamma = 1, beta = 0, standard-normal data: output mean ~ 0, var ~ 1.
        let mut store = ParamStore::new();
        let bn = BatchNormLayer::new(&mut store, "bn", 3);
        let mut rng = stream(11, "bn-test", 0);
        let n = 4096;
        let data: Vec<f64> = (0..n * 3)
            .map(|_| {
                // Box-Muller
                let u1: f64 = rng.random_range(1e-12..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[n, 3], data).unwrap());
        let y = bn.forward(&mut g, &mut store, x, true).unwrap();
        let yd = g.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..n).map(|i| yd[i * 3 + c]).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.05, "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn batchnorm_constant_channel_outputs_beta() {
        let mut store = ParamStore::new();
        let bn = BatchNormLayer::new(&mut store, "bn", 2);
        store.value_mut(bn.beta).data_mut().copy_from_slice(&[0.7, -0.3]);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[4, 2], vec![5.0, 9.0].repeat(4)).unwrap());
        let y = bn.forward(&mut g, &mut store, x, true).unwrap();
        let yd = g.value(y).data();
        for i in 0..4 {
            assert!((yd[i * 2] - 0.7).abs() < 1e-9);
            assert!((yd[i * 2 + 1] + 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_eval_is_deterministic_across_calls() {
        let mut store = ParamStore::new();
        let bn = BatchNormLayer::new(&mut store, "bn", 2);
        let x_t = Tensor::from_vec(&[3, 2], vec![1.0, -2.0, 0.5, 4.0, -1.0, 0.25]).unwrap();
        // Prime running stats with one training pass.
        let mut g = Graph::new();
        let x = g.input(x_t.clone());
        bn.forward(&mut g, &mut store, x, true).unwrap();

        let run = |store: &mut ParamStore| {
            let mut g = Graph::new();
            let x = g.input(x_t.clone());
            let y = bn.forward(&mut g, store, x, false).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(&mut store), run(&mut store));
    }
}
