//! Dense-tensor reverse-mode autodiff and the layer/optimizer set used by the
//! decoder models.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, NodeId};
pub use layers::{kaiming_uniform, BatchNormLayer, ChannelMapLayer, ConvLayer, Dense};
pub use optim::{Adam, TrainConfig};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;

/// Softmax over the last axis of a `[B, K]` logits tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let shape = logits.shape().to_vec();
    let k = *shape.last().expect("softmax_rows wants rank >= 1");
    let mut out = logits.clone();
    let data = out.data_mut();
    for row in data.chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    out
}
