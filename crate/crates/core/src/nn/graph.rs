//! Reverse-mode autodiff over a flat tape of tensor operations.
//!
//! A [`Graph`] records one forward pass. Each op validates shapes, computes
//! its value eagerly, and pushes a node carrying whatever the backward pass
//! needs. [`Graph::backward`] walks the tape in reverse and accumulates
//! parameter gradients into the [`ParamStore`].

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param {
        pid: ParamId,
    },
    /// Per-timestep linear channel remap: x[B,C,T] · w[K,C] -> y[B,K,T].
    ChannelMap {
        x: NodeId,
        w: NodeId,
    },
    /// Cross-correlation over the trailing spatial dims (rank 1..=3).
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: Vec<usize>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// (mean, inv_std) actually used for normalization.
        stats: (Vec<f64>, Vec<f64>),
        /// Batch statistics were used (training mode); eval mode treats the
        /// normalization constants as fixed.
        batch_stats: bool,
    },
    Relu {
        x: NodeId,
    },
    AvgPoolLast {
        x: NodeId,
    },
    ConcatLast {
        a: NodeId,
        b: NodeId,
    },
    Fc {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    SumAll {
        x: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        value.debug_assert_finite("forward op output");
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> NodeId {
        self.push(store.value(pid).clone(), Op::Param { pid })
    }

    pub fn channel_map(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 3 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::shape(format!(
                "channel_map wants x[B,C,T] and w[K,C], got {xs:?} and {ws:?}"
            )));
        }
        let (batch, chans, time) = (xs[0], xs[1], xs[2]);
        let virt = ws[0];
        let mut out = Tensor::zeros(&[batch, virt, time]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let od = out.data_mut();
            for bi in 0..batch {
                for k in 0..virt {
                    let orow = &mut od[(bi * virt + k) * time..(bi * virt + k + 1) * time];
                    for c in 0..chans {
                        let wv = wd[k * chans + c];
                        let xrow = &xd[(bi * chans + c) * time..(bi * chans + c + 1) * time];
                        axpy(orow, xrow, wv);
                    }
                }
            }
        }
        Ok(self.push(out, Op::ChannelMap { x, w }))
    }

    /// N-d cross-correlation, rank inferred from the kernel: x[B,Cin,S...],
    /// w[Cout,Cin,K...], b[Cout] -> y[B,Cout,O...] with
    /// O_i = (S_i + 2*pad_i - K_i) / stride + 1.
    pub fn conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: &[usize],
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        let rank = ws.len().saturating_sub(2);
        if !(1..=3).contains(&rank) || xs.len() != ws.len() {
            return Err(Error::shape(format!(
                "conv wants matching-rank x and w with 1..=3 spatial dims, got x{xs:?} w{ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "conv input channels {} != kernel channels {} (x{xs:?} w{ws:?})",
                xs[1], ws[1]
            )));
        }
        if bs != [ws[0]] {
            return Err(Error::shape(format!(
                "conv bias shape {bs:?} != [{}]",
                ws[0]
            )));
        }
        if pad.len() != rank || stride == 0 {
            return Err(Error::invalid(format!(
                "conv wants {rank} pad entries and stride > 0, got pad {pad:?} stride {stride}"
            )));
        }
        let spatial = &xs[2..];
        let ksize = &ws[2..];
        let mut out_spatial = Vec::with_capacity(rank);
        for i in 0..rank {
            let padded = spatial[i] + 2 * pad[i];
            if padded < ksize[i] {
                return Err(Error::shape(format!(
                    "conv kernel {:?} larger than padded input {:?} (pad {pad:?})",
                    ksize, spatial
                )));
            }
            out_spatial.push((padded - ksize[i]) / stride + 1);
        }
        let mut out_shape = vec![xs[0], ws[0]];
        out_shape.extend_from_slice(&out_spatial);
        let mut out = Tensor::zeros(&out_shape);
        conv_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            &mut out,
            stride,
            pad,
        );
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad: pad.to_vec(),
            },
        ))
    }

    /// Normalize over all dims except the channel axis (axis 1).
    /// `stats` is the (mean, inv_std) pair per channel actually applied;
    /// `batch_stats` tells backward whether they depend on `x`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: (Vec<f64>, Vec<f64>),
        batch_stats: bool,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::shape(format!("batch_norm wants rank >= 2, got {xs:?}")));
        }
        let ch = xs[1];
        if self.value(gamma).shape() != [ch] || self.value(beta).shape() != [ch] {
            return Err(Error::shape(format!(
                "batch_norm gamma/beta must have shape [{ch}]"
            )));
        }
        if stats.0.len() != ch || stats.1.len() != ch {
            return Err(Error::shape(format!("batch_norm stats must have {ch} entries")));
        }
        let inner: usize = xs[2..].iter().product();
        let batch = xs[0];
        let mut out = Tensor::zeros(&xs);
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            let od = out.data_mut();
            for bi in 0..batch {
                for c in 0..ch {
                    let base = (bi * ch + c) * inner;
                    let scale = gd[c] * stats.1[c];
                    let shift = bd[c] - stats.0[c] * scale;
                    for i in 0..inner {
                        od[base + i] = xd[base + i] * scale + shift;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu { x })
    }

    /// Mean over the last axis: [.., T] -> [..].
    pub fn avg_pool_last(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() || *xs.last().unwrap() == 0 {
            return Err(Error::shape(format!("avg_pool_last wants a non-empty last axis, got {xs:?}")));
        }
        let t = *xs.last().unwrap();
        let outer = self.value(x).numel() / t;
        let mut out = Tensor::zeros(&xs[..xs.len() - 1]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for (i, o) in od.iter_mut().enumerate().take(outer) {
                *o = xd[i * t..(i + 1) * t].iter().sum::<f64>() / t as f64;
            }
        }
        Ok(self.push(out, Op::AvgPoolLast { x }))
    }

    /// [B, ..] -> [B, prod(..)].
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() {
            return Err(Error::shape("flatten wants rank >= 1"));
        }
        let rest: usize = xs[1..].iter().product();
        self.reshape(x, &[xs[0], rest])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Concatenate along the last axis; leading dims must match.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape(format!(
                "concat_last wants equal leading dims, got {sa:?} and {sb:?}"
            )));
        }
        let (ta, tb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let outer: usize = sa[..sa.len() - 1].iter().product();
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ta + tb;
        let mut out = Tensor::zeros(&shape);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let od = out.data_mut();
            for i in 0..outer {
                od[i * (ta + tb)..i * (ta + tb) + ta].copy_from_slice(&ad[i * ta..(i + 1) * ta]);
                od[i * (ta + tb) + ta..(i + 1) * (ta + tb)]
                    .copy_from_slice(&bd[i * tb..(i + 1) * tb]);
            }
        }
        Ok(self.push(out, Op::ConcatLast { a, b }))
    }

    /// Fully connected: x[B,In] · w[Out,In]^T + b[Out] -> y[B,Out].
    pub fn fc(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(Error::shape(format!(
                "fc wants x[B,In], w[Out,In], b[Out]; got x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (batch, in_dim, out_dim) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[batch, out_dim]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            let od = out.data_mut();
            for bi in 0..batch {
                let xrow = &xd[bi * in_dim..(bi + 1) * in_dim];
                for o in 0..out_dim {
                    let wrow = &wd[o * in_dim..(o + 1) * in_dim];
                    od[bi * out_dim + o] = bd[o] + dot(xrow, wrow);
                }
            }
        }
        Ok(self.push(out, Op::Fc { x, w, b }))
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    /// Returns a scalar node; the probabilities are cached for backward.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape(format!(
                "softmax_xent wants logits[B,K] with B == labels.len(), got {ls:?} and {} labels",
                labels.len()
            )));
        }
        let (batch, classes) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = Tensor::zeros(&[batch, classes]);
        let mut loss = 0.0;
        {
            let ld = self.value(logits).data();
            let pd = probs.data_mut();
            for bi in 0..batch {
                let row = &ld[bi * classes..(bi + 1) * classes];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (k, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    pd[bi * classes + k] = e;
                    denom += e;
                }
                for k in 0..classes {
                    pd[bi * classes + k] /= denom;
                }
                loss -= pd[bi * classes + labels[bi]].max(1e-300).ln();
            }
        }
        loss /= batch as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Sum of all elements (scalar).
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    /// Reverse pass from a scalar `loss` node. Parameter gradients are
    /// accumulated into `store`; per-node gradients stay readable via
    /// [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if loss >= self.nodes.len() {
            return Err(Error::invalid(format!("unknown node id {loss}")));
        }
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss] = Some(Tensor::filled(self.nodes[loss].value.shape(), 1.0));

        for id in (0..=loss).rev() {
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            gout.debug_assert_finite("backward gradient");
            // Reinstall so callers can inspect node gradients afterwards.
            let op = self.nodes[id].op.clone();
            self.grads[id] = Some(gout.clone());
            match op {
                Op::Input => {}
                Op::Param { pid } => store.accumulate_grad(pid, &gout)?,
                Op::ChannelMap { x, w } => self.backward_channel_map(x, w, &gout),
                Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => self.backward_conv(x, w, b, stride, &pad, &gout),
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                    batch_stats,
                } => self.backward_batch_norm(x, gamma, beta, &stats, batch_stats, &gout),
                Op::Relu { x } => {
                    let mut gx = gout.clone();
                    for (g, &v) in gx.data_mut().iter_mut().zip(self.nodes[x].value.data()) {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    self.add_grad(x, gx);
                }
                Op::AvgPoolLast { x } => {
                    let xs = self.nodes[x].value.shape().to_vec();
                    let t = *xs.last().unwrap();
                    let mut gx = Tensor::zeros(&xs);
                    {
                        let gd = gout.data();
                        let gxd = gx.data_mut();
                        for (i, &g) in gd.iter().enumerate() {
                            let gv = g / t as f64;
                            for v in &mut gxd[i * t..(i + 1) * t] {
                                *v = gv;
                            }
                        }
                    }
                    self.add_grad(x, gx);
                }
                Op::ConcatLast { a, b } => {
                    let sa = self.nodes[a].value.shape().to_vec();
                    let sb = self.nodes[b].value.shape().to_vec();
                    let (ta, tb) = (*sa.last().unwrap(), *sb.last().unwrap());
                    let outer: usize = sa[..sa.len() - 1].iter().product();
                    let mut ga = Tensor::zeros(&sa);
                    let mut gb = Tensor::zeros(&sb);
                    {
                        let gd = gout.data();
                        for i in 0..outer {
                            ga.data_mut()[i * ta..(i + 1) * ta]
                                .copy_from_slice(&gd[i * (ta + tb)..i * (ta + tb) + ta]);
                            gb.data_mut()[i * tb..(i + 1) * tb]
                                .copy_from_slice(&gd[i * (ta + tb) + ta..(i + 1) * (ta + tb)]);
                        }
                    }
                    self.add_grad(a, ga);
                    self.add_grad(b, gb);
                }
                Op::Fc { x, w, b } => self.backward_fc(x, w, b, &gout),
                Op::Reshape { x } => {
                    let xs = self.nodes[x].value.shape().to_vec();
                    let gx = gout.reshaped(&xs).expect("reshape grad numel");
                    self.add_grad(x, gx);
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = gout.item() / labels.len() as f64;
                    let classes = probs.shape()[1];
                    let mut gl = probs.clone();
                    {
                        let gd = gl.data_mut();
                        for (bi, &lab) in labels.iter().enumerate() {
                            gd[bi * classes + lab] -= 1.0;
                        }
                        for v in gd.iter_mut() {
                            *v *= scale;
                        }
                    }
                    self.add_grad(logits, gl);
                }
                Op::SumAll { x } => {
                    let gx = Tensor::filled(self.nodes[x].value.shape(), gout.item());
                    self.add_grad(x, gx);
                }
            }
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, delta: Tensor) {
        match &mut self.grads[id] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_channel_map(&mut self, x: NodeId, w: NodeId, gout: &Tensor) {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let (batch, chans, time) = (xs[0], xs[1], xs[2]);
        let virt = ws[0];
        let mut gx = Tensor::zeros(&xs);
        let mut gw = Tensor::zeros(&ws);
        {
            let xd = self.nodes[x].value.data();
            let wd = self.nodes[w].value.data();
            let gd = gout.data();
            let gxd = gx.data_mut();
            for bi in 0..batch {
                for c in 0..chans {
                    let gxrow = &mut gxd[(bi * chans + c) * time..(bi * chans + c + 1) * time];
                    for k in 0..virt {
                        let grow = &gd[(bi * virt + k) * time..(bi * virt + k + 1) * time];
                        axpy(gxrow, grow, wd[k * chans + c]);
                    }
                }
            }
            let gwd = gw.data_mut();
            for bi in 0..batch {
                for k in 0..virt {
                    let grow = &gd[(bi * virt + k) * time..(bi * virt + k + 1) * time];
                    for c in 0..chans {
                        let xrow = &xd[(bi * chans + c) * time..(bi * chans + c + 1) * time];
                        gwd[k * chans + c] += dot(grow, xrow);
                    }
                }
            }
        }
        self.add_grad(x, gx);
        self.add_grad(w, gw);
    }

    fn backward_conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: &[usize],
        gout: &Tensor,
    ) {
        let (gx, gw, gb) = conv_backward(
            &self.nodes[x].value,
            &self.nodes[w].value,
            gout,
            stride,
            pad,
        );
        self.add_grad(x, gx);
        self.add_grad(w, gw);
        self.add_grad(b, gb);
    }

    fn backward_batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &(Vec<f64>, Vec<f64>),
        batch_stats: bool,
        gout: &Tensor,
    ) {
        let xs = self.nodes[x].value.shape().to_vec();
        let ch = xs[1];
        let batch = xs[0];
        let inner: usize = xs[2..].iter().product();
        let n = (batch * inner) as f64;
        let (mean, inv_std) = stats;

        let xd = self.nodes[x].value.data();
        let gd = gout.data();
        let gammad = self.nodes[gamma].value.data();

        let mut gx = Tensor::zeros(&xs);
        let mut ggamma = Tensor::zeros(&[ch]);
        let mut gbeta = Tensor::zeros(&[ch]);

        // Per channel: sum(dy), sum(dy * xhat).
        let mut sum_dy = vec![0.0; ch];
        let mut sum_dy_xhat = vec![0.0; ch];
        for bi in 0..batch {
            for c in 0..ch {
                let base = (bi * ch + c) * inner;
                let (m, is) = (mean[c], inv_std[c]);
                let mut s = 0.0;
                let mut sx = 0.0;
                for i in 0..inner {
                    let dy = gd[base + i];
                    s += dy;
                    sx += dy * (xd[base + i] - m) * is;
                }
                sum_dy[c] += s;
                sum_dy_xhat[c] += sx;
            }
        }
        for c in 0..ch {
            ggamma.data_mut()[c] = sum_dy_xhat[c];
            gbeta.data_mut()[c] = sum_dy[c];
        }
        {
            let gxd = gx.data_mut();
            for bi in 0..batch {
                for c in 0..ch {
                    let base = (bi * ch + c) * inner;
                    let (m, is) = (mean[c], inv_std[c]);
                    let g = gammad[c];
                    if batch_stats {
                        let k1 = sum_dy[c] / n;
                        let k2 = sum_dy_xhat[c] / n;
                        for i in 0..inner {
                            let xhat = (xd[base + i] - m) * is;
                            gxd[base + i] = g * is * (gd[base + i] - k1 - xhat * k2);
                        }
                    } else {
                        for i in 0..inner {
                            gxd[base + i] = g * is * gd[base + i];
                        }
                    }
                }
            }
        }
        self.add_grad(x, gx);
        self.add_grad(gamma, ggamma);
        self.add_grad(beta, gbeta);
    }

    fn backward_fc(&mut self, x: NodeId, w: NodeId, b: NodeId, gout: &Tensor) {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let (batch, in_dim, out_dim) = (xs[0], xs[1], ws[0]);
        let mut gx = Tensor::zeros(&xs);
        let mut gw = Tensor::zeros(&ws);
        let mut gb = Tensor::zeros(&[out_dim]);
        {
            let xd = self.nodes[x].value.data();
            let wd = self.nodes[w].value.data();
            let gd = gout.data();
            let gxd = gx.data_mut();
            let gwd = gw.data_mut();
            let gbd = gb.data_mut();
            for bi in 0..batch {
                let xrow = &xd[bi * in_dim..(bi + 1) * in_dim];
                let grow = &gd[bi * out_dim..(bi + 1) * out_dim];
                let gxrow = &mut gxd[bi * in_dim..(bi + 1) * in_dim];
                for o in 0..out_dim {
                    let g = grow[o];
                    gbd[o] += g;
                    let wrow = &wd[o * in_dim..(o + 1) * in_dim];
                    axpy(gxrow, wrow, g);
                    let gwrow = &mut gwd[o * in_dim..(o + 1) * in_dim];
                    axpy(gwrow, xrow, g);
                }
            }
        }
        self.add_grad(x, gx);
        self.add_grad(w, gw);
        self.add_grad(b, gb);
    }
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Iterates all index combinations of `dims` (odometer order).
fn for_each_index(dims: &[usize], mut f: impl FnMut(&[usize])) {
    let rank = dims.len();
    if dims.iter().any(|&d| d == 0) {
        return;
    }
    let mut idx = vec![0usize; rank];
    loop {
        f(&idx);
        let mut d = rank;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, out: &mut Tensor, stride: usize, pad: &[usize]) {
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    let os = out.shape().to_vec();
    let rank = ws.len() - 2;
    let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
    let spatial = &xs[2..];
    let ksize = &ws[2..];
    let ospatial = &os[2..];
    let in_vol: usize = spatial.iter().product();
    let out_vol: usize = ospatial.iter().product();
    let k_vol: usize = ksize.iter().product();
    let (s_last, k_last, o_last) = (spatial[rank - 1], ksize[rank - 1], ospatial[rank - 1]);
    let p_last = pad[rank - 1];

    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let od = out.data_mut();

    for bi in 0..batch {
        for co in 0..cout {
            let obase = (bi * cout + co) * out_vol;
            od[obase..obase + out_vol].fill(bd[co]);
            for ci in 0..cin {
                let xbase = (bi * cin + ci) * in_vol;
                let wbase = (co * cin + ci) * k_vol;
                for_each_index(ksize, |k| {
                    let wv = wd[wbase + flat_index(k, ksize)];
                    if wv == 0.0 {
                        return;
                    }
                    let k_off = k[rank - 1];
                    // Iterate outer output dims; handle the last dim as a row.
                    for_each_index(&ospatial[..rank - 1], |oouter| {
                        let mut x_off = 0usize;
                        for d in 0..rank - 1 {
                            let i = oouter[d] * stride + k[d];
                            if i < pad[d] || i - pad[d] >= spatial[d] {
                                return;
                            }
                            x_off = x_off * spatial[d] + (i - pad[d]);
                        }
                        let mut o_off = 0usize;
                        for d in 0..rank - 1 {
                            o_off = o_off * ospatial[d] + oouter[d];
                        }
                        let xrow = &xd[xbase + x_off * s_last..xbase + (x_off + 1) * s_last];
                        let orow = &mut od[obase + o_off * o_last..obase + (o_off + 1) * o_last];
                        if stride == 1 {
                            // valid o range: 0 <= o + k_off - p_last < s_last
                            let lo = p_last.saturating_sub(k_off);
                            let hi = (s_last + p_last - k_off).min(o_last);
                            if lo < hi {
                                let src = lo + k_off - p_last;
                                axpy(&mut orow[lo..hi], &xrow[src..src + hi - lo], wv);
                            }
                        } else {
                            for o in 0..o_last {
                                let i = o * stride + k_off;
                                if i >= p_last && i - p_last < s_last {
                                    orow[o] += wv * xrow[i - p_last];
                                }
                            }
                        }
                    });
                });
            }
        }
    }
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: &[usize],
) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    let os = gout.shape().to_vec();
    let rank = ws.len() - 2;
    let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
    let spatial = &xs[2..];
    let ksize = &ws[2..];
    let ospatial = &os[2..];
    let in_vol: usize = spatial.iter().product();
    let out_vol: usize = ospatial.iter().product();
    let k_vol: usize = ksize.iter().product();
    let (s_last, k_last, o_last) = (spatial[rank - 1], ksize[rank - 1], ospatial[rank - 1]);
    let p_last = pad[rank - 1];

    let mut gx = Tensor::zeros(&xs);
    let mut gw = Tensor::zeros(&ws);
    let mut gb = Tensor::zeros(&[cout]);

    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();

    {
        let gbd = gb.data_mut();
        for bi in 0..batch {
            for co in 0..cout {
                let obase = (bi * cout + co) * out_vol;
                gbd[co] += gd[obase..obase + out_vol].iter().sum::<f64>();
            }
        }
    }

    let gxd = gx.data_mut();
    let gwd = gw.data_mut();
    for bi in 0..batch {
        for co in 0..cout {
            let obase = (bi * cout + co) * out_vol;
            for ci in 0..cin {
                let xbase = (bi * cin + ci) * in_vol;
                let wbase = (co * cin + ci) * k_vol;
                for_each_index(ksize, |k| {
                    let kflat = flat_index(k, ksize);
                    let wv = wd[wbase + kflat];
                    let k_off = k[rank - 1];
                    let mut wgrad_acc = 0.0;
                    for_each_index(&ospatial[..rank - 1], |oouter| {
                        let mut x_off = 0usize;
                        for d in 0..rank - 1 {
                            let i = oouter[d] * stride + k[d];
                            if i < pad[d] || i - pad[d] >= spatial[d] {
                                return;
                            }
                            x_off = x_off * spatial[d] + (i - pad[d]);
                        }
                        let mut o_off = 0usize;
                        for d in 0..rank - 1 {
                            o_off = o_off * ospatial[d] + oouter[d];
                        }
                        let xrow = &xd[xbase + x_off * s_last..xbase + (x_off + 1) * s_last];
                        let gxrow =
                            &mut gxd[xbase + x_off * s_last..xbase + (x_off + 1) * s_last];
                        let grow = &gd[obase + o_off * o_last..obase + (o_off + 1) * o_last];
                        if stride == 1 {
                            let lo = p_last.saturating_sub(k_off);
                            let hi = (s_last + p_last - k_off).min(o_last);
                            if lo < hi {
                                let src = lo + k_off - p_last;
                                axpy(&mut gxrow[src..src + hi - lo], &grow[lo..hi], wv);
                                wgrad_acc += dot(&grow[lo..hi], &xrow[src..src + hi - lo]);
                            }
                        } else {
                            for o in 0..o_last {
                                let i = o * stride + k_off;
                                if i >= p_last && i - p_last < s_last {
                                    gxrow[i - p_last] += wv * grow[o];
                                    wgrad_acc += grow[o] * xrow[i - p_last];
                                }
                            }
                        }
                    });
                    gwd[wbase + kflat] += wgrad_acc;
                });
            }
        }
    }
    (gx, gw, gb)
}

fn flat_index(idx: &[usize], dims: &[usize]) -> usize {
    let mut f = 0;
    for (i, d) in idx.iter().zip(dims) {
        f = f * d + i;
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| s.register(n, t.clone(), true))
            .collect();
        (s, ids)
    }

    #[test]
    fn sum_all_grad_is_ones() {
        let (mut store, ids) = store_with(&[("x", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap())]);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]);
        let loss = g.sum_all(x);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn conv1d_hand_example() {
        // x = [1,2,3,4], k = [1,1], stride 1, pad 0 -> [3,5,7]
        let (store, _) = store_with(&[]);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.input(Tensor::from_vec(&[1, 1, 2], vec![1.0, 1.0]).unwrap());
        let b = g.input(Tensor::zeros(&[1]));
        let y = g.conv(x, w, b, 1, &[0]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0, 7.0]);
        let _ = store;
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1, zero bias: identity map.
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 1, 5], vec![0.5, -1.0, 2.0, 0.0, 3.0]).unwrap());
        let w = g.input(Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap());
        let b = g.input(Tensor::zeros(&[1]));
        let y = g.conv(x, w, b, 1, &[0]).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv_output_size_formula() {
        // floor((in + 2*pad - k)/stride) + 1 per dimension
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1, 10, 9]));
        let w = g.input(Tensor::zeros(&[2, 1, 3, 3]));
        let b = g.input(Tensor::zeros(&[2]));
        let y = g.conv(x, w, b, 2, &[1, 0]).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 5, 4]);
    }

    #[test]
    fn conv_shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 8]));
        let w = g.input(Tensor::zeros(&[1, 3, 3]));
        let b = g.input(Tensor::zeros(&[1]));
        let err = g.conv(x, w, b, 1, &[0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 8]") && msg.contains("[1, 3, 3]"), "{msg}");
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[2, 14]));
        let loss = g.softmax_xent(logits, &[3, 7]).unwrap();
        // loss = -ln(1/14)
        let expected = (14.0f64).ln();
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[1, 3, 7], 2.5));
        let y = g.avg_pool_last(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3]);
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn concat_last_adds_one_slice() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 4, 4, 10]));
        let b = g.input(Tensor::zeros(&[2, 4, 4, 1]));
        let y = g.concat_last(a, b).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4, 4, 11]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x, &mut store).is_err());
    }

    /// Independent nested-loop conv reference used as the oracle.
    fn conv_reference(
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        pad: &[usize],
    ) -> Tensor {
        let xs = x.shape();
        let ws = w.shape();
        let rank = ws.len() - 2;
        let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
        let spatial = &xs[2..];
        let ksize = &ws[2..];
        let ospatial: Vec<usize> = (0..rank)
            .map(|i| (spatial[i] + 2 * pad[i] - ksize[i]) / stride + 1)
            .collect();
        let mut oshape = vec![batch, cout];
        oshape.extend_from_slice(&ospatial);
        let mut out = Tensor::zeros(&oshape);
        let out_vol: usize = ospatial.iter().product();
        let k_vol: usize = ksize.iter().product();
        let in_vol: usize = spatial.iter().product();
        for bi in 0..batch {
            for co in 0..cout {
                for_each_index(&ospatial, |o| {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for_each_index(ksize, |k| {
                            let mut x_off = 0usize;
                            for d in 0..rank {
                                let i = o[d] * stride + k[d];
                                if i < pad[d] || i - pad[d] >= spatial[d] {
                                    return;
                                }
                                x_off = x_off * spatial[d] + (i - pad[d]);
                            }
                            acc += w.data()[(co * cin + ci) * k_vol + flat_index(k, ksize)]
                                * x.data()[(bi * cin + ci) * in_vol + x_off];
                        });
                    }
                    out.data_mut()[(bi * cout + co) * out_vol + flat_index(o, &ospatial)] = acc;
                });
            }
        }
        out
    }

    #[test]
    fn conv_matches_loop_reference() {
        use rand::Rng;
        let mut rng = crate::seed::stream(7, "conv-oracle", 0);
        let cases: Vec<(Vec<usize>, Vec<usize>, usize, Vec<usize>)> = vec![
            (vec![2, 3, 11], vec![4, 3, 5], 1, vec![0]),
            (vec![2, 3, 11], vec![4, 3, 5], 2, vec![2]),
            (vec![1, 2, 7, 8], vec![3, 2, 3, 3], 1, vec![1, 1]),
            (vec![2, 1, 5, 5, 12], vec![4, 1, 3, 3, 7], 1, vec![1, 1, 0]),
            (vec![1, 2, 6, 6, 9], vec![2, 2, 3, 3, 3], 2, vec![0, 1, 1]),
        ];
        for (xs, ws, stride, pad) in cases {
            let xn: usize = xs.iter().product();
            let wn: usize = ws.iter().product();
            let x = Tensor::from_vec(&xs, (0..xn).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let w = Tensor::from_vec(&ws, (0..wn).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let b = Tensor::from_vec(
                &[ws[0]],
                (0..ws[0]).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let expected = conv_reference(&x, &w, &b, stride, &pad);
            let mut g = Graph::new();
            let xi = g.input(x);
            let wi = g.input(w);
            let bi = g.input(b);
            let y = g.conv(xi, wi, bi, stride, &pad).unwrap();
            assert_eq!(g.value(y).shape(), expected.shape());
            for (a, e) in g.value(y).data().iter().zip(expected.data()) {
                assert!((a - e).abs() < 1e-12, "conv mismatch: {a} vs {e}");
            }
        }
    }
}
