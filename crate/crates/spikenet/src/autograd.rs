//! Network-level forward and reverse passes: per-timestep execution through
//! the graph, spike-average decoding, softmax cross-entropy, and gradient
//! accumulation through both the layer chain and the membrane recursion.
//!
//! The backward pass walks nodes in reverse topological order; every tensor
//! op contributes its exact input gradient, junctions accumulate branch
//! gradients additively, and LIF nodes run the reverse-time recursion with
//! the rectangular surrogate standing in for the spike derivative.

use crate::arch::{Network, Node, NodeKind, PoolSpec};
use crate::error::{Error, Result};
use crate::neuron::{lif_backward, lif_forward, SpikeMode};
use crate::ops::{
    avg_pool2d, avg_pool2d_backward, conv2d, conv2d_backward, linear, linear_backward,
    LinearParams,
};
use crate::tdbn::{tdbn_backward, tdbn_forward_infer, tdbn_forward_train, TdBnCache};
use crate::tensor::Tensor5;

/// Execution mode for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch-statistics normalization, binary spikes, caches populated.
    Train,
    /// Like [`Phase::Train`] but with ramp activations instead of the step;
    /// this is the forward that finite differences can differentiate.
    TrainSmoothed,
    /// Running-statistics normalization (or fused weights), no caches.
    Infer,
}

/// Batch logits `[N, classes]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub classes: usize,
    pub data: Vec<f32>,
}

impl Logits {
    pub fn zeros(n: usize, classes: usize) -> Self {
        Logits {
            classes,
            data: vec![0.0; n * classes],
        }
    }

    pub fn batch(&self) -> usize {
        self.data.len() / self.classes
    }

    pub fn row(&self, n: usize) -> &[f32] {
        &self.data[n * self.classes..(n + 1) * self.classes]
    }

    /// Index of the largest logit per row.
    pub fn argmax(&self, n: usize) -> usize {
        let row = self.row(n);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

/// Everything the backward pass needs from a training forward.
#[derive(Debug, Clone, Default)]
pub struct Caches {
    /// Output tensor of every node, in node order.
    pub node_out: Vec<Tensor5>,
    /// Pre-reset membrane potentials for each LIF node.
    pub lif_u: Vec<Option<Tensor5>>,
    /// Normalization cache for each tdbn node.
    pub tdbn: Vec<Option<TdBnCache>>,
}

/// Spike-average decoding: `Q[n] = (1/T) * sum_t (W * flat(spikes[t,n]) + b)`.
pub fn decode(spikes: &Tensor5, decoder: &LinearParams) -> Result<Logits> {
    let per_t = linear(spikes, decoder)?;
    let s = per_t.shape();
    let mut q = Logits::zeros(s.n, decoder.d_out);
    let inv_t = 1.0 / s.t as f32;
    for n in 0..s.n {
        for t in 0..s.t {
            let feat = per_t.feature(t, n);
            for d in 0..decoder.d_out {
                q.data[n * decoder.d_out + d] += feat[d] * inv_t;
            }
        }
    }
    Ok(q)
}

/// Gradients of [`decode`]: upstream `grad_q` spread as `1/T` per timestep.
pub fn decode_backward(
    grad_q: &Logits,
    spikes: &Tensor5,
    decoder: &LinearParams,
) -> Result<(Tensor5, Vec<f32>, Vec<f32>)> {
    let s = spikes.shape();
    if grad_q.classes != decoder.d_out || grad_q.batch() != s.n {
        return Err(Error::Dim(format!(
            "decode backward expects [{} x {}] upstream, got [{} x {}]",
            s.n,
            decoder.d_out,
            grad_q.batch(),
            grad_q.classes
        )));
    }
    let inv_t = 1.0 / s.t as f32;
    let mut per_t_grad = Tensor5::zeros(crate::tensor::Shape5::new(s.t, s.n, decoder.d_out, 1, 1));
    for t in 0..s.t {
        for n in 0..s.n {
            let dst = per_t_grad.feature_mut(t, n);
            let src = grad_q.row(n);
            for d in 0..decoder.d_out {
                dst[d] = src[d] * inv_t;
            }
        }
    }
    linear_backward(&per_t_grad, spikes, decoder)
}

/// Stabilized softmax cross-entropy, averaged over the batch.
///
/// Returns the scalar loss and `grad_Q = (p - y) / N`.
pub fn softmax_ce(q: &Logits, labels: &[usize]) -> Result<(f32, Logits)> {
    let n = q.batch();
    if labels.len() != n {
        return Err(Error::Dim(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if !q.data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite logits in loss".into()));
    }
    let mut grad = Logits::zeros(n, q.classes);
    let mut loss = 0.0f64;
    let inv_n = 1.0 / n as f32;
    for i in 0..n {
        let label = labels[i];
        if label >= q.classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {} classes",
                q.classes
            )));
        }
        let row = q.row(i);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v - max) as f64).exp();
        }
        let log_denom = denom.ln();
        loss += -((row[label] - max) as f64 - log_denom);
        for d in 0..q.classes {
            let p = (((row[d] - max) as f64).exp() / denom) as f32;
            let y = if d == label { 1.0 } else { 0.0 };
            grad.data[i * q.classes + d] = (p - y) * inv_n;
        }
    }
    Ok(((loss / n as f64) as f32, grad))
}

fn spike_mode(phase: Phase) -> SpikeMode {
    match phase {
        Phase::TrainSmoothed => SpikeMode::Smoothed,
        _ => SpikeMode::Binary,
    }
}

/// Execute the graph on an encoded input and decode logits.
///
/// In the training phases, tdbn nodes use batch statistics (updating their
/// running averages) and all backward caches are kept. In
/// [`Phase::Infer`] tdbn nodes use running statistics; on a fused network
/// there are none left and spikes meet only weights.
pub fn forward_pass(net: &mut Network, input: &Tensor5, phase: Phase) -> Result<(Logits, Caches)> {
    let count = net.nodes.len();
    let mut caches = Caches {
        node_out: Vec::with_capacity(count),
        lif_u: vec![None; count],
        tdbn: vec![None; count],
    };
    for i in 0..count {
        let inputs = net.nodes[i].inputs.clone();
        let out = match &mut net.nodes[i].kind {
            NodeKind::Input => input.clone(),
            NodeKind::Conv(p) => conv2d(&caches.node_out[inputs[0]], p)?,
            NodeKind::Linear(p) => linear(&caches.node_out[inputs[0]], p)?,
            NodeKind::TdBn(p) => match phase {
                Phase::Train | Phase::TrainSmoothed => {
                    let (y, cache) = tdbn_forward_train(&caches.node_out[inputs[0]], p)?;
                    caches.tdbn[i] = Some(cache);
                    y
                }
                Phase::Infer => tdbn_forward_infer(&caches.node_out[inputs[0]], p)?,
            },
            NodeKind::Lif(hyper) => {
                let (spikes, potentials) =
                    lif_forward(&caches.node_out[inputs[0]], hyper, spike_mode(phase));
                if phase != Phase::Infer {
                    caches.lif_u[i] = Some(potentials);
                }
                spikes
            }
            NodeKind::Pool(spec) => {
                let x = &caches.node_out[inputs[0]];
                let window = match spec {
                    PoolSpec::Window(k) => *k,
                    PoolSpec::Global => x.shape().h,
                };
                avg_pool2d(x, window)?
            }
            NodeKind::Add => {
                let mut acc = caches.node_out[inputs[0]].clone();
                for &src in &inputs[1..] {
                    acc.add_assign(&caches.node_out[src])?;
                }
                acc
            }
        };
        caches.node_out.push(out);
    }
    let q = decode(&caches.node_out[net.output_node()], &net.decoder)?;
    Ok((q, caches))
}

/// Parameter gradients in the order of [`Network::param_names`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub slices: Vec<Vec<f32>>,
}

impl Gradients {
    /// Zero gradients shaped like the network's parameters.
    pub fn zeros_like(net: &Network) -> Self {
        let mut slices = Vec::new();
        for node in &net.nodes {
            match &node.kind {
                NodeKind::Conv(p) => {
                    slices.push(vec![0.0; p.kernel.len()]);
                    slices.push(vec![0.0; p.bias.len()]);
                }
                NodeKind::Linear(p) => {
                    slices.push(vec![0.0; p.weight.len()]);
                    slices.push(vec![0.0; p.bias.len()]);
                }
                NodeKind::TdBn(p) => {
                    slices.push(vec![0.0; p.lambda.len()]);
                    slices.push(vec![0.0; p.beta.len()]);
                }
                _ => {}
            }
        }
        slices.push(vec![0.0; net.decoder.weight.len()]);
        slices.push(vec![0.0; net.decoder.bias.len()]);
        Gradients { slices }
    }
}

/// Base parameter-slot index for every node that owns parameters.
fn param_bases(net: &Network) -> Vec<Option<usize>> {
    let mut bases = vec![None; net.nodes.len()];
    let mut slot = 0;
    for (i, node) in net.nodes.iter().enumerate() {
        if matches!(
            node.kind,
            NodeKind::Conv(_) | NodeKind::Linear(_) | NodeKind::TdBn(_)
        ) {
            bases[i] = Some(slot);
            slot += 2;
        }
    }
    bases
}

/// Reverse pass over the whole graph, timesteps `T` down to `1` inside each
/// LIF node. Returns gradients for every parameter, decoder included.
pub fn backward_pass(net: &Network, grad_q: &Logits, caches: &Caches) -> Result<Gradients> {
    if caches.node_out.len() != net.nodes.len() {
        return Err(Error::State(
            "caches do not cover the network; run a training forward first".into(),
        ));
    }
    let mut grads = Gradients::zeros_like(net);
    let bases = param_bases(net);
    let last = net.output_node();

    // decoder
    let (grad_last, gw, gb) =
        decode_backward(grad_q, &caches.node_out[last], &net.decoder)?;
    let dslot = grads.slices.len() - 2;
    grads.slices[dslot] = gw;
    grads.slices[dslot + 1] = gb;

    let mut grad_out: Vec<Option<Tensor5>> = vec![None; net.nodes.len()];
    grad_out[last] = Some(grad_last);

    for i in (1..net.nodes.len()).rev() {
        let g = match grad_out[i].take() {
            Some(g) => g,
            None => continue, // node does not reach the loss
        };
        let node: &Node = &net.nodes[i];
        let src0 = node.inputs.first().copied();
        match &node.kind {
            NodeKind::Input => unreachable!("input is node 0"),
            NodeKind::Conv(p) => {
                let src = src0.unwrap();
                let (gin, gk, gbias) = conv2d_backward(&g, &caches.node_out[src], p)?;
                let base = bases[i].unwrap();
                grads.slices[base] = gk;
                grads.slices[base + 1] = gbias;
                accumulate(&mut grad_out[src], gin)?;
            }
            NodeKind::Linear(p) => {
                let src = src0.unwrap();
                let (gin, gw, gbias) = linear_backward(&g, &caches.node_out[src], p)?;
                let base = bases[i].unwrap();
                grads.slices[base] = gw;
                grads.slices[base + 1] = gbias;
                accumulate(&mut grad_out[src], gin)?;
            }
            NodeKind::TdBn(p) => {
                let cache = caches.tdbn[i].as_ref().ok_or_else(|| {
                    Error::State(format!("missing tdbn cache for node {}", node.name))
                })?;
                let (gin, gl, gbeta) = tdbn_backward(&g, cache, p)?;
                let base = bases[i].unwrap();
                grads.slices[base] = gl;
                grads.slices[base + 1] = gbeta;
                accumulate(&mut grad_out[src0.unwrap()], gin)?;
            }
            NodeKind::Lif(hyper) => {
                let u = caches.lif_u[i].as_ref().ok_or_else(|| {
                    Error::State(format!("missing membrane cache for node {}", node.name))
                })?;
                let spikes = &caches.node_out[i];
                let gin = lif_backward(&g, None, u, spikes, hyper)?;
                accumulate(&mut grad_out[src0.unwrap()], gin)?;
            }
            NodeKind::Pool(_) => {
                let src = src0.unwrap();
                let in_shape = caches.node_out[src].shape();
                let window = in_shape.h / g.shape().h;
                let gin = avg_pool2d_backward(&g, in_shape, window)?;
                accumulate(&mut grad_out[src], gin)?;
            }
            NodeKind::Add => {
                for &src in &node.inputs {
                    accumulate(&mut grad_out[src], g.clone())?;
                }
            }
        }
    }
    Ok(grads)
}

fn accumulate(slot: &mut Option<Tensor5>, g: Tensor5) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
