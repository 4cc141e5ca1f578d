//! Network construction: the spiking residual basic/bottleneck blocks, the
//! ResNet family, structural alpha assignment, and weight initialization.
//!
//! A [`Network`] is a flat list of nodes in topological order; every edge
//! points at an earlier node, so insertion order is the unique execution
//! order. Shortcut connections are just extra edges into an [`NodeKind::Add`]
//! junction. The decoding layer (spike-average readout) sits outside the node
//! list because its output is `[N, classes]` rather than a rank-5 tensor.

use crate::error::{Error, Result};
use crate::neuron::LifHyper;
use crate::ops::{ConvParams, LinearParams};
use crate::tdbn::TdBnParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Spatial pooling variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolSpec {
    /// Non-overlapping window mean with a fixed window size.
    Window(usize),
    /// Mean over the whole remaining spatial extent.
    Global,
}

/// One node of the network graph.
#[derive(Debug, Clone)]
pub enum NodeKind {
    /// The single entry point carrying the encoded input tensor.
    Input,
    Conv(ConvParams),
    TdBn(TdBnParams),
    Lif(LifHyper),
    Pool(PoolSpec),
    /// Elementwise sum of two or more branches.
    Add,
    /// Fully connected layer over flattened features.
    Linear(LinearParams),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    /// Indices of producer nodes; always strictly smaller than this node's own.
    pub inputs: Vec<usize>,
}

/// A spiking network: ordered nodes plus the time-averaging decoder.
#[derive(Debug, Clone)]
pub struct Network {
    pub nodes: Vec<Node>,
    /// Decoding layer applied per timestep to the last node's spikes, then
    /// averaged over time into `[N, classes]` logits.
    pub decoder: LinearParams,
    /// True once batch normalization has been folded into the weights.
    pub fused: bool,
}

impl Network {
    pub fn new(nodes: Vec<Node>, decoder: LinearParams) -> Result<Self> {
        let net = Network {
            nodes,
            decoder,
            fused: false,
        };
        net.validate()?;
        Ok(net)
    }

    /// Structural validation: single input, forward-only edges, node arity.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Graph("network has no nodes".into()));
        }
        if !matches!(self.nodes[0].kind, NodeKind::Input) || !self.nodes[0].inputs.is_empty() {
            return Err(Error::Graph("node 0 must be the input node".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !names.insert(node.name.as_str()) {
                return Err(Error::Graph(format!("duplicate node name {}", node.name)));
            }
            if i > 0 && matches!(node.kind, NodeKind::Input) {
                return Err(Error::Graph("multiple input nodes".into()));
            }
            for &src in &node.inputs {
                if src >= i {
                    return Err(Error::Graph(format!(
                        "edge {} -> {} is not forward-only; the graph must be acyclic",
                        self.nodes.get(src).map(|n| n.name.as_str()).unwrap_or("?"),
                        node.name
                    )));
                }
            }
            let arity_ok = match node.kind {
                NodeKind::Input => node.inputs.is_empty(),
                NodeKind::Add => node.inputs.len() >= 2,
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Graph(format!(
                    "node {} has {} inputs, which its kind does not allow",
                    node.name,
                    node.inputs.len()
                )));
            }
        }
        Ok(())
    }

    /// Consumers of each node, in node order.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &src in &node.inputs {
                out[src].push(i);
            }
        }
        out
    }

    /// Index of the final node (the one feeding the decoder).
    pub fn output_node(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Number of trainable parameter slices (kernel/bias/lambda/beta/...).
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        for node in &self.nodes {
            count += match node.kind {
                NodeKind::Conv(_) | NodeKind::Linear(_) | NodeKind::TdBn(_) => 2,
                _ => 0,
            };
        }
        count + 2 // decoder weight and bias
    }

    /// Names for every parameter slice, aligned with [`Self::with_param`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.kind {
                NodeKind::Conv(_) => {
                    out.push(format!("{}.weight", node.name));
                    out.push(format!("{}.bias", node.name));
                }
                NodeKind::Linear(_) => {
                    out.push(format!("{}.weight", node.name));
                    out.push(format!("{}.bias", node.name));
                }
                NodeKind::TdBn(_) => {
                    out.push(format!("{}.lambda", node.name));
                    out.push(format!("{}.beta", node.name));
                }
                _ => {}
            }
        }
        out.push("decoder.weight".into());
        out.push("decoder.bias".into());
        out
    }

    /// Run `f` on the `i`-th trainable parameter slice.
    pub fn with_param<R>(&mut self, index: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
        let mut i = 0;
        for node in &mut self.nodes {
            let slices: [Option<&mut Vec<f32>>; 2] = match &mut node.kind {
                NodeKind::Conv(p) => [Some(&mut p.kernel), Some(&mut p.bias)],
                NodeKind::Linear(p) => [Some(&mut p.weight), Some(&mut p.bias)],
                NodeKind::TdBn(p) => [Some(&mut p.lambda), Some(&mut p.beta)],
                _ => [None, None],
            };
            for slice in slices.into_iter().flatten() {
                if i == index {
                    return f(slice);
                }
                i += 1;
            }
        }
        if index == i {
            return f(&mut self.decoder.weight);
        }
        if index == i + 1 {
            return f(&mut self.decoder.bias);
        }
        panic!("parameter index {index} out of range");
    }

    /// Fold every tdbn node into the weighted layer that feeds it, producing
    /// a spike-and-weights-only inference network.
    pub fn fuse(&self) -> Result<Network> {
        if self.fused {
            return Err(Error::State("network is already fused".into()));
        }
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes: Vec<Node> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.kind {
                NodeKind::TdBn(bn) => {
                    let src = node.inputs[0];
                    let fused_kind = match &self.nodes[src].kind {
                        NodeKind::Conv(conv) => {
                            NodeKind::Conv(crate::tdbn::fuse_into_conv(conv, bn)?)
                        }
                        NodeKind::Linear(lin) => {
                            NodeKind::Linear(crate::tdbn::fuse_into_linear(lin, bn)?)
                        }
                        other => {
                            return Err(Error::Graph(format!(
                                "tdbn node {} follows a {:?} node and cannot be fused",
                                node.name, other
                            )))
                        }
                    };
                    // replace the producer's parameters in place
                    nodes[remap[src]].kind = fused_kind;
                    remap[i] = remap[src];
                }
                kind => {
                    let inputs = node.inputs.iter().map(|&s| remap[s]).collect();
                    remap[i] = nodes.len();
                    nodes.push(Node {
                        name: node.name.clone(),
                        kind: kind.clone(),
                        inputs,
                    });
                }
            }
        }
        let mut net = Network::new(nodes, self.decoder.clone())?;
        net.fused = true;
        Ok(net)
    }
}

/// Assign structural scaling to every tdbn node: `1/sqrt(n)` for the tdbn
/// directly feeding an n-way additive junction, 1 everywhere else.
///
/// Junction branches that carry spikes unmodified (identity shortcuts fed by
/// a LIF node or the network input) need no scaling; any other un-normalized
/// branch is an error.
pub fn assign_alpha(net: &mut Network) -> Result<()> {
    let consumers = net.consumers();
    // target alpha per node index, default 1 for every tdbn
    let mut target = vec![1.0f32; net.nodes.len()];
    for (i, node) in net.nodes.iter().enumerate() {
        if !matches!(node.kind, NodeKind::Add) {
            continue;
        }
        let n = node.inputs.len();
        let branch_alpha = 1.0 / (n as f32).sqrt();
        for &src in &node.inputs {
            match &net.nodes[src].kind {
                NodeKind::TdBn(_) => target[src] = branch_alpha,
                NodeKind::Lif(_) | NodeKind::Input => {}
                other => {
                    return Err(Error::Graph(format!(
                        "junction {} receives an un-normalized {:?} branch from {}",
                        node.name, other, net.nodes[src].name
                    )));
                }
            }
        }
        let _ = i;
    }
    for (i, node) in net.nodes.iter_mut().enumerate() {
        if let NodeKind::TdBn(bn) = &mut node.kind {
            if consumers[i].len() > 1 && target[i] != 1.0 {
                return Err(Error::Graph(format!(
                    "tdbn {} feeds a junction and other consumers; alpha is ambiguous",
                    node.name
                )));
            }
            bn.alpha = target[i];
        }
    }
    Ok(())
}

/// Check that every junction's normalized branches carry `alpha = 1/sqrt(n)`,
/// i.e. the summed pre-activation variance lands at `v_th^2` at init.
pub fn check_alpha_assignment(net: &Network) -> Result<()> {
    for node in &net.nodes {
        if let NodeKind::Add = node.kind {
            let n = node.inputs.len() as f32;
            for &src in &node.inputs {
                if let NodeKind::TdBn(bn) = &net.nodes[src].kind {
                    let expect = 1.0 / n.sqrt();
                    if (bn.alpha - expect).abs() > 1e-6 {
                        return Err(Error::Graph(format!(
                            "tdbn {} feeds a {}-way junction with alpha {}, expected {}",
                            net.nodes[src].name, n, bn.alpha, expect
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// One stage of same-width blocks, as read off an architecture table row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Output channels of each block in the stage.
    pub channels: usize,
    /// Stride of the first block; the rest run at stride 1.
    pub stride: usize,
    pub repeat: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

/// Incremental graph builder used by the architecture constructors.
pub struct NetworkBuilder {
    nodes: Vec<Node>,
    hyper: LifHyper,
}

impl NetworkBuilder {
    pub fn new(hyper: LifHyper) -> Self {
        NetworkBuilder {
            nodes: vec![Node {
                name: "input".into(),
                kind: NodeKind::Input,
                inputs: Vec::new(),
            }],
            hyper,
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn push(&mut self, name: impl Into<String>, kind: NodeKind, inputs: Vec<usize>) -> usize {
        self.nodes.push(Node {
            name: name.into(),
            kind,
            inputs,
        });
        self.nodes.len() - 1
    }

    pub fn conv(
        &mut self,
        name: &str,
        src: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> usize {
        self.push(
            name,
            NodeKind::Conv(ConvParams::zeros(c_out, c_in, k, k, stride, padding)),
            vec![src],
        )
    }

    pub fn tdbn(&mut self, name: &str, src: usize, channels: usize, alpha: f32) -> usize {
        self.push(
            name,
            NodeKind::TdBn(TdBnParams::new(channels, alpha, self.hyper.v_th)),
            vec![src],
        )
    }

    pub fn lif(&mut self, name: &str, src: usize) -> usize {
        self.push(name, NodeKind::Lif(self.hyper), vec![src])
    }

    /// conv3x3 -> tdbn -> lif -> conv3x3 -> tdbn, identity or projected
    /// shortcut, summed and fired. Junction tdbns carry `alpha = 1/sqrt(2)`.
    pub fn basic_block(
        &mut self,
        prefix: &str,
        src: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> usize {
        let half = 1.0 / 2.0f32.sqrt();
        let c1 = self.conv(&format!("{prefix}.conv1"), src, in_ch, out_ch, 3, stride, 1);
        let b1 = self.tdbn(&format!("{prefix}.bn1"), c1, out_ch, 1.0);
        let l1 = self.lif(&format!("{prefix}.lif1"), b1);
        let c2 = self.conv(&format!("{prefix}.conv2"), l1, out_ch, out_ch, 3, 1, 1);
        let b2 = self.tdbn(&format!("{prefix}.bn2"), c2, out_ch, half);
        let shortcut = if in_ch == out_ch && stride == 1 {
            // identity: spikes pass to the junction unmodified
            src
        } else {
            let sc = self.conv(
                &format!("{prefix}.shortcut.conv"),
                src,
                in_ch,
                out_ch,
                1,
                stride,
                0,
            );
            self.tdbn(&format!("{prefix}.shortcut.bn"), sc, out_ch, half)
        };
        let add = self.push(format!("{prefix}.add"), NodeKind::Add, vec![b2, shortcut]);
        self.lif(&format!("{prefix}.lif2"), add)
    }

    /// conv1x1 -> conv3x3(stride) -> conv1x1 with tdbn+lif between, summed
    /// with an identity/projected shortcut and fired.
    pub fn bottleneck_block(
        &mut self,
        prefix: &str,
        src: usize,
        in_ch: usize,
        mid_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> usize {
        let half = 1.0 / 2.0f32.sqrt();
        let c1 = self.conv(&format!("{prefix}.conv1"), src, in_ch, mid_ch, 1, 1, 0);
        let b1 = self.tdbn(&format!("{prefix}.bn1"), c1, mid_ch, 1.0);
        let l1 = self.lif(&format!("{prefix}.lif1"), b1);
        let c2 = self.conv(&format!("{prefix}.conv2"), l1, mid_ch, mid_ch, 3, stride, 1);
        let b2 = self.tdbn(&format!("{prefix}.bn2"), c2, mid_ch, 1.0);
        let l2 = self.lif(&format!("{prefix}.lif2"), b2);
        let c3 = self.conv(&format!("{prefix}.conv3"), l2, mid_ch, out_ch, 1, 1, 0);
        let b3 = self.tdbn(&format!("{prefix}.bn3"), c3, out_ch, half);
        let shortcut = if in_ch == out_ch && stride == 1 {
            src
        } else {
            let sc = self.conv(
                &format!("{prefix}.shortcut.conv"),
                src,
                in_ch,
                out_ch,
                1,
                stride,
                0,
            );
            self.tdbn(&format!("{prefix}.shortcut.bn"), sc, out_ch, half)
        };
        let add = self.push(format!("{prefix}.add"), NodeKind::Add, vec![b3, shortcut]);
        self.lif(&format!("{prefix}.lif3"), add)
    }

    pub fn stage(&mut self, prefix: &str, src: usize, in_ch: usize, spec: BlockSpec) -> usize {
        let mut cur = src;
        let mut cur_ch = in_ch;
        for i in 0..spec.repeat {
            let stride = if i == 0 { spec.stride } else { 1 };
            let name = format!("{prefix}.{i}");
            cur = match spec.kind {
                BlockKind::Basic => self.basic_block(&name, cur, cur_ch, spec.channels, stride),
                BlockKind::Bottleneck => self.bottleneck_block(
                    &name,
                    cur,
                    cur_ch,
                    spec.channels / 4,
                    spec.channels,
                    stride,
                ),
            };
            cur_ch = spec.channels;
        }
        cur
    }

    pub fn pool(&mut self, name: &str, src: usize, spec: PoolSpec) -> usize {
        self.push(name, NodeKind::Pool(spec), vec![src])
    }

    /// Spiking fully connected layer: linear -> tdbn -> lif.
    pub fn spiking_fc(&mut self, prefix: &str, src: usize, d_in: usize, d_out: usize) -> usize {
        let fc = self.push(
            format!("{prefix}.fc"),
            NodeKind::Linear(LinearParams::zeros(d_out, d_in)),
            vec![src],
        );
        let bn = self.tdbn(&format!("{prefix}.bn"), fc, d_out, 1.0);
        self.lif(&format!("{prefix}.lif"), bn)
    }

    pub fn finish(self, decoder: LinearParams) -> Result<Network> {
        Network::new(self.nodes, decoder)
    }
}

/// The architecture family accepted by the command line and the builders.
pub const ARCH_NAMES: &[&str] = &[
    "resnet17",
    "resnet19",
    "resnet34",
    "resnet34_large",
    "resnet50",
    "toy8",
];

/// Materialize a named architecture.
///
/// `input_channels` is the channel count of the encoded input; `classes` the
/// decoder width. `feature_hw` is the spatial size the pre-decoder feature
/// map is expected to have reached (resnet17/19 pool by a fixed window of 2,
/// so their flattened fc widths depend on it).
pub fn build_resnet(
    name: &str,
    classes: usize,
    input_channels: usize,
    input_hw: usize,
    hyper: LifHyper,
) -> Result<Network> {
    let mut net = match name {
        "resnet17" => {
            let mut b = NetworkBuilder::new(hyper);
            let c = b.conv("enc.conv", b.input(), input_channels, 64, 3, 1, 1);
            let bn = b.tdbn("enc.bn", c, 64, 1.0);
            let mut cur = b.lif("enc.lif", bn);
            cur = b.stage(
                "stage1",
                cur,
                64,
                BlockSpec {
                    kind: BlockKind::Basic,
                    channels: 64,
                    stride: 1,
                    repeat: 3,
                },
            );
            cur = b.stage(
                "stage2",
                cur,
                64,
                BlockSpec {
                    kind: BlockKind::Basic,
                    channels: 128,
                    stride: 2,
                    repeat: 4,
                },
            );
            cur = b.pool("pool", cur, PoolSpec::Window(2));
            let hw = input_hw / 2 / 2; // stage2 stride then pool
            let cur = b.spiking_fc("head", cur, 128 * hw * hw, 256);
            let _ = cur;
            b.finish(LinearParams::zeros(classes, 256))?
        }
        "resnet19" => {
            let mut b = NetworkBuilder::new(hyper);
            let c = b.conv("enc.conv", b.input(), input_channels, 128, 3, 1, 1);
            let bn = b.tdbn("enc.bn", c, 128, 1.0);
            let mut cur = b.lif("enc.lif", bn);
            for (i, (ch, stride, repeat)) in
                [(128, 1, 3), (256, 2, 3), (512, 2, 2)].into_iter().enumerate()
            {
                let in_ch = if i == 0 { 128 } else { ch / 2 };
                cur = b.stage(
                    &format!("stage{}", i + 1),
                    cur,
                    in_ch,
                    BlockSpec {
                        kind: BlockKind::Basic,
                        channels: ch,
                        stride,
                        repeat,
                    },
                );
            }
            cur = b.pool("pool", cur, PoolSpec::Window(2));
            let hw = input_hw / 4 / 2; // two stride-2 stages, then pool
            let cur = b.spiking_fc("head", cur, 512 * hw * hw, 256);
            let _ = cur;
            b.finish(LinearParams::zeros(classes, 256))?
        }
        "resnet34" | "resnet34_large" => {
            let wide = if name == "resnet34_large" { 2 } else { 1 };
            let mut b = NetworkBuilder::new(hyper);
            let c = b.conv("enc.conv", b.input(), input_channels, 64 * wide, 7, 2, 3);
            let bn = b.tdbn("enc.bn", c, 64 * wide, 1.0);
            let mut cur = b.lif("enc.lif", bn);
            let mut in_ch = 64 * wide;
            for (i, (ch, repeat)) in [(64, 3), (128, 4), (256, 6), (512, 3)].into_iter().enumerate()
            {
                cur = b.stage(
                    &format!("stage{}", i + 1),
                    cur,
                    in_ch,
                    BlockSpec {
                        kind: BlockKind::Basic,
                        channels: ch * wide,
                        stride: 2,
                        repeat,
                    },
                );
                in_ch = ch * wide;
            }
            let cur = b.pool("pool", cur, PoolSpec::Global);
            let _ = cur;
            b.finish(LinearParams::zeros(classes, 512 * wide))?
        }
        "resnet50" => {
            let mut b = NetworkBuilder::new(hyper);
            let c = b.conv("enc.conv", b.input(), input_channels, 64, 7, 2, 3);
            let bn = b.tdbn("enc.bn", c, 64, 1.0);
            let mut cur = b.lif("enc.lif", bn);
            let mut in_ch = 64;
            for (i, (ch, repeat)) in [(256, 3), (512, 4), (1024, 6), (2048, 3)]
                .into_iter()
                .enumerate()
            {
                cur = b.stage(
                    &format!("stage{}", i + 1),
                    cur,
                    in_ch,
                    BlockSpec {
                        kind: BlockKind::Bottleneck,
                        channels: ch,
                        stride: 2,
                        repeat,
                    },
                );
                in_ch = ch;
            }
            let cur = b.pool("pool", cur, PoolSpec::Global);
            let _ = cur;
            b.finish(LinearParams::zeros(classes, 2048))?
        }
        "toy8" => {
            // desk-scale residual net: encoding conv + 3 basic blocks + decoder
            // = 8 weighted layers on the main path
            let mut b = NetworkBuilder::new(hyper);
            let c = b.conv("enc.conv", b.input(), input_channels, 8, 3, 1, 1);
            let bn = b.tdbn("enc.bn", c, 8, 1.0);
            let mut cur = b.lif("enc.lif", bn);
            cur = b.basic_block("block1", cur, 8, 8, 1);
            cur = b.basic_block("block2", cur, 8, 16, 2);
            cur = b.basic_block("block3", cur, 16, 16, 1);
            let cur = b.pool("pool", cur, PoolSpec::Global);
            let _ = cur;
            b.finish(LinearParams::zeros(classes, 16))?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown architecture {other:?}; supported: {}",
                ARCH_NAMES.join(", ")
            )))
        }
    };
    assign_alpha(&mut net)?;
    Ok(net)
}

/// Draw conv/linear weights from `N(0, 2 / fan_in)`, zero all biases, and
/// reset tdbn scale/shift to 1 and 0. Deterministic in `seed`.
pub fn init_weights(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |slice: &mut [f32], fan_in: usize| {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        for v in slice {
            *v = dist.sample(&mut rng) as f32;
        }
    };
    for node in &mut net.nodes {
        match &mut node.kind {
            NodeKind::Conv(p) => {
                let fan_in = p.fan_in();
                fill(&mut p.kernel, fan_in);
                p.bias.fill(0.0);
            }
            NodeKind::Linear(p) => {
                let fan_in = p.d_in;
                fill(&mut p.weight, fan_in);
                p.bias.fill(0.0);
            }
            NodeKind::TdBn(p) => {
                p.lambda.fill(1.0);
                p.beta.fill(0.0);
            }
            _ => {}
        }
    }
    let fan_in = net.decoder.d_in;
    fill(&mut net.decoder.weight, fan_in);
    net.decoder.bias.fill(0.0);
}
