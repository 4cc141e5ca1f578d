//! Empirical verification of the training theory at desk scale: per-layer
//! gradient-norm profiles through deep plain stacks, membrane-variance
//! proportionality, firing-rate scans against input scale, per-layer spike
//! profiling, and accumulate/multiply operation accounting for fused
//! networks. Every routine is deterministic given its seed and can emit a
//! CSV with named columns for external plotting.

use crate::arch::{init_weights, Network, NetworkBuilder, NodeKind};
use crate::autograd::{backward_pass, forward_pass, softmax_ce, Caches, Phase};
use crate::error::{Error, Result};
use crate::neuron::{LifHyper, LifLayerState, SpikeMode};
use crate::ops::LinearParams;
use crate::tensor::{Shape5, Tensor5};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

/// A plain (shortcut-free) conv stack: encoding conv, `depth - 2` hidden
/// convs, and the decoder, each conv followed by (optionally) tdbn and a LIF
/// layer. `depth` counts weighted layers including the decoder.
pub fn build_plain_stack(
    depth: usize,
    channels: usize,
    in_channels: usize,
    hw: usize,
    classes: usize,
    with_tdbn: bool,
    hyper: LifHyper,
) -> Result<Network> {
    if depth < 3 {
        return Err(Error::Config(format!(
            "plain stack needs depth >= 3, got {depth}"
        )));
    }
    let mut b = NetworkBuilder::new(hyper);
    let mut cur = b.input();
    for layer in 0..depth - 1 {
        let (c_in, name) = if layer == 0 {
            (in_channels, "enc".to_string())
        } else {
            (channels, format!("hidden{layer:02}"))
        };
        cur = b.conv(&format!("{name}.conv"), cur, c_in, channels, 3, 1, 1);
        if with_tdbn {
            cur = b.tdbn(&format!("{name}.bn"), cur, channels, 1.0);
        }
        cur = b.lif(&format!("{name}.lif"), cur);
    }
    b.finish(LinearParams::zeros(classes, channels * hw * hw))
}

/// Per-layer gradient norms from one backward pass at initialization.
#[derive(Debug, Clone)]
pub struct GradNormProfile {
    /// RMS of each profiled conv layer's kernel gradient, in depth order.
    /// The first (encoding) and last (decoding) layers are excluded.
    pub layer_norms: Vec<f32>,
    pub tau_decay: f32,
    pub depth: usize,
    pub with_tdbn: bool,
}

impl GradNormProfile {
    /// Ratio between the largest and smallest profiled norm. Degenerate
    /// profiles (a vanished layer) report infinity, which no band contains.
    pub fn band_ratio(&self) -> f64 {
        let max = self.layer_norms.iter().cloned().fold(0.0f32, f32::max) as f64;
        let min = self
            .layer_norms
            .iter()
            .cloned()
            .fold(f32::INFINITY, f32::min) as f64;
        if min <= 0.0 || !min.is_finite() {
            return f64::INFINITY;
        }
        max / min
    }

    pub fn within_band(&self, band: f64) -> bool {
        self.band_ratio() <= band
    }
}

/// Surrogate window width, relative to `v_th`, at which the rectangle
/// passes unit gradient energy through a threshold-variance-normalized
/// layer: `P(|u - v_th| < a/2) / (a^2 P(u > v_th)) = 1/v_th^2` for
/// `u ~ N(0, v_th^2)` at `a = 1.52 v_th`.
pub const UNIT_GAIN_SURROGATE_RATIO: f32 = 1.52;

/// Build a plain stack of `depth` weighted layers at init, run one
/// forward/backward on random data, and report per-layer kernel-gradient RMS
/// for the hidden layers.
///
/// The stack fires with the unit-gain surrogate width; any other rectangle
/// scales gradient energy by a constant factor per layer, which compounds
/// into drift that has nothing to do with the normalization under test.
pub fn grad_norm_profile(
    depth: usize,
    tau_decay: f32,
    with_tdbn: bool,
    batch: usize,
    seed: u64,
) -> Result<GradNormProfile> {
    let channels = 16;
    let in_channels = 3;
    let hw = 8;
    let timesteps = 2;
    let classes = 10;
    let hyper = LifHyper::new(tau_decay, 1.0, UNIT_GAIN_SURROGATE_RATIO)?;
    let mut net = build_plain_stack(depth, channels, in_channels, hw, classes, with_tdbn, hyper)?;
    init_weights(&mut net, seed);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let x = Tensor5::from_fn(
        Shape5::new(timesteps, batch, in_channels, hw, hw),
        |_, _, _, _, _| normal.sample(&mut rng) as f32,
    );
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

    let (q, caches) = forward_pass(&mut net, &x, Phase::Train)?;
    let (_, grad_q) = softmax_ce(&q, &labels)?;
    let grads = backward_pass(&net, &grad_q, &caches)?;

    // kernel gradients of the hidden convs, skipping encoder and decoder
    let names = net.param_names();
    let mut layer_norms = Vec::new();
    for (name, slice) in names.iter().zip(&grads.slices) {
        if name.starts_with("hidden") && name.ends_with(".conv.weight") {
            let ss: f64 = slice.iter().map(|&g| (g as f64) * (g as f64)).sum();
            layer_norms.push((ss / slice.len() as f64).sqrt() as f32);
        }
    }
    Ok(GradNormProfile {
        layer_norms,
        tau_decay,
        depth,
        with_tdbn,
    })
}

/// One point of the membrane-variance scan.
#[derive(Debug, Clone, Copy)]
pub struct VariancePoint {
    pub sigma_in_sq: f32,
    pub sigma_out_sq: f32,
    /// Geometric-accumulation prediction `sigma_in^2 / (1 - tau^2)`.
    pub predicted: f32,
    /// Fraction of timesteps that fired during measurement.
    pub firing_rate: f32,
}

/// Feed i.i.d. Gaussian pre-activations through one LIF layer and estimate
/// the steady-state variance of the pre-reset membrane potential.
///
/// With `v_th = None` the threshold is set to `10 * sigma_in` per point, which
/// realizes the no-spike regime the proportionality prediction assumes; a
/// fixed threshold reports the truncated statistics instead (resets clip the
/// accumulation, so proportionality is not asserted there).
pub fn membrane_variance_scan(
    sigma_in_list: &[f32],
    tau_decay: f32,
    v_th: Option<f32>,
    samples: usize,
    seed: u64,
) -> Result<Vec<VariancePoint>> {
    let warmup = 50;
    let measure = 150;
    let mut out = Vec::with_capacity(sigma_in_list.len());
    for &sigma in sigma_in_list {
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("sigma_in must be positive, got {sigma}")));
        }
        let v = v_th.unwrap_or(10.0 * sigma);
        let hyper = LifHyper::new(tau_decay, v, 1.0)?;
        // common random numbers across scan points
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma as f64).unwrap();
        let mut state = LifLayerState::zeros(samples);
        let mut u = vec![0.0f32; samples];
        let mut o = vec![0.0f32; samples];
        let mut x = vec![0.0f32; samples];
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        let mut spikes = 0.0f64;
        let mut count = 0u64;
        for t in 0..warmup + measure {
            for xi in x.iter_mut() {
                *xi = normal.sample(&mut rng) as f32;
            }
            state.step(&x, &hyper, SpikeMode::Binary, &mut u, &mut o);
            if t >= warmup {
                for i in 0..samples {
                    sum += u[i] as f64;
                    sq += (u[i] as f64) * (u[i] as f64);
                    spikes += o[i] as f64;
                    count += 1;
                }
            }
        }
        let mean = sum / count as f64;
        let var = (sq / count as f64 - mean * mean).max(0.0);
        out.push(VariancePoint {
            sigma_in_sq: sigma * sigma,
            sigma_out_sq: var as f32,
            predicted: sigma * sigma / (1.0 - tau_decay * tau_decay),
            firing_rate: (spikes / count as f64) as f32,
        });
    }
    Ok(out)
}

/// Least-squares line through `(x, y)` pairs: returns `(slope, intercept, r2)`.
pub fn linear_fit(points: &[(f32, f32)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0 as f64).sum();
    let sy: f64 = points.iter().map(|p| p.1 as f64).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 as f64).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| p.0 as f64 * p.1 as f64).sum();
    let denom = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let mean_y = sy / n;
    let ss_tot: f64 = points.iter().map(|p| (p.1 as f64 - mean_y).powi(2)).sum();
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 as f64 - (slope * p.0 as f64 + intercept)).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, intercept, r2)
}

pub const RATE_HISTOGRAM_BINS: usize = 10;

/// One point of the firing-rate scan.
#[derive(Debug, Clone)]
pub struct FiringRatePoint {
    pub sigma_in: f32,
    /// Mean spikes per neuron per timestep.
    pub mean_rate: f32,
    /// Histogram of per-neuron rates over `[0, 1]` in ten equal bins.
    pub histogram: [u32; RATE_HISTOGRAM_BINS],
}

/// Simulate LIF neurons on `N(0, sigma^2)` inputs and report empirical
/// per-timestep firing statistics per input scale.
pub fn firing_rate_scan(
    sigma_in_list: &[f32],
    tau_decay: f32,
    v_th: f32,
    timesteps: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<FiringRatePoint>> {
    if timesteps < 1 {
        return Err(Error::Config("timesteps must be >= 1".into()));
    }
    let hyper = LifHyper::new(tau_decay, v_th, 1.0)?;
    let mut out = Vec::with_capacity(sigma_in_list.len());
    for &sigma in sigma_in_list {
        // same underlying noise for every sigma: scans stay monotone
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut state = LifLayerState::zeros(samples);
        let mut u = vec![0.0f32; samples];
        let mut o = vec![0.0f32; samples];
        let mut x = vec![0.0f32; samples];
        let mut per_neuron = vec![0u32; samples];
        for _ in 0..timesteps {
            for xi in x.iter_mut() {
                *xi = sigma * normal.sample(&mut rng) as f32;
            }
            state.step(&x, &hyper, SpikeMode::Binary, &mut u, &mut o);
            for (acc, &spike) in per_neuron.iter_mut().zip(o.iter()) {
                *acc += spike as u32;
            }
        }
        let mut histogram = [0u32; RATE_HISTOGRAM_BINS];
        let mut total = 0u64;
        for &count in &per_neuron {
            total += count as u64;
            let rate = count as f32 / timesteps as f32;
            let bin = ((rate * RATE_HISTOGRAM_BINS as f32) as usize)
                .min(RATE_HISTOGRAM_BINS - 1);
            histogram[bin] += 1;
        }
        out.push(FiringRatePoint {
            sigma_in: sigma,
            mean_rate: total as f32 / (samples * timesteps) as f32,
            histogram,
        });
    }
    Ok(out)
}

/// Operation counts for one layer of a fused network.
#[derive(Debug, Clone)]
pub struct LayerOps {
    pub name: String,
    pub additions: u64,
    pub multiplications: u64,
}

/// Accumulate/multiply accounting for a fused network on a concrete input.
#[derive(Debug, Clone)]
pub struct OpCountReport {
    pub additions: u64,
    pub multiplications: u64,
    pub per_layer: Vec<LayerOps>,
    /// Per-timestep firing rate of every LIF layer, in graph order.
    pub firing_rates: Vec<(String, f32)>,
    /// Dense multiply-accumulate count of the same graph run as an ANN
    /// (one pass, no timesteps): `additions = multiplications = MACs`.
    pub ann_macs: u64,
}

fn conv_cover_table(
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    padding: usize,
) -> Vec<u64> {
    // cover[h * in_w + w] = number of output positions whose receptive field
    // includes input position (h, w)
    let mut cover = vec![0u64; in_h * in_w];
    for ho in 0..out_h {
        for wo in 0..out_w {
            let base_h = (ho * stride) as isize - padding as isize;
            let base_w = (wo * stride) as isize - padding as isize;
            for i in 0..k_h {
                let hi = base_h + i as isize;
                if hi < 0 || hi >= in_h as isize {
                    continue;
                }
                for j in 0..k_w {
                    let wi = base_w + j as isize;
                    if wi < 0 || wi >= in_w as isize {
                        continue;
                    }
                    cover[hi as usize * in_w + wi as usize] += 1;
                }
            }
        }
    }
    cover
}

/// Count the synaptic operations a fused network performs on `input`.
///
/// Hidden layers receive spikes, so each nonzero input element contributes
/// one weight accumulation per covering output element (event-driven: no
/// spike, no work). The encoding layer consumes real values and the decoder
/// averages spikes into logits; both are counted as dense multiply-adds.
pub fn count_ops(net: &mut Network, input: &Tensor5) -> Result<OpCountReport> {
    if !net.fused {
        return Err(Error::State(
            "operation counting expects a fused inference network".into(),
        ));
    }
    let (_, caches) = forward_pass(net, input, Phase::Infer)?;
    count_ops_from_caches(net, &caches)
}

fn count_ops_from_caches(net: &Network, caches: &Caches) -> Result<OpCountReport> {
    let mut per_layer = Vec::new();
    let mut additions = 0u64;
    let mut multiplications = 0u64;
    let mut ann_macs = 0u64;
    for (i, node) in net.nodes.iter().enumerate() {
        match &node.kind {
            NodeKind::Conv(p) => {
                let src = node.inputs[0];
                let x = &caches.node_out[src];
                let y = &caches.node_out[i];
                let (s, ys) = (x.shape(), y.shape());
                let dense_per_tn =
                    (p.c_out * ys.h * ys.w * p.c_in * p.k_h * p.k_w) as u64;
                ann_macs += dense_per_tn * s.n as u64;
                let encoding = matches!(net.nodes[src].kind, NodeKind::Input);
                let (adds, mults) = if encoding {
                    let dense = dense_per_tn * (s.t * s.n) as u64;
                    (dense, dense)
                } else {
                    let cover =
                        conv_cover_table(s.h, s.w, ys.h, ys.w, p.k_h, p.k_w, p.stride, p.padding);
                    let mut adds = 0u64;
                    for t in 0..s.t {
                        for n in 0..s.n {
                            for c in 0..s.c {
                                for h in 0..s.h {
                                    for w in 0..s.w {
                                        if x.at(t, n, c, h, w) != 0.0 {
                                            adds += cover[h * s.w + w] * p.c_out as u64;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    (adds, 0)
                };
                additions += adds;
                multiplications += mults;
                per_layer.push(LayerOps {
                    name: node.name.clone(),
                    additions: adds,
                    multiplications: mults,
                });
            }
            NodeKind::Linear(p) => {
                let src = node.inputs[0];
                let x = &caches.node_out[src];
                let s = x.shape();
                ann_macs += (p.d_out * p.d_in) as u64 * s.n as u64;
                let mut adds = 0u64;
                for t in 0..s.t {
                    for n in 0..s.n {
                        for &v in x.feature(t, n) {
                            if v != 0.0 {
                                adds += p.d_out as u64;
                            }
                        }
                    }
                }
                additions += adds;
                per_layer.push(LayerOps {
                    name: node.name.clone(),
                    additions: adds,
                    multiplications: 0,
                });
            }
            _ => {}
        }
    }
    // decoder: spikes meet real-valued averaging weights
    let last = &caches.node_out[net.output_node()];
    let s = last.shape();
    let dec = (net.decoder.d_out * net.decoder.d_in) as u64;
    let dec_ops = dec * (s.t * s.n) as u64;
    additions += dec_ops;
    multiplications += dec_ops;
    ann_macs += dec * s.n as u64;
    per_layer.push(LayerOps {
        name: "decoder".into(),
        additions: dec_ops,
        multiplications: dec_ops,
    });

    let mut firing_rates = Vec::new();
    for (i, node) in net.nodes.iter().enumerate() {
        if matches!(node.kind, NodeKind::Lif(_)) {
            let spikes = &caches.node_out[i];
            let total: f64 = spikes.data().iter().map(|&v| v as f64).sum();
            firing_rates.push((
                node.name.clone(),
                (total / spikes.data().len() as f64) as f32,
            ));
        }
    }
    Ok(OpCountReport {
        additions,
        multiplications,
        per_layer,
        firing_rates,
        ann_macs,
    })
}

/// Average spikes per neuron per timestep for every LIF layer, over one
/// inference pass on `input`.
pub fn spike_profile(net: &mut Network, input: &Tensor5) -> Result<Vec<(String, f32)>> {
    let (_, caches) = forward_pass(net, input, Phase::Infer)?;
    let mut out = Vec::new();
    for (i, node) in net.nodes.iter().enumerate() {
        if matches!(node.kind, NodeKind::Lif(_)) {
            let spikes = &caches.node_out[i];
            let total: f64 = spikes.data().iter().map(|&v| v as f64).sum();
            out.push((
                node.name.clone(),
                (total / spikes.data().len() as f64) as f32,
            ));
        }
    }
    Ok(out)
}

pub fn write_gradnorm_csv(path: &Path, profiles: &[GradNormProfile]) -> Result<()> {
    let mut s = String::from("layer_index,grad_norm_rms,tau_decay,depth,with_tdbn\n");
    for p in profiles {
        for (i, norm) in p.layer_norms.iter().enumerate() {
            s.push_str(&format!(
                "{},{:.8e},{},{},{}\n",
                i + 1,
                norm,
                p.tau_decay,
                p.depth,
                p.with_tdbn
            ));
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_variance_csv(path: &Path, points: &[VariancePoint], tau_decay: f32) -> Result<()> {
    let mut s = String::from("sigma_in_sq,sigma_out_sq,predicted,firing_rate,tau_decay\n");
    for p in points {
        s.push_str(&format!(
            "{:.6},{:.6},{:.6},{:.6},{}\n",
            p.sigma_in_sq, p.sigma_out_sq, p.predicted, p.firing_rate, tau_decay
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_firing_csv(path: &Path, points: &[FiringRatePoint], tau_decay: f32) -> Result<()> {
    let mut s = String::from("sigma_in,mean_rate,tau_decay");
    for b in 0..RATE_HISTOGRAM_BINS {
        s.push_str(&format!(",hist_{b}"));
    }
    s.push('\n');
    for p in points {
        s.push_str(&format!("{:.6},{:.6},{}", p.sigma_in, p.mean_rate, tau_decay));
        for c in p.histogram {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_opcount_csv(path: &Path, report: &OpCountReport) -> Result<()> {
    let mut s = String::from("layer,additions,multiplications\n");
    for l in &report.per_layer {
        s.push_str(&format!("{},{},{}\n", l.name, l.additions, l.multiplications));
    }
    s.push_str(&format!(
        "total,{},{}\nann_dense,{},{}\n",
        report.additions, report.multiplications, report.ann_macs, report.ann_macs
    ));
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::ConvParams;

    #[test]
    fn zero_decay_variance_passes_through() {
        let points = membrane_variance_scan(&[1.0], 0.0, None, 20_000, 3).unwrap();
        let p = points[0];
        assert_eq!(p.firing_rate, 0.0);
        assert!((p.sigma_out_sq - 1.0).abs() < 0.05, "{}", p.sigma_out_sq);
    }

    #[test]
    fn quarter_decay_variance_matches_geometric_sum() {
        let points = membrane_variance_scan(&[1.0], 0.25, None, 20_000, 3).unwrap();
        let p = points[0];
        // 1 / (1 - 0.0625) = 1.0667; the two-term approximation gives 1.0625
        assert!(
            (p.sigma_out_sq - 1.0667).abs() / 1.0667 < 0.1,
            "{}",
            p.sigma_out_sq
        );
    }

    #[test]
    fn variance_scan_is_proportional() {
        let sigmas = [0.5f32, 1.0, 2.0];
        let points = membrane_variance_scan(&sigmas, 0.25, None, 20_000, 9).unwrap();
        let pairs: Vec<(f32, f32)> = points
            .iter()
            .map(|p| (p.sigma_in_sq, p.sigma_out_sq))
            .collect();
        let (slope, _, r2) = linear_fit(&pairs);
        assert!(r2 > 0.99, "r2 {r2}");
        assert!((slope - 1.0 / (1.0 - 0.0625)).abs() / (1.0 / (1.0 - 0.0625)) < 0.1);
    }

    #[test]
    fn firing_rates_rise_monotonically_with_input_scale() {
        let sigmas = [0.1f32, 0.3, 0.5, 1.0, 2.0, 3.0];
        let points = firing_rate_scan(&sigmas, 0.25, 1.0, 100, 5_000, 11).unwrap();
        for w in points.windows(2) {
            assert!(
                w[1].mean_rate >= w[0].mean_rate,
                "{} then {}",
                w[0].mean_rate,
                w[1].mean_rate
            );
        }
        assert!(points[0].mean_rate < 0.05);
        assert!(points.last().unwrap().mean_rate > 0.3);
        // memoryless neurons on very large inputs fire on half the steps:
        // the threshold sits at the middle of the input distribution
        let big = firing_rate_scan(&[100.0], 0.0, 1.0, 200, 5_000, 11).unwrap();
        assert!((big[0].mean_rate - 0.5).abs() < 0.05, "{}", big[0].mean_rate);
        // histogram counts every neuron once
        let total: u32 = points[0].histogram.iter().sum();
        assert_eq!(total, 5_000);
    }

    #[test]
    fn plain_stack_shapes_and_depth() {
        let net = build_plain_stack(6, 4, 1, 8, 2, true, LifHyper::default()).unwrap();
        let convs = net
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Conv(_)))
            .count();
        assert_eq!(convs, 5); // depth 6 = 5 convs + decoder
        assert!(build_plain_stack(2, 4, 1, 8, 2, true, LifHyper::default()).is_err());
    }

    #[test]
    fn gradient_profile_covers_hidden_layers_only() {
        let p = grad_norm_profile(6, 0.0, true, 2, 5).unwrap();
        assert_eq!(p.layer_norms.len(), 4); // 6 - encoder - decoder
        assert!(p.layer_norms.iter().all(|&n| n >= 0.0));
        // deterministic
        let q = grad_norm_profile(6, 0.0, true, 2, 5).unwrap();
        assert_eq!(p.layer_norms, q.layer_norms);
    }

    fn tiny_fused_net(kernel: Vec<f32>, c_out: usize, k: usize, d_in: usize) -> Network {
        let mut b = NetworkBuilder::new(LifHyper::default());
        let mut conv = ConvParams::zeros(c_out, 1, k, k, 1, 0);
        conv.kernel = kernel;
        let c = b.push("enc.conv", NodeKind::Conv(conv), vec![0]);
        let l = b.lif("enc.lif", c);
        let mut conv2 = ConvParams::zeros(1, c_out, 2, 2, 1, 0);
        for w in conv2.kernel.iter_mut() {
            *w = 1.0;
        }
        let c2 = b.push("hid.conv", NodeKind::Conv(conv2), vec![l]);
        b.lif("hid.lif", c2);
        let mut net = b.finish(LinearParams::zeros(2, d_in)).unwrap();
        net.fused = true;
        net
    }

    #[test]
    fn zero_input_means_zero_hidden_additions() {
        // encoding conv with zero kernel: no spikes reach the hidden layer
        let mut net = tiny_fused_net(vec![0.0; 9], 1, 3, 1);
        let x = Tensor5::zeros(Shape5::new(2, 1, 1, 4, 4));
        let report = count_ops(&mut net, &x).unwrap();
        let hidden = report
            .per_layer
            .iter()
            .find(|l| l.name == "hid.conv")
            .unwrap();
        assert_eq!(hidden.additions, 0);
        assert_eq!(hidden.multiplications, 0);
        // the encoding layer still does dense multiply-adds
        let enc = report.per_layer.iter().find(|l| l.name == "enc.conv").unwrap();
        assert!(enc.multiplications > 0);
    }

    #[test]
    fn interior_spike_into_2x2_conv_counts_four_additions() {
        let mut net = tiny_fused_net(vec![10.0], 1, 1, 4);
        // 1x1 encoding conv with weight 10: input 1.0 at an interior position
        // spikes exactly there
        let mut x = Tensor5::zeros(Shape5::new(1, 1, 1, 3, 3));
        *x.at_mut(0, 0, 0, 1, 1) = 1.0;
        let report = count_ops(&mut net, &x).unwrap();
        let hidden = report
            .per_layer
            .iter()
            .find(|l| l.name == "hid.conv")
            .unwrap();
        // 2x2 kernel on 3x3 input: 4 output positions, all covering (1,1)
        assert_eq!(hidden.additions, 4);
    }

    #[test]
    fn counting_rejects_unfused_networks() {
        let mut b = NetworkBuilder::new(LifHyper::default());
        let c = b.conv("c", 0, 1, 1, 1, 1, 0);
        b.lif("l", c);
        let mut net = b.finish(LinearParams::zeros(2, 4)).unwrap();
        let x = Tensor5::zeros(Shape5::new(1, 1, 1, 2, 2));
        assert!(matches!(count_ops(&mut net, &x), Err(Error::State(_))));
    }

    #[test]
    fn spike_profile_is_structural() {
        let mut net = tiny_fused_net(vec![0.0; 9], 1, 3, 1);
        let x = Tensor5::zeros(Shape5::new(2, 1, 1, 4, 4));
        let profile = spike_profile(&mut net, &x).unwrap();
        assert_eq!(profile.len(), 2); // one entry per lif layer
        assert!(profile.iter().all(|(_, r)| *r == 0.0));
    }

    #[test]
    fn linear_fit_recovers_a_line() {
        let pts = [(1.0f32, 2.1f32), (2.0, 4.0), (3.0, 6.1), (4.0, 7.9)];
        let (slope, intercept, r2) = linear_fit(&pts);
        assert!((slope - 1.97).abs() < 0.1, "{slope}");
        assert!(intercept.abs() < 0.3, "{intercept}");
        assert!(r2 > 0.99);
    }
}
