//! Command implementations behind the `spikenet` binary: training with
//! per-epoch metrics and checkpoints, evaluation, normalization fusion, and
//! the diagnostics runner. Everything is deterministic given the config:
//! per-epoch RNG streams are derived from `(seed, epoch)` so a resumed run
//! replays exactly the batches an uninterrupted run would have seen.

use crate::arch::{build_resnet, init_weights, Network, NodeKind};
use crate::autograd::{backward_pass, forward_pass, softmax_ce, Phase};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    apply_channel_norm, augment_static, channel_stats, encode_static, load_manifest,
    make_toy_dataset, realize_item, stack_batch, Dataset, Item, Split, ToyKind,
};
use crate::diagnostics::{
    count_ops, firing_rate_scan, grad_norm_profile, linear_fit, membrane_variance_scan,
    write_firing_csv, write_gradnorm_csv, write_opcount_csv, write_variance_csv,
};
use crate::error::{Error, Result};
use crate::optim::OptimState;
use crate::tensor::Tensor5;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Environment variable that overrides the config's `out_dir`.
pub const OUT_DIR_ENV: &str = "SPIKENET_OUT_DIR";

const TEST_SEED_SALT: u64 = 0x7357_5EED;
const EPOCH_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;
const AUGMENT_SEED_SALT: u64 = 0xA06_3E17;

/// One metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_acc: f32,
    pub eval_acc: f32,
    pub lr: f32,
    pub mean_firing_rate: f32,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.epoch, self.train_loss, self.train_acc, self.eval_acc, self.lr, self.mean_firing_rate
        )
    }
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,eval_acc,lr,mean_firing_rate\n";

/// What a training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub history: Vec<EpochMetrics>,
}

fn out_root(cfg: &RunConfig) -> PathBuf {
    match std::env::var(OUT_DIR_ENV) {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(&cfg.out_dir),
    }
}

fn toy_kind(name: &str) -> Option<ToyKind> {
    name.parse::<ToyKind>().ok()
}

/// Load train and test splits plus input normalization for static data.
/// Returns the datasets and the `(mean, std)` channel normalization applied
/// (identity for event data).
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset, Vec<f32>, Vec<f32>)> {
    let (mut train, mut test) = if let Some(kind) = toy_kind(&cfg.dataset) {
        let mut train = make_toy_dataset(kind, cfg.train_items, cfg.seed)?;
        let mut test = make_toy_dataset(kind, cfg.test_items, cfg.seed ^ TEST_SEED_SALT)?;
        train.manifest.split = Split::Train;
        test.manifest.split = Split::Test;
        (train, test)
    } else {
        let train = load_manifest(Path::new(&cfg.dataset), Split::Train)?;
        if cfg.test_dataset.is_empty() {
            return Err(Error::Config(
                "file-backed datasets need test_dataset to point at an evaluation manifest".into(),
            ));
        }
        let test = load_manifest(Path::new(&cfg.test_dataset), Split::Test)?;
        (train, test)
    };
    let (means, stds) = channel_stats(&train.items);
    if !means.is_empty() {
        apply_channel_norm(&mut train.items, &means, &stds);
        apply_channel_norm(&mut test.items, &means, &stds);
    }
    Ok((train, test, means, stds))
}

/// Fill in classes and input geometry from the dataset if the config left
/// them at 0.
fn resolve_geometry(cfg: &mut RunConfig, train: &Dataset) -> Result<()> {
    let classes = train
        .items
        .iter()
        .map(|i| i.label() + 1)
        .max()
        .unwrap_or(0)
        .max(train.manifest.classes);
    if cfg.classes == 0 {
        cfg.classes = classes;
    }
    if cfg.classes < 2 {
        return Err(Error::Data(format!(
            "dataset yields {} classes; need at least 2",
            cfg.classes
        )));
    }
    if cfg.input_channels == 0 {
        cfg.input_channels = train.input_channels();
    }
    if cfg.input_hw == 0 {
        cfg.input_hw = train.input_hw((cfg.event_hw, cfg.event_hw));
    }
    if cfg.input_channels == 0 || cfg.input_hw == 0 {
        return Err(Error::Data("cannot infer input geometry from an empty dataset".into()));
    }
    Ok(())
}

fn realize(
    item: &Item,
    cfg: &RunConfig,
    augment_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor5, usize)> {
    match (item, augment_rng) {
        (Item::Static { image, label }, Some(rng)) => {
            let img = augment_static(image, rng);
            Ok((encode_static(&img, cfg.timesteps), *label))
        }
        _ => realize_item(
            item,
            cfg.timesteps,
            cfg.slice_ms,
            (cfg.event_hw, cfg.event_hw),
        ),
    }
}

/// Run the test split through the network in inference mode. Returns
/// accuracy plus the mean per-timestep firing rate across every LIF layer.
pub fn evaluate(net: &mut Network, dataset: &Dataset, cfg: &RunConfig) -> Result<(f32, f32)> {
    if dataset.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let mut correct = 0usize;
    let mut spike_sum = 0.0f64;
    let mut spike_count = 0u64;
    for chunk in dataset.items.chunks(cfg.batch_size) {
        let mut tensors = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for item in chunk {
            let (x, label) = realize(item, cfg, None)?;
            tensors.push(x);
            labels.push(label);
        }
        let batch = stack_batch(&tensors)?;
        let (q, caches) = forward_pass(net, &batch, Phase::Infer)?;
        for (n, &label) in labels.iter().enumerate() {
            correct += usize::from(q.argmax(n) == label);
        }
        for (i, node) in net.nodes.iter().enumerate() {
            if matches!(node.kind, NodeKind::Lif(_)) {
                let out = &caches.node_out[i];
                spike_sum += out.data().iter().map(|&v| v as f64).sum::<f64>();
                spike_count += out.data().len() as u64;
            }
        }
    }
    let acc = correct as f32 / dataset.len() as f32;
    let rate = if spike_count > 0 {
        (spike_sum / spike_count as f64) as f32
    } else {
        0.0
    };
    Ok((acc, rate))
}

/// Train per the config file. See [`train_with_config`].
pub fn cmd_train(config_path: &Path) -> Result<TrainOutcome> {
    train_with_config(RunConfig::load(config_path)?)
}

/// Full training loop: per-epoch shuffled batches, spatio-temporal backward,
/// SGD with momentum and step decay, per-epoch metrics CSV and checkpoint,
/// resumable from any epoch checkpoint.
pub fn train_with_config(mut cfg: RunConfig) -> Result<TrainOutcome> {
    let (train_set, test_set, norm_mean, norm_std) = load_datasets(&cfg)?;
    resolve_geometry(&mut cfg, &train_set)?;

    let run_dir = out_root(&cfg).join(&cfg.run_name);
    std::fs::create_dir_all(&run_dir)?;

    let (mut net, mut opt, start_epoch) = if cfg.resume.is_empty() {
        let mut net = build_resnet(
            &cfg.arch,
            cfg.classes,
            cfg.input_channels,
            cfg.input_hw,
            cfg.lif_hyper()?,
        )?;
        init_weights(&mut net, cfg.seed);
        let opt = OptimState::new(
            &net,
            cfg.lr,
            cfg.momentum,
            cfg.lr_decay_every,
            cfg.lr_decay_factor,
        )?;
        (net, opt, 0)
    } else {
        let ckpt = Checkpoint::load(Path::new(&cfg.resume))?;
        if ckpt.fused {
            return Err(Error::State(
                "cannot resume training from a fused checkpoint".into(),
            ));
        }
        let (net, opt) = ckpt.restore()?;
        let opt = match opt {
            Some(o) => o,
            None => OptimState::new(
                &net,
                cfg.lr,
                cfg.momentum,
                cfg.lr_decay_every,
                cfg.lr_decay_factor,
            )?,
        };
        // the snapshot's resolved geometry wins over re-derivation
        cfg.classes = ckpt.config.classes;
        cfg.input_channels = ckpt.config.input_channels;
        cfg.input_hw = ckpt.config.input_hw;
        (net, opt, ckpt.epoch)
    };

    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = std::fs::File::create(&metrics_path)?;
    metrics.write_all(METRICS_HEADER.as_bytes())?;

    let mut history = Vec::new();
    let mut final_checkpoint = PathBuf::new();
    for epoch in start_epoch + 1..=cfg.epochs {
        opt.enter_epoch(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(EPOCH_SEED_MIX));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut augment_rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(EPOCH_SEED_MIX) ^ AUGMENT_SEED_SALT,
        );

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tensors = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let aug = if cfg.augment { Some(&mut augment_rng) } else { None };
                let (x, label) = realize(&train_set.items[idx], &cfg, aug)?;
                tensors.push(x);
                labels.push(label);
            }
            let batch = stack_batch(&tensors)?;
            let (q, caches) = forward_pass(&mut net, &batch, Phase::Train)?;
            let (loss, grad_q) = softmax_ce(&q, &labels)?;
            let grads = backward_pass(&net, &grad_q, &caches)?;
            opt.step(&mut net, &grads)?;
            loss_sum += loss as f64 * labels.len() as f64;
            for (n, &label) in labels.iter().enumerate() {
                correct += usize::from(q.argmax(n) == label);
            }
        }

        let (eval_acc, mean_rate) = evaluate(&mut net, &test_set, &cfg)?;
        let row = EpochMetrics {
            epoch,
            train_loss: (loss_sum / train_set.len() as f64) as f32,
            train_acc: correct as f32 / train_set.len() as f32,
            eval_acc,
            lr: opt.lr,
            mean_firing_rate: mean_rate,
        };
        metrics.write_all(row.csv_row().as_bytes())?;
        metrics.flush()?;
        history.push(row);

        let mut ckpt = Checkpoint::from_parts(&cfg, &net, Some(&opt), epoch);
        if !norm_mean.is_empty() {
            ckpt.tensors.push((
                "input_norm.mean".into(),
                vec![norm_mean.len() as u32],
                norm_mean.clone(),
            ));
            ckpt.tensors.push((
                "input_norm.std".into(),
                vec![norm_std.len() as u32],
                norm_std.clone(),
            ));
        }
        final_checkpoint = run_dir.join(format!("epoch_{epoch:04}.ckpt"));
        ckpt.save(&final_checkpoint)?;
    }

    Ok(TrainOutcome {
        run_dir,
        metrics_path,
        final_checkpoint,
        history,
    })
}

/// What an evaluation produced.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub accuracy: f32,
    pub items: usize,
    pub mean_firing_rate: f32,
    pub per_layer_rates: Vec<(String, f32)>,
}

/// Evaluate a checkpoint on a dataset: a toy dataset name or a manifest path.
pub fn cmd_eval(checkpoint: &Path, dataset: &str) -> Result<EvalOutcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = ckpt.config.clone();
    let (mut net, _) = ckpt.restore()?;

    let mut set = if let Some(kind) = toy_kind(dataset) {
        make_toy_dataset(kind, cfg.test_items, cfg.seed ^ TEST_SEED_SALT)?
    } else {
        load_manifest(Path::new(dataset), Split::Test)?
    };
    if set.is_empty() {
        return Err(Error::Data(format!("dataset {dataset:?} is empty")));
    }
    // apply the training-time input normalization, if any was recorded
    let norm_mean = ckpt.tensors.iter().find(|(n, _, _)| n == "input_norm.mean");
    let norm_std = ckpt.tensors.iter().find(|(n, _, _)| n == "input_norm.std");
    if let (Some((_, _, mean)), Some((_, _, std))) = (norm_mean, norm_std) {
        apply_channel_norm(&mut set.items, mean, std);
    }

    let (accuracy, mean_rate) = evaluate(&mut net, &set, &cfg)?;
    // per-layer rates from one representative batch
    let mut tensors = Vec::new();
    for item in set.items.iter().take(cfg.batch_size) {
        tensors.push(realize(item, &cfg, None)?.0);
    }
    let batch = stack_batch(&tensors)?;
    let per_layer_rates = crate::diagnostics::spike_profile(&mut net, &batch)?;
    Ok(EvalOutcome {
        accuracy,
        items: set.len(),
        mean_firing_rate: mean_rate,
        per_layer_rates,
    })
}

/// Fold every normalization layer of a trained checkpoint into its weights.
pub fn cmd_fuse(input: &Path, output: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(input)?;
    if ckpt.fused {
        return Err(Error::State(format!(
            "{} is already fused",
            input.display()
        )));
    }
    let (net, _) = ckpt.restore()?;
    let fused = net.fuse()?;
    let mut out = Checkpoint::from_parts(&ckpt.config, &fused, None, ckpt.epoch);
    for name in ["input_norm.mean", "input_norm.std"] {
        if let Some(t) = ckpt.tensors.iter().find(|(n, _, _)| n == name) {
            out.tensors.push(t.clone());
        }
    }
    out.save(output)?;
    Ok(())
}

pub const DIAGNOSE_KINDS: &[&str] = &["gradnorm", "variance", "firing", "opcount"];

/// Outcome of one diagnostic: the pass/fail verdict line already printed.
#[derive(Debug, Clone)]
pub struct DiagnoseOutcome {
    pub passed: bool,
    pub line: String,
    pub csv_path: PathBuf,
}

/// Run one named diagnostic, write its CSV, and judge it against the
/// asserted bands.
pub fn cmd_diagnose(kind: &str, config_path: &Path) -> Result<DiagnoseOutcome> {
    let cfg = RunConfig::load(config_path)?;
    diagnose_with_config(kind, cfg)
}

pub fn diagnose_with_config(kind: &str, cfg: RunConfig) -> Result<DiagnoseOutcome> {
    let run_dir = out_root(&cfg).join(&cfg.run_name);
    std::fs::create_dir_all(&run_dir)?;
    match kind {
        "gradnorm" => {
            let with = grad_norm_profile(cfg.diag_depth, cfg.tau_decay, true, 8, cfg.seed)?;
            let without = grad_norm_profile(cfg.diag_depth, cfg.tau_decay, false, 8, cfg.seed)?;
            let csv_path = run_dir.join("gradnorm.csv");
            write_gradnorm_csv(&csv_path, &[with.clone(), without.clone()])?;
            let band = if cfg.tau_decay == 0.0 { 3.0 } else { 10.0 };
            let passed = with.within_band(band) && !without.within_band(10.0);
            let line = format!(
                "{} gradnorm ratio={:.3} band=[1/{:.0},{:.0}] ablation_ratio={:.3}",
                verdict(passed),
                with.band_ratio(),
                band,
                band,
                without.band_ratio()
            );
            Ok(DiagnoseOutcome { passed, line, csv_path })
        }
        "variance" => {
            let sigmas = [0.5f32, 1.0, 2.0];
            let points =
                membrane_variance_scan(&sigmas, cfg.tau_decay, None, cfg.diag_samples, cfg.seed)?;
            let csv_path = run_dir.join("variance.csv");
            write_variance_csv(&csv_path, &points, cfg.tau_decay)?;
            let pairs: Vec<(f32, f32)> =
                points.iter().map(|p| (p.sigma_in_sq, p.sigma_out_sq)).collect();
            let (slope, _, r2) = linear_fit(&pairs);
            let within = points
                .iter()
                .all(|p| (p.sigma_out_sq - p.predicted).abs() / p.predicted < 0.1);
            let passed = within && r2 > 0.99;
            let line = format!(
                "{} variance slope={:.4} r2={:.5} predicted_slope={:.4}",
                verdict(passed),
                slope,
                r2,
                1.0 / (1.0 - cfg.tau_decay * cfg.tau_decay)
            );
            Ok(DiagnoseOutcome { passed, line, csv_path })
        }
        "firing" => {
            let sigmas = [0.1f32, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0];
            let points = firing_rate_scan(
                &sigmas,
                cfg.tau_decay,
                cfg.v_th,
                100,
                cfg.diag_samples,
                cfg.seed,
            )?;
            let csv_path = run_dir.join("firing.csv");
            write_firing_csv(&csv_path, &points, cfg.tau_decay)?;
            let monotone = points.windows(2).all(|w| w[1].mean_rate >= w[0].mean_rate);
            let spans = points[0].mean_rate < 0.05 && points.last().unwrap().mean_rate > 0.3;
            let passed = monotone && spans;
            let line = format!(
                "{} firing low={:.4} high={:.4} monotone={}",
                verdict(passed),
                points[0].mean_rate,
                points.last().unwrap().mean_rate,
                monotone
            );
            Ok(DiagnoseOutcome { passed, line, csv_path })
        }
        "opcount" => {
            let mut cfg = cfg;
            let (train_set, test_set, _, _) = load_datasets(&cfg)?;
            resolve_geometry(&mut cfg, &train_set)?;
            let mut net = build_resnet(
                &cfg.arch,
                cfg.classes,
                cfg.input_channels,
                cfg.input_hw,
                cfg.lif_hyper()?,
            )?;
            init_weights(&mut net, cfg.seed);
            // one training batch populates the running statistics
            let mut tensors = Vec::new();
            for item in train_set.items.iter().take(cfg.batch_size.max(2)) {
                tensors.push(realize(item, &cfg, None)?.0);
            }
            let batch = stack_batch(&tensors)?;
            forward_pass(&mut net, &batch, Phase::Train)?;
            let mut fused = net.fuse()?;

            let mut tensors = Vec::new();
            for item in test_set.items.iter().take(cfg.batch_size.max(2)) {
                tensors.push(realize(item, &cfg, None)?.0);
            }
            let batch = stack_batch(&tensors)?;
            let report = count_ops(&mut fused, &batch)?;
            let csv_path = run_dir.join("opcount.csv");
            write_opcount_csv(&csv_path, &report)?;
            let mean_rate = report.firing_rates.iter().map(|(_, r)| *r).sum::<f32>()
                / report.firing_rates.len().max(1) as f32;
            let passed = report.additions < report.ann_macs;
            let line = format!(
                "{} opcount snn_additions={} snn_multiplications={} ann_macs={} mean_rate={:.4}",
                verdict(passed),
                report.additions,
                report.multiplications,
                report.ann_macs,
                mean_rate
            );
            Ok(DiagnoseOutcome { passed, line, csv_path })
        }
        other => Err(Error::Config(format!(
            "unknown diagnostic {other:?}; valid kinds: {}",
            DIAGNOSE_KINDS.join(", ")
        ))),
    }
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}
