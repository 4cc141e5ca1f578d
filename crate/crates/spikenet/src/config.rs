//! Flat-text run configuration: one `key = value` per line, `#` comment
//! lines, unknown keys rejected so typos cannot silently fall back to
//! defaults.

use crate::error::{Error, Result};
use std::path::Path;

/// Every knob a run can turn. Fields left at 0 (classes, input geometry) are
/// resolved from the dataset when training starts and written back into
/// checkpoint snapshots as concrete values.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: String,
    pub classes: usize,
    pub input_channels: usize,
    pub input_hw: usize,
    pub timesteps: usize,
    pub tau_decay: f32,
    pub v_th: f32,
    pub surrogate_a: f32,
    pub detach_reset: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f32,
    pub seed: u64,
    /// Toy dataset name (`two_gaussians`, `xor_patches`, `moving_bar`) or a
    /// path to an event-dataset manifest.
    pub dataset: String,
    /// Manifest path for the evaluation split of file-backed datasets;
    /// ignored for toy datasets (they derive a fresh test split).
    pub test_dataset: String,
    pub train_items: usize,
    pub test_items: usize,
    pub slice_ms: f64,
    pub event_hw: usize,
    pub augment: bool,
    pub out_dir: String,
    pub run_name: String,
    /// Checkpoint path to resume training from; empty for a fresh run.
    pub resume: String,
    pub diag_depth: usize,
    pub diag_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: "toy8".into(),
            classes: 0,
            input_channels: 0,
            input_hw: 0,
            timesteps: 2,
            tau_decay: 0.25,
            v_th: 1.0,
            surrogate_a: 1.0,
            detach_reset: false,
            batch_size: 16,
            epochs: 20,
            lr: 0.1,
            momentum: 0.9,
            lr_decay_every: 35,
            lr_decay_factor: 0.1,
            seed: 0,
            dataset: "two_gaussians".into(),
            test_dataset: String::new(),
            train_items: 32,
            test_items: 16,
            slice_ms: 30.0,
            event_hw: 8,
            augment: false,
            out_dir: "runs".into(),
            run_name: "run".into(),
            resume: String::new(),
            diag_depth: 20,
            diag_samples: 20_000,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!(
            "key {key:?}: cannot parse {value:?} as {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!(
            "key {key:?}: expected a boolean, got {other:?}"
        ))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected \"key = value\"", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "arch" => self.arch = value.into(),
            "classes" => self.classes = parse_value(key, value)?,
            "input_channels" => self.input_channels = parse_value(key, value)?,
            "input_hw" => self.input_hw = parse_value(key, value)?,
            "timesteps" => self.timesteps = parse_value(key, value)?,
            "tau_decay" => self.tau_decay = parse_value(key, value)?,
            "v_th" => self.v_th = parse_value(key, value)?,
            "surrogate_a" => self.surrogate_a = parse_value(key, value)?,
            "detach_reset" => self.detach_reset = parse_bool(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse_value(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "dataset" => self.dataset = value.into(),
            "test_dataset" => self.test_dataset = value.into(),
            "train_items" => self.train_items = parse_value(key, value)?,
            "test_items" => self.test_items = parse_value(key, value)?,
            "slice_ms" => self.slice_ms = parse_value(key, value)?,
            "event_hw" => self.event_hw = parse_value(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "out_dir" => self.out_dir = value.into(),
            "run_name" => self.run_name = value.into(),
            "resume" => self.resume = value.into(),
            "diag_depth" => self.diag_depth = parse_value(key, value)?,
            "diag_samples" => self.diag_samples = parse_value(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 1 {
            return Err(Error::Config("timesteps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.tau_decay) {
            return Err(Error::Config(format!(
                "tau_decay must be in [0, 1), got {}",
                self.tau_decay
            )));
        }
        if !(self.v_th > 0.0) {
            return Err(Error::Config(format!("v_th must be positive, got {}", self.v_th)));
        }
        if !(self.surrogate_a > 0.0) {
            return Err(Error::Config(format!(
                "surrogate_a must be positive, got {}",
                self.surrogate_a
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.lr_decay_every < 1 {
            return Err(Error::Config("lr_decay_every must be >= 1".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must be in (0, 1), got {}",
                self.lr_decay_factor
            )));
        }
        if self.train_items < 2 || self.test_items < 2 {
            return Err(Error::Config(
                "train_items and test_items must be >= 2 per class".into(),
            ));
        }
        if !(self.slice_ms > 0.0) {
            return Err(Error::Config(format!(
                "slice_ms must be positive, got {}",
                self.slice_ms
            )));
        }
        if self.event_hw < 1 {
            return Err(Error::Config("event_hw must be >= 1".into()));
        }
        if self.diag_depth < 3 {
            return Err(Error::Config("diag_depth must be >= 3".into()));
        }
        if self.diag_samples < 100 {
            return Err(Error::Config("diag_samples must be >= 100".into()));
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order. Parsing it back yields
    /// an identical config.
    pub fn serialize(&self) -> String {
        format!(
            "arch = {}\n\
             classes = {}\n\
             input_channels = {}\n\
             input_hw = {}\n\
             timesteps = {}\n\
             tau_decay = {}\n\
             v_th = {}\n\
             surrogate_a = {}\n\
             detach_reset = {}\n\
             batch_size = {}\n\
             epochs = {}\n\
             lr = {}\n\
             momentum = {}\n\
             lr_decay_every = {}\n\
             lr_decay_factor = {}\n\
             seed = {}\n\
             dataset = {}\n\
             test_dataset = {}\n\
             train_items = {}\n\
             test_items = {}\n\
             slice_ms = {}\n\
             event_hw = {}\n\
             augment = {}\n\
             out_dir = {}\n\
             run_name = {}\n\
             resume = {}\n\
             diag_depth = {}\n\
             diag_samples = {}\n",
            self.arch,
            self.classes,
            self.input_channels,
            self.input_hw,
            self.timesteps,
            self.tau_decay,
            self.v_th,
            self.surrogate_a,
            self.detach_reset,
            self.batch_size,
            self.epochs,
            self.lr,
            self.momentum,
            self.lr_decay_every,
            self.lr_decay_factor,
            self.seed,
            self.dataset,
            self.test_dataset,
            self.train_items,
            self.test_items,
            self.slice_ms,
            self.event_hw,
            self.augment,
            self.out_dir,
            self.run_name,
            self.resume,
            self.diag_depth,
            self.diag_samples,
        )
    }

    /// LIF hyperparameters implied by this config.
    pub fn lif_hyper(&self) -> Result<crate::neuron::LifHyper> {
        let mut h = crate::neuron::LifHyper::new(self.tau_decay, self.v_th, self.surrogate_a)?;
        h.detach_reset = self.detach_reset;
        Ok(h)
    }
}
