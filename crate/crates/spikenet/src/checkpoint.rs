//! Checkpoint persistence.
//!
//! Layout (all integers little-endian): magic `STBN`, `u32` version = 1,
//! `u32` text length plus that many bytes of config snapshot (the serialized
//! run config followed by `epoch = <n>` and `fused = <bool>` lines), then one
//! record per tensor: `{u16 name_len, name bytes, u8 dtype = 1 (f32),
//! u8 ndim, u32 dims[ndim], f32 payload}`. Byte-diffable with a hex tool and
//! bit-exact across round trips.

use crate::arch::{build_resnet, Network, NodeKind};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::OptimState;
use std::path::Path;

const MAGIC: &[u8; 4] = b"STBN";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

/// An on-disk training state: config snapshot plus named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub fused: bool,
    /// `(name, dims, data)` in a fixed, name-independent order.
    pub tensors: Vec<(String, Vec<u32>, Vec<f32>)>,
}

fn conv_dims(p: &crate::ops::ConvParams) -> Vec<u32> {
    vec![p.c_out as u32, p.c_in as u32, p.k_h as u32, p.k_w as u32]
}

impl Checkpoint {
    /// Snapshot a network (and optionally its optimizer) at an epoch.
    pub fn from_parts(
        config: &RunConfig,
        net: &Network,
        opt: Option<&OptimState>,
        epoch: usize,
    ) -> Self {
        let mut tensors = Vec::new();
        for node in &net.nodes {
            match &node.kind {
                NodeKind::Conv(p) => {
                    tensors.push((format!("{}.weight", node.name), conv_dims(p), p.kernel.clone()));
                    tensors.push((
                        format!("{}.bias", node.name),
                        vec![p.c_out as u32],
                        p.bias.clone(),
                    ));
                }
                NodeKind::Linear(p) => {
                    tensors.push((
                        format!("{}.weight", node.name),
                        vec![p.d_out as u32, p.d_in as u32],
                        p.weight.clone(),
                    ));
                    tensors.push((
                        format!("{}.bias", node.name),
                        vec![p.d_out as u32],
                        p.bias.clone(),
                    ));
                }
                NodeKind::TdBn(p) => {
                    let c = p.channels as u32;
                    tensors.push((format!("{}.lambda", node.name), vec![c], p.lambda.clone()));
                    tensors.push((format!("{}.beta", node.name), vec![c], p.beta.clone()));
                    tensors.push((
                        format!("{}.running_mean", node.name),
                        vec![c],
                        p.running_mean.clone(),
                    ));
                    tensors.push((
                        format!("{}.running_var", node.name),
                        vec![c],
                        p.running_var.clone(),
                    ));
                    tensors.push((
                        format!("{}.stat_steps", node.name),
                        vec![1],
                        vec![p.stat_steps as f32],
                    ));
                }
                _ => {}
            }
        }
        tensors.push((
            "decoder.weight".into(),
            vec![net.decoder.d_out as u32, net.decoder.d_in as u32],
            net.decoder.weight.clone(),
        ));
        tensors.push((
            "decoder.bias".into(),
            vec![net.decoder.d_out as u32],
            net.decoder.bias.clone(),
        ));
        if let Some(opt) = opt {
            for (name, v) in net.param_names().iter().zip(&opt.velocity) {
                tensors.push((format!("opt.{name}.v"), vec![v.len() as u32], v.clone()));
            }
        }
        Checkpoint {
            config: config.clone(),
            epoch,
            fused: net.fused,
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let text = format!(
            "{}epoch = {}\nfused = {}\n",
            self.config.serialize(),
            self.epoch,
            self.fused
        );
        buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        for (name, dims, data) in &self.tensors {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(DTYPE_F32);
            buf.push(dims.len() as u8);
            for d in dims {
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::parse(&bytes)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(Error::Format {
                    offset: bytes.len() as u64,
                    msg: format!("unexpected end of checkpoint while reading {what}"),
                });
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let magic = take(&mut off, 4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:02x?}, expected \"STBN\""),
            });
        }
        let version = u32::from_le_bytes(take(&mut off, 4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let text_len =
            u32::from_le_bytes(take(&mut off, 4, "config length")?.try_into().unwrap()) as usize;
        let text_off = off as u64;
        let text = std::str::from_utf8(take(&mut off, text_len, "config text")?).map_err(|e| {
            Error::Format {
                offset: text_off,
                msg: format!("config snapshot is not utf-8: {e}"),
            }
        })?;

        // split run-state metadata out of the config snapshot
        let mut epoch = 0usize;
        let mut fused = false;
        let mut config_lines = String::new();
        for line in text.lines() {
            if let Some(v) = line.strip_prefix("epoch = ") {
                epoch = v.trim().parse().map_err(|_| Error::Format {
                    offset: text_off,
                    msg: format!("bad epoch value {v:?}"),
                })?;
            } else if let Some(v) = line.strip_prefix("fused = ") {
                fused = v.trim() == "true";
            } else {
                config_lines.push_str(line);
                config_lines.push('\n');
            }
        }
        let config = RunConfig::parse(&config_lines)?;

        let mut tensors = Vec::new();
        while off < bytes.len() {
            let name_len =
                u16::from_le_bytes(take(&mut off, 2, "tensor name length")?.try_into().unwrap())
                    as usize;
            let name_off = off as u64;
            let name = std::str::from_utf8(take(&mut off, name_len, "tensor name")?)
                .map_err(|e| Error::Format {
                    offset: name_off,
                    msg: format!("tensor name is not utf-8: {e}"),
                })?
                .to_string();
            let dtype = take(&mut off, 1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Format {
                    offset: (off - 1) as u64,
                    msg: format!("tensor {name}: unsupported dtype {dtype}"),
                });
            }
            let ndim = take(&mut off, 1, "ndim")?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            let mut count = 1usize;
            for _ in 0..ndim {
                let d = u32::from_le_bytes(take(&mut off, 4, "dim")?.try_into().unwrap());
                count *= d as usize;
                dims.push(d);
            }
            let payload = take(&mut off, count * 4, &format!("payload of {name}"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, dims, data));
        }
        Ok(Checkpoint {
            config,
            epoch,
            fused,
            tensors,
        })
    }

    fn tensor(&self, name: &str) -> Result<&(String, Vec<u32>, Vec<f32>)> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::State(format!("checkpoint is missing tensor {name:?}")))
    }

    fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _, _)| n == name)
    }

    /// Rebuild the network (and optimizer state when present) this
    /// checkpoint describes.
    pub fn restore(&self) -> Result<(Network, Option<OptimState>)> {
        let cfg = &self.config;
        let hyper = cfg.lif_hyper()?;
        if cfg.classes == 0 || cfg.input_channels == 0 || cfg.input_hw == 0 {
            return Err(Error::State(
                "checkpoint config lacks resolved dataset geometry".into(),
            ));
        }
        let mut net = build_resnet(
            &cfg.arch,
            cfg.classes,
            cfg.input_channels,
            cfg.input_hw,
            hyper,
        )?;
        if self.fused {
            // fuse the freshly built graph structurally; every fused weight
            // is overwritten from the checkpoint right after
            for node in &mut net.nodes {
                if let NodeKind::TdBn(p) = &mut node.kind {
                    p.stat_steps = 1;
                }
            }
            net = net.fuse()?;
        }

        let fill = |dst: &mut Vec<f32>, name: &str| -> Result<()> {
            let (_, _, data) = self.tensor(name)?;
            if data.len() != dst.len() {
                return Err(Error::State(format!(
                    "tensor {name:?} holds {} values, network expects {}",
                    data.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(data);
            Ok(())
        };
        for node in &mut net.nodes {
            let name = node.name.clone();
            match &mut node.kind {
                NodeKind::Conv(p) => {
                    fill(&mut p.kernel, &format!("{name}.weight"))?;
                    fill(&mut p.bias, &format!("{name}.bias"))?;
                }
                NodeKind::Linear(p) => {
                    fill(&mut p.weight, &format!("{name}.weight"))?;
                    fill(&mut p.bias, &format!("{name}.bias"))?;
                }
                NodeKind::TdBn(p) => {
                    fill(&mut p.lambda, &format!("{name}.lambda"))?;
                    fill(&mut p.beta, &format!("{name}.beta"))?;
                    fill(&mut p.running_mean, &format!("{name}.running_mean"))?;
                    fill(&mut p.running_var, &format!("{name}.running_var"))?;
                    let (_, _, steps) = self.tensor(&format!("{name}.stat_steps"))?;
                    p.stat_steps = steps[0] as u64;
                }
                _ => {}
            }
        }
        fill(&mut net.decoder.weight, "decoder.weight")?;
        fill(&mut net.decoder.bias, "decoder.bias")?;

        let opt = if self.has_tensor("opt.decoder.weight.v") {
            let mut opt = OptimState::new(
                &net,
                cfg.lr,
                cfg.momentum,
                cfg.lr_decay_every,
                cfg.lr_decay_factor,
            )?;
            for (name, v) in net.param_names().iter().zip(opt.velocity.iter_mut()) {
                let (_, _, data) = self.tensor(&format!("opt.{name}.v"))?;
                if data.len() != v.len() {
                    return Err(Error::State(format!(
                        "optimizer tensor for {name:?} has wrong length"
                    )));
                }
                v.copy_from_slice(data);
            }
            opt.enter_epoch(self.epoch + 1);
            Some(opt)
        } else {
            None
        };
        Ok((net, opt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::init_weights;

    fn resolved_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.classes = 2;
        cfg.input_channels = 1;
        cfg.input_hw = 8;
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = resolved_config();
        let mut net = build_resnet("toy8", 2, 1, 8, cfg.lif_hyper().unwrap()).unwrap();
        init_weights(&mut net, 123);
        let opt = OptimState::new(&net, 0.1, 0.9, 35, 0.1).unwrap();
        let ckpt = Checkpoint::from_parts(&cfg, &net, Some(&opt), 7);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ckpt.save(&path).unwrap();
        let bytes_a = std::fs::read(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.epoch, 7);
        assert!(!loaded.fused);
        let path_b = dir.path().join("b.ckpt");
        loaded.save(&path_b).unwrap();
        let bytes_b = std::fs::read(&path_b).unwrap();
        assert_eq!(bytes_a, bytes_b, "save(load(x)) must be byte-identical");

        // restored network matches the original parameters exactly
        let (mut net2, opt2) = loaded.restore().unwrap();
        assert!(opt2.is_some());
        for i in 0..net.param_count() {
            let a = net.with_param(i, |s| s.to_vec());
            let b = net2.with_param(i, |s| s.to_vec());
            assert_eq!(a, b, "parameter slice {i}");
        }
    }

    #[test]
    fn bad_magic_is_a_format_error_at_offset_zero() {
        let err = Checkpoint::parse(b"NOPE....").unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn truncated_payload_reports_format_error() {
        let cfg = resolved_config();
        let mut net = build_resnet("toy8", 2, 1, 8, cfg.lif_hyper().unwrap()).unwrap();
        init_weights(&mut net, 1);
        let ckpt = Checkpoint::from_parts(&cfg, &net, None, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        ckpt.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            Checkpoint::parse(&bytes),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn fused_checkpoints_restore_fused_graphs_without_stats() {
        let cfg = resolved_config();
        let mut net = build_resnet("toy8", 2, 1, 8, cfg.lif_hyper().unwrap()).unwrap();
        init_weights(&mut net, 5);
        for node in &mut net.nodes {
            if let NodeKind::TdBn(p) = &mut node.kind {
                p.stat_steps = 1;
            }
        }
        let fused = net.fuse().unwrap();
        let ckpt = Checkpoint::from_parts(&cfg, &fused, None, 3);
        assert!(ckpt.fused);
        assert!(
            !ckpt.tensors.iter().any(|(n, _, _)| n.contains("running_")),
            "fused checkpoints carry no running statistics"
        );
        let (restored, _) = ckpt.restore().unwrap();
        assert!(restored.fused);
        assert!(restored
            .nodes
            .iter()
            .all(|n| !matches!(n.kind, NodeKind::TdBn(_))));
    }
}
