//! SGD with momentum and a step learning-rate decay schedule.

use crate::arch::Network;
use crate::autograd::Gradients;
use crate::error::{Error, Result};

/// Optimizer state: one velocity buffer per parameter slice, plus the
/// learning-rate schedule.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub base_lr: f32,
    pub lr: f32,
    pub momentum: f32,
    /// Decay the learning rate every this many epochs...
    pub decay_every: usize,
    /// ...by this factor.
    pub decay_factor: f32,
    pub velocity: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new(
        net: &Network,
        lr: f32,
        momentum: f32,
        decay_every: usize,
        decay_factor: f32,
    ) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if decay_every == 0 {
            return Err(Error::Config("decay_every must be >= 1".into()));
        }
        if !(decay_factor > 0.0 && decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must be in (0, 1), got {decay_factor}"
            )));
        }
        let velocity = Gradients::zeros_like(net).slices;
        Ok(OptimState {
            base_lr: lr,
            lr,
            momentum,
            decay_every,
            decay_factor,
            velocity,
        })
    }

    /// Learning rate in effect during a 1-indexed epoch.
    pub fn lr_for_epoch(&self, epoch: usize) -> f32 {
        let drops = (epoch.max(1) - 1) / self.decay_every;
        self.base_lr * self.decay_factor.powi(drops as i32)
    }

    /// Set the current learning rate from the schedule.
    pub fn enter_epoch(&mut self, epoch: usize) {
        self.lr = self.lr_for_epoch(epoch);
    }

    /// One update: `v <- momentum * v + g`, `p <- p - lr * v`.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if grads.slices.len() != self.velocity.len() {
            return Err(Error::Dim(format!(
                "optimizer holds {} parameter slices, gradients carry {}",
                self.velocity.len(),
                grads.slices.len()
            )));
        }
        let lr = self.lr;
        let momentum = self.momentum;
        for (i, (v, g)) in self.velocity.iter_mut().zip(&grads.slices).enumerate() {
            if v.len() != g.len() {
                return Err(Error::Dim(format!(
                    "parameter slice {i} has {} entries, gradient has {}",
                    v.len(),
                    g.len()
                )));
            }
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = momentum * *vi + gi;
            }
            let v_ref: &[f32] = v;
            net.with_param(i, |p| {
                for (pi, vi) in p.iter_mut().zip(v_ref) {
                    *pi -= lr * vi;
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{NetworkBuilder, NodeKind};
    use crate::neuron::LifHyper;
    use crate::ops::LinearParams;

    fn scalar_net() -> Network {
        let mut b = NetworkBuilder::new(LifHyper::default());
        b.push(
            "fc",
            NodeKind::Linear(LinearParams::zeros(1, 1)),
            vec![0],
        );
        b.finish(LinearParams::zeros(1, 1)).unwrap()
    }

    fn grad_of(net: &Network, value: f32) -> Gradients {
        let mut g = Gradients::zeros_like(net);
        g.slices[0][0] = value;
        g
    }

    #[test]
    fn plain_step_without_momentum() {
        let mut net = scalar_net();
        let mut opt = OptimState::new(&net, 0.1, 0.0, 35, 0.1).unwrap();
        let g = grad_of(&net, 1.0);
        opt.step(&mut net, &g).unwrap();
        let p = net.with_param(0, |s| s[0]);
        assert!((p + 0.1).abs() < 1e-7);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut net = scalar_net();
        let mut opt = OptimState::new(&net, 0.1, 0.9, 35, 0.1).unwrap();
        let g = grad_of(&net, 1.0);
        opt.step(&mut net, &g).unwrap();
        assert!((net.with_param(0, |s| s[0]) + 0.1).abs() < 1e-7);
        opt.step(&mut net, &g).unwrap();
        // v = 0.9 * 1 + 1 = 1.9, p = -0.1 - 0.19 = -0.29
        assert!((net.with_param(0, |s| s[0]) + 0.29).abs() < 1e-6);
    }

    #[test]
    fn step_decay_schedule() {
        let net = scalar_net();
        let opt = OptimState::new(&net, 0.1, 0.9, 35, 0.1).unwrap();
        assert!((opt.lr_for_epoch(1) - 0.1).abs() < 1e-8);
        assert!((opt.lr_for_epoch(35) - 0.1).abs() < 1e-8);
        assert!((opt.lr_for_epoch(36) - 0.01).abs() < 1e-8);
        assert!((opt.lr_for_epoch(71) - 0.001).abs() < 1e-9);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut net = scalar_net();
        let mut opt = OptimState::new(&net, 0.1, 0.0, 35, 0.1).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.slices[0] = vec![0.0, 0.0];
        assert!(matches!(opt.step(&mut net, &g), Err(Error::Dim(_))));
    }
}
