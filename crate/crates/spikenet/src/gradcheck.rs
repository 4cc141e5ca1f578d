//! Central finite-difference utilities used to validate analytic backward
//! passes.
//!
//! These helpers only ever evaluate a forward closure, so they stay
//! independent of the backward code they are used to check. Network-level
//! checks perturb one parameter at a time through [`crate::arch::Network`]'s
//! parameter accessors and re-run the smoothed forward.

use crate::arch::Network;
use crate::autograd::{forward_pass, softmax_ce, Phase};
use crate::error::Result;
use crate::tensor::Tensor5;

/// Central difference gradient of `f` with respect to every entry of `xs`.
///
/// `f` receives the full (temporarily perturbed) slice and returns a scalar.
/// The quotient is formed in `f64` to keep the difference well conditioned.
pub fn central_diff(xs: &mut [f32], mut f: impl FnMut(&[f32]) -> f64, step: f32) -> Vec<f64> {
    let mut grads = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let saved = xs[i];
        xs[i] = saved + step;
        let up = f(xs);
        xs[i] = saved - step;
        let down = f(xs);
        xs[i] = saved;
        grads.push((up - down) / (2.0 * step as f64));
    }
    grads
}

/// Relative error between an analytic and a finite-difference gradient,
/// floored so near-zero pairs compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Largest relative error across two gradient slices.
pub fn max_rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a as f64, n))
        .fold(0.0, f64::max)
}

/// Finite-difference gradient of the smoothed-forward cross-entropy loss with
/// respect to every trainable parameter of `net`, in the same order as
/// [`Network::param_slices_mut`] yields them.
///
/// Runs the network with ramp activations (the integral of the rectangular
/// surrogate), which is the only forward whose true derivative the surrogate
/// backward computes.
pub fn network_fd_grads(
    net: &mut Network,
    input: &Tensor5,
    labels: &[usize],
    step: f32,
) -> Result<Vec<Vec<f64>>> {
    let n_params = net.param_count();
    let mut all = Vec::new();
    for p in 0..n_params {
        let len = net.with_param(p, |slice| slice.len());
        let mut grads = Vec::with_capacity(len);
        for i in 0..len {
            let saved = net.with_param(p, |s| s[i]);
            net.with_param(p, |s| s[i] = saved + step);
            let up = loss_of(net, input, labels)?;
            net.with_param(p, |s| s[i] = saved - step);
            let down = loss_of(net, input, labels)?;
            net.with_param(p, |s| s[i] = saved);
            grads.push((up - down) / (2.0 * step as f64));
        }
        all.push(grads);
    }
    let _ = n_params;
    Ok(all)
}

fn loss_of(net: &mut Network, input: &Tensor5, labels: &[usize]) -> Result<f64> {
    let (q, _caches) = forward_pass(net, input, Phase::TrainSmoothed)?;
    let (loss, _grad) = softmax_ce(&q, labels)?;
    Ok(loss as f64)
}
