//! Iterative leaky integrate-and-fire dynamics with hard reset, plus the
//! rectangular surrogate derivative used during backward.
//!
//! Forward recursion per position, with `u^0 = 0` and `o^0 = 0`:
//!
//! ```text
//! u^t = tau_decay * u^{t-1} * (1 - o^{t-1}) + x^t
//! o^t = 1 if u^t > v_th else 0
//! ```
//!
//! The cached potentials are the pre-reset `u^t` values; the state carried to
//! the next step is zero wherever the neuron fired.

use crate::error::{Error, Result};
use crate::tensor::Tensor5;

/// LIF hyperparameters shared by a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifHyper {
    /// Membrane decay per timestep, in `[0, 1)`.
    pub tau_decay: f32,
    /// Firing threshold, positive.
    pub v_th: f32,
    /// Width of the rectangular surrogate window, positive.
    pub a: f32,
    /// When true, the backward pass drops the gradient that flows through the
    /// reset factor `(1 - o^t)` into `o^t`. Off by default: the reset path is
    /// part of the exact derivative of the smoothed forward.
    pub detach_reset: bool,
}

impl Default for LifHyper {
    fn default() -> Self {
        LifHyper {
            tau_decay: 0.25,
            v_th: 1.0,
            a: 1.0,
            detach_reset: false,
        }
    }
}

impl LifHyper {
    pub fn new(tau_decay: f32, v_th: f32, a: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&tau_decay) {
            return Err(Error::Config(format!(
                "tau_decay must be in [0, 1), got {tau_decay}"
            )));
        }
        if !(v_th > 0.0) {
            return Err(Error::Config(format!("v_th must be positive, got {v_th}")));
        }
        if !(a > 0.0) {
            return Err(Error::Config(format!(
                "surrogate width a must be positive, got {a}"
            )));
        }
        Ok(LifHyper {
            tau_decay,
            v_th,
            a,
            detach_reset: false,
        })
    }
}

/// The one firing predicate: strict threshold crossing.
#[inline]
pub fn fires(u: f32, v_th: f32) -> bool {
    u > v_th
}

/// How spikes are produced in forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    /// Binary step: the real thing.
    Binary,
    /// Piecewise-linear ramp of slope `1/a` on `[v_th - a/2, v_th + a/2]`:
    /// the integral of the rectangular surrogate. Used only to validate
    /// gradients numerically; never for actual spiking inference.
    Smoothed,
}

/// Rectangular surrogate derivative: `1/a` inside the window around `v_th`.
#[inline]
pub fn surrogate_grad(u: f32, hyper: &LifHyper) -> f32 {
    if (u - hyper.v_th).abs() < hyper.a / 2.0 {
        1.0 / hyper.a
    } else {
        0.0
    }
}

/// Ramp activation whose derivative is [`surrogate_grad`].
#[inline]
pub fn smoothed_spike(u: f32, hyper: &LifHyper) -> f32 {
    ((u - hyper.v_th) / hyper.a + 0.5).clamp(0.0, 1.0)
}

/// Per-layer membrane state between timesteps.
///
/// `u` holds post-reset potentials: exactly 0 wherever the previous step
/// fired, until the next input arrives.
#[derive(Debug, Clone)]
pub struct LifLayerState {
    pub u: Vec<f32>,
    pub last_spikes: Vec<f32>,
}

impl LifLayerState {
    pub fn zeros(len: usize) -> Self {
        LifLayerState {
            u: vec![0.0; len],
            last_spikes: vec![0.0; len],
        }
    }

    /// Advance one timestep on a flat slice of pre-activations. Returns the
    /// pre-reset potential and the spike per position through `out_u`/`out_o`.
    pub fn step(
        &mut self,
        x: &[f32],
        hyper: &LifHyper,
        mode: SpikeMode,
        out_u: &mut [f32],
        out_o: &mut [f32],
    ) {
        debug_assert_eq!(x.len(), self.u.len());
        for i in 0..x.len() {
            let u = hyper.tau_decay * self.u[i] + x[i];
            let o = match mode {
                SpikeMode::Binary => {
                    if fires(u, hyper.v_th) {
                        1.0
                    } else {
                        0.0
                    }
                }
                SpikeMode::Smoothed => smoothed_spike(u, hyper),
            };
            out_u[i] = u;
            out_o[i] = o;
            self.u[i] = u * (1.0 - o);
            self.last_spikes[i] = o;
        }
    }
}

/// Run the LIF recursion over all timesteps of a pre-activation tensor.
///
/// Returns `(spikes, potentials)`; the potentials are the pre-reset membrane
/// values cached for backward.
pub fn lif_forward(x: &Tensor5, hyper: &LifHyper, mode: SpikeMode) -> (Tensor5, Tensor5) {
    let s = x.shape();
    let step_len = s.len() / s.t;
    let mut spikes = Tensor5::zeros(s);
    let mut potentials = Tensor5::zeros(s);
    let mut state = LifLayerState::zeros(step_len);
    for t in 0..s.t {
        let lo = t * step_len;
        let hi = lo + step_len;
        state.step(
            &x.data()[lo..hi],
            hyper,
            mode,
            &mut potentials.data_mut()[lo..hi],
            &mut spikes.data_mut()[lo..hi],
        );
    }
    (spikes, potentials)
}

/// Reverse-time gradient of [`lif_forward`].
///
/// `grad_spikes` is the loss gradient at the spike output; `grad_potentials`,
/// when given, is the loss gradient at the potentials output. Per timestep
/// from `T` down to `1`:
///
/// ```text
/// g_o^t = grad_spikes^t - g_u^{t+1} * tau * u^t        (reset path, optional)
/// g_u^t = g_o^t * surrogate(u^t)
///       + g_u^{t+1} * tau * (1 - o^t)
///       + grad_potentials^t
/// grad_x^t = g_u^t
/// ```
pub fn lif_backward(
    grad_spikes: &Tensor5,
    grad_potentials: Option<&Tensor5>,
    cached_u: &Tensor5,
    cached_o: &Tensor5,
    hyper: &LifHyper,
) -> Result<Tensor5> {
    let s = grad_spikes.shape();
    if cached_u.shape() != s || cached_o.shape() != s {
        return Err(Error::State(format!(
            "lif backward caches {} / {} do not match upstream {}",
            cached_u.shape(),
            cached_o.shape(),
            s
        )));
    }
    if let Some(gp) = grad_potentials {
        if gp.shape() != s {
            return Err(Error::State(format!(
                "potential gradient {} does not match upstream {}",
                gp.shape(),
                s
            )));
        }
    }

    let step_len = s.len() / s.t;
    let tau = hyper.tau_decay;
    let mut grad_x = Tensor5::zeros(s);
    let mut g_next = vec![0.0f32; step_len];
    for t in (0..s.t).rev() {
        let lo = t * step_len;
        for i in 0..step_len {
            let u = cached_u.data()[lo + i];
            let o = cached_o.data()[lo + i];
            let mut g_o = grad_spikes.data()[lo + i];
            if !hyper.detach_reset {
                g_o += g_next[i] * (-tau * u);
            }
            let mut g_u = g_o * surrogate_grad(u, hyper) + g_next[i] * tau * (1.0 - o);
            if let Some(gp) = grad_potentials {
                g_u += gp.data()[lo + i];
            }
            grad_x.data_mut()[lo + i] = g_u;
            g_next[i] = g_u;
        }
    }
    Ok(grad_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use crate::tensor::Shape5;

    fn scalar_series(xs: &[f32]) -> Tensor5 {
        Tensor5::from_vec(Shape5::new(xs.len(), 1, 1, 1, 1), xs.to_vec()).unwrap()
    }

    #[test]
    fn quiescent_neuron_stays_silent() {
        let x = Tensor5::zeros(Shape5::new(4, 2, 1, 2, 2));
        let (spikes, potentials) = lif_forward(&x, &LifHyper::default(), SpikeMode::Binary);
        assert!(spikes.data().iter().all(|&v| v == 0.0));
        assert!(potentials.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_trace_with_hard_reset() {
        let hyper = LifHyper::new(0.5, 1.0, 1.0).unwrap();
        let x = scalar_series(&[0.6, 0.6, 0.6, 0.6]);
        let (spikes, potentials) = lif_forward(&x, &hyper, SpikeMode::Binary);
        let expect_u = [0.6, 0.9, 1.05, 0.6];
        let expect_o = [0.0, 0.0, 1.0, 0.0];
        for t in 0..4 {
            assert!(
                (potentials.at(t, 0, 0, 0, 0) - expect_u[t]).abs() < 1e-6,
                "t={t}: {} vs {}",
                potentials.at(t, 0, 0, 0, 0),
                expect_u[t]
            );
            assert_eq!(spikes.at(t, 0, 0, 0, 0), expect_o[t]);
        }
    }

    #[test]
    fn zero_decay_is_memoryless() {
        let hyper = LifHyper::new(0.0, 1.0, 1.0).unwrap();
        let x = scalar_series(&[2.0, 0.5, 1.2, 0.9, 3.0]);
        let (spikes, _) = lif_forward(&x, &hyper, SpikeMode::Binary);
        for t in 0..5 {
            let expect = if x.at(t, 0, 0, 0, 0) > hyper.v_th { 1.0 } else { 0.0 };
            assert_eq!(spikes.at(t, 0, 0, 0, 0), expect);
        }
    }

    #[test]
    fn surrogate_window_values() {
        let hyper = LifHyper::new(0.25, 1.0, 1.0).unwrap();
        assert_eq!(surrogate_grad(hyper.v_th, &hyper), 1.0);
        assert_eq!(surrogate_grad(hyper.v_th + hyper.a, &hyper), 0.0);
        assert_eq!(surrogate_grad(hyper.v_th - 0.3, &hyper), 1.0);
    }

    #[test]
    fn hard_reset_zeroes_state_before_next_input() {
        let hyper = LifHyper::new(0.5, 1.0, 1.0).unwrap();
        let mut state = LifLayerState::zeros(1);
        let mut u = [0.0f32];
        let mut o = [0.0f32];
        state.step(&[1.5], &hyper, SpikeMode::Binary, &mut u, &mut o);
        assert_eq!(o[0], 1.0);
        assert_eq!(state.u[0], 0.0);
        // with zero input next step, the potential stays at exactly 0
        state.step(&[0.0], &hyper, SpikeMode::Binary, &mut u, &mut o);
        assert_eq!(u[0], 0.0);
    }

    #[test]
    fn potentials_stay_bounded_by_geometric_sum() {
        let hyper = LifHyper::new(0.75, 10.0, 1.0).unwrap();
        let s = Shape5::new(50, 1, 1, 1, 1);
        let x = Tensor5::from_fn(s, |t, _, _, _, _| if t % 2 == 0 { 1.0 } else { -1.0 });
        let (_, potentials) = lif_forward(&x, &hyper, SpikeMode::Binary);
        let bound = x.max_abs() / (1.0 - hyper.tau_decay) + 1e-5;
        assert!(potentials.data().iter().all(|&u| u.abs() <= bound));
    }

    #[test]
    fn backward_with_zero_decay_is_per_timestep() {
        let hyper = LifHyper::new(0.0, 1.0, 1.0).unwrap();
        let u = scalar_series(&[0.8, 1.2, 0.2]);
        let o = u.map(|v| if fires(v, hyper.v_th) { 1.0 } else { 0.0 });
        let g = scalar_series(&[1.0, 2.0, 3.0]);
        let gx = lif_backward(&g, None, &u, &o, &hyper).unwrap();
        for t in 0..3 {
            let expect = g.at(t, 0, 0, 0, 0) * surrogate_grad(u.at(t, 0, 0, 0, 0), &hyper);
            assert_eq!(gx.at(t, 0, 0, 0, 0), expect);
        }
    }

    #[test]
    fn backward_single_timestep_has_no_temporal_term() {
        let hyper = LifHyper::default();
        let u = scalar_series(&[1.1]);
        let o = scalar_series(&[1.0]);
        let g = scalar_series(&[0.7]);
        let gx = lif_backward(&g, None, &u, &o, &hyper).unwrap();
        assert_eq!(gx.at(0, 0, 0, 0, 0), 0.7 * surrogate_grad(1.1, &hyper));
    }

    #[test]
    fn backward_hand_unroll_through_quiet_chain() {
        // All potentials far below threshold, gradient injected only at t = T
        // through the potentials output: one decay factor per step back.
        let hyper = LifHyper::new(0.25, 10.0, 1.0).unwrap();
        let u = scalar_series(&[0.1, 0.1, 0.1]);
        let o = scalar_series(&[0.0, 0.0, 0.0]);
        let gs = scalar_series(&[0.0, 0.0, 0.0]);
        let gp = scalar_series(&[0.0, 0.0, 1.0]);
        let gx = lif_backward(&gs, Some(&gp), &u, &o, &hyper).unwrap();
        assert!((gx.at(2, 0, 0, 0, 0) - 1.0).abs() < 1e-7);
        assert!((gx.at(1, 0, 0, 0, 0) - 0.25).abs() < 1e-7);
        assert!((gx.at(0, 0, 0, 0, 0) - 0.0625).abs() < 1e-7);
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let hyper = LifHyper::default();
        let g = scalar_series(&[1.0, 1.0]);
        let u = scalar_series(&[1.0]);
        let o = scalar_series(&[0.0]);
        assert!(matches!(
            lif_backward(&g, None, &u, &o, &hyper),
            Err(crate::error::Error::State(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences_of_smoothed_forward() {
        let hyper = LifHyper::new(0.25, 1.0, 1.0).unwrap();
        let s = Shape5::new(3, 1, 1, 2, 2);
        // chosen so every membrane value stays clear of the ramp kinks at
        // v_th - a/2 and v_th + a/2
        let mut xs = vec![
            0.31, 1.22, 0.74, -0.4, //
            0.62, 0.05, 1.30, 0.88, //
            -0.21, 0.97, 0.42, 1.61,
        ];
        // linear read-out weights on both outputs
        let cs: Vec<f32> = (0..12).map(|i| 0.3 + 0.1 * i as f32).collect();
        let ds: Vec<f32> = (0..12).map(|i| -0.2 + 0.05 * i as f32).collect();

        let loss = |vals: &[f32]| -> f64 {
            let x = Tensor5::from_vec(s, vals.to_vec()).unwrap();
            let (spk, pot) = lif_forward(&x, &hyper, SpikeMode::Smoothed);
            let mut acc = 0.0f64;
            for i in 0..12 {
                acc += (cs[i] * spk.data()[i] + ds[i] * pot.data()[i]) as f64;
            }
            acc
        };
        let fd = central_diff(&mut xs, loss, 1e-3);

        let x = Tensor5::from_vec(s, xs.clone()).unwrap();
        let (spk, pot) = lif_forward(&x, &hyper, SpikeMode::Smoothed);
        let gs = Tensor5::from_vec(s, cs).unwrap();
        let gp = Tensor5::from_vec(s, ds).unwrap();
        let gx = lif_backward(&gs, Some(&gp), &pot, &spk, &hyper).unwrap();

        let err = max_rel_err(gx.data(), &fd);
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn detaching_reset_path_changes_gradients() {
        // A firing neuron inside the surrogate window at t = 1 feeds t = 2.
        let mut hyper = LifHyper::new(0.5, 1.0, 1.0).unwrap();
        let x = scalar_series(&[1.2, 0.8]);
        let (spk, pot) = lif_forward(&x, &hyper, SpikeMode::Binary);
        let gs = scalar_series(&[0.0, 1.0]);
        let with_reset = lif_backward(&gs, None, &pot, &spk, &hyper).unwrap();
        hyper.detach_reset = true;
        let without = lif_backward(&gs, None, &pot, &spk, &hyper).unwrap();
        assert_ne!(with_reset.at(0, 0, 0, 0, 0), without.at(0, 0, 0, 0, 0));
        // detached: spike at t=1 kills the temporal term, surrogate sees no
        // upstream spike-gradient at t=1, so nothing survives
        assert_eq!(without.at(0, 0, 0, 0, 0), 0.0);
    }

    #[test]
    fn zero_decay_timestep_permutation_commutes() {
        let hyper = LifHyper::new(0.0, 1.0, 1.0).unwrap();
        let xs = [0.3f32, 1.4, 0.9, 2.2, 0.1];
        let perm = [3usize, 0, 4, 1, 2];
        let x = scalar_series(&xs);
        let xp = scalar_series(&perm.map(|i| xs[i]));
        let (s1, _) = lif_forward(&x, &hyper, SpikeMode::Binary);
        let (s2, _) = lif_forward(&xp, &hyper, SpikeMode::Binary);
        for (t, &src) in perm.iter().enumerate() {
            assert_eq!(s2.at(t, 0, 0, 0, 0), s1.at(src, 0, 0, 0, 0));
        }
    }
}
