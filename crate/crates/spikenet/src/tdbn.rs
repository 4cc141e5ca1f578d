//! Time-pooled, threshold-scaled batch normalization.
//!
//! Statistics are estimated per channel over the joint `(T, N, H, W)` axes,
//! and the normalized value is scaled by `alpha * v_th` so that
//! pre-activations start the training at `N(0, (alpha * v_th)^2)`:
//!
//! ```text
//! y_k = lambda_k * alpha * v_th * (x_k - E[x_k]) / sqrt(Var[x_k] + eps) + beta_k
//! ```
//!
//! At inference the batch statistics are replaced by running averages, and
//! [`fuse_into_conv`] folds the whole affine map into the preceding
//! convolution so the deployed network sees only weights, biases, and spikes.

use crate::error::{Error, Result};
use crate::ops::{ConvParams, LinearParams};
use crate::tensor::Tensor5;

/// Per-channel trainable scale/shift, running statistics, and the structural
/// scaling constants.
#[derive(Debug, Clone, PartialEq)]
pub struct TdBnParams {
    pub channels: usize,
    /// Trainable scale, initialized to 1.
    pub lambda: Vec<f32>,
    /// Trainable shift, initialized to 0.
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    /// Structural scaling: 1 on serial paths, `1/sqrt(n)` on the branches of
    /// an n-way additive junction.
    pub alpha: f32,
    pub v_th: f32,
    pub eps: f32,
    /// EMA momentum for the running statistics.
    pub momentum: f32,
    /// Number of training batches folded into the running statistics; zero
    /// means inference and fusion are not yet legal.
    pub stat_steps: u64,
}

impl TdBnParams {
    pub fn new(channels: usize, alpha: f32, v_th: f32) -> Self {
        assert!(channels >= 1);
        assert!(alpha > 0.0 && v_th > 0.0);
        TdBnParams {
            channels,
            lambda: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            alpha,
            v_th,
            eps: 1e-5,
            momentum: 0.1,
            stat_steps: 0,
        }
    }

    pub fn stats_populated(&self) -> bool {
        self.stat_steps > 0
    }

    /// `lambda_k * alpha * v_th / sqrt(running_var_k + eps)` — the factor the
    /// fusion applies to output channel `k`.
    fn fused_scale(&self, k: usize) -> f32 {
        self.lambda[k] * self.alpha * self.v_th / (self.running_var[k] + self.eps).sqrt()
    }
}

/// Values saved by the training forward for the backward pass.
#[derive(Debug, Clone)]
pub struct TdBnCache {
    /// `(x - mean) * inv_std`, same shape as the input.
    pub xhat: Tensor5,
    /// Per-channel `1 / sqrt(var + eps)`.
    pub inv_std: Vec<f32>,
}

/// Iterate one channel of a `[T, N, C, H, W]` tensor as contiguous `H*W` runs.
fn for_each_channel_run(x: &Tensor5, c: usize, mut f: impl FnMut(usize)) {
    let s = x.shape();
    let plane = s.h * s.w;
    for t in 0..s.t {
        for n in 0..s.n {
            let base = ((t * s.n + n) * s.c + c) * plane;
            f(base);
        }
    }
}

/// Training-mode forward: normalize with batch statistics over `(T, N, H, W)`,
/// update the running averages, and cache what backward needs.
pub fn tdbn_forward_train(x: &Tensor5, params: &mut TdBnParams) -> Result<(Tensor5, TdBnCache)> {
    let s = x.shape();
    if s.c != params.channels {
        return Err(Error::Dim(format!(
            "tdbn has {} channels, tensor is {}",
            params.channels, s
        )));
    }
    let m = s.t * s.n * s.h * s.w;
    if m < 2 {
        return Err(Error::Config(format!(
            "tdbn training needs at least 2 values per channel, got {m}"
        )));
    }
    let plane = s.h * s.w;
    let inv_m = 1.0 / m as f64;

    let mut y = Tensor5::zeros(s);
    let mut xhat = Tensor5::zeros(s);
    let mut inv_std = vec![0.0f32; s.c];
    for c in 0..s.c {
        let mut sum = 0.0f64;
        for_each_channel_run(x, c, |base| {
            for v in &x.data()[base..base + plane] {
                sum += *v as f64;
            }
        });
        let mean = sum * inv_m;

        let mut sq = 0.0f64;
        for_each_channel_run(x, c, |base| {
            for v in &x.data()[base..base + plane] {
                let d = *v as f64 - mean;
                sq += d * d;
            }
        });
        // biased (divide-by-m) variance, matching the plain mean of squares
        let var = sq * inv_m;

        let istd = 1.0 / ((var + params.eps as f64).sqrt());
        inv_std[c] = istd as f32;
        let scale = params.lambda[c] * params.alpha * params.v_th;
        let shift = params.beta[c];
        for_each_channel_run(x, c, |base| {
            for i in base..base + plane {
                let xh = ((x.data()[i] as f64 - mean) * istd) as f32;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = scale * xh + shift;
            }
        });

        let mom = params.momentum;
        params.running_mean[c] = (1.0 - mom) * params.running_mean[c] + mom * mean as f32;
        params.running_var[c] = (1.0 - mom) * params.running_var[c] + mom * var as f32;
    }
    params.stat_steps += 1;
    Ok((y, TdBnCache { xhat, inv_std }))
}

/// Inference-mode forward: the same affine map with running statistics;
/// nothing is cached or updated.
pub fn tdbn_forward_infer(x: &Tensor5, params: &TdBnParams) -> Result<Tensor5> {
    let s = x.shape();
    if s.c != params.channels {
        return Err(Error::Dim(format!(
            "tdbn has {} channels, tensor is {}",
            params.channels, s
        )));
    }
    if !params.stats_populated() {
        return Err(Error::State(
            "tdbn inference requires running statistics from at least one training step".into(),
        ));
    }
    let plane = s.h * s.w;
    let mut y = Tensor5::zeros(s);
    for c in 0..s.c {
        let scale = params.fused_scale(c);
        let shift = params.beta[c] - scale * params.running_mean[c];
        for_each_channel_run(x, c, |base| {
            for i in base..base + plane {
                y.data_mut()[i] = scale * x.data()[i] + shift;
            }
        });
    }
    Ok(y)
}

/// Exact gradients of the training forward, treating mean and variance as
/// functions of the input over the full `(T, N, H, W)` reduction set.
///
/// Returns `(grad_x, grad_lambda, grad_beta)`.
pub fn tdbn_backward(
    grad_y: &Tensor5,
    cache: &TdBnCache,
    params: &TdBnParams,
) -> Result<(Tensor5, Vec<f32>, Vec<f32>)> {
    let s = grad_y.shape();
    if cache.xhat.shape() != s || cache.inv_std.len() != s.c || s.c != params.channels {
        return Err(Error::State(format!(
            "tdbn backward cache {} does not match upstream {}",
            cache.xhat.shape(),
            s
        )));
    }
    let m = (s.t * s.n * s.h * s.w) as f64;
    let plane = s.h * s.w;

    let mut grad_x = Tensor5::zeros(s);
    let mut grad_lambda = vec![0.0f32; s.c];
    let mut grad_beta = vec![0.0f32; s.c];
    for c in 0..s.c {
        let av = params.alpha * params.v_th;
        let scale = params.lambda[c] * av;

        // reductions: sum g_xhat and sum g_xhat * xhat, plus parameter grads
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        let mut sum_beta = 0.0f64;
        for_each_channel_run(grad_y, c, |base| {
            for i in base..base + plane {
                let gy = grad_y.data()[i] as f64;
                let xh = cache.xhat.data()[i] as f64;
                sum_beta += gy;
                sum_gx += gy * xh;
                sum_g += gy;
            }
        });
        grad_beta[c] = sum_beta as f32;
        grad_lambda[c] = (sum_gx * av as f64) as f32;

        let sum_gxhat = sum_g * scale as f64;
        let sum_gxhat_xhat = sum_gx * scale as f64;
        let istd = cache.inv_std[c] as f64;
        for_each_channel_run(grad_y, c, |base| {
            for i in base..base + plane {
                let g_xhat = grad_y.data()[i] as f64 * scale as f64;
                let xh = cache.xhat.data()[i] as f64;
                let gx = istd * (g_xhat - sum_gxhat / m - xh * sum_gxhat_xhat / m);
                grad_x.data_mut()[i] = gx as f32;
            }
        });
    }
    Ok((grad_x, grad_lambda, grad_beta))
}

/// Fold the normalization into the preceding convolution:
///
/// ```text
/// W'_k = lambda_k * alpha * v_th * W_k / sqrt(var_k + eps)
/// B'_k = lambda_k * alpha * v_th * (B_k - mean_k) / sqrt(var_k + eps) + beta_k
/// ```
///
/// Applying the fused convolution equals convolving then running
/// [`tdbn_forward_infer`].
pub fn fuse_into_conv(conv: &ConvParams, params: &TdBnParams) -> Result<ConvParams> {
    if conv.c_out != params.channels {
        return Err(Error::Dim(format!(
            "cannot fuse {}-channel tdbn into conv with {} output channels",
            params.channels, conv.c_out
        )));
    }
    if !params.stats_populated() {
        return Err(Error::State(
            "cannot fuse tdbn before its running statistics are populated".into(),
        ));
    }
    let mut fused = conv.clone();
    let per_out = conv.c_in * conv.k_h * conv.k_w;
    for k in 0..conv.c_out {
        let scale = params.fused_scale(k);
        for w in &mut fused.kernel[k * per_out..(k + 1) * per_out] {
            *w *= scale;
        }
        fused.bias[k] = scale * (conv.bias[k] - params.running_mean[k]) + params.beta[k];
    }
    Ok(fused)
}

/// Same fold for a fully connected layer whose outputs feed this tdbn.
pub fn fuse_into_linear(lin: &LinearParams, params: &TdBnParams) -> Result<LinearParams> {
    if lin.d_out != params.channels {
        return Err(Error::Dim(format!(
            "cannot fuse {}-channel tdbn into linear with {} outputs",
            params.channels, lin.d_out
        )));
    }
    if !params.stats_populated() {
        return Err(Error::State(
            "cannot fuse tdbn before its running statistics are populated".into(),
        ));
    }
    let mut fused = lin.clone();
    for d in 0..lin.d_out {
        let scale = params.fused_scale(d);
        for w in &mut fused.weight[d * lin.d_in..(d + 1) * lin.d_in] {
            *w *= scale;
        }
        fused.bias[d] = scale * (lin.bias[d] - params.running_mean[d]) + params.beta[d];
    }
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use crate::ops::conv2d;
    use crate::tensor::Shape5;

    #[test]
    fn hand_computed_normalization() {
        let s = Shape5::new(4, 1, 1, 1, 1);
        let x = Tensor5::from_vec(s, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut p = TdBnParams::new(1, 1.0, 1.0);
        p.eps = 0.0;
        let (y, _) = tdbn_forward_train(&x, &mut p).unwrap();
        let expect = [-1.3416408f32, -0.4472136, 0.4472136, 1.3416408];
        for (v, e) in y.data().iter().zip(&expect) {
            assert!((v - e).abs() < 1e-5, "{v} vs {e}");
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Tensor5::filled(Shape5::new(2, 2, 3, 2, 2), 7.5);
        let mut p = TdBnParams::new(3, 1.3, 2.0);
        let (y, _) = tdbn_forward_train(&x, &mut p).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn branch_alpha_scales_standardized_input() {
        let s = Shape5::new(4, 1, 1, 1, 1);
        let x = Tensor5::from_vec(s, vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let mut p = TdBnParams::new(1, 1.0 / 2.0f32.sqrt(), 1.0);
        p.eps = 0.0;
        let (y, _) = tdbn_forward_train(&x, &mut p).unwrap();
        for (v, xv) in y.data().iter().zip(x.data()) {
            assert!((v - xv / 2.0f32.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn single_value_per_channel_is_rejected() {
        let x = Tensor5::zeros(Shape5::new(1, 1, 4, 1, 1));
        let mut p = TdBnParams::new(4, 1.0, 1.0);
        assert!(matches!(
            tdbn_forward_train(&x, &mut p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn running_stats_follow_ema() {
        let s = Shape5::new(2, 1, 1, 1, 2);
        let x = Tensor5::from_vec(s, vec![2.0, 2.0, 6.0, 6.0]).unwrap();
        let mut p = TdBnParams::new(1, 1.0, 1.0);
        tdbn_forward_train(&x, &mut p).unwrap();
        // batch mean 4, batch var 4; ema from (0, 1) with momentum 0.1
        assert!((p.running_mean[0] - 0.4).abs() < 1e-6);
        assert!((p.running_var[0] - (0.9 + 0.4)).abs() < 1e-6);
        assert_eq!(p.stat_steps, 1);
    }

    #[test]
    fn infer_with_identity_stats_is_identity() {
        let s = Shape5::new(2, 1, 2, 2, 2);
        let x = Tensor5::from_fn(s, |t, _, c, h, w| (t + c + h + w) as f32 * 0.37 - 1.0);
        let mut p = TdBnParams::new(2, 1.0, 1.0);
        p.eps = 0.0;
        p.stat_steps = 1;
        let y = tdbn_forward_infer(&x, &p).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn infer_hand_substitution() {
        let s = Shape5::new(2, 1, 1, 1, 1);
        let x = Tensor5::filled(s, 5.0);
        let mut p = TdBnParams::new(1, 1.0, 1.0);
        p.eps = 0.0;
        p.running_mean[0] = 1.0;
        p.running_var[0] = 3.0;
        p.stat_steps = 1;
        let y = tdbn_forward_infer(&x, &p).unwrap();
        assert!((y.data()[0] - 2.3094011).abs() < 1e-5);
    }

    #[test]
    fn zero_lambda_outputs_beta() {
        let s = Shape5::new(2, 1, 2, 1, 1);
        let x = Tensor5::from_fn(s, |t, _, c, _, _| (t * 2 + c) as f32);
        let mut p = TdBnParams::new(2, 1.0, 1.0);
        p.lambda = vec![0.0, 0.0];
        p.beta = vec![0.5, -2.0];
        p.stat_steps = 1;
        let y = tdbn_forward_infer(&x, &p).unwrap();
        for c in 0..2 {
            for t in 0..2 {
                assert_eq!(y.at(t, 0, c, 0, 0), p.beta[c]);
            }
        }
        let (yt, _) = tdbn_forward_train(&x, &mut p).unwrap();
        for c in 0..2 {
            for t in 0..2 {
                assert_eq!(yt.at(t, 0, c, 0, 0), p.beta[c]);
            }
        }
    }

    #[test]
    fn infer_requires_populated_stats() {
        let x = Tensor5::zeros(Shape5::new(1, 1, 1, 1, 1));
        let p = TdBnParams::new(1, 1.0, 1.0);
        assert!(matches!(
            tdbn_forward_infer(&x, &p),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn backward_zero_upstream_gives_zero() {
        let s = Shape5::new(2, 1, 1, 2, 2);
        let x = Tensor5::from_fn(s, |t, _, _, h, w| (t * 4 + h * 2 + w) as f32);
        let mut p = TdBnParams::new(1, 1.0, 1.0);
        let (_, cache) = tdbn_forward_train(&x, &mut p).unwrap();
        let (gx, gl, gb) = tdbn_backward(&Tensor5::zeros(s), &cache, &p).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert_eq!(gl, vec![0.0]);
        assert_eq!(gb, vec![0.0]);
    }

    #[test]
    fn constant_upstream_gradient_is_annihilated() {
        let s = Shape5::new(2, 2, 1, 1, 2);
        let x = Tensor5::from_fn(s, |t, n, _, _, w| ((t * 3 + n * 5 + w * 7) % 4) as f32);
        let mut p = TdBnParams::new(1, 1.0, 1.0);
        let (_, cache) = tdbn_forward_train(&x, &mut p).unwrap();
        let (gx, _, gb) = tdbn_backward(&Tensor5::filled(s, 0.7), &cache, &p).unwrap();
        assert!(gx.data().iter().all(|&v| v.abs() < 1e-6), "{:?}", gx.data());
        // grad_beta is the exact per-channel sum of grad_y
        assert!((gb[0] - 0.7 * 8.0).abs() < 1e-5);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let s = Shape5::new(2, 2, 1, 1, 2);
        let mut xs = vec![0.4f32, -1.2, 2.1, 0.0, 1.4, -0.6, 0.9, -1.9];
        let read: Vec<f32> = (0..8).map(|i| 0.2 * i as f32 - 0.7).collect();
        let loss = |vals: &[f32]| -> f64 {
            let x = Tensor5::from_vec(s, vals.to_vec()).unwrap();
            let mut p = TdBnParams::new(1, 0.8, 1.5);
            p.lambda[0] = 1.3;
            p.beta[0] = -0.2;
            let (y, _) = tdbn_forward_train(&x, &mut p).unwrap();
            y.data()
                .iter()
                .zip(&read)
                .map(|(a, b)| (a * b) as f64)
                .sum()
        };
        // step large enough that f32 forward rounding does not dominate the
        // difference quotient
        let fd = central_diff(&mut xs, loss, 4e-3);

        let x = Tensor5::from_vec(s, xs).unwrap();
        let mut p = TdBnParams::new(1, 0.8, 1.5);
        p.lambda[0] = 1.3;
        p.beta[0] = -0.2;
        let (_, cache) = tdbn_forward_train(&x, &mut p).unwrap();
        let gy = Tensor5::from_vec(s, read).unwrap();
        let (gx, _, _) = tdbn_backward(&gy, &cache, &p).unwrap();
        let err = max_rel_err(gx.data(), &fd);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn post_normalization_statistics_hit_target() {
        for &alpha in &[1.0f32, 1.0 / 2.0f32.sqrt()] {
            let s = Shape5::new(3, 4, 2, 4, 4);
            let x = Tensor5::from_fn(s, |t, n, c, h, w| {
                let k = t * 977 + n * 389 + c * 211 + h * 53 + w * 13;
                ((k % 97) as f32 - 48.0) * 0.11 + c as f32 * 3.0
            });
            let mut p = TdBnParams::new(2, alpha, 1.5);
            let (y, _) = tdbn_forward_train(&x, &mut p).unwrap();
            let m = (s.t * s.n * s.h * s.w) as f64;
            for c in 0..2 {
                let mut sum = 0.0f64;
                let mut sq = 0.0f64;
                for t in 0..s.t {
                    for n in 0..s.n {
                        for h in 0..s.h {
                            for w in 0..s.w {
                                let v = y.at(t, n, c, h, w) as f64;
                                sum += v;
                                sq += v * v;
                            }
                        }
                    }
                }
                let mean = sum / m;
                let var = sq / m - mean * mean;
                let target = (alpha as f64 * 1.5).powi(2);
                assert!(mean.abs() < 1e-5, "mean {mean}");
                assert!((var - target).abs() / target < 1e-2, "var {var} vs {target}");
            }
        }
    }

    #[test]
    fn fusion_with_identity_stats_is_identity() {
        let conv = {
            let mut c = ConvParams::zeros(2, 1, 3, 3, 1, 1);
            for (i, k) in c.kernel.iter_mut().enumerate() {
                *k = i as f32 * 0.1 - 0.5;
            }
            c.bias = vec![0.3, -0.4];
            c
        };
        let mut p = TdBnParams::new(2, 1.0, 1.0);
        p.eps = 0.0;
        p.stat_steps = 1;
        let fused = fuse_into_conv(&conv, &p).unwrap();
        assert_eq!(fused.kernel, conv.kernel);
        assert_eq!(fused.bias, conv.bias);
    }

    #[test]
    fn fusion_hand_scalar() {
        let mut conv = ConvParams::zeros(1, 1, 1, 1, 1, 0);
        conv.kernel[0] = 2.0;
        conv.bias[0] = 1.0;
        let mut p = TdBnParams::new(1, 1.0, 1.0);
        p.eps = 0.0;
        p.running_mean[0] = 1.0;
        p.running_var[0] = 3.0;
        p.stat_steps = 1;
        let fused = fuse_into_conv(&conv, &p).unwrap();
        assert!((fused.kernel[0] - 1.1547005).abs() < 1e-6);
        assert!(fused.bias[0].abs() < 1e-7);
    }

    #[test]
    fn fusion_requires_populated_stats() {
        let conv = ConvParams::zeros(1, 1, 1, 1, 1, 0);
        let p = TdBnParams::new(1, 1.0, 1.0);
        assert!(matches!(fuse_into_conv(&conv, &p), Err(Error::State(_))));
    }

    #[test]
    fn fused_conv_equals_conv_then_infer() {
        let s = Shape5::new(2, 2, 2, 4, 4);
        let x = Tensor5::from_fn(s, |t, n, c, h, w| {
            (((t * 7 + n * 11 + c * 5 + h * 3 + w) % 13) as f32 - 6.0) * 0.23
        });
        let mut conv = ConvParams::zeros(3, 2, 3, 3, 1, 1);
        for (i, k) in conv.kernel.iter_mut().enumerate() {
            *k = ((i * 31 % 17) as f32 - 8.0) * 0.07;
        }
        conv.bias = vec![0.1, -0.2, 0.05];
        let mut p = TdBnParams::new(3, 1.0 / 2.0f32.sqrt(), 1.0);
        p.lambda = vec![1.2, 0.8, 1.0];
        p.beta = vec![0.0, 0.3, -0.1];
        // populate running stats from one training pass
        let pre = conv2d(&x, &conv).unwrap();
        tdbn_forward_train(&pre, &mut p).unwrap();

        let unfused = tdbn_forward_infer(&conv2d(&x, &conv).unwrap(), &p).unwrap();
        let fused = conv2d(&x, &fuse_into_conv(&conv, &p).unwrap()).unwrap();
        for (a, b) in unfused.data().iter().zip(fused.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
