//! Weighted linear layers over [`Tensor5`]: 2-D convolution (cross-correlation),
//! fully connected, and average pooling, each with its exact backward pass.
//!
//! Every op treats the time axis as a plain batch extension: timestep `t` is
//! processed exactly like an extra batch entry, so time-slicing commutes with
//! all three forwards. Reductions run in a fixed loop order so repeated runs
//! are bit-identical.

use crate::error::{Error, Result};
use crate::tensor::{Shape5, Tensor5};

/// Convolution weights: kernel `[C_out, C_in, k_h, k_w]` plus per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub c_out: usize,
    pub c_in: usize,
    pub k_h: usize,
    pub k_w: usize,
    /// Row-major `[C_out, C_in, k_h, k_w]`.
    pub kernel: Vec<f32>,
    /// `[C_out]`.
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn zeros(c_out: usize, c_in: usize, k_h: usize, k_w: usize, stride: usize, padding: usize) -> Self {
        assert!(c_out >= 1 && c_in >= 1 && k_h >= 1 && k_w >= 1 && stride >= 1);
        ConvParams {
            c_out,
            c_in,
            k_h,
            k_w,
            kernel: vec![0.0; c_out * c_in * k_h * k_w],
            bias: vec![0.0; c_out],
            stride,
            padding,
        }
    }

    #[inline]
    pub fn k_index(&self, co: usize, ci: usize, i: usize, j: usize) -> usize {
        ((co * self.c_in + ci) * self.k_h + i) * self.k_w + j
    }

    /// Output spatial dims for an input of `(h, w)`; errors when either
    /// collapses below 1.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span_h = h + 2 * self.padding;
        let span_w = w + 2 * self.padding;
        if span_h < self.k_h || span_w < self.k_w {
            return Err(Error::Dim(format!(
                "kernel {}x{} does not fit input {}x{} with padding {}",
                self.k_h, self.k_w, h, w, self.padding
            )));
        }
        Ok((
            (span_h - self.k_h) / self.stride + 1,
            (span_w - self.k_w) / self.stride + 1,
        ))
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.k_h * self.k_w
    }
}

/// Fully connected weights: `weight[D_out, D_in]` plus bias `[D_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub d_out: usize,
    pub d_in: usize,
    /// Row-major `[D_out, D_in]`.
    pub weight: Vec<f32>,
    /// `[D_out]`.
    pub bias: Vec<f32>,
}

impl LinearParams {
    pub fn zeros(d_out: usize, d_in: usize) -> Self {
        assert!(d_out >= 1 && d_in >= 1);
        LinearParams {
            d_out,
            d_in,
            weight: vec![0.0; d_out * d_in],
            bias: vec![0.0; d_out],
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut p = LinearParams::zeros(d, d);
        for i in 0..d {
            p.weight[i * d + i] = 1.0;
        }
        p
    }
}

/// 2-D cross-correlation with zero padding, applied independently per (t, n).
pub fn conv2d(input: &Tensor5, params: &ConvParams) -> Result<Tensor5> {
    let s = input.shape();
    if s.c != params.c_in {
        return Err(Error::Dim(format!(
            "conv expects {} input channels, tensor is {}",
            params.c_in, s
        )));
    }
    let (h_out, w_out) = params.out_dims(s.h, s.w)?;
    let out_shape = Shape5::new(s.t, s.n, params.c_out, h_out, w_out);
    let mut out = Tensor5::zeros(out_shape);

    let stride = params.stride;
    let pad = params.padding as isize;
    for t in 0..s.t {
        for n in 0..s.n {
            for co in 0..params.c_out {
                for ho in 0..h_out {
                    for wo in 0..w_out {
                        let mut acc = params.bias[co];
                        let base_h = (ho * stride) as isize - pad;
                        let base_w = (wo * stride) as isize - pad;
                        for ci in 0..params.c_in {
                            for i in 0..params.k_h {
                                let hi = base_h + i as isize;
                                if hi < 0 || hi >= s.h as isize {
                                    continue;
                                }
                                for j in 0..params.k_w {
                                    let wi = base_w + j as isize;
                                    if wi < 0 || wi >= s.w as isize {
                                        continue;
                                    }
                                    acc += params.kernel[params.k_index(co, ci, i, j)]
                                        * input.at(t, n, ci, hi as usize, wi as usize);
                                }
                            }
                        }
                        *out.at_mut(t, n, co, ho, wo) = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel, and bias.
pub fn conv2d_backward(
    grad_out: &Tensor5,
    input: &Tensor5,
    params: &ConvParams,
) -> Result<(Tensor5, Vec<f32>, Vec<f32>)> {
    let s = input.shape();
    let (h_out, w_out) = params.out_dims(s.h, s.w)?;
    let expect = Shape5::new(s.t, s.n, params.c_out, h_out, w_out);
    if grad_out.shape() != expect {
        return Err(Error::Dim(format!(
            "conv backward expects upstream {}, got {}",
            expect,
            grad_out.shape()
        )));
    }

    let mut grad_input = Tensor5::zeros(s);
    let mut grad_kernel = vec![0.0f32; params.kernel.len()];
    let mut grad_bias = vec![0.0f32; params.c_out];

    let stride = params.stride;
    let pad = params.padding as isize;
    for t in 0..s.t {
        for n in 0..s.n {
            for co in 0..params.c_out {
                for ho in 0..h_out {
                    for wo in 0..w_out {
                        let g = grad_out.at(t, n, co, ho, wo);
                        if g == 0.0 {
                            continue;
                        }
                        grad_bias[co] += g;
                        let base_h = (ho * stride) as isize - pad;
                        let base_w = (wo * stride) as isize - pad;
                        for ci in 0..params.c_in {
                            for i in 0..params.k_h {
                                let hi = base_h + i as isize;
                                if hi < 0 || hi >= s.h as isize {
                                    continue;
                                }
                                for j in 0..params.k_w {
                                    let wi = base_w + j as isize;
                                    if wi < 0 || wi >= s.w as isize {
                                        continue;
                                    }
                                    let ki = params.k_index(co, ci, i, j);
                                    grad_kernel[ki] +=
                                        g * input.at(t, n, ci, hi as usize, wi as usize);
                                    *grad_input.at_mut(t, n, ci, hi as usize, wi as usize) +=
                                        g * params.kernel[ki];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((grad_input, grad_kernel, grad_bias))
}

/// Fully connected layer over the flattened `C*H*W` features of each (t, n).
/// Output shape is `[T, N, D_out, 1, 1]`.
pub fn linear(input: &Tensor5, params: &LinearParams) -> Result<Tensor5> {
    let s = input.shape();
    if s.feature_len() != params.d_in {
        return Err(Error::Dim(format!(
            "linear expects {} input features, tensor {} flattens to {}",
            params.d_in,
            s,
            s.feature_len()
        )));
    }
    let mut out = Tensor5::zeros(Shape5::new(s.t, s.n, params.d_out, 1, 1));
    for t in 0..s.t {
        for n in 0..s.n {
            let x = input.feature(t, n);
            let y = out.feature_mut(t, n);
            for d in 0..params.d_out {
                let row = &params.weight[d * params.d_in..(d + 1) * params.d_in];
                let mut acc = params.bias[d];
                for (wv, xv) in row.iter().zip(x) {
                    acc += wv * xv;
                }
                y[d] = acc;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`linear`] with respect to input, weight, and bias.
pub fn linear_backward(
    grad_out: &Tensor5,
    input: &Tensor5,
    params: &LinearParams,
) -> Result<(Tensor5, Vec<f32>, Vec<f32>)> {
    let s = input.shape();
    let gs = grad_out.shape();
    if gs.t != s.t || gs.n != s.n || gs.feature_len() != params.d_out {
        return Err(Error::Dim(format!(
            "linear backward expects upstream [{}x{}x{}], got {}",
            s.t, s.n, params.d_out, gs
        )));
    }
    let mut grad_input = Tensor5::zeros(s);
    let mut grad_weight = vec![0.0f32; params.weight.len()];
    let mut grad_bias = vec![0.0f32; params.d_out];
    for t in 0..s.t {
        for n in 0..s.n {
            let x = input.feature(t, n);
            let g = grad_out.feature(t, n);
            let gx = grad_input.feature_mut(t, n);
            for d in 0..params.d_out {
                let gd = g[d];
                if gd == 0.0 {
                    continue;
                }
                grad_bias[d] += gd;
                let row = &params.weight[d * params.d_in..(d + 1) * params.d_in];
                let grow = &mut grad_weight[d * params.d_in..(d + 1) * params.d_in];
                for i in 0..params.d_in {
                    grow[i] += gd * x[i];
                    gx[i] += gd * row[i];
                }
            }
        }
    }
    Ok((grad_input, grad_weight, grad_bias))
}

/// Non-overlapping window means per (t, n, c); spatial dims shrink by `window`.
pub fn avg_pool2d(input: &Tensor5, window: usize) -> Result<Tensor5> {
    let s = input.shape();
    if window == 0 {
        return Err(Error::Dim("pool window must be >= 1".into()));
    }
    if s.h % window != 0 || s.w % window != 0 {
        return Err(Error::Dim(format!(
            "pool window {window} does not divide spatial dims of {s}"
        )));
    }
    let h_out = s.h / window;
    let w_out = s.w / window;
    let inv = 1.0 / (window * window) as f32;
    let mut out = Tensor5::zeros(Shape5::new(s.t, s.n, s.c, h_out, w_out));
    for t in 0..s.t {
        for n in 0..s.n {
            for c in 0..s.c {
                for ho in 0..h_out {
                    for wo in 0..w_out {
                        let mut acc = 0.0f32;
                        for i in 0..window {
                            for j in 0..window {
                                acc += input.at(t, n, c, ho * window + i, wo * window + j);
                            }
                        }
                        *out.at_mut(t, n, c, ho, wo) = acc * inv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`avg_pool2d`]: upstream values spread uniformly over each window.
pub fn avg_pool2d_backward(grad_out: &Tensor5, input_shape: Shape5, window: usize) -> Result<Tensor5> {
    let gs = grad_out.shape();
    if input_shape.h != gs.h * window || input_shape.w != gs.w * window || input_shape.c != gs.c {
        return Err(Error::Dim(format!(
            "pool backward: upstream {gs} does not match input {input_shape} at window {window}"
        )));
    }
    let inv = 1.0 / (window * window) as f32;
    let mut grad_input = Tensor5::zeros(input_shape);
    for t in 0..gs.t {
        for n in 0..gs.n {
            for c in 0..gs.c {
                for ho in 0..gs.h {
                    for wo in 0..gs.w {
                        let g = grad_out.at(t, n, c, ho, wo) * inv;
                        for i in 0..window {
                            for j in 0..window {
                                *grad_input.at_mut(t, n, c, ho * window + i, wo * window + j) = g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad_input)
}
