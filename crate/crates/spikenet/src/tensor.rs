//! Dense rank-5 spatio-temporal tensor: `[T, N, C, H, W]`, row-major `f32`.
//!
//! Axis order is timestep, batch, channel, height, width. Everything the
//! network passes between layers is one of these; spike tensors additionally
//! hold only values in `{0, 1}`.

use crate::error::{Error, Result};

/// Shape of a [`Tensor5`]: `(T, N, C, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape5 {
    pub t: usize,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub fn new(t: usize, n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape5 { t, n, c, h, w }
    }

    /// Total element count `T*N*C*H*W`.
    pub fn len(&self) -> usize {
        self.t * self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened per-(t, n) feature length `C*H*W`.
    pub fn feature_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn validate(&self) -> Result<()> {
        if self.t == 0 || self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Dim(format!("all dims must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}, {}]", self.t, self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-5 tensor over `f32`, row-major in `[T, N, C, H, W]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5 {
    shape: Shape5,
    data: Vec<f32>,
}

impl Tensor5 {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Shape5) -> Self {
        shape.validate().expect("invalid shape");
        Tensor5 {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    /// Constant-filled tensor.
    pub fn filled(shape: Shape5, value: f32) -> Self {
        shape.validate().expect("invalid shape");
        Tensor5 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Wrap an existing buffer; the element count must match the shape.
    pub fn from_vec(shape: Shape5, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::Dim(format!(
                "shape {shape} wants {} elements, buffer has {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor5 { shape, data })
    }

    /// Build elementwise from a function of the index tuple.
    pub fn from_fn(shape: Shape5, mut f: impl FnMut(usize, usize, usize, usize, usize) -> f32) -> Self {
        let mut out = Tensor5::zeros(shape);
        let mut i = 0;
        for t in 0..shape.t {
            for n in 0..shape.n {
                for c in 0..shape.c {
                    for h in 0..shape.h {
                        for w in 0..shape.w {
                            out.data[i] = f(t, n, c, h, w);
                            i += 1;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, t: usize, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(t < self.shape.t && n < self.shape.n && c < self.shape.c);
        debug_assert!(h < self.shape.h && w < self.shape.w);
        (((t * self.shape.n + n) * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, t: usize, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(t, n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, t: usize, n: usize, c: usize, h: usize, w: usize) -> &mut f32 {
        let i = self.index(t, n, c, h, w);
        &mut self.data[i]
    }

    /// Flattened feature vector for one (t, n) slot, in channel-major order.
    pub fn feature(&self, t: usize, n: usize) -> &[f32] {
        let f = self.shape.feature_len();
        let base = (t * self.shape.n + n) * f;
        &self.data[base..base + f]
    }

    pub fn feature_mut(&mut self, t: usize, n: usize) -> &mut [f32] {
        let f = self.shape.feature_len();
        let base = (t * self.shape.n + n) * f;
        &mut self.data[base..base + f]
    }

    /// True when every element is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor5 {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&self, other: &Tensor5) -> Result<Tensor5> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "cannot add {} to {}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor5 {
            shape: self.shape,
            data,
        })
    }

    /// Accumulate `other` into `self` in place.
    pub fn add_assign(&mut self, other: &Tensor5) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "cannot accumulate {} into {}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Tensor5 {
        self.map(|v| v * s)
    }

    /// Maximum absolute element.
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}
