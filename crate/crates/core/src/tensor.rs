//! Dense row-major tensors with an explicit layout tag.
//!
//! A tensor's `shape` lists extents in the physical axis order of its layout:
//! an NHWC tensor has shape `[n, h, w, c]`, an NCHW tensor `[n, c, h, w]`.
//! Rank-4 tensors are always NHWC or NCHW; every other rank is FLAT.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "NHWC")]
    Nhwc,
    #[serde(rename = "NCHW")]
    Nchw,
    #[serde(rename = "FLAT")]
    Flat,
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Layout::Nhwc => "NHWC",
            Layout::Nchw => "NCHW",
            Layout::Flat => "FLAT",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    layout: Layout,
    data: Vec<T>,
}

fn check_shape(shape: &[usize], layout: Layout) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::shape(format!("rank must be 1..=4, got {}", shape.len())));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!("extent {pos} of {shape:?} is zero")));
    }
    match (shape.len(), layout) {
        (4, Layout::Nhwc | Layout::Nchw) => {}
        (4, Layout::Flat) => {
            return Err(Error::Layout("rank-4 tensor needs NHWC or NCHW".into()));
        }
        (r, Layout::Flat) if r != 4 => {}
        (r, l) => return Err(Error::Layout(format!("{l} requires rank 4, got rank {r}"))),
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], layout: Layout, fill: T) -> Result<Self> {
        let len = check_shape(shape, layout)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            layout,
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize], layout: Layout) -> Result<Self> {
        Self::new(shape, layout, T::zero())
    }

    /// Zero tensor with the default layout for `shape`'s rank (NHWC for rank 4).
    pub fn zeros_like_rank(shape: &[usize]) -> Result<Self> {
        let layout = if shape.len() == 4 { Layout::Nhwc } else { Layout::Flat };
        Self::zeros(shape, layout)
    }

    pub fn from_vec(shape: &[usize], layout: Layout, data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape, layout)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            layout,
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Logical `(n, h, w, c)` extents of a rank-4 tensor regardless of layout.
    pub fn dims_nhwc(&self) -> Result<[usize; 4]> {
        match (self.layout, self.shape.as_slice()) {
            (Layout::Nhwc, &[n, h, w, c]) => Ok([n, h, w, c]),
            (Layout::Nchw, &[n, c, h, w]) => Ok([n, h, w, c]),
            _ => Err(Error::Layout(format!(
                "expected a rank-4 tensor, got {:?} {}",
                self.shape, self.layout
            ))),
        }
    }

    /// Same buffer under a new shape/layout with the same element count.
    pub fn reshape(self, shape: &[usize], layout: Layout) -> Result<Self> {
        Self::from_vec(shape, layout, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn debug_check_finite(&self) {
        debug_assert!(self.is_finite(), "tensor {:?} contains NaN/Inf", self.shape);
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// `max|self - reference| / max|reference|`, computed in f64. Zero when
    /// both are all zeros; infinite on a shape mismatch or a nonzero
    /// difference against an all-zero reference.
    pub fn rel_error(&self, reference: &Self) -> f64 {
        if self.shape != reference.shape {
            return f64::INFINITY;
        }
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max);
        let scale = reference.max_abs().to_f64_lossy();
        if diff == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    /// Reorders the buffer into `target` layout. Logical `(n, h, w, c)`
    /// positions are preserved; same-layout conversion is a plain copy.
    pub fn convert_layout(&self, target: Layout) -> Result<Self> {
        let [n, h, w, c] = self.dims_nhwc()?;
        if target == Layout::Flat {
            return Err(Error::Layout("cannot convert rank-4 tensor to FLAT".into()));
        }
        if target == self.layout {
            return Ok(self.clone());
        }
        let mut out = Vec::with_capacity(self.data.len());
        let src = &self.data;
        match target {
            Layout::Nchw => {
                for ni in 0..n {
                    let base = ni * h * w * c;
                    for ci in 0..c {
                        for hw in 0..h * w {
                            out.push(src[base + hw * c + ci]);
                        }
                    }
                }
                Ok(Tensor {
                    shape: vec![n, c, h, w],
                    layout: Layout::Nchw,
                    data: out,
                })
            }
            Layout::Nhwc => {
                for ni in 0..n {
                    let base = ni * c * h * w;
                    for hw in 0..h * w {
                        for ci in 0..c {
                            out.push(src[base + ci * h * w + hw]);
                        }
                    }
                }
                Ok(Tensor {
                    shape: vec![n, h, w, c],
                    layout: Layout::Nhwc,
                    data: out,
                })
            }
            Layout::Flat => unreachable!(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let out = Tensor {
            shape: self.shape.clone(),
            layout: self.layout,
            data: self.data.iter().map(|&v| f(v)).collect(),
        };
        out.debug_check_finite();
        out
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for v in &mut self.data {
            *v = f(*v);
        }
        self.debug_check_finite();
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape || self.layout != other.layout {
            return Err(Error::shape(format!(
                "{op}: {:?} {} vs {:?} {}",
                self.shape, self.layout, other.shape, other.layout
            )));
        }
        Ok(())
    }

    /// `a * x + y`
    pub fn axpy(a: T, x: &Self, y: &Self) -> Result<Self> {
        x.check_same_shape(y, "axpy")?;
        let data = x.data.iter().zip(&y.data).map(|(&xv, &yv)| a * xv + yv).collect();
        let out = Tensor {
            shape: y.shape.clone(),
            layout: y.layout,
            data,
        };
        out.debug_check_finite();
        Ok(out)
    }

    /// In-place `self += a * x`.
    pub fn axpy_inplace(&mut self, a: T, x: &Self) -> Result<()> {
        self.check_same_shape(x, "axpy")?;
        for (s, &xv) in self.data.iter_mut().zip(&x.data) {
            *s += a * xv;
        }
        self.debug_check_finite();
        Ok(())
    }

    pub fn dot(x: &Self, y: &Self) -> Result<T> {
        if x.data.len() != y.data.len() || x.shape != y.shape {
            return Err(Error::shape(format!("dot: {:?} vs {:?}", x.shape, y.shape)));
        }
        Ok(x.data.iter().zip(&y.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            layout: self.layout,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

/// Only VALID padding is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Padding {
    #[default]
    #[serde(rename = "VALID")]
    Valid,
}

/// Geometry of one 2-D convolution over an NHWC batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvShape {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: Padding,
}

impl ConvShape {
    pub fn new(
        batch: usize,
        (in_h, in_w, in_c): (usize, usize, usize),
        out_c: usize,
        (k_h, k_w): (usize, usize),
    ) -> Result<Self> {
        let s = ConvShape {
            batch,
            in_h,
            in_w,
            in_c,
            out_c,
            k_h,
            k_w,
            stride: 1,
            padding: Padding::Valid,
        };
        s.validate()?;
        Ok(s)
    }

    /// Builds the shape from the `input size` / `kernel size` notation of
    /// benchmark tables: input `(N, H, W, C_in)`, kernel `(C_in, C_out, K_h, K_w)`.
    pub fn from_table(input: [usize; 4], kernel: [usize; 4]) -> Result<Self> {
        if input[3] != kernel[0] {
            return Err(Error::shape(format!(
                "input channels {} do not match kernel input channels {}",
                input[3], kernel[0]
            )));
        }
        Self::new(input[0], (input[1], input[2], input[3]), kernel[1], (kernel[2], kernel[3]))
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.batch, self.in_h, self.in_w, self.in_c, self.out_c, self.k_h, self.k_w, self.stride,
        ];
        if all.iter().any(|&v| v == 0) {
            return Err(Error::shape(format!("zero extent in {self:?}")));
        }
        if self.k_h > self.in_h || self.k_w > self.in_w {
            return Err(Error::shape(format!(
                "kernel {}x{} larger than input {}x{}",
                self.k_h, self.k_w, self.in_h, self.in_w
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.k_w) / self.stride + 1
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_h, self.in_w, self.in_c]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h(), self.out_w(), self.out_c]
    }

    /// `[out_c, in_c, k_h, k_w]`
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_c, self.in_c, self.k_h, self.k_w]
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_h() * self.out_w() * self.out_c * self.k_h * self.k_w * self.in_c)
            as u64
    }
}
