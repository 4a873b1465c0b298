use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Dense row-major f64 tensor. 4-D tensors use the (batch, channels,
/// height, width) layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            );
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn numel_per_item(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Extents of a 4-D tensor as `(n, c, h, w)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => shape_err(op, format!("expected a 4-D tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err("reshape", format!("{:?} -> {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, libm::fabs(a - b)))
    }

    /// Item `i` along the batch axis, keeping a leading extent of 1.
    pub fn item(&self, i: usize) -> Tensor {
        let per = self.numel_per_item();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor { shape, data: self.data[i * per..(i + 1) * per].to_vec() }
    }

    /// Stacks equally shaped tensors with a leading extent of 1 along the
    /// batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = match items.first() {
            Some(t) => t,
            None => return shape_err("stack", "no tensors to stack".into()),
        };
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return shape_err("stack", format!("{:?} vs {:?}", t.shape, first.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)` of a 4-D tensor.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let (n, c, hh, ww) = self.dims4("crop")?;
        if y0 + h > hh || x0 + w > ww {
            return shape_err(
                "crop",
                format!("window {}x{} at ({}, {}) exceeds {}x{}", h, w, y0, x0, hh, ww),
            );
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in self.data.chunks_exact(hh * ww) {
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * ww + x0..y * ww + x0 + w]);
            }
        }
        Ok(Tensor { shape: vec![n, c, h, w], data })
    }
}
