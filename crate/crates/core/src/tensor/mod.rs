//! Dense N×C×H×W rasters and the differentiable layer kit.
//!
//! Every layer exposes a forward function and an analytic backward function.
//! Layers are free functions over plain parameter structs so the network code
//! can own caching and parameter iteration.

mod activation;
mod batchnorm;
mod conv;
pub mod gradcheck;
mod pool;

pub use activation::{leaky_relu, leaky_relu_grad};
pub use batchnorm::{batchnorm_eval, batchnorm_grad, batchnorm_train, BatchNorm2d, BnCache, BnGrads};
pub use conv::{conv2d, conv2d_backward, conv2d_grad, Conv2d, ConvGrads};
pub(crate) use conv::output_dim as conv_output_dim;
pub use gradcheck::{grad_check, relative_error};
pub use pool::{maxpool2, maxpool2_grad, upsample2, upsample2_grad, Argmax};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logical shape of a raster: batch, channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of entries in one sample (c·h·w).
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Row-major, C-contiguous 4-d array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    shape: Shape,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(shape: Shape) -> Self {
        Raster {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Raster {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "raster {shape} needs {} entries, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Raster { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Raster { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Copies samples `indices` (in order) into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Raster {
        let shape = Shape { n: indices.len(), ..self.shape };
        let mut data = Vec::with_capacity(shape.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Raster { shape, data }
    }

    /// Stacks single-sample rasters of identical c×h×w into one batch.
    pub fn stack(samples: &[Raster]) -> Result<Raster> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero rasters".into()))?
            .shape;
        let mut data = Vec::with_capacity(first.sample_len() * samples.len());
        let mut n = 0;
        for s in samples {
            let sh = s.shape;
            if (sh.c, sh.h, sh.w) != (first.c, first.h, first.w) {
                return Err(Error::Shape(format!("cannot stack {sh} onto {first}")));
            }
            data.extend_from_slice(&s.data);
            n += sh.n;
        }
        Ok(Raster {
            shape: Shape { n, ..first },
            data,
        })
    }

    pub fn reshape(self, shape: Shape) -> Result<Raster> {
        Raster::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Raster {
        self.map(|v| alpha * v)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Raster) -> Result<()> {
        self.expect_shape(other.shape, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn dot(&self, other: &Raster) -> Result<f64> {
        self.expect_shape(other.shape, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: Shape, what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "{what}: expected {shape}, got {}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Forward mode for layers whose behaviour differs between training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Raster::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn gather_and_stack_agree() {
        let r = Raster::from_fn(Shape::new(3, 2, 2, 2), |n, c, y, x| (n * 100 + c * 10 + y * 2 + x) as f64);
        let g = r.gather(&[2, 0]);
        assert_eq!(g.shape(), Shape::new(2, 2, 2, 2));
        assert_eq!(g.sample(0), r.sample(2));
        let s = Raster::stack(&[r.gather(&[2]), r.gather(&[0])]).unwrap();
        assert_eq!(s, g);
    }

    #[test]
    fn indexing_is_row_major() {
        let r = Raster::from_fn(Shape::new(2, 3, 4, 5), |n, c, y, x| (((n * 3 + c) * 4 + y) * 5 + x) as f64);
        for (i, v) in r.data().iter().enumerate() {
            assert_eq!(*v, i as f64);
        }
        assert_eq!(r.get(1, 2, 3, 4), 119.0);
    }
}
