use crate::error::{Error, Result};

use super::Raster;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Values saved by a train-mode forward for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub normalized: Raster,
    pub inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BnGrads {
    pub input: Raster,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            grad_gamma: vec![0.0; channels],
            grad_beta: vec![0.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.fill(0.0);
        self.grad_beta.fill(0.0);
    }

    fn check(&self, input: &Raster) -> Result<()> {
        if input.shape().c != self.channels() {
            return Err(Error::Shape(format!(
                "batchnorm has {} channels, input is {}",
                self.channels(),
                input.shape()
            )));
        }
        Ok(())
    }
}

/// Normalizes with batch statistics and updates the running statistics
/// (biased variance for normalization, unbiased for the running estimate).
pub fn batchnorm_train(input: &Raster, bn: &mut BatchNorm2d) -> Result<(Raster, BnCache)> {
    bn.check(input)?;
    let s = input.shape();
    if s.n < 2 {
        return Err(Error::InvalidArgument(format!(
            "batchnorm in train mode needs batch size >= 2, got {}",
            s.n
        )));
    }
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut out = Raster::zeros(s);
    let mut normalized = Raster::zeros(s);
    let mut inv_std = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let channel = |n: usize| {
            let start = (n * s.c + c) * plane;
            start..start + plane
        };
        let mut sum = 0.0;
        for n in 0..s.n {
            sum += input.data()[channel(n)].iter().sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for n in 0..s.n {
            sq += input.data()[channel(n)].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        let var = sq / count;
        let istd = 1.0 / (var + bn.eps).sqrt();
        inv_std.push(istd);
        let (g, b) = (bn.gamma[c], bn.beta[c]);
        for n in 0..s.n {
            let r = channel(n);
            for i in r {
                let xh = (input.data()[i] - mean) * istd;
                normalized.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }
        let m = bn.momentum;
        bn.running_mean[c] = (1.0 - m) * bn.running_mean[c] + m * mean;
        bn.running_var[c] = (1.0 - m) * bn.running_var[c] + m * sq / (count - 1.0);
    }
    Ok((out, BnCache { normalized, inv_std }))
}

pub fn batchnorm_eval(input: &Raster, bn: &BatchNorm2d) -> Result<Raster> {
    bn.check(input)?;
    let s = input.shape();
    let plane = s.plane();
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let c = i % s.c;
        let scale = bn.gamma[c] / (bn.running_var[c] + bn.eps).sqrt();
        let shift = bn.beta[c] - bn.running_mean[c] * scale;
        chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    Ok(out)
}

/// Gradients of `⟨grad_out, batchnorm_train(input)⟩` given the forward cache.
pub fn batchnorm_grad(cache: &BnCache, bn: &BatchNorm2d, grad_out: &Raster) -> Result<BnGrads> {
    let s = cache.normalized.shape();
    grad_out.expect_shape(s, "batchnorm_grad")?;
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut grad_in = Raster::zeros(s);
    let mut gamma = vec![0.0; s.c];
    let mut beta = vec![0.0; s.c];
    for c in 0..s.c {
        let ranges: Vec<_> = (0..s.n)
            .map(|n| {
                let start = (n * s.c + c) * plane;
                start..start + plane
            })
            .collect();
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for r in &ranges {
            for i in r.clone() {
                let g = grad_out.data()[i];
                sum_g += g;
                sum_gx += g * cache.normalized.data()[i];
            }
        }
        gamma[c] = sum_gx;
        beta[c] = sum_g;
        let k = bn.gamma[c] * cache.inv_std[c] / count;
        for r in &ranges {
            for i in r.clone() {
                let xh = cache.normalized.data()[i];
                grad_in.data_mut()[i] = k * (count * grad_out.data()[i] - sum_g - xh * sum_gx);
            }
        }
    }
    Ok(BnGrads {
        input: grad_in,
        gamma,
        beta,
    })
}
