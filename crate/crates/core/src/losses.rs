//! One-class objectives. Every loss returns its value, the gradient with
//! respect to its input and the per-sample terms whose mean is the value.

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::{Raster, Shape};

/// Floor on deviations inside the anomaly logarithm.
pub const DEVIATION_FLOOR: f64 = 1e-12;
/// Probability clamp of the BCE and focal losses.
pub const PROB_CLAMP: f64 = 1e-12;
/// -ln(PROB_CLAMP): the largest deviation the focal loss distinguishes.
const DEVIATION_CEIL: f64 = 27.631021115928547;

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Raster,
    pub per_sample: Vec<f64>,
    /// Samples whose term is not finite (only the original semi-supervised
    /// loss produces these).
    pub nonfinite: Vec<usize>,
}

impl LossOutput {
    fn new(per_sample: Vec<f64>, grad: Raster) -> Self {
        let value = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        let nonfinite = per_sample
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_finite())
            .map(|(i, _)| i)
            .collect();
        LossOutput {
            value,
            grad,
            per_sample,
            nonfinite,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.nonfinite.is_empty() && self.value.is_finite()
    }
}

/// Binary ground-truth maps, n×1×h×w with entries 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelLabels {
    maps: Raster,
}

impl PixelLabels {
    pub fn new(maps: Raster) -> Result<Self> {
        if maps.shape().c != 1 {
            return Err(Error::Shape(format!("label maps must be single-channel, got {}", maps.shape())));
        }
        if maps.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("label maps may only contain 0 and 1".into()));
        }
        Ok(PixelLabels { maps })
    }

    pub fn from_masks(masks: &[Mask]) -> Result<Self> {
        let rasters: Vec<Raster> = masks.iter().map(Mask::to_raster).collect();
        PixelLabels::new(Raster::stack(&rasters)?)
    }

    pub fn maps(&self) -> &Raster {
        &self.maps
    }

    pub fn shape(&self) -> Shape {
        self.maps.shape()
    }

    /// 1 iff any pixel of the sample is anomalous.
    pub fn image_labels(&self) -> Vec<u8> {
        (0..self.shape().n)
            .map(|i| u8::from(self.maps.sample(i).contains(&1.0)))
            .collect()
    }
}

/// log(1 - exp(-a)) for a > 0 without cancellation.
pub fn log1mexp(a: f64) -> f64 {
    if a > std::f64::consts::LN_2 {
        (-(-a).exp()).ln_1p()
    } else {
        (-(-a).exp_m1()).ln()
    }
}

#[inline]
fn huber(x: f64) -> f64 {
    // sqrt(x²+1) - 1 rewritten to avoid cancellation near 0.
    x * x / ((x * x + 1.0).sqrt() + 1.0)
}

#[inline]
fn huber_grad(x: f64) -> f64 {
    x / (x * x + 1.0).sqrt()
}

/// Elementwise sqrt(x²+1) - 1.
pub fn pseudo_huber(x: &Raster) -> Raster {
    x.map(huber)
}

/// Derivative x/sqrt(x²+1) of [`pseudo_huber`], times `grad_out`.
pub fn pseudo_huber_grad(x: &Raster, grad_out: &Raster) -> Result<Raster> {
    grad_out.expect_shape(x.shape(), "pseudo-Huber gradient")?;
    let data = x.data().iter().zip(grad_out.data()).map(|(&v, &g)| g * huber_grad(v)).collect();
    Raster::from_vec(x.shape(), data)
}

/// Probability of the normal class, exp(-h).
pub fn pixel_prob(heatmap: &Raster) -> Raster {
    heatmap.map(|h| (-h).exp())
}

fn check_labels(labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidArgument("image labels must be 0 or 1".into()));
    }
    Ok(())
}

fn check_heatmap(heatmap: &Raster, labels: &PixelLabels) -> Result<()> {
    heatmap.expect_shape(labels.shape(), "heatmap against label maps")?;
    if heatmap.data().iter().any(|&h| h < 0.0 || h.is_nan()) {
        return Err(Error::InvalidArgument("heatmap entries must be non-negative".into()));
    }
    Ok(())
}

/// Value and derivative of the anomaly term -log(1 - exp(-a)), with `a`
/// floored at [`DEVIATION_FLOOR`].
fn anomaly_term(a: f64) -> (f64, f64) {
    if a > DEVIATION_FLOOR {
        (-log1mexp(a), -1.0 / a.exp_m1())
    } else {
        (-log1mexp(DEVIATION_FLOOR), 0.0)
    }
}

/// Hypersphere classifier over flattened per-sample feature vectors;
/// deviation a = sqrt(|f - c|² + 1) - 1. The gradient is taken with respect
/// to the features; the centre gradient is its negated sum over samples.
pub fn hsc_loss(features: &Raster, centre: &[f64], labels: &[u8]) -> Result<LossOutput> {
    let s = features.shape();
    check_labels(labels, s.n)?;
    if centre.len() != s.sample_len() {
        return Err(Error::Shape(format!(
            "centre has {} dims, features have {}",
            centre.len(),
            s.sample_len()
        )));
    }
    let inv_n = 1.0 / s.n as f64;
    let mut grad = Raster::zeros(s);
    let mut per_sample = Vec::with_capacity(s.n);
    for (i, &y) in labels.iter().enumerate() {
        let f = features.sample(i);
        let d2: f64 = f.iter().zip(centre).map(|(a, c)| (a - c) * (a - c)).sum();
        let root = (d2 + 1.0).sqrt();
        let a = d2 / (root + 1.0);
        let (value, da) = if y == 0 { (a, 1.0) } else { anomaly_term(a) };
        per_sample.push(value);
        for ((g, fv), c) in grad.sample_mut(i).iter_mut().zip(f).zip(centre) {
            *g = inv_n * da * (fv - c) / root;
        }
    }
    Ok(LossOutput::new(per_sample, grad))
}

/// Per-sample centre gradient of [`hsc_loss`].
pub fn hsc_centre_grad(out: &LossOutput) -> Vec<f64> {
    let s = out.grad.shape();
    let mut g = vec![0.0; s.sample_len()];
    for i in 0..s.n {
        for (acc, v) in g.iter_mut().zip(out.grad.sample(i)) {
            *acc -= v;
        }
    }
    g
}

/// Unsupervised FCDD on the raw network output z (n×1×u×v): the deviation
/// of a sample is the mean pseudo-Huber value of its cells.
pub fn fcdd_unsup_loss(z: &Raster, labels: &[u8]) -> Result<LossOutput> {
    let s = z.shape();
    if s.c != 1 {
        return Err(Error::Shape(format!("unsupervised loss expects one channel, got {s}")));
    }
    check_labels(labels, s.n)?;
    let cells = s.sample_len() as f64;
    let scale = 1.0 / (s.n as f64 * cells);
    let mut grad = Raster::zeros(s);
    let mut per_sample = Vec::with_capacity(s.n);
    for (i, &y) in labels.iter().enumerate() {
        let zi = z.sample(i);
        let a = zi.iter().map(|&v| huber(v)).sum::<f64>() / cells;
        let (value, da) = if y == 0 { (a, 1.0) } else { anomaly_term(a) };
        per_sample.push(value);
        for (g, &v) in grad.sample_mut(i).iter_mut().zip(zi) {
            *g = scale * da * huber_grad(v);
        }
    }
    Ok(LossOutput::new(per_sample, grad))
}

/// Original semi-supervised FCDD: both terms are applied to every sample, so
/// any sample whose map is all zeros gets +inf. Such samples are listed in
/// `nonfinite` instead of raising an error.
pub fn fcdd_ss_loss_original(heatmap: &Raster, labels: &PixelLabels) -> Result<LossOutput> {
    check_heatmap(heatmap, labels)?;
    let s = heatmap.shape();
    let pixels = s.sample_len() as f64;
    let scale = 1.0 / (s.n as f64 * pixels);
    let mut grad = Raster::zeros(s);
    let mut per_sample = Vec::with_capacity(s.n);
    for i in 0..s.n {
        let (h, y) = (heatmap.sample(i), labels.maps.sample(i));
        let normal: f64 = h.iter().zip(y).map(|(hv, yv)| (1.0 - yv) * hv).sum::<f64>() / pixels;
        let inside: f64 = h.iter().zip(y).map(|(hv, yv)| yv * hv).sum::<f64>() / pixels;
        per_sample.push(normal - log1mexp(inside));
        let d_inside = -1.0 / inside.exp_m1();
        for (g, &yv) in grad.sample_mut(i).iter_mut().zip(y) {
            *g = scale * if yv == 1.0 { d_inside } else { 1.0 };
        }
    }
    Ok(LossOutput::new(per_sample, grad))
}

/// Binary cross-entropy averaged over pixels then samples, p clamped to
/// [1e-12, 1 - 1e-12]. The gradient is with respect to `p`.
pub fn bce_loss(p: &Raster, y: &Raster) -> Result<LossOutput> {
    y.expect_shape(p.shape(), "BCE targets")?;
    let s = p.shape();
    let per = s.sample_len() as f64;
    let scale = 1.0 / (s.n as f64 * per);
    let mut grad = Raster::zeros(s);
    let mut per_sample = Vec::with_capacity(s.n);
    for i in 0..s.n {
        let mut total = 0.0;
        for ((g, &pv), &yv) in grad.sample_mut(i).iter_mut().zip(p.sample(i)).zip(y.sample(i)) {
            let pc = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln();
            *g = if pv == pc { scale * ((1.0 - yv) / (1.0 - pc) - yv / pc) } else { 0.0 };
        }
        per_sample.push(total / per);
    }
    Ok(LossOutput::new(per_sample, grad))
}

/// Modified semi-supervised FCDD: per pixel (1-y)·h - y·log(1 - exp(-h)),
/// averaged over pixels then samples. Finite for every label configuration.
pub fn fcdd_ss_loss_modified(heatmap: &Raster, labels: &PixelLabels) -> Result<LossOutput> {
    check_heatmap(heatmap, labels)?;
    let s = heatmap.shape();
    let pixels = s.sample_len() as f64;
    let scale = 1.0 / (s.n as f64 * pixels);
    let mut grad = Raster::zeros(s);
    let mut per_sample = Vec::with_capacity(s.n);
    for i in 0..s.n {
        let mut total = 0.0;
        for ((g, &h), &y) in grad.sample_mut(i).iter_mut().zip(heatmap.sample(i)).zip(labels.maps.sample(i)) {
            let (v, d) = if y == 1.0 { anomaly_term(h) } else { (h, 1.0) };
            total += v;
            *g = scale * d;
        }
        per_sample.push(total / pixels);
    }
    Ok(LossOutput::new(per_sample, grad))
}

/// Focal variant of the modified loss with focusing parameter `gamma`:
/// per pixel (1-y)·h·(1-p)^γ - y·p^γ·log(1-p), p = exp(-h) clamped to
/// [1e-12, 1 - 1e-12]. γ = 0 reproduces [`fcdd_ss_loss_modified`].
pub fn fcdd_focal_loss(heatmap: &Raster, labels: &PixelLabels, gamma: f64) -> Result<LossOutput> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("focal gamma must be >= 0, got {gamma}")));
    }
    check_heatmap(heatmap, labels)?;
    let s = heatmap.shape();
    let pixels = s.sample_len() as f64;
    let scale = 1.0 / (s.n as f64 * pixels);
    let mut grad = Raster::zeros(s);
    let mut per_sample = Vec::with_capacity(s.n);
    for i in 0..s.n {
        let mut total = 0.0;
        for ((g, &h), &y) in grad.sample_mut(i).iter_mut().zip(heatmap.sample(i)).zip(labels.maps.sample(i)) {
            let hc = h.clamp(DEVIATION_FLOOR, DEVIATION_CEIL);
            let inside = h == hc;
            let p = (-hc).exp();
            let q = -(-hc).exp_m1();
            let (v, d) = if y == 1.0 {
                let pg = p.powf(gamma);
                let log_q = log1mexp(hc);
                let d = if inside { gamma * pg * log_q - pg / hc.exp_m1() } else { 0.0 };
                (-pg * log_q, d)
            } else {
                let qg = q.powf(gamma);
                let d = if gamma == 0.0 || !inside {
                    qg
                } else {
                    qg + gamma * h * q.powf(gamma - 1.0) * p
                };
                (h * qg, d)
            };
            total += v;
            *g = scale * d;
        }
        per_sample.push(total / pixels);
    }
    Ok(LossOutput::new(per_sample, grad))
}
