//! Synthetic blob dataset: smooth noise textures, anomalies are additive
//! Gaussian bumps whose half-maximum disk is the ground-truth map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Label, Mask, Sample};
use crate::error::{Error, Result};
use crate::tensor::{Raster, Shape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub train_normal: usize,
    pub train_anomalous: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Bump standard deviation is drawn uniformly from this range.
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub amplitude: f64,
    /// Box-blur radius of the texture.
    pub smoothing: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}

impl SynthConfig {
    /// 64×64 RGB, 500/50 train and 100/50 test.
    pub fn desk() -> Self {
        SynthConfig {
            train_normal: 500,
            train_anomalous: 50,
            test_normal: 100,
            test_anomalous: 50,
            channels: 3,
            height: 64,
            width: 64,
            sigma_min: 2.0,
            sigma_max: 4.0,
            amplitude: 0.35,
            smoothing: 2,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("synthetic images need positive size and channel count".into());
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return bad(format!("amplitude must be > 0, got {}", self.amplitude));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max && self.sigma_max.is_finite()) {
            return bad(format!("invalid sigma range [{}, {}]", self.sigma_min, self.sigma_max));
        }
        let needed = 2.0 * half_max_radius(self.sigma_max) + 2.0;
        if needed > self.height.min(self.width) as f64 {
            return bad(format!(
                "blob sigma {} does not fit inside a {}x{} image",
                self.sigma_max, self.height, self.width
            ));
        }
        Ok(())
    }
}

/// Radius at which a Gaussian bump falls to half its peak.
pub fn half_max_radius(sigma: f64) -> f64 {
    sigma * (2.0 * std::f64::consts::LN_2).sqrt()
}

fn box_blur(plane: &mut [f64], h: usize, w: usize, r: usize) {
    if r == 0 {
        return;
    }
    let mut tmp = vec![0.0; plane.len()];
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let norm = 1.0 / (2 * r + 1) as f64;
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-(r as isize)..=r as isize)
                .map(|d| plane[y * w + clamp(x as isize + d, w)])
                .sum();
            tmp[y * w + x] = s * norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-(r as isize)..=r as isize)
                .map(|d| tmp[clamp(y as isize + d, h) * w + x])
                .sum();
            plane[y * w + x] = s * norm;
        }
    }
}

fn texture(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Raster {
    let (h, w) = (cfg.height, cfg.width);
    let mut data: Vec<f64> = (0..cfg.channels * h * w).map(|_| rng.gen::<f64>()).collect();
    for plane in data.chunks_exact_mut(h * w) {
        box_blur(plane, h, w, cfg.smoothing);
    }
    Raster::from_vec(Shape::new(1, cfg.channels, h, w), data).expect("sized")
}

/// Adds a bump centred at (cx, cy) to every channel; returns its half-max mask.
pub(crate) fn add_bump(image: &mut Raster, cx: f64, cy: f64, sigma: f64, amplitude: f64) -> Mask {
    let s = image.shape();
    let mut mask = Mask::zeros(s.h, s.w);
    let bump: Vec<f64> = (0..s.h * s.w)
        .map(|i| {
            let (y, x) = ((i / s.w) as f64, (i % s.w) as f64);
            amplitude * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    for (m, b) in mask.data.iter_mut().zip(&bump) {
        *m = u8::from(*b > amplitude / 2.0);
    }
    for plane in image.data_mut().chunks_exact_mut(s.h * s.w) {
        for (v, b) in plane.iter_mut().zip(&bump) {
            *v = (*v + b).clamp(0.0, 1.0);
        }
    }
    mask
}

fn sample(cfg: &SynthConfig, stream: u64, id: String, label: Label) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut image = texture(cfg, &mut rng);
    let mask = match label {
        Label::Normal => Mask::zeros(cfg.height, cfg.width),
        Label::Anomalous => {
            let sigma = if cfg.sigma_max > cfg.sigma_min {
                rng.gen_range(cfg.sigma_min..=cfg.sigma_max)
            } else {
                cfg.sigma_min
            };
            let margin = half_max_radius(sigma) + 1.0;
            let cx = rng.gen_range(margin..=cfg.width as f64 - 1.0 - margin);
            let cy = rng.gen_range(margin..=cfg.height as f64 - 1.0 - margin);
            add_bump(&mut image, cx, cy, sigma, cfg.amplitude)
        }
    };
    Sample::new(id, image, label, Some(mask)).expect("consistent synthetic sample")
}

/// Deterministic in `cfg`; every sample draws from its own ChaCha stream, so
/// changing one count leaves the other samples untouched.
pub fn synth_generate(cfg: &SynthConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let group = |split: u64, label: Label, count: usize| {
        let (tag, class) = match label {
            Label::Normal => ("normal", 0u64),
            Label::Anomalous => ("anomalous", 1u64),
        };
        let prefix = if split == 0 { "train" } else { "test" };
        (0..count)
            .map(|i| sample(cfg, (split << 40) | (class << 32) | i as u64, format!("{prefix}_{tag}_{i:05}"), label))
            .collect::<Vec<_>>()
    };
    let mut train = group(0, Label::Normal, cfg.train_normal);
    train.extend(group(0, Label::Anomalous, cfg.train_anomalous));
    let mut test = group(1, Label::Normal, cfg.test_normal);
    test.extend(group(1, Label::Anomalous, cfg.test_anomalous));
    DatasetSplit::new(train, test, Vec::new())
}
