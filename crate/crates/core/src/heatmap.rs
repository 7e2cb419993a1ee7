//! Full-resolution anomaly heatmaps: pseudo-Huber scoring of the network
//! output followed by fixed Gaussian upsampling.
//!
//! Exact rasters are stored as HMF1 files:
//!
//! ```text
//! "HMF1"   4 bytes
//! height   u32 LE
//! width    u32 LE
//! values   height·width f64 LE, row-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::write_png_gray;
use crate::error::{Error, Result};
use crate::losses::pseudo_huber;
use crate::model::{Network, ReceptiveField};
use crate::tensor::{Raster, Shape};

pub const HMF_MAGIC: &[u8; 4] = b"HMF1";

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// 1×1×h×w, non-negative.
    pub values: Raster,
    pub model_id: String,
    pub sample_id: String,
    pub sigma: f64,
}

impl Heatmap {
    pub fn new(values: Raster, model_id: impl Into<String>, sample_id: impl Into<String>, sigma: f64) -> Result<Self> {
        let s = values.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::Shape(format!("heatmap must be 1x1xHxW, got {s}")));
        }
        if values.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidArgument("heatmap values must be non-negative".into()));
        }
        Ok(Heatmap {
            values,
            model_id: model_id.into(),
            sample_id: sample_id.into(),
            sigma,
        })
    }
}

/// Pseudo-Huber deviation of a single-channel network output.
pub fn huber_map(z: &Raster) -> Result<Raster> {
    if z.shape().c != 1 {
        return Err(Error::Shape(format!("heatmap input must be single-channel, got {}", z.shape())));
    }
    Ok(pseudo_huber(z))
}

/// Mean of all heatmap entries.
pub fn image_score(hm: &Heatmap) -> f64 {
    hm.values.mean()
}

/// Linear map from a u×v cell grid to an h×w pixel grid, written as
/// `out = A · L · Bᵀ` with one 1-D Gaussian per cell along each axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Upsampler {
    sigma: f64,
    low: (usize, usize),
    high: (usize, usize),
    /// h×u, row-major.
    rows: Vec<f64>,
    /// w×v, row-major.
    cols: Vec<f64>,
}

/// Column `i` holds the Gaussian centred at `rf.centre(i)`, truncated at
/// radius ceil(3σ) and normalized over the full integer grid before the
/// image border cuts it off.
fn axis_matrix(rf: &ReceptiveField, sigma: f64, cells: usize, pixels: usize) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil();
    let mut m = vec![0.0; pixels * cells];
    for i in 0..cells {
        let c = rf.centre(i);
        let lo = (c - radius).ceil() as i64;
        let hi = (c + radius).floor() as i64;
        let weight = |p: i64| (-(p as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp();
        let norm: f64 = (lo..=hi).map(weight).sum();
        for p in lo.max(0)..=hi.min(pixels as i64 - 1) {
            m[p as usize * cells + i] = weight(p) / norm;
        }
    }
    m
}

impl Upsampler {
    pub fn new(rf: &ReceptiveField, sigma: f64, low: (usize, usize), high: (usize, usize)) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("upsampling sigma must be > 0, got {sigma}")));
        }
        if low.0 == 0 || low.1 == 0 || high.0 == 0 || high.1 == 0 {
            return Err(Error::Shape("upsampling needs non-empty grids".into()));
        }
        Ok(Upsampler {
            sigma,
            low,
            high,
            rows: axis_matrix(rf, sigma, low.0, high.0),
            cols: axis_matrix(rf, sigma, low.1, high.1),
        })
    }

    /// Upsampler from a network's output grid to its input resolution, with
    /// the configured sigma or the receptive-field default.
    pub fn for_network(net: &Network) -> Result<Self> {
        let rf = net.receptive_field()?;
        let sigma = net.config().upsample_sigma.unwrap_or_else(|| rf.default_sigma());
        let out = net.output_shape(1)?;
        let input = net.config().input;
        Upsampler::new(&rf, sigma, (out.h, out.w), (input.height, input.width))
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn transform(&self, x: &Raster, forward: bool) -> Result<Raster> {
        let ((ih, iw), (oh, ow)) = if forward { (self.low, self.high) } else { (self.high, self.low) };
        let s = x.shape();
        if s.c != 1 || (s.h, s.w) != (ih, iw) {
            return Err(Error::Shape(format!("upsampler expects Nx1x{ih}x{iw}, got {s}")));
        }
        let (u, v) = self.low;
        // rows[p, i] couples output row p with cell row i; likewise cols.
        let row = |p: usize, i: usize| if forward { self.rows[p * u + i] } else { self.rows[i * u + p] };
        let col = |q: usize, j: usize| if forward { self.cols[q * v + j] } else { self.cols[j * v + q] };
        let mut out = Raster::zeros(Shape::new(s.n, 1, oh, ow));
        let mut tmp = vec![0.0; ih * ow];
        for n in 0..s.n {
            let src = x.sample(n);
            tmp.iter_mut().for_each(|t| *t = 0.0);
            for a in 0..ih {
                for q in 0..ow {
                    let mut acc = 0.0;
                    for b in 0..iw {
                        acc += src[a * iw + b] * col(q, b);
                    }
                    tmp[a * ow + q] = acc;
                }
            }
            let dst = out.sample_mut(n);
            for p in 0..oh {
                for a in 0..ih {
                    let w = row(p, a);
                    if w != 0.0 {
                        for q in 0..ow {
                            dst[p * ow + q] += w * tmp[a * ow + q];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Upsamples every sample of an n×1×u×v batch.
    pub fn apply(&self, lowres: &Raster) -> Result<Raster> {
        self.transform(lowres, true)
    }

    /// Transpose of [`Upsampler::apply`], used to pull gradients back to
    /// the cell grid.
    pub fn adjoint(&self, grad: &Raster) -> Result<Raster> {
        self.transform(grad, false)
    }
}

/// Upsamples one low-resolution map.
pub fn gaussian_upsample(
    lowres: &Raster,
    rf: &ReceptiveField,
    sigma: f64,
    out_shape: (usize, usize),
) -> Result<Heatmap> {
    let s = lowres.shape();
    if s.n != 1 {
        return Err(Error::Shape(format!("gaussian_upsample takes one map, got {s}")));
    }
    let up = Upsampler::new(rf, sigma, (s.h, s.w), out_shape)?;
    Heatmap::new(up.apply(lowres)?, "", "", sigma)
}

/// Full-resolution heatmaps (n×1×H×W) of a batch in evaluation mode.
pub fn heatmaps(net: &Network, up: &Upsampler, batch: &Raster) -> Result<Raster> {
    up.apply(&huber_map(&net.predict(batch)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreviewScale {
    pub min: f64,
    pub max: f64,
    pub sigma: f64,
}

pub fn write_hmf(path: &Path, values: &Raster) -> Result<()> {
    let s = values.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::Shape(format!("HMF1 stores one 1-channel map, got {s}")));
    }
    let mut buf = Vec::with_capacity(12 + 8 * values.len());
    buf.extend_from_slice(HMF_MAGIC);
    buf.extend_from_slice(&(s.h as u32).to_le_bytes());
    buf.extend_from_slice(&(s.w as u32).to_le_bytes());
    for v in values.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_hmf(path: &Path) -> Result<Raster> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 12 || &buf[..4] != HMF_MAGIC {
        return Err(Error::format(path, "not an HMF1 file"));
    }
    let h = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    if buf.len() != 12 + 8 * h * w {
        return Err(Error::format(path, format!("expected {h}x{w} values, file has {} bytes", buf.len())));
    }
    let data = buf[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Raster::from_vec(Shape::new(1, 1, h, w), data)
}

/// 8-bit preview bytes: floor(v / max · 255), all zero when max is 0.
pub fn preview_bytes(values: &Raster, max: f64) -> Vec<u8> {
    values
        .data()
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).floor().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect()
}

/// Files written for one heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedHeatmap {
    pub raster: PathBuf,
    pub preview: PathBuf,
    pub sidecar: PathBuf,
}

/// Writes `<sample_id>.hmf`, `<sample_id>.png` and `<sample_id>.json` for each
/// heatmap into `dir`. Previews share one scale: the maximum over the batch.
pub fn export_heatmaps(maps: &[Heatmap], dir: &Path) -> Result<Vec<ExportedHeatmap>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let max = maps.iter().map(|m| m.values.max()).fold(0.0, f64::max);
    let min = maps.iter().map(|m| m.values.min()).fold(f64::INFINITY, f64::min);
    let mut written = Vec::with_capacity(maps.len());
    for hm in maps {
        let stem = if hm.sample_id.is_empty() { "heatmap" } else { hm.sample_id.as_str() };
        let files = ExportedHeatmap {
            raster: dir.join(format!("{stem}.hmf")),
            preview: dir.join(format!("{stem}.png")),
            sidecar: dir.join(format!("{stem}.json")),
        };
        write_hmf(&files.raster, &hm.values)?;
        let s = hm.values.shape();
        write_png_gray(&files.preview, s.h, s.w, preview_bytes(&hm.values, max))?;
        let scale = PreviewScale {
            min,
            max,
            sigma: hm.sigma,
        };
        let text = serde_json::to_string_pretty(&scale)?;
        fs::write(&files.sidecar, text).map_err(|e| Error::io(&files.sidecar, e))?;
        written.push(files);
    }
    Ok(written)
}

pub fn export_heatmap(hm: &Heatmap, dir: &Path) -> Result<ExportedHeatmap> {
    Ok(export_heatmaps(std::slice::from_ref(hm), dir)?.remove(0))
}
