use super::{ChannelStats, Mask, Sample};
use crate::error::{Error, Result};
use crate::model::InputShape;
use crate::tensor::{Raster, Shape};

const STD_FLOOR: f64 = 1e-6;

/// Source coordinate and blend weight along one axis (half-pixel centres).
fn taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every plane; same-size input is returned unchanged.
pub fn resize_bilinear(input: &Raster, height: usize, width: usize) -> Result<Raster> {
    let s = input.shape();
    if height == 0 || width == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::Shape(format!("cannot resize {s} to {height}x{width}")));
    }
    if (s.h, s.w) == (height, width) {
        return Ok(input.clone());
    }
    let ty = taps(height, s.h);
    let tx = taps(width, s.w);
    let mut out = Vec::with_capacity(s.n * s.c * height * width);
    for plane in input.data().chunks_exact(s.plane()) {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let p = |y: usize, x: usize| plane[y * s.w + x];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Raster::from_vec(Shape::new(s.n, s.c, height, width), out)
}

/// Nearest-neighbour resize of a binary map.
pub fn resize_nearest(mask: &Mask, height: usize, width: usize) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(Error::Shape(format!("cannot resize mask to {height}x{width}")));
    }
    let pick = |d: usize, out: usize, inp: usize| (((d as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = pick(y, height, mask.height);
        for x in 0..width {
            data.push(mask.get(sy, pick(x, width, mask.width)));
        }
    }
    Mask::from_vec(height, width, data)
}

/// Channel adaptation (grey replicated to RGB, RGB averaged to grey), bilinear
/// resize to `target`, then per-channel standardization.
pub fn preprocess(image: &Raster, stats: &ChannelStats, target: InputShape) -> Result<Raster> {
    let s = image.shape();
    let adapted = match (s.c, target.channels) {
        (a, b) if a == b => image.clone(),
        (1, c) => Raster::from_fn(Shape::new(s.n, c, s.h, s.w), |n, _, y, x| image.get(n, 0, y, x)),
        (_, 1) => Raster::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, x| {
            (0..s.c).map(|c| image.get(n, c, y, x)).sum::<f64>() / s.c as f64
        }),
        (a, b) => return Err(Error::Shape(format!("cannot convert {a} channels to {b}"))),
    };
    if stats.mean.len() != target.channels || stats.std.len() != target.channels {
        return Err(Error::Shape(format!(
            "normalization has {} channels, model expects {}",
            stats.mean.len(),
            target.channels
        )));
    }
    let mut out = resize_bilinear(&adapted, target.height, target.width)?;
    let plane = target.height * target.width;
    for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let c = i % target.channels;
        let (m, sd) = (stats.mean[c], stats.std[c].max(STD_FLOOR));
        for v in chunk {
            *v = (*v - m) / sd;
        }
    }
    Ok(out)
}

/// Ground-truth map of `sample` resized to the target resolution; normal
/// samples without a map get zeros.
pub fn preprocess_map(sample: &Sample, target: InputShape) -> Result<Mask> {
    match &sample.map {
        Some(m) => resize_nearest(m, target.height, target.width),
        None if !sample.label.is_anomalous() => Ok(Mask::zeros(target.height, target.width)),
        None => Err(Error::MissingGroundTruth(vec![sample.id.clone()])),
    }
}
