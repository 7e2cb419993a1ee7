//! Directory datasets:
//!
//! ```text
//! root/manifest.json                          optional class counts and seed
//! root/{train,test}/{normal,anomalous}/images/<id>.png
//! root/{train,test}/anomalous/masks/<id>.png     optional, >127 is anomalous
//! root/{train,test}/anomalous/labelme/<id>.json  optional polygons
//! ```
//!
//! A labelme file next to the image (`images/<id>.json`) is also accepted.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{parse_labelme, rasterize_polygon, DatasetSplit, Label, Mask, Sample, SplitSummary};
use crate::error::{Error, Result};
use crate::tensor::{Raster, Shape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub counts: SplitSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// 8-bit PNG as a 1×c×h×w raster in [0, 1]; grey images give one channel,
/// everything else three (alpha is dropped).
pub fn read_png(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, bytes) = if img.color().has_color() {
        (3, img.into_rgb8().into_raw())
    } else {
        (1, img.into_luma8().into_raw())
    };
    let mut data = vec![0.0; c * h * w];
    for (i, &b) in bytes.iter().enumerate() {
        let (pix, ch) = (i / c, i % c);
        data[ch * h * w + pix] = f64::from(b) / 255.0;
    }
    Raster::from_vec(Shape::new(1, c, h, w), data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the first sample of a 1- or 3-channel raster with values in [0, 1].
pub fn write_png(path: &Path, image: &Raster) -> Result<()> {
    let s = image.shape();
    let (h, w) = (s.h as u32, s.w as u32);
    let x = image.sample(0);
    let dynamic = match s.c {
        1 => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, x.iter().map(|&v| quantize(v)).collect()).expect("sized"),
        ),
        3 => {
            let plane = s.plane();
            let raw = (0..plane).flat_map(|p| (0..3).map(move |c| quantize(x[c * plane + p]))).collect();
            DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).expect("sized"))
        }
        c => return Err(Error::Shape(format!("cannot write a {c}-channel PNG"))),
    };
    dynamic.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit greyscale PNG from raw bytes.
pub fn write_png_gray(path: &Path, height: usize, width: usize, bytes: Vec<u8>) -> Result<()> {
    image::save_buffer(path, &bytes, width as u32, height as u32, ColorType::L8).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let grey = img.into_luma8();
    let (w, h) = (grey.width() as usize, grey.height() as usize);
    Mask::from_vec(h, w, grey.into_raw().into_iter().map(|v| u8::from(v > 127)).collect())
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let stem = path.file_stem().and_then(|s| s.to_str()).map(str::to_string);
            match stem {
                Some(s) => out.push((s, path)),
                None => return Err(Error::format(&path, "file name is not valid UTF-8")),
            }
        }
    }
    out.sort();
    Ok(out)
}

fn ground_truth(class_dir: &Path, id: &str, h: usize, w: usize) -> Result<Option<Mask>> {
    let mask_path = class_dir.join("masks").join(format!("{id}.png"));
    if mask_path.is_file() {
        let m = read_mask(&mask_path)?;
        if (m.height, m.width) != (h, w) {
            return Err(Error::format(
                &mask_path,
                format!("mask is {}x{}, image is {h}x{w}", m.height, m.width),
            ));
        }
        return Ok(Some(m));
    }
    for json in [
        class_dir.join("labelme").join(format!("{id}.json")),
        class_dir.join("images").join(format!("{id}.json")),
    ] {
        if json.is_file() {
            let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
            let polys = parse_labelme(&text).map_err(|e| Error::format(&json, e.to_string()))?;
            return Ok(Some(rasterize_polygon(&polys, h, w)));
        }
    }
    Ok(None)
}

fn load_split(root: &Path, split: &str, missing: &mut Vec<String>) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (class, label) in [("normal", Label::Normal), ("anomalous", Label::Anomalous)] {
        let class_dir = root.join(split).join(class);
        for (id, path) in png_stems(&class_dir.join("images"))? {
            let image = read_png(&path)?;
            let (h, w) = (image.shape().h, image.shape().w);
            let map = match label {
                Label::Normal => Some(Mask::zeros(h, w)),
                Label::Anomalous => {
                    let m = ground_truth(&class_dir, &id, h, w)?;
                    if m.is_none() {
                        missing.push(format!("{split}/{id}"));
                    }
                    m
                }
            };
            samples.push(Sample::new(id, image, label, map)?);
        }
    }
    Ok(samples)
}

/// Loads a dataset directory. Anomalous samples without a mask or labelme
/// file are kept (map `None`) and listed in `missing_ground_truth`.
pub fn load_dataset(root: &Path) -> Result<DatasetSplit> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let mut missing = Vec::new();
    let train = load_split(root, "train", &mut missing)?;
    let test = load_split(root, "test", &mut missing)?;
    let split = DatasetSplit::new(train, test, missing)?;
    let manifest_path = root.join("manifest.json");
    if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        if manifest.counts != split.summary() {
            return Err(Error::format(
                &manifest_path,
                format!("manifest says {}, directory has {}", manifest.counts, split.summary()),
            ));
        }
    }
    Ok(split)
}

/// Writes `split` in the directory layout read by [`load_dataset`], with
/// 8-bit images, masks for anomalous samples and a manifest.
pub fn write_dataset(split: &DatasetSplit, root: &Path, seed: Option<u64>) -> Result<()> {
    for (name, samples) in [("train", &split.train), ("test", &split.test)] {
        for s in samples.iter() {
            let class_dir = root.join(name).join(match s.label {
                Label::Normal => "normal",
                Label::Anomalous => "anomalous",
            });
            let images = class_dir.join("images");
            fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
            write_png(&images.join(format!("{}.png", s.id)), &s.image)?;
            if let (Label::Anomalous, Some(m)) = (s.label, &s.map) {
                let masks = class_dir.join("masks");
                fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
                let bytes = m.data.iter().map(|&v| v * 255).collect();
                write_png_gray(&masks.join(format!("{}.png", s.id)), m.height, m.width, bytes)?;
            }
        }
    }
    let manifest = Manifest {
        counts: split.summary(),
        seed,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
