//! Second inspection stage: detector boxes in, per-disk verdicts out.
//!
//! Box files hold one detection per line, `class cx cy w h conf`, with the
//! centre and size normalized to the image dimensions. Class 1 is a disk;
//! other classes are kept but never cropped.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{preprocess, read_png, ChannelStats};
use crate::error::{Error, Result};
use crate::heatmap::{export_heatmaps, heatmaps, Heatmap, Upsampler};
use crate::model::{read_checkpoint_file, Network};
use crate::tensor::{Raster, Shape};

pub const CLASS_INSULATOR: u32 = 0;
pub const CLASS_DISK: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub bw: f64,
    pub bh: f64,
    pub confidence: f64,
    /// 1-based line in the box file.
    pub line: usize,
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

impl BoundingBox {
    pub fn is_disk(&self) -> bool {
        self.class_id == CLASS_DISK
    }

    /// Normalized box of an integer pixel rectangle.
    pub fn from_rect(rect: PixelRect, height: usize, width: usize, class_id: u32, confidence: f64) -> Self {
        let (w, h) = (width as f64, height as f64);
        BoundingBox {
            class_id,
            cx: (rect.x0 + rect.x1) as f64 / 2.0 / w,
            cy: (rect.y0 + rect.y1) as f64 / 2.0 / h,
            bw: rect.width() as f64 / w,
            bh: rect.height() as f64 / h,
            confidence,
            line: 0,
        }
    }

    /// Pixel rectangle clamped to the image, `None` if nothing is left.
    pub fn pixel_rect(&self, height: usize, width: usize) -> Option<PixelRect> {
        let (w, h) = (width as f64, height as f64);
        let clamp = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
        let rect = PixelRect {
            x0: clamp((self.cx - self.bw / 2.0) * w, width),
            x1: clamp((self.cx + self.bw / 2.0) * w, width),
            y0: clamp((self.cy - self.bh / 2.0) * h, height),
            y1: clamp((self.cy + self.bh / 2.0) * h, height),
        };
        (rect.x1 > rect.x0 && rect.y1 > rect.y0).then_some(rect)
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {} {}", self.class_id, self.cx, self.cy, self.bw, self.bh, self.confidence)
    }
}

/// Parses a box file. Blank lines and lines starting with `#` are ignored.
pub fn parse_boxes(text: &str) -> Result<Vec<BoundingBox>> {
    let mut boxes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::InvalidArgument(format!("box line {line}: {reason}"));
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 fields (class cx cy w h conf), found {}", fields.len())));
        }
        let class_id: u32 = fields[0].parse().map_err(|_| bad(format!("class '{}' is not an integer", fields[0])))?;
        let mut vals = [0.0; 5];
        for (v, (name, text)) in vals.iter_mut().zip(["cx", "cy", "w", "h", "conf"].iter().zip(&fields[1..])) {
            *v = text.parse().map_err(|_| bad(format!("{name} '{text}' is not a number")))?;
            if !(0.0..=1.0).contains(v) {
                return Err(bad(format!("{name} = {v} outside [0, 1]")));
            }
        }
        boxes.push(BoundingBox {
            class_id,
            cx: vals[0],
            cy: vals[1],
            bw: vals[2],
            bh: vals[3],
            confidence: vals[4],
            line,
        });
    }
    Ok(boxes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    /// Index into the box list.
    pub index: usize,
    pub rect: PixelRect,
    pub image: Raster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedBox {
    pub index: usize,
    pub line: usize,
    pub reason: String,
}

/// Cuts every disk box out of a 1×c×H×W image. Boxes of other classes are
/// ignored; disk boxes with no area inside the image are reported.
pub fn crop_disks(image: &Raster, boxes: &[BoundingBox]) -> Result<(Vec<Crop>, Vec<SkippedBox>)> {
    let s = image.shape();
    if s.n != 1 {
        return Err(Error::Shape(format!("crop_disks takes one image, got {s}")));
    }
    let mut crops = Vec::new();
    let mut skipped = Vec::new();
    for (index, b) in boxes.iter().enumerate().filter(|(_, b)| b.is_disk()) {
        let Some(rect) = b.pixel_rect(s.h, s.w) else {
            skipped.push(SkippedBox {
                index,
                line: b.line,
                reason: "zero area after clamping to the image".into(),
            });
            continue;
        };
        let crop = Raster::from_fn(Shape::new(1, s.c, rect.height(), rect.width()), |_, c, y, x| {
            image.get(0, c, rect.y0 + y, rect.x0 + x)
        });
        crops.push(Crop { index, rect, image: crop });
    }
    Ok((crops, skipped))
}

/// Where an inspection threshold came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdSource {
    User,
    EvalReport { path: PathBuf, instance: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub source: ThresholdSource,
}

impl Threshold {
    pub fn user(value: f64) -> Self {
        Threshold {
            value,
            source: ThresholdSource::User,
        }
    }

    /// Optimal threshold of one instance of a saved evaluation report.
    pub fn from_report(path: &Path, instance: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: crate::eval::EvalReport = serde_json::from_str(&text)?;
        let r = report
            .instances
            .get(instance)
            .ok_or_else(|| Error::format(path, format!("no instance {instance} in report")))?;
        Ok(Threshold {
            value: r.optimal_threshold,
            source: ThresholdSource::EvalReport {
                path: path.to_path_buf(),
                instance,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiskResult {
    pub index: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub rect: PixelRect,
    pub score: f64,
    pub anomalous: bool,
    /// Heatmap raster, relative to the report directory.
    pub heatmap: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InspectionSummary {
    pub disks: usize,
    pub normal: usize,
    pub anomalous: usize,
    pub skipped: usize,
    pub other_boxes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectionReport {
    pub image_id: String,
    pub model_id: String,
    pub threshold: Threshold,
    pub disks: Vec<DiskResult>,
    pub skipped: Vec<SkippedBox>,
    pub summary: InspectionSummary,
}

impl InspectionReport {
    /// Recomputes verdicts and tallies from the stored scores.
    pub fn is_consistent(&self) -> bool {
        let anomalous = self.disks.iter().filter(|d| d.anomalous).count();
        self.disks.iter().all(|d| d.anomalous == (d.score >= self.threshold.value))
            && self.summary.disks == self.disks.len()
            && self.summary.anomalous == anomalous
            && self.summary.normal == self.disks.len() - anomalous
            && self.summary.skipped == self.skipped.len()
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

/// Scores the disk crops of one image with a loaded network. Heatmaps are
/// written to `out_dir/heatmaps`.
pub fn inspect_image(
    net: &Network,
    model_id: &str,
    image_id: &str,
    image: &Raster,
    boxes: &[BoundingBox],
    threshold: Threshold,
    out_dir: &Path,
) -> Result<InspectionReport> {
    if !threshold.value.is_finite() {
        return Err(Error::InvalidArgument(format!("threshold {} is not finite", threshold.value)));
    }
    let input = net.config().input;
    let stats = match &net.config().normalization {
        Some(s) => s.clone(),
        None => ChannelStats::identity(input.channels),
    };
    let up = Upsampler::for_network(net)?;
    let (crops, skipped) = crop_disks(image, boxes)?;
    let mut maps = Vec::with_capacity(crops.len());
    let mut disks = Vec::with_capacity(crops.len());
    for crop in &crops {
        let x = preprocess(&crop.image, &stats, input)?;
        let values = heatmaps(net, &up, &x)?;
        let id = format!("{image_id}_disk{:03}", crop.index);
        let hm = Heatmap::new(values, model_id, &id, up.sigma())?;
        let score = hm.values.mean();
        disks.push(DiskResult {
            index: crop.index,
            bbox: boxes[crop.index],
            rect: crop.rect,
            score,
            anomalous: score >= threshold.value,
            heatmap: Path::new("heatmaps").join(format!("{id}.hmf")),
        });
        maps.push(hm);
    }
    if !maps.is_empty() {
        export_heatmaps(&maps, &out_dir.join("heatmaps"))?;
    }
    let anomalous = disks.iter().filter(|d| d.anomalous).count();
    let summary = InspectionSummary {
        disks: disks.len(),
        normal: disks.len() - anomalous,
        anomalous,
        skipped: skipped.len(),
        other_boxes: boxes.iter().filter(|b| !b.is_disk()).count(),
    };
    Ok(InspectionReport {
        image_id: image_id.to_string(),
        model_id: model_id.to_string(),
        threshold,
        disks,
        skipped,
        summary,
    })
}

/// File-level entry point: reads the image, boxes and checkpoint and writes
/// `<image>_inspection.json` plus heatmaps into `out_dir`.
pub fn inspect(
    image_path: &Path,
    boxes_path: &Path,
    checkpoint: &Path,
    threshold: Threshold,
    out_dir: &Path,
) -> Result<InspectionReport> {
    let image = read_png(image_path)?;
    let text = fs::read_to_string(boxes_path).map_err(|e| Error::io(boxes_path, e))?;
    let boxes = parse_boxes(&text).map_err(|e| Error::format(boxes_path, e.to_string()))?;
    let net = read_checkpoint_file(checkpoint)?;
    let image_id = file_stem(image_path);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let report = inspect_image(&net, &file_stem(checkpoint), &image_id, &image, &boxes, threshold, out_dir)?;
    let path = out_dir.join(format!("{image_id}_inspection.json"));
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
