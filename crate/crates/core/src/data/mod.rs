//! Samples, dataset splits and everything that produces them.

mod labelme;
mod loader;
mod preprocess;
mod rasterize;
mod synth;

pub use labelme::{parse_labelme, Polygon};
pub use loader::{load_dataset, read_png, write_dataset, write_png, write_png_gray, Manifest};
pub use preprocess::{preprocess, preprocess_map, resize_bilinear, resize_nearest};
pub use rasterize::rasterize_polygon;
pub use synth::{synth_generate, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Raster, Shape};

/// Binary h×w ground-truth map (1 = anomalous pixel).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("mask {height}x{width} given {} values", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Mask { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn any(&self) -> bool {
        self.data.contains(&1)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// 1×1×h×w raster of 0.0/1.0.
    pub fn to_raster(&self) -> Raster {
        Raster::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("mask size matches")
    }

    /// Pixelwise union.
    pub fn union(&mut self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape("mask union of different sizes".into()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

/// One image with its class label and optional ground-truth map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// 1×c×h×w, values in [0, 1].
    pub image: Raster,
    pub label: Label,
    pub map: Option<Mask>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Raster, label: Label, map: Option<Mask>) -> Result<Self> {
        let id = id.into();
        let s = image.shape();
        if s.n != 1 {
            return Err(Error::Shape(format!("sample {id}: image must hold one sample, got {s}")));
        }
        if let Some(m) = &map {
            if (m.height, m.width) != (s.h, s.w) {
                return Err(Error::Shape(format!(
                    "sample {id}: map {}x{} does not match image {}x{}",
                    m.height, m.width, s.h, s.w
                )));
            }
            if label == Label::Normal && m.any() {
                return Err(Error::InvalidArgument(format!("sample {id}: normal sample with non-empty map")));
            }
        }
        Ok(Sample { id, image, label, map })
    }
}

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and population standard deviation over all pixels of `images`.
    pub fn from_samples<'a>(images: impl IntoIterator<Item = &'a Raster>) -> Result<Self> {
        let mut sums: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut channels = None;
        for img in images {
            let s = img.shape();
            match channels {
                None => {
                    channels = Some(s.c);
                    sums = vec![0.0; s.c];
                    sq = vec![0.0; s.c];
                    counts = vec![0.0; s.c];
                }
                Some(c) if c != s.c => {
                    return Err(Error::Shape(format!("mixed channel counts {c} and {}", s.c)));
                }
                _ => {}
            }
            for (i, plane) in img.data().chunks_exact(s.plane()).enumerate() {
                let c = i % s.c;
                sums[c] += plane.iter().sum::<f64>();
                sq[c] += plane.iter().map(|v| v * v).sum::<f64>();
                counts[c] += plane.len() as f64;
            }
        }
        if channels.is_none() {
            return Err(Error::InvalidArgument("no normal training images for channel statistics".into()));
        }
        let mean: Vec<f64> = sums.iter().zip(&counts).map(|(s, n)| s / n).collect();
        let std = sq
            .iter()
            .zip(&counts)
            .zip(&mean)
            .map(|((q, n), m)| (q / n - m * m).max(0.0).sqrt())
            .collect();
        Ok(ChannelStats { mean, std })
    }
}

/// Class counts per split, echoed in reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train_normal: usize,
    pub train_anomalous: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
}

impl std::fmt::Display for SplitSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "train: {} normal / {} anomalous; test: {} normal / {} anomalous",
            self.train_normal, self.train_anomalous, self.test_normal, self.test_anomalous
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Computed from the normal training images.
    pub stats: ChannelStats,
    /// Anomalous samples with neither a mask nor a labelme file.
    pub missing_ground_truth: Vec<String>,
}

impl DatasetSplit {
    /// Sorts both splits by id, checks disjointness and computes statistics.
    pub fn new(mut train: Vec<Sample>, mut test: Vec<Sample>, missing_ground_truth: Vec<String>) -> Result<Self> {
        train.sort_by(|a, b| a.id.cmp(&b.id));
        test.sort_by(|a, b| a.id.cmp(&b.id));
        let train_ids: std::collections::HashSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
        if train_ids.len() != train.len() {
            return Err(Error::InvalidArgument("duplicate ids in training split".into()));
        }
        if let Some(dup) = test.iter().find(|s| train_ids.contains(s.id.as_str())) {
            return Err(Error::InvalidArgument(format!("sample id {} is in both train and test", dup.id)));
        }
        let stats = ChannelStats::from_samples(train.iter().filter(|s| s.label == Label::Normal).map(|s| &s.image))?;
        Ok(DatasetSplit {
            train,
            test,
            stats,
            missing_ground_truth,
        })
    }

    pub fn summary(&self) -> SplitSummary {
        let count = |v: &[Sample], l: Label| v.iter().filter(|s| s.label == l).count();
        SplitSummary {
            train_normal: count(&self.train, Label::Normal),
            train_anomalous: count(&self.train, Label::Anomalous),
            test_normal: count(&self.test, Label::Normal),
            test_anomalous: count(&self.test, Label::Anomalous),
        }
    }

    /// Copy keeping only the first `k` training anomalies (in id order).
    pub fn with_train_anomalies(&self, k: usize) -> DatasetSplit {
        let mut seen = 0;
        let train = self
            .train
            .iter()
            .filter(|s| {
                if s.label == Label::Anomalous {
                    seen += 1;
                    seen <= k
                } else {
                    true
                }
            })
            .cloned()
            .collect();
        DatasetSplit {
            train,
            test: self.test.clone(),
            stats: self.stats.clone(),
            missing_ground_truth: self.missing_ground_truth.clone(),
        }
    }
}
