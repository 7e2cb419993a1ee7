use serde::{Deserialize, Serialize};

use super::{LayerSpec, NetworkConfig};
use crate::error::{Error, Result};

/// Geometry linking a feature-map cell to the input pixels it sees.
///
/// The centre of cell `(i, j)` lies at input pixel coordinates
/// `(offset + i·stride, offset + j·stride)`, measured in pixel indices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub stride: usize,
    pub offset: f64,
    pub size: usize,
}

impl ReceptiveField {
    pub fn centre(&self, cell: usize) -> f64 {
        self.offset + (cell * self.stride) as f64
    }

    /// Default Gaussian upsampling width.
    pub fn default_sigma(&self) -> f64 {
        self.size as f64 / 4.0
    }
}

/// Receptive field of the final layer, accumulated layer by layer.
pub fn receptive_field(config: &NetworkConfig) -> Result<ReceptiveField> {
    let mut rf = ReceptiveField {
        stride: 1,
        offset: 0.0,
        size: 1,
    };
    for (i, layer) in config.layers.iter().enumerate() {
        let (k, s, p) = match *layer {
            LayerSpec::Conv {
                kernel, stride, padding, ..
            } => (kernel, stride, padding),
            LayerSpec::MaxPool2 => (2, 2, 0),
            LayerSpec::BatchNorm | LayerSpec::LeakyRelu { .. } => continue,
            LayerSpec::Upsample2 => {
                return Err(Error::Config {
                    layer: i,
                    reason: "receptive field undefined across upsampling".into(),
                })
            }
        };
        rf.size += (k - 1) * rf.stride;
        rf.offset += ((k as f64 - 1.0) / 2.0 - p as f64) * rf.stride as f64;
        rf.stride *= s;
    }
    Ok(rf)
}
