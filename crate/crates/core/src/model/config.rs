use serde::{Deserialize, Serialize};

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::tensor::Shape;

/// Input sample geometry `(channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        InputShape { channels, height, width }
    }

    pub const fn batch(&self, n: usize) -> Shape {
        Shape::new(n, self.channels, self.height, self.width)
    }
}

fn default_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    BatchNorm,
    LeakyRelu {
        slope: f64,
    },
    MaxPool2,
    /// Nearest-neighbour ×2; only used by autoencoder decoders.
    Upsample2,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, padding: usize, bias: bool) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride: 1,
            padding,
            bias,
        }
    }
}

/// Sequential network description. For one-class networks the last layer is a
/// single-output convolution whose bias is the hypersphere centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub seed: u64,
    /// Keep the centre (final bias) fixed at its initial value during training.
    #[serde(default)]
    pub freeze_centre: bool,
    /// Gaussian upsampling width; `None` means receptive-field size / 4.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upsample_sigma: Option<f64>,
    /// Input standardization statistics, filled in by the trainer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<ChannelStats>,
}

pub const DEFAULT_SLOPE: f64 = 0.01;

impl NetworkConfig {
    /// conv3×3/BN/LReLU/pool → conv3×3/BN/LReLU/pool → conv3×3/LReLU → conv1×1×1.
    pub fn backbone(input: InputShape, widths: [usize; 3]) -> Self {
        let slope = LayerSpec::LeakyRelu { slope: DEFAULT_SLOPE };
        let layers = vec![
            LayerSpec::conv(widths[0], 3, 1, false),
            LayerSpec::BatchNorm,
            slope.clone(),
            LayerSpec::MaxPool2,
            LayerSpec::conv(widths[1], 3, 1, false),
            LayerSpec::BatchNorm,
            slope.clone(),
            LayerSpec::MaxPool2,
            LayerSpec::conv(widths[2], 3, 1, true),
            slope,
            LayerSpec::conv(1, 1, 0, true),
        ];
        NetworkConfig {
            input,
            layers,
            seed: 0,
            freeze_centre: false,
            upsample_sigma: None,
            normalization: None,
        }
    }

    /// Default 3×64×64 configuration with 16/32/64 channels.
    pub fn desk() -> Self {
        Self::backbone(InputShape::new(3, 64, 64), [16, 32, 64])
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Output shape of every layer for a batch of one, validating the stack.
    pub fn layer_shapes(&self) -> Result<Vec<Shape>> {
        let mut shape = self.input.batch(1);
        if shape.is_empty() {
            return Err(Error::Config {
                layer: 0,
                reason: format!("empty input shape {shape}"),
            });
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |reason: String| Error::Config { layer: i, reason };
            shape = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad("conv needs out_channels, kernel and stride >= 1".into()));
                    }
                    let dim = |s: usize| crate::tensor::conv_output_dim(s, kernel, stride, padding);
                    match (dim(shape.h), dim(shape.w)) {
                        (Some(h), Some(w)) if h > 0 && w > 0 => Shape::new(1, out_channels, h, w),
                        _ => {
                            return Err(bad(format!(
                                "conv k={kernel} s={stride} p={padding} leaves no output for {}x{}",
                                shape.h, shape.w
                            )))
                        }
                    }
                }
                LayerSpec::BatchNorm => shape,
                LayerSpec::LeakyRelu { slope } => {
                    if !(0.0..=1.0).contains(&slope) {
                        return Err(bad(format!("leaky relu slope {slope} outside [0, 1]")));
                    }
                    shape
                }
                LayerSpec::MaxPool2 => {
                    if shape.h < 2 || shape.w < 2 || !shape.h.is_multiple_of(2) || !shape.w.is_multiple_of(2) {
                        return Err(bad(format!("maxpool2 needs even positive dims, got {}x{}", shape.h, shape.w)));
                    }
                    Shape::new(1, shape.c, shape.h / 2, shape.w / 2)
                }
                LayerSpec::Upsample2 => Shape::new(1, shape.c, shape.h * 2, shape.w * 2),
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Validates the one-class network contract and returns the feature-map
    /// shape for a batch of one.
    pub fn validate(&self) -> Result<Shape> {
        let shapes = self.layer_shapes()?;
        let last = self.layers.len().checked_sub(1).ok_or(Error::Config {
            layer: 0,
            reason: "network has no layers".into(),
        })?;
        match self.layers[last] {
            LayerSpec::Conv {
                out_channels: 1,
                bias: true,
                ..
            } => {}
            _ => {
                return Err(Error::Config {
                    layer: last,
                    reason: "final layer must be a 1-channel convolution with bias (the centre)".into(),
                })
            }
        }
        if let Some(i) = self.layers.iter().position(|l| matches!(l, LayerSpec::Upsample2)) {
            return Err(Error::Config {
                layer: i,
                reason: "upsampling layers are not allowed in one-class networks".into(),
            });
        }
        if let Some(sigma) = self.upsample_sigma {
            if !(sigma > 0.0) {
                return Err(Error::InvalidArgument(format!("upsample sigma must be > 0, got {sigma}")));
            }
        }
        Ok(shapes[last])
    }

    /// Canonical JSON text used in checkpoints.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("network config serializes")
    }
}
