//! Convolutional autoencoder baseline scored by reconstruction error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{read_checkpoint, write_checkpoint};
use super::{ForwardCache, InputShape, LayerSpec, Network, NetworkConfig, DEFAULT_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{Mode, Raster};

fn default_kernel() -> usize {
    3
}

fn default_true() -> bool {
    true
}

fn default_slope() -> f64 {
    DEFAULT_SLOPE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    pub input: InputShape,
    /// Encoder widths; the decoder mirrors them.
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Halve the resolution after every encoder stage (and double it back in the decoder).
    #[serde(default = "default_true")]
    pub downsample: bool,
    #[serde(default = "default_slope")]
    pub slope: f64,
    #[serde(default)]
    pub seed: u64,
}

impl AeConfig {
    pub fn desk(input: InputShape) -> Self {
        AeConfig {
            input,
            channels: vec![8, 16],
            kernel: 3,
            downsample: true,
            slope: DEFAULT_SLOPE,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub encoder: Network,
    pub decoder: Network,
}

/// Builds encoder and decoder; the decoder upsamples with nearest-neighbour
/// followed by convolution.
pub fn build_autoencoder(config: &AeConfig) -> Result<Autoencoder> {
    if config.channels.is_empty() {
        return Err(Error::InvalidArgument("autoencoder needs at least one stage".into()));
    }
    if config.kernel.is_multiple_of(2) {
        return Err(Error::InvalidArgument("autoencoder kernel must be odd".into()));
    }
    let pad = config.kernel / 2;
    let act = LayerSpec::LeakyRelu { slope: config.slope };
    let mut enc_layers = Vec::new();
    for &ch in &config.channels {
        enc_layers.push(LayerSpec::conv(ch, config.kernel, pad, true));
        enc_layers.push(act.clone());
        if config.downsample {
            enc_layers.push(LayerSpec::MaxPool2);
        }
    }
    let encoder_cfg = NetworkConfig {
        input: config.input,
        layers: enc_layers,
        seed: config.seed,
        freeze_centre: false,
        upsample_sigma: None,
        normalization: None,
    };
    let code = *encoder_cfg.layer_shapes()?.last().expect("non-empty");

    let mut dec_layers = Vec::new();
    for i in (0..config.channels.len()).rev() {
        if config.downsample {
            dec_layers.push(LayerSpec::Upsample2);
        }
        let target = if i == 0 { config.input.channels } else { config.channels[i - 1] };
        dec_layers.push(LayerSpec::conv(target, config.kernel, pad, true));
        if i > 0 {
            dec_layers.push(act.clone());
        }
    }
    let decoder_cfg = NetworkConfig {
        input: InputShape::new(code.c, code.h, code.w),
        layers: dec_layers,
        seed: config.seed.wrapping_add(0x9e37_79b9),
        freeze_centre: false,
        upsample_sigma: None,
        normalization: None,
    };
    let out = *decoder_cfg.layer_shapes()?.last().expect("non-empty");
    if (out.c, out.h, out.w) != (config.input.channels, config.input.height, config.input.width) {
        return Err(Error::Shape(format!(
            "reconstruction {}x{}x{} does not match input {:?}",
            out.c, out.h, out.w, config.input
        )));
    }
    Ok(Autoencoder {
        encoder: Network::build_plain(encoder_cfg)?,
        decoder: Network::build_plain(decoder_cfg)?,
    })
}

pub struct AeCache {
    encoder: ForwardCache,
    decoder: ForwardCache,
}

impl Autoencoder {
    pub fn reconstruct(&self, images: &Raster) -> Result<Raster> {
        self.decoder.predict(&self.encoder.predict(images)?)
    }

    /// Mean squared reconstruction error of every sample.
    pub fn score_batch(&self, images: &Raster) -> Result<Vec<f64>> {
        let recon = self.reconstruct(images)?;
        recon.expect_shape(images.shape(), "autoencoder reconstruction")?;
        let len = images.shape().sample_len() as f64;
        Ok((0..images.shape().n)
            .map(|n| {
                images
                    .sample(n)
                    .iter()
                    .zip(recon.sample(n))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / len
            })
            .collect())
    }

    /// Reconstruction error of a single image; higher is more anomalous.
    pub fn ae_score(&self, image: &Raster) -> Result<f64> {
        if image.shape().n != 1 {
            return Err(Error::Shape(format!("ae_score takes one image, got {}", image.shape())));
        }
        Ok(self.score_batch(image)?[0])
    }

    pub fn forward_train(&mut self, images: &Raster) -> Result<(Raster, AeCache)> {
        let (code, encoder) = self.encoder.forward(images, Mode::Train)?;
        let (recon, decoder) = self.decoder.forward(&code, Mode::Train)?;
        Ok((recon, AeCache { encoder, decoder }))
    }

    pub fn backward(&mut self, cache: &AeCache, grad_recon: &Raster) -> Result<()> {
        let g = self.decoder.backward(&cache.decoder, grad_recon)?;
        self.encoder.accumulate_grads(&cache.encoder, &g)
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.decoder.zero_grad();
    }

    /// Writes encoder and decoder as two consecutive checkpoint records.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_checkpoint(&self.encoder, &mut w)
            .and_then(|_| write_checkpoint(&self.decoder, &mut w))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        Ok(Autoencoder {
            encoder: read_checkpoint(&mut r)?,
            decoder: read_checkpoint(&mut r)?,
        })
    }
}
