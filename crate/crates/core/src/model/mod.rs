//! Sequential fully convolutional networks, receptive-field geometry,
//! checkpoints and the convolutional autoencoder baseline.

mod autoencoder;
mod checkpoint;
mod config;
mod receptive;

pub use autoencoder::{build_autoencoder, AeConfig, Autoencoder};
pub use checkpoint::{read_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{InputShape, LayerSpec, NetworkConfig, DEFAULT_SLOPE};
pub use receptive::{receptive_field, ReceptiveField};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm_eval, batchnorm_grad, batchnorm_train, conv2d, conv2d_backward, leaky_relu, leaky_relu_grad, maxpool2,
    maxpool2_grad, upsample2, upsample2_grad, Argmax, BatchNorm2d, BnCache, Conv2d, Mode, Raster, Shape,
};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    LeakyRelu(f64),
    MaxPool2,
    Upsample2,
}

/// What a parameter tensor is, for optimizer rules such as weight-decay exclusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnScale,
    BnShift,
    /// Bias of the final one-class layer.
    Centre,
}

/// Mutable view of one parameter tensor and its gradient buffer.
pub struct ParamSlot<'a> {
    pub layer: usize,
    pub role: ParamRole,
    pub frozen: bool,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

#[derive(Clone, Debug)]
enum LayerCache {
    None,
    Bn(BnCache),
    Pool(Argmax),
}

/// Per-layer inputs and auxiliary values from a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Raster>,
    aux: Vec<LayerCache>,
}

impl ForwardCache {
    /// Input raster of every layer, in order.
    pub fn layer_inputs(&self) -> &[Raster] {
        &self.inputs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<Layer>,
    has_centre: bool,
}

impl Network {
    /// Builds a one-class network; the final layer's bias is the centre.
    pub fn build(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        Self::instantiate(config, true)
    }

    /// Builds any valid sequential stack (used for autoencoder halves).
    pub fn build_plain(config: NetworkConfig) -> Result<Self> {
        config.layer_shapes()?;
        Self::instantiate(config, false)
    }

    fn instantiate(config: NetworkConfig, has_centre: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut channels = config.input.channels;
        let mut layers = Vec::with_capacity(config.layers.len());
        for spec in &config.layers {
            let layer = match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    bias,
                } => {
                    // Kaiming-uniform over fan-in.
                    let fan_in = (channels * kernel * kernel) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    let shape = Shape::new(out_channels, channels, kernel, kernel);
                    let weights = (0..shape.len()).map(|_| rng.gen_range(-bound..bound)).collect();
                    channels = out_channels;
                    Layer::Conv(Conv2d::new(
                        Raster::from_vec(shape, weights)?,
                        bias.then(|| vec![0.0; out_channels]),
                        stride,
                        padding,
                    )?)
                }
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm2d::new(channels)),
                LayerSpec::LeakyRelu { slope } => Layer::LeakyRelu(slope),
                LayerSpec::MaxPool2 => Layer::MaxPool2,
                LayerSpec::Upsample2 => Layer::Upsample2,
            };
            layers.push(layer);
        }
        Ok(Network {
            config,
            layers,
            has_centre,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut NetworkConfig {
        &mut self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn has_centre(&self) -> bool {
        self.has_centre
    }

    pub fn receptive_field(&self) -> Result<ReceptiveField> {
        receptive_field(&self.config)
    }

    /// Hypersphere centre: the bias of the final layer.
    pub fn centre(&self) -> Option<f64> {
        if !self.has_centre {
            return None;
        }
        match self.layers.last() {
            Some(Layer::Conv(c)) => c.bias.as_ref().map(|b| b[0]),
            _ => None,
        }
    }

    pub fn output_shape(&self, n: usize) -> Result<Shape> {
        let s = *self.config.layer_shapes()?.last().unwrap_or(&self.config.input.batch(1));
        Ok(Shape { n, ..s })
    }

    fn check_input(&self, batch: &Raster) -> Result<()> {
        let s = batch.shape();
        let want = self.config.input.batch(s.n);
        if s != want || s.n == 0 {
            return Err(Error::Shape(format!("network expects batches of {want}, got {s}")));
        }
        Ok(())
    }

    /// Forward pass that records what backward needs. Train mode uses batch
    /// statistics and updates the batchnorm running estimates.
    pub fn forward(&mut self, batch: &Raster, mode: Mode) -> Result<(Raster, ForwardCache)> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &mut self.layers {
            let (y, cache) = match layer {
                Layer::Conv(c) => (conv2d(&x, c)?, LayerCache::None),
                Layer::BatchNorm(bn) => match mode {
                    Mode::Train => {
                        let (y, cache) = batchnorm_train(&x, bn)?;
                        (y, LayerCache::Bn(cache))
                    }
                    Mode::Eval => (batchnorm_eval(&x, bn)?, LayerCache::None),
                },
                Layer::LeakyRelu(slope) => (leaky_relu(&x, *slope)?, LayerCache::None),
                Layer::MaxPool2 => {
                    let (y, arg) = maxpool2(&x)?;
                    (y, LayerCache::Pool(arg))
                }
                Layer::Upsample2 => (upsample2(&x), LayerCache::None),
            };
            inputs.push(std::mem::replace(&mut x, y));
            aux.push(cache);
        }
        Ok((x, ForwardCache { inputs, aux }))
    }

    /// Eval-mode forward without caching; the network is not mutated.
    pub fn predict(&self, batch: &Raster) -> Result<Raster> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(c) => conv2d(&x, c)?,
                Layer::BatchNorm(bn) => batchnorm_eval(&x, bn)?,
                Layer::LeakyRelu(slope) => leaky_relu(&x, *slope)?,
                Layer::MaxPool2 => maxpool2(&x)?.0,
                Layer::Upsample2 => upsample2(&x),
            };
        }
        Ok(x)
    }

    /// Accumulates gradients of `⟨grad_out, output⟩` into the parameter
    /// gradient buffers and returns the gradient with respect to the input.
    /// The cache must come from a train-mode forward of this network.
    pub fn backward(&mut self, cache: &ForwardCache, grad_out: &Raster) -> Result<Raster> {
        self.backward_impl(cache, grad_out, true).map(|g| g.expect("input gradient requested"))
    }

    /// Like [`Network::backward`] but skips the input gradient of the first layer.
    pub fn accumulate_grads(&mut self, cache: &ForwardCache, grad_out: &Raster) -> Result<()> {
        self.backward_impl(cache, grad_out, false).map(|_| ())
    }

    fn backward_impl(&mut self, cache: &ForwardCache, grad_out: &Raster, want_input: bool) -> Result<Option<Raster>> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "forward cache has {} layers, network has {}",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let x = &cache.inputs[i];
            let need_input = want_input || i > 0;
            g = match (layer, &cache.aux[i]) {
                (Layer::Conv(c), _) => {
                    let mut gw = std::mem::replace(&mut c.grad_weight, Raster::zeros(Shape::new(0, 0, 0, 0)));
                    let mut gb = c.grad_bias.take().unwrap_or_else(|| vec![0.0; c.out_channels()]);
                    let res = conv2d_backward(x, c, &g, &mut gw, &mut gb, need_input);
                    c.grad_weight = gw;
                    if c.bias.is_some() {
                        c.grad_bias = Some(gb);
                    }
                    match res? {
                        Some(gi) => gi,
                        None => return Ok(None),
                    }
                }
                (Layer::BatchNorm(bn), LayerCache::Bn(bc)) => {
                    let grads = batchnorm_grad(bc, bn, &g)?;
                    for (a, b) in bn.grad_gamma.iter_mut().zip(&grads.gamma) {
                        *a += b;
                    }
                    for (a, b) in bn.grad_beta.iter_mut().zip(&grads.beta) {
                        *a += b;
                    }
                    grads.input
                }
                (Layer::BatchNorm(_), _) => {
                    return Err(Error::InvalidArgument("backward needs a train-mode forward cache".into()))
                }
                (Layer::LeakyRelu(slope), _) => leaky_relu_grad(x, *slope, &g)?,
                (Layer::MaxPool2, LayerCache::Pool(arg)) => maxpool2_grad(arg, &g)?,
                (Layer::MaxPool2, _) => return Err(Error::InvalidArgument("stale forward cache for maxpool".into())),
                (Layer::Upsample2, _) => upsample2_grad(&g)?,
            };
        }
        Ok(Some(g))
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => c.zero_grad(),
                Layer::BatchNorm(bn) => bn.zero_grad(),
                _ => {}
            }
        }
    }

    /// Learnable parameter tensors in declaration order.
    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_>> {
        let last = self.layers.len().saturating_sub(1);
        let has_centre = self.has_centre;
        let frozen_centre = self.config.freeze_centre;
        let mut slots = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    slots.push(ParamSlot {
                        layer: i,
                        role: ParamRole::ConvWeight,
                        frozen: false,
                        value: c.weight.data_mut(),
                        grad: c.grad_weight.data_mut(),
                    });
                    if let (Some(b), Some(gb)) = (c.bias.as_mut(), c.grad_bias.as_mut()) {
                        let centre = has_centre && i == last;
                        slots.push(ParamSlot {
                            layer: i,
                            role: if centre { ParamRole::Centre } else { ParamRole::ConvBias },
                            frozen: centre && frozen_centre,
                            value: b,
                            grad: gb,
                        });
                    }
                }
                Layer::BatchNorm(bn) => {
                    slots.push(ParamSlot {
                        layer: i,
                        role: ParamRole::BnScale,
                        frozen: false,
                        value: &mut bn.gamma,
                        grad: &mut bn.grad_gamma,
                    });
                    slots.push(ParamSlot {
                        layer: i,
                        role: ParamRole::BnShift,
                        frozen: false,
                        value: &mut bn.beta,
                        grad: &mut bn.grad_beta,
                    });
                }
                _ => {}
            }
        }
        slots
    }

    /// All learnable parameters flattened in declaration order.
    pub fn param_vector(&mut self) -> Vec<f64> {
        self.params_mut().into_iter().flat_map(|s| s.value.to_vec()).collect()
    }

    pub fn grad_vector(&mut self) -> Vec<f64> {
        self.params_mut().into_iter().flat_map(|s| s.grad.to_vec()).collect()
    }

    pub fn set_param_vector(&mut self, values: &[f64]) -> Result<()> {
        let mut slots = self.params_mut();
        let total: usize = slots.iter().map(|s| s.value.len()).sum();
        if total != values.len() {
            return Err(Error::Shape(format!("network has {total} parameters, got {}", values.len())));
        }
        let mut offset = 0;
        for s in &mut slots {
            let n = s.value.len();
            s.value.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn num_params(&mut self) -> usize {
        self.params_mut().iter().map(|s| s.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, random_raster, test_rng};

    fn small_config() -> NetworkConfig {
        NetworkConfig::backbone(InputShape::new(2, 8, 8), [3, 4, 4]).with_seed(5)
    }

    #[test]
    fn desk_forward_shape_and_paper_scale() {
        let mut net = Network::build(NetworkConfig::desk()).unwrap();
        let x = Raster::zeros(Shape::new(2, 3, 64, 64));
        let (z, _) = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(z.shape(), Shape::new(2, 1, 16, 16));
        let mut cfg = NetworkConfig::desk();
        cfg.input = InputShape::new(3, 224, 224);
        let net = Network::build(cfg).unwrap();
        assert_eq!(net.output_shape(1).unwrap(), Shape::new(1, 1, 56, 56));
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut a = Network::build(NetworkConfig::desk().with_seed(3)).unwrap();
        let mut b = Network::build(NetworkConfig::desk().with_seed(3)).unwrap();
        let mut c = Network::build(NetworkConfig::desk().with_seed(4)).unwrap();
        assert_eq!(a.param_vector(), b.param_vector());
        assert_ne!(a.param_vector(), c.param_vector());
        assert_eq!(a.centre(), Some(0.0));
    }

    #[test]
    fn zero_final_weights_give_centre_everywhere() {
        let mut net = Network::build(small_config()).unwrap();
        if let Some(Layer::Conv(c)) = net.layers_mut().last_mut() {
            c.weight.data_mut().fill(0.0);
            c.bias = Some(vec![0.75]);
        }
        let mut rng = test_rng(1);
        let x = random_raster(&mut rng, Shape::new(3, 2, 8, 8));
        let (z, _) = net.forward(&x, Mode::Train).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut net = Network::build(small_config()).unwrap();
        let mut rng = test_rng(2);
        let x = random_raster(&mut rng, Shape::new(2, 2, 8, 8));
        net.forward(&x, Mode::Train).unwrap();
        let a = net.predict(&x).unwrap();
        let (b, _) = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, net.predict(&x).unwrap());
    }

    #[test]
    fn zero_grad_out_and_centre_gradient() {
        let mut net = Network::build(small_config()).unwrap();
        let mut rng = test_rng(3);
        let x = random_raster(&mut rng, Shape::new(2, 2, 8, 8));
        let (z, cache) = net.forward(&x, Mode::Train).unwrap();
        net.backward(&cache, &Raster::zeros(z.shape())).unwrap();
        assert!(net.grad_vector().iter().all(|&g| g == 0.0));

        let gz = random_raster(&mut rng, z.shape());
        net.backward(&cache, &gz).unwrap();
        let centre_grad = net
            .params_mut()
            .into_iter()
            .find(|s| s.role == ParamRole::Centre)
            .map(|s| s.grad[0])
            .unwrap();
        assert!((centre_grad - gz.sum()).abs() < 1e-12);
    }

    #[test]
    fn eval_cache_rejected_by_backward() {
        let mut net = Network::build(small_config()).unwrap();
        let x = Raster::zeros(Shape::new(2, 2, 8, 8));
        let (z, cache) = net.forward(&x, Mode::Eval).unwrap();
        assert!(net.backward(&cache, &z).is_err());
        let other = Network::build(NetworkConfig::desk()).unwrap();
        let (_, foreign) = Network::build(small_config()).unwrap().forward(&x, Mode::Train).unwrap();
        let mut other = other;
        assert!(other.backward(&foreign, &Raster::zeros(Shape::new(2, 1, 16, 16))).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = test_rng(4);
        let mut net = Network::build(small_config()).unwrap();
        let x = random_raster(&mut rng, Shape::new(3, 2, 8, 8));
        let (z, cache) = net.forward(&x, Mode::Train).unwrap();
        let gz = random_raster(&mut rng, z.shape());
        net.zero_grad();
        net.backward(&cache, &gz).unwrap();
        let analytic = net.grad_vector();
        let params = net.param_vector();
        let probe = net.clone();
        let err = grad_check(
            |p| {
                let mut n = probe.clone();
                n.set_param_vector(p).unwrap();
                n.forward(&x, Mode::Train).unwrap().0.dot(&gz).unwrap()
            },
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn wrong_batch_shape_rejected() {
        let mut net = Network::build(small_config()).unwrap();
        assert!(net.forward(&Raster::zeros(Shape::new(2, 3, 8, 8)), Mode::Train).is_err());
        assert!(net.predict(&Raster::zeros(Shape::new(1, 2, 6, 8))).is_err());
    }
}
