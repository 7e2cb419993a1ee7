//! Mini-batch SGD over the one-class objectives and the autoencoder baseline.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, preprocess_map, ChannelStats, DatasetSplit, Label, Sample};
use crate::error::{Error, Result};
use crate::heatmap::{huber_map, Upsampler};
use crate::losses::{
    fcdd_focal_loss, fcdd_ss_loss_modified, fcdd_ss_loss_original, fcdd_unsup_loss, pseudo_huber_grad, LossOutput,
    PixelLabels,
};
use crate::model::{build_autoencoder, write_checkpoint_file, AeConfig, Autoencoder, InputShape, Network, NetworkConfig, ParamRole};
use crate::tensor::{Mode, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    UnsupNoAnom,
    UnsupWithAnom,
    SsOriginal,
    SsModified,
    SsFocal,
}

impl TrainMode {
    pub fn is_semi_supervised(self) -> bool {
        matches!(self, TrainMode::SsOriginal | TrainMode::SsModified | TrainMode::SsFocal)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::UnsupNoAnom => "unsup_no_anom",
            TrainMode::UnsupWithAnom => "unsup_with_anom",
            TrainMode::SsOriginal => "ss_original",
            TrainMode::SsModified => "ss_modified",
            TrainMode::SsFocal => "ss_focal",
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What to do with a batch whose loss is not finite.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipPolicy {
    #[default]
    Error,
    SkipBatch,
}

fn default_gamma() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-6
}
fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    128
}
fn default_instances() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Focusing parameter, used by `ss_focal` only.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_instances")]
    pub n_instances: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub skip_policy: SkipPolicy,
    /// When set, instance k is saved as `instance_k.occm` in this directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Paper-scale defaults: batch 128, 200 epochs, five instances.
    pub fn new(mode: TrainMode) -> Self {
        TrainConfig {
            mode,
            gamma: default_gamma(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            n_instances: default_instances(),
            base_seed: 0,
            skip_policy: SkipPolicy::Error,
            checkpoint_dir: None,
        }
    }

    /// Desk-scale preset: batch 32, 60 epochs.
    pub fn desk(mode: TrainMode) -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            ..TrainConfig::new(mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch size must be >= 2 (batchnorm needs two samples)".into());
        }
        if self.n_instances == 0 {
            return bad("n_instances must be >= 1".into());
        }
        Ok(())
    }
}

/// One SGD update of a single tensor:
/// `v ← momentum·v + grad + weight_decay·param`, `param ← param − lr·v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "sgd_step: {} params, {} grads, {} velocities",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over every unfrozen parameter of a set of networks. Weight
/// decay skips batchnorm scale/shift and the hypersphere centre.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update using the gradients accumulated in `nets`. Nothing
    /// is changed if any gradient is non-finite.
    pub fn step(&mut self, nets: &mut [&mut Network]) -> Result<()> {
        let mut slots: Vec<_> = nets.iter_mut().flat_map(|n| n.params_mut()).collect();
        if slots.iter().any(|s| s.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFinite("gradient".into()));
        }
        if self.velocity.is_empty() {
            self.velocity = slots.iter().map(|s| vec![0.0; s.value.len()]).collect();
        }
        if self.velocity.len() != slots.len() {
            return Err(Error::Shape("optimizer state does not match the networks".into()));
        }
        for (slot, v) in slots.iter_mut().zip(&mut self.velocity) {
            if slot.frozen {
                continue;
            }
            let decay = match slot.role {
                ParamRole::BnScale | ParamRole::BnShift | ParamRole::Centre => 0.0,
                ParamRole::ConvWeight | ParamRole::ConvBias => self.weight_decay,
            };
            sgd_step(slot.value, slot.grad, v, self.lr, self.momentum, decay)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub instance: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub nonfinite_batches: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainLog {
    pub fn mean_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut *out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn append_jsonl(logs: &[TrainLog], path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for log in logs {
            log.write_jsonl(&mut buf).map_err(|e| Error::io(path, e))?;
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Channel statistics adapted to the model's channel count.
pub fn stats_for(stats: &ChannelStats, input: InputShape) -> Result<ChannelStats> {
    match (stats.mean.len(), input.channels) {
        (a, b) if a == b => Ok(stats.clone()),
        (1, c) => Ok(ChannelStats {
            mean: vec![stats.mean[0]; c],
            std: vec![stats.std[0]; c],
        }),
        (a, b) => Err(Error::Shape(format!("dataset has {a} channels, model expects {b}"))),
    }
}

/// Stacked, preprocessed images of `samples`.
pub fn prepare_images(samples: &[&Sample], stats: &ChannelStats, input: InputShape) -> Result<Raster> {
    let images = samples
        .iter()
        .map(|s| preprocess(&s.image, stats, input))
        .collect::<Result<Vec<_>>>()?;
    Raster::stack(&images)
}

/// Training tensors for one mode.
struct Stream {
    ids: Vec<String>,
    images: Raster,
    labels: Vec<u8>,
    maps: Option<Raster>,
}

impl Stream {
    fn new(split: &DatasetSplit, mode: TrainMode, stats: &ChannelStats, input: InputShape) -> Result<Self> {
        let samples: Vec<&Sample> = split
            .train
            .iter()
            .filter(|s| mode != TrainMode::UnsupNoAnom || s.label == Label::Normal)
            .collect();
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{mode} needs at least two training samples, found {}",
                samples.len()
            )));
        }
        let maps = if mode.is_semi_supervised() {
            let missing: Vec<String> = samples
                .iter()
                .filter(|s| s.label == Label::Anomalous && s.map.is_none())
                .map(|s| s.id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(Error::MissingGroundTruth(missing));
            }
            let masks = samples
                .iter()
                .map(|s| preprocess_map(s, input).map(|m| m.to_raster()))
                .collect::<Result<Vec<_>>>()?;
            Some(Raster::stack(&masks)?)
        } else {
            None
        };
        Ok(Stream {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: prepare_images(&samples, stats, input)?,
            labels: samples.iter().map(|s| s.label.as_u8()).collect(),
            maps,
        })
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Shuffled batches of at least two samples: a trailing singleton joins the
/// previous batch.
pub fn epoch_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Loss of a batch and its gradient with respect to the network output z.
pub fn batch_loss(
    mode: TrainMode,
    gamma: f64,
    z: &Raster,
    labels: &[u8],
    maps: Option<&PixelLabels>,
    up: &Upsampler,
) -> Result<(LossOutput, Raster)> {
    if !mode.is_semi_supervised() {
        let out = fcdd_unsup_loss(z, labels)?;
        let g = out.grad.clone();
        return Ok((out, g));
    }
    let maps = maps.ok_or_else(|| Error::InvalidArgument(format!("{mode} needs ground-truth maps")))?;
    let low = huber_map(z)?;
    let full = up.apply(&low)?;
    let out = match mode {
        TrainMode::SsOriginal => fcdd_ss_loss_original(&full, maps)?,
        TrainMode::SsModified => fcdd_ss_loss_modified(&full, maps)?,
        _ => fcdd_focal_loss(&full, maps, gamma)?,
    };
    let g_low = up.adjoint(&out.grad)?;
    let g = pseudo_huber_grad(z, &g_low)?;
    Ok((out, g))
}

/// Progress callback receiving each finished epoch.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Trains `cfg.n_instances` networks; instance k is seeded with
/// `base_seed + k` for both initialization and shuffling.
pub fn train(split: &DatasetSplit, netcfg: &NetworkConfig, cfg: &TrainConfig) -> Result<Vec<(Network, TrainLog)>> {
    train_with(split, netcfg, cfg, &mut |_| {})
}

pub fn train_with(
    split: &DatasetSplit,
    netcfg: &NetworkConfig,
    cfg: &TrainConfig,
    hook: EpochHook<'_>,
) -> Result<Vec<(Network, TrainLog)>> {
    cfg.validate()?;
    netcfg.validate()?;
    let stats = stats_for(&split.stats, netcfg.input)?;
    let stream = Stream::new(split, cfg.mode, &stats, netcfg.input)?;
    let mut out = Vec::with_capacity(cfg.n_instances);
    for k in 0..cfg.n_instances {
        let seed = cfg.base_seed.wrapping_add(k as u64);
        let mut config = netcfg.clone().with_seed(seed);
        config.normalization = Some(stats.clone());
        let mut net = Network::build(config)?;
        let log = train_instance(&mut net, &stream, cfg, k, seed, hook)?;
        out.push((net, log));
    }
    Ok(out)
}

fn train_instance(
    net: &mut Network,
    stream: &Stream,
    cfg: &TrainConfig,
    instance: usize,
    seed: u64,
    hook: EpochHook<'_>,
) -> Result<TrainLog> {
    let start = Instant::now();
    let up = Upsampler::for_network(net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..stream.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let (mut total, mut counted, mut skipped) = (0.0, 0usize, 0usize);
        for (b, idx) in epoch_batches(&order, cfg.batch_size).iter().enumerate() {
            let images = stream.images.gather(idx);
            let labels: Vec<u8> = idx.iter().map(|&i| stream.labels[i]).collect();
            let maps = stream.maps.as_ref().map(|m| PixelLabels::new(m.gather(idx))).transpose()?;
            net.zero_grad();
            let (z, cache) = net.forward(&images, Mode::Train)?;
            let (loss, gz) = batch_loss(cfg.mode, cfg.gamma, &z, &labels, maps.as_ref(), &up)?;
            let bad: Vec<usize> = if loss.is_finite() && gz.all_finite() {
                Vec::new()
            } else if loss.nonfinite.is_empty() {
                (0..idx.len()).collect()
            } else {
                loss.nonfinite.clone()
            };
            if !bad.is_empty() {
                match cfg.skip_policy {
                    SkipPolicy::Error => {
                        return Err(Error::Pathology {
                            instance,
                            epoch,
                            batch: b,
                            samples: bad.iter().map(|&i| stream.ids[idx[i]].clone()).collect(),
                        })
                    }
                    SkipPolicy::SkipBatch => {
                        skipped += 1;
                        continue;
                    }
                }
            }
            net.accumulate_grads(&cache, &gz)?;
            sgd.step(&mut [&mut *net])?;
            total += loss.value;
            counted += 1;
        }
        let record = EpochRecord {
            instance,
            epoch,
            mean_loss: if counted > 0 { total / counted as f64 } else { f64::NAN },
            nonfinite_batches: skipped,
            seconds: t0.elapsed().as_secs_f64(),
        };
        hook(&record);
        log.epochs.push(record);
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("instance_{instance}.occm"));
        write_checkpoint_file(net, &path)?;
        log.checkpoint = Some(path);
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Trains autoencoders on the normal training samples only.
pub fn train_autoencoder(
    split: &DatasetSplit,
    aecfg: &AeConfig,
    cfg: &TrainConfig,
) -> Result<Vec<(Autoencoder, TrainLog)>> {
    let normals: Vec<&Sample> = split.train.iter().filter(|s| s.label == Label::Normal).collect();
    let stats = stats_for(&split.stats, aecfg.input)?;
    fit_autoencoders(&normals, &stats, aecfg, cfg, &mut |_| {})
}

/// Lower-level autoencoder training on an explicit sample list, which must
/// not contain anomalies.
pub fn fit_autoencoders(
    samples: &[&Sample],
    stats: &ChannelStats,
    aecfg: &AeConfig,
    cfg: &TrainConfig,
    hook: EpochHook<'_>,
) -> Result<Vec<(Autoencoder, TrainLog)>> {
    cfg.validate()?;
    if let Some(s) = samples.iter().find(|s| s.label == Label::Anomalous) {
        return Err(Error::InvalidArgument(format!(
            "autoencoder training is normal-only, got anomalous sample {}",
            s.id
        )));
    }
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("autoencoder needs at least two normal samples".into()));
    }
    let images = prepare_images(samples, stats, aecfg.input)?;
    let mut out = Vec::with_capacity(cfg.n_instances);
    for k in 0..cfg.n_instances {
        let seed = cfg.base_seed.wrapping_add(k as u64);
        let mut ae = build_autoencoder(&AeConfig { seed, ..aecfg.clone() })?;
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut log = TrainLog::default();
        for epoch in 0..cfg.epochs {
            let t0 = Instant::now();
            order.shuffle(&mut rng);
            let (mut total, mut counted) = (0.0, 0usize);
            for idx in epoch_batches(&order, cfg.batch_size) {
                let x = images.gather(&idx);
                ae.zero_grad();
                let (recon, cache) = ae.forward_train(&x)?;
                let scale = 2.0 / x.len() as f64;
                let mut diff = recon;
                diff.axpy(-1.0, &x)?;
                let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / x.len() as f64;
                ae.backward(&cache, &diff.scale(scale))?;
                sgd.step(&mut [&mut ae.encoder, &mut ae.decoder])?;
                total += loss;
                counted += 1;
            }
            let record = EpochRecord {
                instance: k,
                epoch,
                mean_loss: total / counted as f64,
                nonfinite_batches: 0,
                seconds: t0.elapsed().as_secs_f64(),
            };
            hook(&record);
            log.epochs.push(record);
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("ae_instance_{k}.occm"));
            ae.save(&path)?;
            log.checkpoint = Some(path);
        }
        log.wall_seconds = start.elapsed().as_secs_f64();
        out.push((ae, log));
    }
    Ok(out)
}
