//! Finite-difference gradient suite over every layer, every loss and the
//! composed network-plus-upsampling objective. Composed checks cover the
//! parameter gradients; input gradients are covered layer by layer.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::heatmap::Upsampler;
use crate::losses::{
    bce_loss, fcdd_focal_loss, fcdd_ss_loss_modified, fcdd_ss_loss_original, fcdd_unsup_loss, hsc_centre_grad,
    hsc_loss, pseudo_huber, pseudo_huber_grad, PixelLabels,
};
use crate::model::{InputShape, Layer, LayerSpec, Network, NetworkConfig, ReceptiveField};
use crate::tensor::gradcheck::{grad_check, random_raster, test_rng};
use crate::tensor::{
    batchnorm_grad, batchnorm_train, conv2d, conv2d_grad, leaky_relu, leaky_relu_grad, maxpool2, maxpool2_grad,
    upsample2, upsample2_grad, BatchNorm2d, Conv2d, Mode, Raster, Shape,
};
use crate::trainer::{batch_loss, TrainMode};

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Instances with a LeakyReLU input or a maxpool top-two gap this close to
/// a kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub rejected: usize,
    pub max_rel_err: f64,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < SUITE_TOLERANCE
    }
}

type Objective = Box<dyn FnMut(&[f64]) -> f64>;

/// Point, analytic gradient and objective of one instance.
struct Instance {
    x: Vec<f64>,
    grad: Vec<f64>,
    f: Objective,
}

fn run(
    name: &str,
    instances: usize,
    seed: u64,
    mut make: impl FnMut(&mut ChaCha8Rng, usize) -> Result<Option<Instance>>,
) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = test_rng(seed);
    let (mut done, mut rejected, mut worst) = (0, 0, 0.0_f64);
    while done < instances {
        match make(&mut rng, done)? {
            Some(mut inst) => {
                worst = worst.max(grad_check(&mut inst.f, &inst.x, &inst.grad, SUITE_EPS)?);
                done += 1;
            }
            None => {
                rejected += 1;
                if rejected > 100 * instances {
                    return Err(Error::InvalidArgument(format!("{name}: too many instances near a kink")));
                }
            }
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        instances,
        rejected,
        max_rel_err: worst,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn probe(r: &Raster, y: &Raster) -> f64 {
    r.dot(y).expect("shapes match")
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Raster {
    Raster::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

fn near_lrelu_kink(x: &Raster) -> bool {
    x.data().iter().any(|v| v.abs() < KINK_MARGIN)
}

fn near_pool_kink(x: &Raster) -> bool {
    let s = x.shape();
    for n in 0..s.n {
        for c in 0..s.c {
            for i in (0..s.h).step_by(2) {
                for j in (0..s.w).step_by(2) {
                    let mut w = [x.get(n, c, i, j), x.get(n, c, i, j + 1), x.get(n, c, i + 1, j), x.get(n, c, i + 1, j + 1)];
                    w.sort_by(|a, b| b.total_cmp(a));
                    if w[0] - w[1] < KINK_MARGIN {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Labels with at least one anomalous pixel per sample when `every` is set,
/// otherwise a mix of all-zero and partially anomalous maps.
fn random_maps(rng: &mut ChaCha8Rng, shape: Shape, every: bool) -> PixelLabels {
    let mut y = Raster::zeros(shape);
    for n in 0..shape.n {
        if !every && n % 2 == 0 {
            continue;
        }
        let count = rng.gen_range(1..=shape.h * shape.w / 2);
        for _ in 0..count {
            y.set(n, 0, rng.gen_range(0..shape.h), rng.gen_range(0..shape.w), 1.0);
        }
    }
    PixelLabels::new(y).expect("binary maps")
}

fn conv_check(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let k = if rng.gen_bool(0.5) { 1 } else { 3 };
    let (stride, padding) = (rng.gen_range(1..=2), rng.gen_range(0..=1));
    let xs = Shape::new(2, cin, rng.gen_range(5..=7), rng.gen_range(5..=7));
    let ws = Shape::new(cout, cin, k, k);
    let x = random_raster(rng, xs);
    let conv = Conv2d::new(random_raster(rng, ws), Some(random_raster(rng, Shape::new(1, cout, 1, 1)).into_vec()), stride, padding)?;
    let out = conv2d(&x, &conv)?;
    let r = random_raster(rng, out.shape());
    let g = conv2d_grad(&x, &conv, &r)?;
    let (nx, nw) = (xs.len(), ws.len());
    let point = [x.data(), conv.weight.data(), conv.bias.as_deref().expect("bias")].concat();
    let grad = [g.input.data(), g.weight.data(), &g.bias].concat();
    let f = move |v: &[f64]| {
        let x = Raster::from_vec(xs, v[..nx].to_vec()).expect("len");
        let w = Raster::from_vec(ws, v[nx..nx + nw].to_vec()).expect("len");
        let c = Conv2d::new(w, Some(v[nx + nw..].to_vec()), stride, padding).expect("valid conv");
        probe(&r, &conv2d(&x, &c).expect("valid input"))
    };
    Ok(Some(Instance { x: point, grad, f: Box::new(f) }))
}

fn batchnorm_check(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let c = rng.gen_range(1..=3);
    let xs = Shape::new(rng.gen_range(2..=4), c, 3, 3);
    let x = random_raster(rng, xs);
    let mut bn = BatchNorm2d::new(c);
    bn.gamma = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    bn.beta = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let (y, cache) = batchnorm_train(&x, &mut bn.clone())?;
    let r = random_raster(rng, y.shape());
    let g = batchnorm_grad(&cache, &bn, &r)?;
    let point = [x.data(), &bn.gamma, &bn.beta].concat();
    let grad = [g.input.data(), &g.gamma, &g.beta].concat();
    let n = xs.len();
    let f = move |v: &[f64]| {
        let x = Raster::from_vec(xs, v[..n].to_vec()).expect("len");
        let mut b = bn.clone();
        b.gamma = v[n..n + c].to_vec();
        b.beta = v[n + c..].to_vec();
        probe(&r, &batchnorm_train(&x, &mut b).expect("valid batch").0)
    };
    Ok(Some(Instance { x: point, grad, f: Box::new(f) }))
}

fn lrelu_check(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let slope = rng.gen_range(0.0..=1.0);
    let x = random_raster(rng, Shape::new(2, 2, 3, 3));
    if near_lrelu_kink(&x) {
        return Ok(None);
    }
    let r = random_raster(rng, x.shape());
    let grad = leaky_relu_grad(&x, slope, &r)?.into_vec();
    let s = x.shape();
    let f = move |v: &[f64]| probe(&r, &leaky_relu(&Raster::from_vec(s, v.to_vec()).expect("len"), slope).expect("slope"));
    Ok(Some(Instance { x: x.into_vec(), grad, f: Box::new(f) }))
}

fn maxpool_check(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let x = random_raster(rng, Shape::new(2, 2, 4, 4));
    if near_pool_kink(&x) {
        return Ok(None);
    }
    let (y, arg) = maxpool2(&x)?;
    let r = random_raster(rng, y.shape());
    let grad = maxpool2_grad(&arg, &r)?.into_vec();
    let s = x.shape();
    let f = move |v: &[f64]| probe(&r, &maxpool2(&Raster::from_vec(s, v.to_vec()).expect("len")).expect("even").0);
    Ok(Some(Instance { x: x.into_vec(), grad, f: Box::new(f) }))
}

fn upsample2_check(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let x = random_raster(rng, Shape::new(2, 2, 3, 3));
    let r = random_raster(rng, Shape::new(2, 2, 6, 6));
    let grad = upsample2_grad(&r)?.into_vec();
    let s = x.shape();
    let f = move |v: &[f64]| probe(&r, &upsample2(&Raster::from_vec(s, v.to_vec()).expect("len")));
    Ok(Some(Instance { x: x.into_vec(), grad, f: Box::new(f) }))
}

fn gaussian_upsample_check(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let stride = rng.gen_range(1..=4);
    let rf = ReceptiveField {
        stride,
        offset: (stride as f64 - 1.0) / 2.0,
        size: rng.gen_range(3..=18),
    };
    let (u, v) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
    let up = Upsampler::new(&rf, rng.gen_range(0.5..4.0), (u, v), (u * stride, v * stride))?;
    let x = random_raster(rng, Shape::new(2, 1, u, v));
    let r = random_raster(rng, Shape::new(2, 1, u * stride, v * stride));
    let grad = up.adjoint(&r)?.into_vec();
    let s = x.shape();
    let f = move |p: &[f64]| probe(&r, &up.apply(&Raster::from_vec(s, p.to_vec()).expect("len")).expect("shape"));
    Ok(Some(Instance { x: x.into_vec(), grad, f: Box::new(f) }))
}

fn pseudo_huber_check(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let x = uniform(rng, Shape::new(2, 1, 3, 3), -3.0, 3.0);
    let r = random_raster(rng, x.shape());
    let grad = pseudo_huber_grad(&x, &r)?.into_vec();
    let s = x.shape();
    let f = move |v: &[f64]| probe(&r, &pseudo_huber(&Raster::from_vec(s, v.to_vec()).expect("len")));
    Ok(Some(Instance { x: x.into_vec(), grad, f: Box::new(f) }))
}

fn mixed_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let mut y: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
    y[0] = 0;
    y[n - 1] = 1;
    y
}

fn hsc_check(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let s = Shape::new(4, rng.gen_range(1..=5), 1, 1);
    let feats = uniform(rng, s, -2.0, 2.0);
    let centre: Vec<f64> = (0..s.c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let labels = mixed_labels(rng, s.n);
    let out = hsc_loss(&feats, &centre, &labels)?;
    let grad = [out.grad.data(), &hsc_centre_grad(&out)].concat();
    let point = [feats.data(), &centre].concat();
    let m = s.len();
    let f = move |v: &[f64]| {
        let x = Raster::from_vec(s, v[..m].to_vec()).expect("len");
        hsc_loss(&x, &v[m..], &labels).expect("valid").value
    };
    Ok(Some(Instance { x: point, grad, f: Box::new(f) }))
}

fn unsup_check(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let z = uniform(rng, Shape::new(4, 1, 3, 3), -2.0, 2.0);
    let labels = mixed_labels(rng, 4);
    let grad = fcdd_unsup_loss(&z, &labels)?.grad.into_vec();
    let s = z.shape();
    let f = move |v: &[f64]| fcdd_unsup_loss(&Raster::from_vec(s, v.to_vec()).expect("len"), &labels).expect("valid").value;
    Ok(Some(Instance { x: z.into_vec(), grad, f: Box::new(f) }))
}

/// Loss over positive heatmaps and pixel labels.
fn heatmap_loss_check(
    rng: &mut ChaCha8Rng,
    every: bool,
    loss: impl Fn(&Raster, &PixelLabels) -> Result<f64> + 'static,
    grad: impl Fn(&Raster, &PixelLabels) -> Result<Raster>,
) -> Result<Option<Instance>> {
    let s = Shape::new(4, 1, 4, 4);
    let h = uniform(rng, s, 0.05, 3.0);
    let maps = random_maps(rng, s, every);
    let g = grad(&h, &maps)?.into_vec();
    let f = move |v: &[f64]| loss(&Raster::from_vec(s, v.to_vec()).expect("len"), &maps).expect("valid");
    Ok(Some(Instance { x: h.into_vec(), grad: g, f: Box::new(f) }))
}

fn bce_check(rng: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let s = Shape::new(3, 1, 3, 3);
    let p = uniform(rng, s, 0.05, 0.95);
    let y = Raster::from_fn(s, |_, _, _, _| f64::from(u8::from(rng.gen_bool(0.5))));
    let grad = bce_loss(&p, &y)?.grad.into_vec();
    let f = move |v: &[f64]| bce_loss(&Raster::from_vec(s, v.to_vec()).expect("len"), &y).expect("valid").value;
    Ok(Some(Instance { x: p.into_vec(), grad, f: Box::new(f) }))
}

const FOCAL_GAMMAS: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

fn end_to_end_check(rng: &mut ChaCha8Rng, mode: TrainMode, k: usize) -> Result<Option<Instance>> {
    let mut cfg = NetworkConfig::backbone(InputShape::new(1, 8, 8), [2, 2, 2]).with_seed(rng.gen());
    let slope = rng.gen_range(0.1..0.5);
    for l in &mut cfg.layers {
        if let LayerSpec::LeakyRelu { slope: s } = l {
            *s = slope;
        }
    }
    let mut net = Network::build(cfg)?;
    let theta: Vec<f64> = (0..net.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    net.set_param_vector(&theta)?;
    let up = Upsampler::for_network(&net)?;
    let xs = Shape::new(2, 1, 8, 8);
    let x = random_raster(rng, xs);
    let maps = random_maps(rng, xs, mode == TrainMode::SsOriginal);
    let labels = match mode {
        TrainMode::UnsupNoAnom => vec![0, 0],
        TrainMode::UnsupWithAnom => vec![0, 1],
        _ => maps.image_labels(),
    };
    let gamma = FOCAL_GAMMAS[k % FOCAL_GAMMAS.len()];
    net.zero_grad();
    let (z, cache) = net.forward(&x, Mode::Train)?;
    for (layer, input) in net.layers().iter().zip(cache.layer_inputs()) {
        let kink = match layer {
            Layer::LeakyRelu(_) => near_lrelu_kink(input),
            Layer::MaxPool2 => near_pool_kink(input),
            _ => false,
        };
        if kink {
            return Ok(None);
        }
    }
    let (_, gz) = batch_loss(mode, gamma, &z, &labels, Some(&maps), &up)?;
    net.accumulate_grads(&cache, &gz)?;
    let grad = net.grad_vector();
    let point = net.param_vector();
    let f = move |v: &[f64]| {
        net.set_param_vector(v).expect("len");
        let (z, _) = net.forward(&x, Mode::Train).expect("valid");
        batch_loss(mode, gamma, &z, &labels, Some(&maps), &up).expect("valid").0.value
    };
    Ok(Some(Instance { x: point, grad, f: Box::new(f) }))
}

/// Runs every check on `instances` random instances each.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = vec![
        run("conv2d", instances, seed, |r, _| conv_check(r))?,
        run("batchnorm", instances, seed + 1, |r, _| batchnorm_check(r))?,
        run("leaky_relu", instances, seed + 2, |r, _| lrelu_check(r))?,
        run("maxpool2", instances, seed + 3, |r, _| maxpool_check(r))?,
        run("upsample2", instances, seed + 4, |r, _| upsample2_check(r))?,
        run("gaussian_upsample", instances, seed + 5, |r, _| gaussian_upsample_check(r))?,
        run("pseudo_huber", instances, seed + 6, |r, _| pseudo_huber_check(r))?,
        run("hsc_loss", instances, seed + 7, |r, _| hsc_check(r))?,
        run("fcdd_unsup_loss", instances, seed + 8, |r, _| unsup_check(r))?,
        run("fcdd_ss_loss_original", instances, seed + 9, |r, _| {
            heatmap_loss_check(
                r,
                true,
                |h, m| Ok(fcdd_ss_loss_original(h, m)?.value),
                |h, m| Ok(fcdd_ss_loss_original(h, m)?.grad),
            )
        })?,
        run("fcdd_ss_loss_modified", instances, seed + 10, |r, _| {
            heatmap_loss_check(
                r,
                false,
                |h, m| Ok(fcdd_ss_loss_modified(h, m)?.value),
                |h, m| Ok(fcdd_ss_loss_modified(h, m)?.grad),
            )
        })?,
        run("bce_loss", instances, seed + 11, |r, _| bce_check(r))?,
        run("fcdd_focal_loss", instances, seed + 12, |r, k| {
            let gamma = FOCAL_GAMMAS[k % FOCAL_GAMMAS.len()];
            heatmap_loss_check(
                r,
                false,
                move |h, m| Ok(fcdd_focal_loss(h, m, gamma)?.value),
                move |h, m| Ok(fcdd_focal_loss(h, m, gamma)?.grad),
            )
        })?,
    ];
    let modes = [
        TrainMode::UnsupNoAnom,
        TrainMode::UnsupWithAnom,
        TrainMode::SsOriginal,
        TrainMode::SsModified,
        TrainMode::SsFocal,
    ];
    for (i, mode) in modes.into_iter().enumerate() {
        out.push(run(&format!("network+{mode}"), instances, seed + 13 + i as u64, |r, k| {
            end_to_end_check(r, mode, k)
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_instances() {
        for r in gradient_suite(3, 7).unwrap() {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn kink_detection() {
        let x = Raster::from_vec(Shape::new(1, 1, 2, 2), vec![0.5, 0.5005, 0.1, 0.2]).unwrap();
        assert!(near_pool_kink(&x));
        assert!(!near_pool_kink(&x.map(|v| v * 10.0)));
        assert!(near_lrelu_kink(&x.map(|v| v - 0.1)));
    }
}
