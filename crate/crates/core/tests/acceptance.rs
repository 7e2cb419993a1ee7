//! Acceptance criteria. Prints one line per criterion and exits non-zero if
//! any criterion fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use fcdd::checks::gradient_suite;
use fcdd::data::{preprocess_map, rasterize_polygon, synth_generate, DatasetSplit, Mask, Polygon, SynthConfig};
use fcdd::eval::{auc, auc_of, evaluate_experiment, gtmap_auc, roc_curve, EvalReport, FcddScorer, ImageScorer, ReportMeta, ThresholdRule};
use fcdd::losses::{bce_loss, fcdd_focal_loss, fcdd_ss_loss_modified, fcdd_ss_loss_original, pixel_prob, PixelLabels};
use fcdd::model::{InputShape, Network, NetworkConfig};
use fcdd::heatmap::Upsampler;
use fcdd::tensor::gradcheck::test_rng;
use fcdd::tensor::{Mode, Raster, Shape};
use fcdd::trainer::{batch_loss, epoch_batches, prepare_images, stats_for, train, Sgd, TrainConfig, TrainMode};
use rand::seq::SliceRandom;
use rand::Rng;

const GRAD_INSTANCES: usize = 20;
const GRAD_SEED: u64 = 0;
const GRAD_BUDGET_SECONDS: f64 = 120.0;
const PATHOLOGY_TOL: f64 = 1e-12;
const BCE_TOL: f64 = 1e-10;
const FOCAL_TOL: f64 = 1e-12;
const AUC_TOL: f64 = 1e-12;
const TREND_MIN_GAP: f64 = 0.05;
const TREND_BUDGET_SECONDS: f64 = 900.0;
const GTMAP_MIN: f64 = 0.90;
const GTMAP_ORACLE_TOL: f64 = 1e-12;
const SWEEP_SEEDS: u64 = 5;
const SWEEP_MIN_WINS: usize = 4;

/// Model preset of the synthetic experiments: 64×64 images are resized to a
/// 32×32 model input.
const MODEL_INPUT: InputShape = InputShape::new(3, 32, 32);
const WIDTHS: [usize; 3] = [8, 16, 32];
const EPOCHS: usize = 60;
const LR: f64 = 0.03;
const BATCH: usize = 32;
const INSTANCES: usize = 5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn report(n: usize, o: &Outcome) {
    println!("criterion {n:>2}: {}  {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
}

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 0).map(|(&s, _)| s).collect();
    let mut credit = 0.0;
    for &a in &pos {
        for &b in &neg {
            credit += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    credit / (pos.len() * neg.len()) as f64
}

fn random_heatmap(rng: &mut impl Rng, s: Shape) -> Raster {
    Raster::from_fn(s, |_, _, _, _| rng.gen_range(0.01..4.0))
}

fn random_maps(rng: &mut impl Rng, s: Shape, empty: &[usize]) -> PixelLabels {
    let mut y = Raster::zeros(s);
    for n in 0..s.n {
        if empty.contains(&n) {
            continue;
        }
        for _ in 0..rng.gen_range(1..=s.h * s.w / 2) {
            y.set(n, 0, rng.gen_range(0..s.h), rng.gen_range(0..s.w), 1.0);
        }
    }
    PixelLabels::new(y).expect("binary")
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let results = match gradient_suite(GRAD_INSTANCES, GRAD_SEED) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = results.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).expect("non-empty");
    outcome(
        failed.is_empty() && secs < GRAD_BUDGET_SECONDS,
        format!(
            "{} checks x {GRAD_INSTANCES} instances, worst {} {:.2e} (< 1e-4), failed {failed:?}, {secs:.1}s",
            results.len(),
            worst.name,
            worst.max_rel_err
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = test_rng(2);
    let mut worst = 0.0_f64;
    let mut ok = true;
    for trial in 0..50 {
        let s = Shape::new(rng.gen_range(1..=4), 1, 6, 6);
        let h = random_heatmap(&mut rng, s);
        // Half the trials have every map empty, the rest only the first one.
        let empty: Vec<usize> = if trial % 2 == 0 { (0..s.n).collect() } else { vec![0] };
        let y = random_maps(&mut rng, s, &empty);
        let (orig, modi) = match (fcdd_ss_loss_original(&h, &y), fcdd_ss_loss_modified(&h, &y)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return outcome(false, format!("trial {trial}: loss returned an error")),
        };
        ok &= !orig.is_finite() && orig.nonfinite.contains(&0);
        ok &= modi.value.is_finite() && modi.nonfinite.is_empty();
        if trial % 2 == 0 {
            worst = worst.max((modi.value - h.mean()).abs());
        } else {
            let mean0 = h.sample(0).iter().sum::<f64>() / s.sample_len() as f64;
            worst = worst.max((modi.per_sample[0] - mean0).abs());
        }
    }
    outcome(
        ok && worst <= PATHOLOGY_TOL,
        format!("50 batches: original flagged non-finite in all, modified finite, |modified - heatmap mean| max {worst:.1e}"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = test_rng(3);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let s = Shape::new(rng.gen_range(1..=4), 1, rng.gen_range(2..=8), rng.gen_range(2..=8));
        let h = random_heatmap(&mut rng, s);
        let empty: Vec<usize> = (0..s.n).filter(|_| rng.gen_bool(0.3)).collect();
        let y = random_maps(&mut rng, s, &empty);
        let m = fcdd_ss_loss_modified(&h, &y).expect("valid");
        // p is the probability of being normal, so the BCE target is 1 - y.
        let b = bce_loss(&pixel_prob(&h), &y.maps().map(|v| 1.0 - v)).expect("valid");
        worst = worst.max((m.value - b.value).abs());
    }
    outcome(worst <= BCE_TOL, format!("100 instances, max |modified - BCE(exp(-h))| {worst:.1e} (<= 1e-10)"))
}

fn tiny_split() -> DatasetSplit {
    synth_generate(&SynthConfig {
        train_normal: 24,
        train_anomalous: 8,
        test_normal: 2,
        test_anomalous: 2,
        channels: 1,
        height: 16,
        width: 16,
        sigma_min: 1.5,
        sigma_max: 2.0,
        amplitude: 0.5,
        smoothing: 1,
        seed: 4,
    })
    .expect("valid config")
}

/// Runs the modified and focal(γ=0) objectives side by side with shared
/// seeds, comparing parameters after every optimizer step.
fn focal_trajectories() -> (usize, bool) {
    let split = tiny_split();
    let input = InputShape::new(1, 16, 16);
    let stats = stats_for(&split.stats, input).expect("stats");
    let refs: Vec<_> = split.train.iter().collect();
    let images = prepare_images(&refs, &stats, input).expect("images");
    let masks: Vec<Raster> = split.train.iter().map(|s| preprocess_map(s, input).expect("map").to_raster()).collect();
    let maps = Raster::stack(&masks).expect("stack");
    let labels: Vec<u8> = split.train.iter().map(|s| s.label.as_u8()).collect();
    let cfg = NetworkConfig::backbone(input, [2, 3, 4]).with_seed(9);
    let mut a = Network::build(cfg.clone()).expect("net");
    let mut b = Network::build(cfg).expect("net");
    let up = Upsampler::for_network(&a).expect("upsampler");
    let (mut sa, mut sb) = (Sgd::new(0.05, 0.9, 1e-6), Sgd::new(0.05, 0.9, 1e-6));
    let mut rng = test_rng(9);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut steps = 0;
    for _ in 0..3 {
        order.shuffle(&mut rng);
        for idx in epoch_batches(&order, 8) {
            let x = images.gather(&idx);
            let y = PixelLabels::new(maps.gather(&idx)).expect("maps");
            let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            for (net, sgd, mode) in [(&mut a, &mut sa, TrainMode::SsModified), (&mut b, &mut sb, TrainMode::SsFocal)] {
                net.zero_grad();
                let (z, cache) = net.forward(&x, Mode::Train).expect("forward");
                let (_, gz) = batch_loss(mode, 0.0, &z, &l, Some(&y), &up).expect("loss");
                net.accumulate_grads(&cache, &gz).expect("backward");
                sgd.step(&mut [net]).expect("step");
            }
            steps += 1;
            if a != b {
                return (steps, false);
            }
        }
    }
    (steps, true)
}

fn criterion_4() -> Outcome {
    let mut rng = test_rng(4);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let s = Shape::new(rng.gen_range(1..=4), 1, rng.gen_range(2..=8), rng.gen_range(2..=8));
        let h = random_heatmap(&mut rng, s);
        let empty: Vec<usize> = (0..s.n).filter(|_| rng.gen_bool(0.3)).collect();
        let y = random_maps(&mut rng, s, &empty);
        let m = fcdd_ss_loss_modified(&h, &y).expect("valid");
        let f = fcdd_focal_loss(&h, &y, 0.0).expect("valid");
        worst = worst.max((m.value - f.value).abs());
        for (a, b) in m.grad.data().iter().zip(f.grad.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let (steps, identical) = focal_trajectories();
    outcome(
        worst <= FOCAL_TOL && identical,
        format!("100 instances, max value/gradient difference {worst:.1e}; {steps} SGD steps, parameters identical: {identical}"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = test_rng(5);
    let mut worst = 0.0_f64;
    let mut done = 0;
    while done < 200 {
        let n = rng.gen_range(2..=50);
        let levels = if done % 2 == 0 { 6 } else { 1_000_000 };
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..levels))).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let a = auc_of(&scores, &labels).expect("two classes");
        worst = worst.max((a - pairwise_auc(&scores, &labels)).abs());
        done += 1;
    }
    let perfect = auc(&roc_curve(&[0.1, 0.2, 0.7, 0.9], &[0, 0, 1, 1]).expect("roc"));
    let chance = auc(&roc_curve(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).expect("roc"));
    outcome(
        worst <= AUC_TOL && perfect == 1.0 && chance == 0.5,
        format!("200 instances, max |trapezoid - pairwise| {worst:.1e}; perfect {perfect}, all tied {chance}"),
    )
}

struct TrendRun {
    reports: Vec<(TrainMode, EvalReport)>,
    gtmap_oracle_err: f64,
    seconds: f64,
}

const TREND_MODES: [TrainMode; 3] = [TrainMode::UnsupNoAnom, TrainMode::UnsupWithAnom, TrainMode::SsModified];

fn train_config(mode: TrainMode, base_seed: u64, n_instances: usize) -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        lr: LR,
        batch_size: BATCH,
        n_instances,
        base_seed,
        ..TrainConfig::new(mode)
    }
}

fn evaluate(mode: TrainMode, nets: &[Network], split: &DatasetSplit) -> fcdd::Result<EvalReport> {
    let scorers = nets.iter().map(FcddScorer::new).collect::<fcdd::Result<Vec<_>>>()?;
    let refs: Vec<&dyn ImageScorer> = scorers.iter().map(|s| s as &dyn ImageScorer).collect();
    let meta = ReportMeta {
        mode: mode.to_string(),
        gamma: None,
        dataset: "synthetic desk".into(),
        split: Some(split.summary()),
    };
    evaluate_experiment(&refs, &split.test, &split.stats, meta, ThresholdRule::TopLeft, mode.is_semi_supervised())
}

/// Pooled pixel AUC of three test samples against the pairwise oracle.
fn gtmap_oracle(net: &Network, split: &DatasetSplit) -> fcdd::Result<f64> {
    let picks = [split.test.len() - 1, 0, split.test.len() / 2];
    let scorer = FcddScorer::new(net)?;
    let stats = stats_for(&split.stats, MODEL_INPUT)?;
    let samples: Vec<_> = picks.iter().map(|&i| &split.test[i]).collect();
    let hm = scorer.heatmaps(&prepare_images(&samples, &stats, MODEL_INPUT)?).expect("fcdd has heatmaps")?;
    let heat: Vec<Raster> = (0..3).map(|n| hm.gather(&[n])).collect();
    let maps: Vec<Raster> = samples
        .iter()
        .map(|s| preprocess_map(s, MODEL_INPUT).map(|m: Mask| m.to_raster()))
        .collect::<fcdd::Result<_>>()?;
    let fast = gtmap_auc(&heat, &maps)?;
    let scores: Vec<f64> = heat.iter().flat_map(|h| h.data().to_vec()).collect();
    let labels: Vec<u8> = maps.iter().flat_map(|m| m.data().iter().map(|&v| v as u8).collect::<Vec<_>>()).collect();
    Ok((fast - pairwise_auc(&scores, &labels)).abs())
}

fn trend_run(split: &DatasetSplit) -> fcdd::Result<TrendRun> {
    let start = Instant::now();
    let net = NetworkConfig::backbone(MODEL_INPUT, WIDTHS);
    let mut reports = Vec::new();
    let mut gtmap_oracle_err = f64::NAN;
    for mode in TREND_MODES {
        let nets: Vec<Network> = train(split, &net, &train_config(mode, 0, INSTANCES))?.into_iter().map(|(n, _)| n).collect();
        reports.push((mode, evaluate(mode, &nets, split)?));
        if mode == TrainMode::SsModified {
            gtmap_oracle_err = gtmap_oracle(&nets[0], split)?;
        }
    }
    Ok(TrendRun {
        reports,
        gtmap_oracle_err,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn mean_auc(run: &TrendRun, mode: TrainMode) -> f64 {
    run.reports.iter().find(|(m, _)| *m == mode).expect("mode trained").1.aggregate.auc.mean
}

fn criterion_6(run: &TrendRun) -> Outcome {
    let (a, b, c) = (
        mean_auc(run, TrainMode::UnsupNoAnom),
        mean_auc(run, TrainMode::UnsupWithAnom),
        mean_auc(run, TrainMode::SsModified),
    );
    outcome(
        a <= b && b <= c && c - a >= TREND_MIN_GAP && run.seconds < TREND_BUDGET_SECONDS,
        format!(
            "mean AUC unsup_no_anom {a:.4} <= unsup_with_anom {b:.4} <= ss_modified {c:.4}, gap {:.4} (>= 0.05), {:.0}s (< 900s)",
            c - a,
            run.seconds
        ),
    )
}

fn criterion_7(run: &TrendRun) -> Outcome {
    let report = &run.reports.iter().find(|(m, _)| *m == TrainMode::SsModified).expect("trained").1;
    let per: Vec<f64> = report.instances.iter().filter_map(|r| r.gtmap_auc).collect();
    let mean = report.aggregate.gtmap_auc.map_or(f64::NAN, |g| g.mean);
    outcome(
        mean >= GTMAP_MIN && run.gtmap_oracle_err <= GTMAP_ORACLE_TOL,
        format!(
            "ss_modified GTMAP AUC mean {mean:.4} (>= 0.90), per instance {:?}; 3-sample pixel oracle diff {:.1e}",
            per.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            run.gtmap_oracle_err
        ),
    )
}

fn criterion_8(split: &DatasetSplit) -> fcdd::Result<Outcome> {
    let net = NetworkConfig::backbone(MODEL_INPUT, WIDTHS);
    let mut pairs = Vec::new();
    for seed in 0..SWEEP_SEEDS {
        let mut aucs = [0.0; 2];
        for (slot, k) in [0usize, 5].into_iter().enumerate() {
            let sub = split.with_train_anomalies(k);
            let cfg = train_config(TrainMode::SsModified, seed, 1);
            let nets: Vec<Network> = train(&sub, &net, &cfg)?.into_iter().map(|(n, _)| n).collect();
            aucs[slot] = evaluate(TrainMode::SsModified, &nets, &sub)?.instances[0].auc;
        }
        pairs.push(aucs);
    }
    let wins = pairs.iter().filter(|p| p[1] >= p[0]).count();
    Ok(outcome(
        wins >= SWEEP_MIN_WINS,
        format!(
            "ss_modified AUC at 5 >= at 0 training anomalies in {wins}/{SWEEP_SEEDS} seeds (>= 4): {}",
            pairs.iter().map(|p| format!("{:.3}->{:.3}", p[0], p[1])).collect::<Vec<_>>().join(", ")
        ),
    ))
}

fn on_segment(px: f64, py: f64, (x0, y0): (f64, f64), (x1, y1): (f64, f64)) -> bool {
    let cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
    cross == 0.0 && px >= x0.min(x1) && px <= x0.max(x1) && py >= y0.min(y1) && py <= y0.max(y1)
}

fn point_in_polygon(v: &[(f64, f64)], px: f64, py: f64) -> bool {
    let mut inside = false;
    for i in 0..v.len() {
        let (a, b) = (v[i], v[(i + 1) % v.len()]);
        if on_segment(px, py, a, b) {
            return true;
        }
        if (a.1 > py) != (b.1 > py) && px < a.0 + (py - a.1) * (b.0 - a.0) / (b.1 - a.1) {
            inside = !inside;
        }
    }
    inside
}

fn criterion_9() -> Outcome {
    let mut rng = test_rng(9);
    let (h, w) = (40, 48);
    let mut mismatched = 0;
    for trial in 0..100 {
        let n = rng.gen_range(3..=12);
        let integer = trial % 3 == 0;
        let verts: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                if integer {
                    (f64::from(rng.gen_range(-3..=51)), f64::from(rng.gen_range(-3..=43)))
                } else {
                    (rng.gen_range(-3.0..51.0), rng.gen_range(-3.0..43.0))
                }
            })
            .collect();
        let mask = rasterize_polygon(&[Polygon::new(verts.clone(), "defect").expect("3+ vertices")], h, w);
        let exact = (0..h).all(|y| {
            (0..w).all(|x| mask.get(y, x) == u8::from(point_in_polygon(&verts, x as f64 + 0.5, y as f64 + 0.5)))
        });
        mismatched += usize::from(!exact);
    }
    outcome(mismatched == 0, format!("100 random polygons on {h}x{w}, {mismatched} masks differ from the point-in-polygon oracle"))
}

fn write_reports(run: &TrendRun, dir: &Path) -> fcdd::Result<()> {
    for (mode, r) in &run.reports {
        r.write(&dir.join(mode.name()))?;
    }
    Ok(())
}

fn same_files(a: &Path, b: &Path) -> std::io::Result<(usize, Vec<String>)> {
    let mut count = 0;
    let mut differing = Vec::new();
    for mode in TREND_MODES {
        for entry in fs::read_dir(a.join(mode.name()))? {
            let path = entry?.path();
            let rel = path.strip_prefix(a).expect("inside a").to_path_buf();
            count += 1;
            if fs::read(&path)? != fs::read(b.join(&rel))? {
                differing.push(rel.display().to_string());
            }
        }
    }
    Ok((count, differing))
}

fn criterion_10(first: &TrendRun, split: &DatasetSplit) -> fcdd::Result<Outcome> {
    let second = trend_run(split)?;
    let dir = tempfile::tempdir().map_err(|e| fcdd::Error::InvalidArgument(e.to_string()))?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    write_reports(first, &a)?;
    write_reports(&second, &b)?;
    let (count, differing) = same_files(&a, &b).map_err(|e| fcdd::Error::InvalidArgument(e.to_string()))?;
    Ok(outcome(
        differing.is_empty() && count > 0,
        format!("second full run ({:.0}s): {count} report/score files compared, differing {differing:?}", second.seconds),
    ))
}

fn main() -> ExitCode {
    let mut all = true;
    let mut record = |n: usize, o: Outcome| {
        report(n, &o);
        all &= o.passed;
    };
    record(1, criterion_1());
    record(2, criterion_2());
    record(3, criterion_3());
    record(4, criterion_4());
    record(5, criterion_5());
    let split = synth_generate(&SynthConfig::desk()).expect("desk dataset");
    match trend_run(&split) {
        Ok(run) => {
            record(6, criterion_6(&run));
            record(7, criterion_7(&run));
            record(8, criterion_8(&split).unwrap_or_else(|e| outcome(false, format!("error: {e}"))));
            record(9, criterion_9());
            record(10, criterion_10(&run, &split).unwrap_or_else(|e| outcome(false, format!("error: {e}"))));
        }
        Err(e) => {
            for n in [6, 7, 8] {
                record(n, outcome(false, format!("training error: {e}")));
            }
            record(9, criterion_9());
            record(10, outcome(false, format!("training error: {e}")));
        }
    }
    println!("acceptance: {}", if all { "all criteria passed" } else { "FAILED" });
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
