//! ROC analysis, thresholds and multi-instance experiment reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{preprocess_map, ChannelStats, Label, Sample, SplitSummary};
use crate::error::{Error, Result};
use crate::heatmap::{heatmaps, Upsampler};
use crate::model::{Autoencoder, InputShape, Network};
use crate::tensor::Raster;
use crate::trainer::{prepare_images, stats_for};

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// Descending, starting with +inf.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub tn: Vec<usize>,
    pub fn_: Vec<usize>,
}

impl RocCurve {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn accuracy(&self, i: usize) -> f64 {
        let total = self.tp[i] + self.fp[i] + self.tn[i] + self.fn_[i];
        (self.tp[i] + self.tn[i]) as f64 / total as f64
    }
}

/// Sample is called anomalous iff its score is >= the threshold; one vertex
/// per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "ROC needs both classes, got {pos} anomalous and {neg} normal"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut roc = RocCurve {
        thresholds: vec![f64::INFINITY],
        tpr: vec![0.0],
        fpr: vec![0.0],
        tp: vec![0],
        fp: vec![0],
        tn: vec![neg],
        fn_: vec![pos],
    };
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.thresholds.push(s);
        roc.tp.push(tp);
        roc.fp.push(fp);
        roc.tn.push(neg - fp);
        roc.fn_.push(pos - tp);
        roc.tpr.push(tp as f64 / pos as f64);
        roc.fpr.push(fp as f64 / neg as f64);
    }
    Ok(roc)
}

/// Trapezoidal area under the curve.
pub fn auc(roc: &RocCurve) -> f64 {
    roc.fpr
        .windows(2)
        .zip(roc.tpr.windows(2))
        .map(|(f, t)| (f[1] - f[0]) * (t[0] + t[1]) / 2.0)
        .sum()
}

/// Score-level shortcut for `auc(roc_curve(..))`.
pub fn auc_of(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(auc(&roc_curve(scores, labels)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Vertex closest to (FPR 0, TPR 1).
    #[default]
    TopLeft,
    /// Vertex maximizing TPR - FPR.
    Youden,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub accuracy: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Best vertex under `rule`; ties go to the lower FPR, then the higher
/// threshold.
pub fn optimal_threshold_with(roc: &RocCurve, rule: ThresholdRule) -> OperatingPoint {
    let cost = |i: usize| match rule {
        ThresholdRule::TopLeft => roc.fpr[i].hypot(1.0 - roc.tpr[i]),
        ThresholdRule::Youden => roc.fpr[i] - roc.tpr[i],
    };
    let mut best = 0;
    for i in 1..roc.len() {
        let (c, b) = (cost(i), cost(best));
        // Vertices come in descending threshold order, so a later vertex
        // only wins on strictly lower cost or equal cost with lower FPR.
        if c < b || (c == b && roc.fpr[i] < roc.fpr[best]) {
            best = i;
        }
    }
    OperatingPoint {
        threshold: roc.thresholds[best],
        accuracy: roc.accuracy(best),
        tpr: roc.tpr[best],
        fpr: roc.fpr[best],
    }
}

/// Top-left operating point: `(threshold, accuracy)`.
pub fn optimal_threshold(roc: &RocCurve) -> (f64, f64) {
    let p = optimal_threshold_with(roc, ThresholdRule::TopLeft);
    (p.threshold, p.accuracy)
}

/// Pixel-level AUC pooling every pixel of every map into one population.
pub fn gtmap_auc(heatmaps: &[Raster], maps: &[Raster]) -> Result<f64> {
    if heatmaps.len() != maps.len() {
        return Err(Error::Shape(format!("{} heatmaps for {} maps", heatmaps.len(), maps.len())));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (h, m) in heatmaps.iter().zip(maps) {
        if h.len() != m.len() {
            return Err(Error::Shape(format!("heatmap {} against map {}", h.shape(), m.shape())));
        }
        scores.extend_from_slice(h.data());
        labels.extend(m.data().iter().map(|&v| u8::from(v == 1.0)));
    }
    auc_of(&scores, &labels)
}

/// Something that assigns one anomaly score per preprocessed image.
pub trait ImageScorer {
    fn input(&self) -> InputShape;
    fn score(&self, images: &Raster) -> Result<Vec<f64>>;
    /// Full-resolution heatmaps, if the scorer has them.
    fn heatmaps(&self, _images: &Raster) -> Option<Result<Raster>> {
        None
    }
}

/// One-class network scored by the mean of its upsampled heatmap.
pub struct FcddScorer<'a> {
    pub net: &'a Network,
    pub up: Upsampler,
}

impl<'a> FcddScorer<'a> {
    pub fn new(net: &'a Network) -> Result<Self> {
        Ok(FcddScorer {
            net,
            up: Upsampler::for_network(net)?,
        })
    }
}

impl ImageScorer for FcddScorer<'_> {
    fn input(&self) -> InputShape {
        self.net.config().input
    }

    fn score(&self, images: &Raster) -> Result<Vec<f64>> {
        let maps = heatmaps(self.net, &self.up, images)?;
        Ok((0..maps.shape().n)
            .map(|n| {
                let s = maps.sample(n);
                s.iter().sum::<f64>() / s.len() as f64
            })
            .collect())
    }

    fn heatmaps(&self, images: &Raster) -> Option<Result<Raster>> {
        Some(heatmaps(self.net, &self.up, images))
    }
}

impl ImageScorer for Autoencoder {
    fn input(&self) -> InputShape {
        self.encoder.config().input
    }

    fn score(&self, images: &Raster) -> Result<Vec<f64>> {
        self.score_batch(images)
    }
}

const CHUNK: usize = 64;

/// Per-sample scores of `samples`, computed in chunks.
pub fn score_samples(scorer: &dyn ImageScorer, samples: &[Sample], stats: &ChannelStats) -> Result<Vec<f64>> {
    let input = scorer.input();
    let stats = stats_for(stats, input)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        out.extend(scorer.score(&prepare_images(&refs, &stats, input)?)?);
    }
    Ok(out)
}

/// Pixel-level AUC of a scorer's heatmaps against the resized ground truth
/// of `samples`. `None` if the scorer has no heatmaps.
pub fn scorer_gtmap_auc(scorer: &dyn ImageScorer, samples: &[Sample], stats: &ChannelStats) -> Result<Option<f64>> {
    let input = scorer.input();
    let stats = stats_for(stats, input)?;
    let mut hms = Vec::with_capacity(samples.len());
    let mut maps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let Some(batch) = scorer.heatmaps(&prepare_images(&refs, &stats, input)?) else {
            return Ok(None);
        };
        let batch = batch?;
        for (n, s) in chunk.iter().enumerate() {
            hms.push(batch.gather(&[n]));
            maps.push(preprocess_map(s, input)?.to_raster());
        }
    }
    gtmap_auc(&hms, &maps).map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub instance: usize,
    pub auc: f64,
    pub optimal_threshold: f64,
    pub optimal_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gtmap_auc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single instance.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub auc: MeanStd,
    pub optimal_accuracy: MeanStd,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gtmap_auc: Option<MeanStd>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub threshold_rule: ThresholdRule,
    pub instances: Vec<InstanceResult>,
    pub aggregate: Aggregate,
    /// Test scores per instance, aligned with `ids`.
    #[serde(skip)]
    pub scores: Vec<Vec<f64>>,
    #[serde(skip)]
    pub ids: Vec<String>,
    #[serde(skip)]
    pub labels: Vec<u8>,
}

impl EvalReport {
    /// Builds a report from already computed scores.
    pub fn from_scores(
        meta: ReportMeta,
        rule: ThresholdRule,
        ids: Vec<String>,
        labels: Vec<u8>,
        scores: Vec<Vec<f64>>,
        gtmap: Vec<Option<f64>>,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidArgument("evaluation needs at least one model".into()));
        }
        let mut instances = Vec::with_capacity(scores.len());
        for (k, s) in scores.iter().enumerate() {
            let roc = roc_curve(s, &labels)?;
            let op = optimal_threshold_with(&roc, rule);
            instances.push(InstanceResult {
                instance: k,
                auc: auc(&roc),
                optimal_threshold: op.threshold,
                optimal_accuracy: op.accuracy,
                gtmap_auc: gtmap.get(k).copied().flatten(),
            });
        }
        let pick = |f: &dyn Fn(&InstanceResult) -> f64| MeanStd::of(&instances.iter().map(f).collect::<Vec<_>>());
        let gt: Option<Vec<f64>> = instances.iter().map(|r| r.gtmap_auc).collect();
        let aggregate = Aggregate {
            auc: pick(&|r| r.auc),
            optimal_accuracy: pick(&|r| r.optimal_accuracy),
            gtmap_auc: gt.map(|v| MeanStd::of(&v)),
        };
        Ok(EvalReport {
            meta,
            threshold_rule: rule,
            instances,
            aggregate,
            scores,
            ids,
            labels,
        })
    }

    /// `id,score,label` rows of one instance.
    pub fn scores_csv(&self, instance: usize) -> String {
        let mut out = String::from("id,score,label\n");
        for ((id, s), y) in self.ids.iter().zip(&self.scores[instance]).zip(&self.labels) {
            let _ = writeln!(out, "{id},{s:e},{y}");
        }
        out
    }

    /// Writes `report.json` and `scores_<k>.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        for k in 0..self.scores.len() {
            let path = dir.join(format!("scores_{k}.csv"));
            fs::write(&path, self.scores_csv(k)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Reads an `id,score,label` file back.
pub fn read_scores_csv(path: &Path) -> Result<(Vec<String>, Vec<f64>, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.rsplitn(3, ',').collect();
        let [label, score, id] = parts[..] else {
            return Err(Error::format(path, format!("line {}: expected id,score,label", i + 1)));
        };
        let bad = |what: &str| Error::format(path, format!("line {}: bad {what}", i + 1));
        ids.push(id.to_string());
        scores.push(score.parse().map_err(|_| bad("score"))?);
        labels.push(label.parse().map_err(|_| bad("label"))?);
    }
    Ok((ids, scores, labels))
}

/// Scores `test` with every model and aggregates the results.
pub fn evaluate_experiment(
    models: &[&dyn ImageScorer],
    test: &[Sample],
    stats: &ChannelStats,
    meta: ReportMeta,
    rule: ThresholdRule,
    with_gtmap: bool,
) -> Result<EvalReport> {
    let labels: Vec<u8> = test.iter().map(|s| s.label.as_u8()).collect();
    let ids = test.iter().map(|s| s.id.clone()).collect();
    let mut scores = Vec::with_capacity(models.len());
    let mut gtmap = Vec::with_capacity(models.len());
    let has_maps = test.iter().all(|s| s.map.is_some() || s.label == Label::Normal);
    for m in models {
        scores.push(score_samples(*m, test, stats)?);
        gtmap.push(if with_gtmap && has_maps {
            scorer_gtmap_auc(*m, test, stats)?
        } else {
            None
        });
    }
    EvalReport::from_scores(meta, rule, ids, labels, scores, gtmap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::test_rng;
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::Rng;

    fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    num += if a > b {
                        1.0
                    } else if a == b {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / pairs
    }

    fn random_instance(rng: &mut impl Rng, n: usize, levels: u32) -> (Vec<f64>, Vec<u8>) {
        loop {
            let s: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..levels)) / 3.0).collect();
            let y: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
            if y.contains(&0) && y.contains(&1) {
                return (s, y);
            }
        }
    }

    #[test]
    fn perfect_separation() {
        let roc = roc_curve(&[1.0, 2.0], &[0, 1]).unwrap();
        assert_eq!(roc.fpr, vec![0.0, 0.0, 1.0]);
        assert_eq!(roc.tpr, vec![0.0, 1.0, 1.0]);
        assert_eq!(auc(&roc), 1.0);
        let (t, acc) = optimal_threshold(&roc);
        assert_eq!((t, acc), (2.0, 1.0));
    }

    #[test]
    fn all_tied() {
        let roc = roc_curve(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap();
        assert_eq!(roc.len(), 2);
        assert_eq!((roc.fpr[1], roc.tpr[1]), (1.0, 1.0));
        assert_eq!(auc(&roc), 0.5);
    }

    #[test]
    fn single_class_rejected() {
        assert!(roc_curve(&[1.0, 2.0], &[1, 1]).is_err());
        assert!(roc_curve(&[1.0, 2.0], &[0, 0]).is_err());
        assert!(roc_curve(&[1.0], &[0, 1]).is_err());
    }

    #[test]
    fn counts_match_recount() {
        let mut rng = test_rng(3);
        let (s, y) = random_instance(&mut rng, 20, 8);
        let roc = roc_curve(&s, &y).unwrap();
        for i in 0..roc.len() {
            let t = roc.thresholds[i];
            let count = |pred: bool, lab: u8| s.iter().zip(&y).filter(|(&v, &l)| (v >= t) == pred && l == lab).count();
            assert_eq!(roc.tp[i], count(true, 1));
            assert_eq!(roc.fp[i], count(true, 0));
            assert_eq!(roc.tn[i], count(false, 0));
            assert_eq!(roc.fn_[i], count(false, 1));
        }
    }

    #[test]
    fn symmetric_midpoint() {
        // Vertices (0,0), (0.5,0.5), (1,1): the midpoint is nearest to (0,1).
        let roc = roc_curve(&[3.0, 3.0, 1.0, 1.0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(roc.fpr, vec![0.0, 0.5, 1.0]);
        let (t, acc) = optimal_threshold(&roc);
        assert_eq!((t, acc), (3.0, 0.5));
    }

    #[test]
    fn trapezoid_equals_pairwise() {
        let mut rng = test_rng(4);
        for trial in 0..250 {
            let n = rng.gen_range(2..=50);
            let (s, y) = random_instance(&mut rng, n, if trial % 2 == 0 { 5 } else { 1000 });
            let a = auc_of(&s, &y).unwrap();
            assert!((a - pairwise(&s, &y)).abs() < 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn optimal_vertex_and_accuracy() {
        let mut rng = test_rng(5);
        for _ in 0..50 {
            let (s, y) = random_instance(&mut rng, 30, 12);
            let roc = roc_curve(&s, &y).unwrap();
            let op = optimal_threshold_with(&roc, ThresholdRule::TopLeft);
            let d = op.fpr.hypot(1.0 - op.tpr);
            assert!((0..roc.len()).all(|i| d <= roc.fpr[i].hypot(1.0 - roc.tpr[i])));
            let correct = s.iter().zip(&y).filter(|(&v, &l)| (v >= op.threshold) == (l == 1)).count();
            assert_eq!(op.accuracy, correct as f64 / s.len() as f64);
            let yj = optimal_threshold_with(&roc, ThresholdRule::Youden);
            assert!((0..roc.len()).all(|i| yj.tpr - yj.fpr >= roc.tpr[i] - roc.fpr[i]));
        }
    }

    #[test]
    fn tie_break_prefers_lower_fpr() {
        // (0, 0.5) and (0.5, 1) are equally far from (0, 1).
        let roc = roc_curve(&[4.0, 3.0, 2.0, 1.0], &[1, 0, 1, 0]).unwrap();
        let op = optimal_threshold_with(&roc, ThresholdRule::TopLeft);
        assert_eq!((op.fpr, op.tpr, op.threshold), (0.0, 0.5, 4.0));
    }

    #[test]
    fn gtmap_cases() {
        let s = Shape::new(1, 1, 4, 4);
        let mut rng = test_rng(6);
        let maps: Vec<Raster> = (0..3)
            .map(|_| Raster::from_fn(s, |_, _, _, _| f64::from(rng.gen_bool(0.3))))
            .collect();
        assert_eq!(gtmap_auc(&maps, &maps).unwrap(), 1.0);
        let flat: Vec<Raster> = (0..3).map(|_| Raster::filled(s, 0.7)).collect();
        assert_eq!(gtmap_auc(&flat, &maps).unwrap(), 0.5);
        let hms: Vec<Raster> = (0..3).map(|_| Raster::from_fn(s, |_, _, _, _| rng.gen_range(0..6) as f64)).collect();
        let all_s: Vec<f64> = hms.iter().flat_map(|h| h.data().to_vec()).collect();
        let all_y: Vec<u8> = maps.iter().flat_map(|m| m.data().iter().map(|&v| v as u8).collect::<Vec<_>>()).collect();
        assert!((gtmap_auc(&hms, &maps).unwrap() - pairwise(&all_s, &all_y)).abs() < 1e-12);
        assert!(gtmap_auc(&flat, &flat.iter().map(|m| m.scale(0.0)).collect::<Vec<_>>()).is_err());
    }

    #[test]
    fn report_aggregates() {
        let labels = vec![0, 0, 1, 1];
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let perfect = vec![0.1, 0.2, 0.8, 0.9];
        let r = EvalReport::from_scores(
            ReportMeta::default(),
            ThresholdRule::TopLeft,
            ids.clone(),
            labels.clone(),
            vec![perfect.clone(); 5],
            vec![],
        )
        .unwrap();
        assert_eq!(r.aggregate.auc, MeanStd { mean: 1.0, std: 0.0 });
        assert_eq!(r.instances.len(), 5);
        let mixed = vec![perfect, vec![0.9, 0.2, 0.8, 0.1]];
        let r = EvalReport::from_scores(ReportMeta::default(), ThresholdRule::TopLeft, ids, labels, mixed, vec![])
            .unwrap();
        let aucs: Vec<f64> = r.instances.iter().map(|i| i.auc).collect();
        assert_eq!(r.aggregate.auc.mean, (aucs[0] + aucs[1]) / 2.0);
        assert!((r.aggregate.auc.std - (aucs[0] - aucs[1]).abs() / 2f64.sqrt()).abs() < 1e-15);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let (ids, s, y) = read_scores_csv(&dir.path().join("scores_1.csv")).unwrap();
        assert_eq!(ids, r.ids);
        assert_eq!(auc_of(&s, &y).unwrap(), r.instances[1].auc);
        let back: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back["instances"][1]["auc"].as_f64().unwrap(), aucs[1]);
    }

    proptest! {
        #[test]
        fn monotone_transforms_keep_auc(seed in 0u64..100_000) {
            let mut rng = test_rng(seed);
            let (s, y) = random_instance(&mut rng, 25, 7);
            let base = auc_of(&s, &y).unwrap();
            let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let a: Vec<f64> = s.iter().map(|v| 3.0 * v - 2.0).collect();
            prop_assert!((auc_of(&e, &y).unwrap() - base).abs() < 1e-12);
            prop_assert!((auc_of(&a, &y).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn roc_invariants(seed in 0u64..100_000) {
            let mut rng = test_rng(seed);
            let (s, y) = random_instance(&mut rng, 15, 4);
            let roc = roc_curve(&s, &y).unwrap();
            prop_assert_eq!((roc.fpr[0], roc.tpr[0]), (0.0, 0.0));
            prop_assert_eq!((*roc.fpr.last().unwrap(), *roc.tpr.last().unwrap()), (1.0, 1.0));
            prop_assert!(roc.fpr.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(roc.tpr.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(roc.thresholds.windows(2).all(|w| w[0] > w[1]));
        }
    }
}
