//! `fcdd` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use fcdd::checks::{gradient_suite, SUITE_EPS, SUITE_TOLERANCE};
use fcdd::data::{load_dataset, synth_generate, write_dataset, DatasetSplit, SynthConfig};
use fcdd::eval::{evaluate_experiment, EvalReport, FcddScorer, ImageScorer, ReportMeta, ThresholdRule};
use fcdd::model::{read_checkpoint_file, AeConfig, Autoencoder, Network, NetworkConfig};
use fcdd::pipeline::{inspect, Threshold};
use fcdd::trainer::{fit_autoencoders, stats_for, train_with, EpochRecord, TrainConfig, TrainLog, TrainMode};

#[derive(Parser)]
#[command(name = "fcdd", version, about = "One-class anomaly detection for insulator disk inspection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic blob dataset into a directory.
    Synth(ConfigArgs),
    /// Train model instances and save checkpoints and logs.
    Train(ConfigArgs),
    /// Evaluate saved checkpoints on the test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory (default: <out>/checkpoints).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Score the disk boxes of one image.
    Inspect(InspectArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate with increasing numbers of training anomalies.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,5,10")]
        anomalies: Vec<usize>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; missing sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=5`. Values are
    /// parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Dataset directory (`data`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (`out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training mode (`train.mode`).
    #[arg(long)]
    mode: Option<String>,
    /// Epochs (`train.epochs`).
    #[arg(long)]
    epochs: Option<usize>,
    /// Number of instances (`train.n_instances`).
    #[arg(long)]
    instances: Option<usize>,
    /// Base seed (`train.base_seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    boxes: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Decision threshold on the disk score.
    #[arg(long, conflicts_with = "threshold_from", required_unless_present = "threshold_from")]
    threshold: Option<f64>,
    /// Take the optimal threshold of an evaluation report.
    #[arg(long)]
    threshold_from: Option<PathBuf>,
    /// Report instance to take the threshold from.
    #[arg(long, default_value_t = 0)]
    instance: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalOptions {
    #[serde(default)]
    threshold_rule: ThresholdRule,
    /// Also compute the pixel-level AUC when ground truth is available.
    #[serde(default = "yes")]
    gtmap: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    /// Dataset directory; when absent the synthetic set is generated in memory.
    data: Option<PathBuf>,
    synth: SynthConfig,
    network: NetworkConfig,
    /// Train the autoencoder baseline instead of a one-class network.
    autoencoder: Option<AeConfig>,
    train: TrainConfig,
    eval: EvalOptions,
    out: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data: None,
            synth: SynthConfig::desk(),
            network: NetworkConfig::desk(),
            autoencoder: None,
            train: TrainConfig::desk(TrainMode::SsModified),
            eval: EvalOptions {
                threshold_rule: ThresholdRule::TopLeft,
                gtmap: true,
            },
            out: PathBuf::from("runs"),
        }
    }
}

/// Recursively overlays `top` on `base`; non-object values replace.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        if key.is_empty() {
            bail!("empty segment in config path '{path}'");
        }
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("config path '{path}': '{}' is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        cur = obj.entry(*key).or_insert(Value::Null);
    }
    unreachable!("split yields at least one segment")
}

fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut value = serde_json::to_value(Config::default())?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let user: Value =
                serde_json::from_str(&text).with_context(|| format!("config {} is not valid JSON", path.display()))?;
            merge(&mut value, user);
        }
        let mut overrides: Vec<(String, Value)> = Vec::new();
        if let Some(d) = &self.data {
            overrides.push(("data".into(), Value::String(d.display().to_string())));
        }
        if let Some(o) = &self.out {
            overrides.push(("out".into(), Value::String(o.display().to_string())));
        }
        if let Some(m) = &self.mode {
            overrides.push(("train.mode".into(), Value::String(m.clone())));
        }
        if let Some(e) = self.epochs {
            overrides.push(("train.epochs".into(), e.into()));
        }
        if let Some(n) = self.instances {
            overrides.push(("train.n_instances".into(), n.into()));
        }
        if let Some(s) = self.seed {
            overrides.push(("train.base_seed".into(), s.into()));
        }
        for item in &self.set {
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects PATH=VALUE, got '{item}'"))?;
            overrides.push((path.trim().to_string(), parse_value(raw)));
        }
        for (path, v) in overrides {
            set_path(&mut value, &path, v)?;
        }
        let config: Config = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            anyhow!("config field '{path}': {}", e.into_inner())
        })?;
        config.train.validate().context("config field 'train'")?;
        Ok(config)
    }
}

fn load_split(config: &Config) -> Result<(DatasetSplit, String)> {
    match &config.data {
        Some(dir) => {
            let split = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
            Ok((split, dir.display().to_string()))
        }
        None => {
            let s = &config.synth;
            let id = format!("synthetic(seed={}, {}x{}x{})", s.seed, s.channels, s.height, s.width);
            Ok((synth_generate(s)?, id))
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn progress(record: &EpochRecord) {
    eprintln!(
        "instance {} epoch {:>3}  loss {:.6}  ({:.2}s)",
        record.instance, record.epoch, record.mean_loss, record.seconds
    );
}

enum Models {
    Fcdd(Vec<Network>),
    Ae(Vec<Autoencoder>),
}

impl Models {
    fn scorers(&self) -> Result<Vec<Box<dyn ImageScorer + '_>>> {
        Ok(match self {
            Models::Fcdd(nets) => nets
                .iter()
                .map(|n| FcddScorer::new(n).map(|s| Box::new(s) as Box<dyn ImageScorer>))
                .collect::<fcdd::Result<_>>()?,
            Models::Ae(aes) => aes.iter().map(|a| Box::new(a.clone()) as Box<dyn ImageScorer>).collect(),
        })
    }
}

fn train_models(config: &Config, split: &DatasetSplit, checkpoint_dir: Option<PathBuf>) -> Result<(Models, Vec<TrainLog>)> {
    let mut cfg = config.train.clone();
    cfg.checkpoint_dir = checkpoint_dir;
    let mut hook = progress;
    match &config.autoencoder {
        Some(ae) => {
            let normals: Vec<_> = split.train.iter().filter(|s| !s.label.is_anomalous()).collect();
            let stats = stats_for(&split.stats, ae.input)?;
            let out = fit_autoencoders(&normals, &stats, ae, &cfg, &mut hook)?;
            let (m, logs) = out.into_iter().unzip();
            Ok((Models::Ae(m), logs))
        }
        None => {
            let out = train_with(split, &config.network, &cfg, &mut hook)?;
            let (m, logs) = out.into_iter().unzip();
            Ok((Models::Fcdd(m), logs))
        }
    }
}

fn model_name(config: &Config) -> String {
    if config.autoencoder.is_some() {
        "autoencoder".into()
    } else {
        config.train.mode.to_string()
    }
}

fn evaluate(config: &Config, models: &Models, split: &DatasetSplit, dataset: String) -> Result<EvalReport> {
    let scorers = models.scorers()?;
    let refs: Vec<&dyn ImageScorer> = scorers.iter().map(|b| b.as_ref()).collect();
    let meta = ReportMeta {
        mode: model_name(config),
        gamma: (config.autoencoder.is_none() && config.train.mode == TrainMode::SsFocal).then_some(config.train.gamma),
        dataset,
        split: Some(split.summary()),
    };
    Ok(evaluate_experiment(&refs, &split.test, &split.stats, meta, config.eval.threshold_rule, config.eval.gtmap)?)
}

fn print_report(report: &EvalReport) {
    for r in &report.instances {
        let gt = r.gtmap_auc.map(|g| format!("  gtmap {g:.4}")).unwrap_or_default();
        println!(
            "instance {}: auc {:.4}  threshold {:.6}  accuracy {:.4}{gt}",
            r.instance, r.auc, r.optimal_threshold, r.optimal_accuracy
        );
    }
    let a = &report.aggregate;
    println!("auc {:.4} ± {:.4}  accuracy {:.4} ± {:.4}", a.auc.mean, a.auc.std, a.optimal_accuracy.mean, a.optimal_accuracy.std);
}

fn load_models(config: &Config, dir: &Path) -> Result<Models> {
    let prefix = if config.autoencoder.is_some() { "ae_instance_" } else { "instance_" };
    let mut found: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading checkpoints in {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(k) = name.strip_prefix(prefix).and_then(|r| r.strip_suffix(".occm")) {
            if let Ok(k) = k.parse() {
                found.push((k, path));
            }
        }
    }
    if found.is_empty() {
        bail!("no {prefix}*.occm checkpoints in {}", dir.display());
    }
    found.sort();
    Ok(if config.autoencoder.is_some() {
        Models::Ae(found.iter().map(|(_, p)| Autoencoder::load(p)).collect::<fcdd::Result<_>>()?)
    } else {
        Models::Fcdd(found.iter().map(|(_, p)| read_checkpoint_file(p)).collect::<fcdd::Result<_>>()?)
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(args) => {
            let config = args.resolve()?;
            let split = synth_generate(&config.synth)?;
            write_dataset(&split, &config.out, Some(config.synth.seed))?;
            println!("{}", split.summary());
            println!("wrote {}", config.out.display());
        }
        Command::Train(args) => {
            let config = args.resolve()?;
            let (split, _) = load_split(&config)?;
            eprintln!("{}", split.summary());
            write_json(&config.out.join("config.json"), &config)?;
            let (_, logs) = train_models(&config, &split, Some(config.out.join("checkpoints")))?;
            let log_path = config.out.join("train_log.jsonl");
            TrainLog::append_jsonl(&logs, &log_path)?;
            println!("wrote {} checkpoints to {}", logs.len(), config.out.join("checkpoints").display());
        }
        Command::Eval { config: args, checkpoints } => {
            let config = args.resolve()?;
            let (split, dataset) = load_split(&config)?;
            let dir = checkpoints.unwrap_or_else(|| config.out.join("checkpoints"));
            let models = load_models(&config, &dir)?;
            let report = evaluate(&config, &models, &split, dataset)?;
            report.write(&config.out.join("eval"))?;
            print_report(&report);
        }
        Command::Inspect(a) => {
            let threshold = match (a.threshold, &a.threshold_from) {
                (Some(t), _) => Threshold::user(t),
                (None, Some(p)) => Threshold::from_report(p, a.instance)?,
                (None, None) => bail!("inspect needs --threshold or --threshold-from"),
            };
            let report = inspect(&a.image, &a.boxes, &a.checkpoint, threshold, &a.out)?;
            let s = report.summary;
            println!(
                "{}: {} disks, {} normal, {} anomalous, {} skipped",
                report.image_id, s.disks, s.normal, s.anomalous, s.skipped
            );
        }
        Command::Gradcheck { instances, seed } => {
            let results = gradient_suite(instances, seed)?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed();
                println!(
                    "{:<4} {:<32} max rel err {:.3e}  ({} instances, {} redrawn, {:.2}s)",
                    if r.passed() { "ok" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.instances,
                    r.rejected,
                    r.seconds
                );
            }
            println!("eps {SUITE_EPS:e}, tolerance {SUITE_TOLERANCE:e}: {}", if ok { "all passed" } else { "FAILED" });
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::Sweep { config: args, anomalies } => {
            let config = args.resolve()?;
            let (split, dataset) = load_split(&config)?;
            let available = split.train.iter().filter(|s| s.label.is_anomalous()).count();
            let mut summary = Vec::new();
            for &k in &anomalies {
                if k > available {
                    bail!("sweep asks for {k} training anomalies, dataset has {available}");
                }
                let sub = split.with_train_anomalies(k);
                eprintln!("anomalies {k}: {}", sub.summary());
                let (models, _) = train_models(&config, &sub, None)?;
                let report = evaluate(&config, &models, &sub, dataset.clone())?;
                report.write(&config.out.join(format!("anomalies_{k}")))?;
                println!("anomalies {k}: auc {:.4} ± {:.4}", report.aggregate.auc.mean, report.aggregate.auc.std);
                summary.push(serde_json::json!({
                    "anomalies": k,
                    "auc": report.aggregate.auc,
                    "instances": report.instances.iter().map(|r| r.auc).collect::<Vec<_>>(),
                }));
            }
            write_json(&config.out.join("sweep.json"), &summary)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(set: &[&str]) -> ConfigArgs {
        ConfigArgs {
            config: None,
            set: set.iter().map(|s| s.to_string()).collect(),
            data: None,
            out: None,
            mode: None,
            epochs: None,
            instances: None,
            seed: None,
        }
    }

    #[test]
    fn defaults_resolve() {
        let c = args(&[]).resolve().unwrap();
        assert_eq!(c.train.mode, TrainMode::SsModified);
        assert_eq!(c.network, NetworkConfig::desk());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut a = args(&["train.gamma=0.4", "synth.seed=9", "eval.threshold_rule=youden"]);
        a.mode = Some("ss_focal".into());
        a.epochs = Some(3);
        let c = a.resolve().unwrap();
        assert_eq!((c.train.mode, c.train.gamma, c.train.epochs), (TrainMode::SsFocal, 0.4, 3));
        assert_eq!(c.synth.seed, 9);
        assert_eq!(c.eval.threshold_rule, ThresholdRule::Youden);
    }

    #[test]
    fn diagnostics_name_the_field() {
        let e = args(&["train.epochs=\"many\""]).resolve().unwrap_err().to_string();
        assert!(e.contains("train.epochs"), "{e}");
        let e = args(&["train.epoch=3"]).resolve().unwrap_err().to_string();
        assert!(e.contains("epoch"), "{e}");
        let e = args(&["train.mode=fancy"]).resolve().unwrap_err().to_string();
        assert!(e.contains("train.mode"), "{e}");
        assert!(args(&["noequals"]).resolve().is_err());
        assert!(args(&["train.lr=-1"]).resolve().is_err());
    }

    #[test]
    fn merge_keeps_unmentioned_keys() {
        let mut base = serde_json::json!({"a": {"b": 1, "c": 2}, "d": [1, 2]});
        merge(&mut base, serde_json::json!({"a": {"b": 5}, "d": [3]}));
        assert_eq!(base, serde_json::json!({"a": {"b": 5, "c": 2}, "d": [3]}));
    }
}
