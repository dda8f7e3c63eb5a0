//! Declarative experiment runner: config parsing, seeded repetitions,
//! result persistence and chart emission.
//!
//! Configs are flat `key = value` text with a closed key list. Identical
//! (config, seed) pairs produce bit-identical metrics and a bit-identical
//! summary.json; wall-clock numbers live in a separate runtimes file so
//! they cannot break that.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::data::{
    build_task_stream, load_idx_dataset, make_blobs, mix_seed, LabeledDataset, Scenario,
    TaskStream, DATA_DIR_ENV,
};
use crate::error::{Error, Result};
use crate::metrics::{compute_acc, compute_bwt, evaluate, AccuracyMatrix};
use crate::model::{expand_head, init_mlp, MlpSpec, ParamVector};
use crate::reconstruction::{
    recl_train_task, reconstruct, reconstruction_count, LossTrace, ReconHyperparams, ReconOutcome,
};
use crate::strategies::{build_strategy, train_task, StrategyKind, StrategyParams, TaskContext, TrainConfig};
use crate::tuning::{
    tune_naive, tune_supervised, tune_unsupervised, ReferenceBuffer, SearchSpace, TrialRecord,
};

const SALT_STREAM: u64 = 0x20;
const SALT_INIT: u64 = 0x21;
const SALT_EXPAND: u64 = 0x22;
const SALT_TUNE: u64 = 0x23;
const SALT_RECON: u64 = 0x24;
const SALT_REF: u64 = 0x25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TuningKind {
    Naive,
    Unsupervised,
    Supervised,
}

impl TuningKind {
    pub fn parse(s: &str) -> Option<TuningKind> {
        match s {
            "naive" => Some(TuningKind::Naive),
            "unsupervised" => Some(TuningKind::Unsupervised),
            "supervised" => Some(TuningKind::Supervised),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TuningKind::Naive => "naive",
            TuningKind::Unsupervised => "unsupervised",
            TuningKind::Supervised => "supervised",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MPolicy {
    /// m = Σ of previous tasks' training sizes.
    Sum,
    /// m fixed by `recl_m_fixed`.
    Fixed,
}

impl MPolicy {
    pub fn parse(s: &str) -> Option<MPolicy> {
        match s {
            "sum" => Some(MPolicy::Sum),
            "fixed" => Some(MPolicy::Fixed),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MPolicy::Sum => "sum",
            MPolicy::Fixed => "fixed",
        }
    }
}

/// Full declarative description of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub scenario: Scenario,
    pub strategy: StrategyKind,
    pub recl: bool,
    pub tuning: TuningKind,
    pub n_tasks: usize,
    pub n_per_class: usize,
    /// Restrict to the first k classes of the source dataset (0 = all).
    pub n_classes: usize,
    pub model_hidden: Vec<usize>,
    pub first_layer_scale: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub recl_n_rec: usize,
    pub recl_m_policy: MPolicy,
    pub recl_m_fixed: usize,
    pub recl_alpha: f64,
    pub recl_lambda_min: f64,
    pub recl_sigma_x: f64,
    pub recl_lr_x: f64,
    pub recl_lr_lambda: f64,
    pub recl_n_trials: usize,
    pub recl_ref_per_class: usize,
    pub ewc_lambda: f64,
    pub er_fraction: f64,
    pub er_replay_epochs: usize,
    pub agem_patterns: usize,
    pub lwf_lambda: f64,
    pub lwf_temperature: f64,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    pub manifest: String,
    pub blobs_classes: usize,
    pub blobs_dim: usize,
    pub blobs_separation: f64,
    pub blobs_train_per_class: usize,
    pub blobs_test_per_class: usize,
    /// Blob features are rescaled so max |x| equals this before the stream
    /// mean removal (keeps the value-range prior meaningful).
    pub blobs_scale: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: String::new(),
            scenario: Scenario::Cil,
            strategy: StrategyKind::Finetune,
            recl: false,
            tuning: TuningKind::Naive,
            n_tasks: 3,
            n_per_class: 100,
            n_classes: 0,
            model_hidden: vec![100, 100],
            first_layer_scale: 1e-4,
            lr: 0.05,
            epochs: 20,
            batch: 64,
            recl_n_rec: 1000,
            recl_m_policy: MPolicy::Sum,
            recl_m_fixed: 100,
            recl_alpha: 100.0,
            recl_lambda_min: 0.1,
            recl_sigma_x: 1e-3,
            recl_lr_x: 0.01,
            recl_lr_lambda: 0.01,
            recl_n_trials: 10,
            recl_ref_per_class: 10,
            ewc_lambda: 100.0,
            er_fraction: 0.1,
            er_replay_epochs: 0,
            agem_patterns: 10,
            lwf_lambda: 1.0,
            lwf_temperature: 2.0,
            seeds: vec![0, 1, 2],
            out_dir: "out".to_string(),
            manifest: "datasets.manifest".to_string(),
            blobs_classes: 4,
            blobs_dim: 16,
            blobs_separation: 4.0,
            blobs_train_per_class: 120,
            blobs_test_per_class: 40,
            blobs_scale: 0.5,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "scenario",
    "strategy",
    "recl",
    "tuning",
    "n_tasks",
    "n_per_class",
    "n_classes",
    "model_hidden",
    "first_layer_scale",
    "lr",
    "epochs",
    "batch",
    "recl_n_rec",
    "recl_m_policy",
    "recl_m_fixed",
    "recl_alpha",
    "recl_lambda_min",
    "recl_sigma_x",
    "recl_lr_x",
    "recl_lr_lambda",
    "recl_n_trials",
    "recl_ref_per_class",
    "ewc_lambda",
    "er_fraction",
    "er_replay_epochs",
    "agem_patterns",
    "lwf_lambda",
    "lwf_temperature",
    "seeds",
    "out_dir",
    "manifest",
    "blobs_classes",
    "blobs_dim",
    "blobs_separation",
    "blobs_train_per_class",
    "blobs_test_per_class",
    "blobs_scale",
];

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut saw_dataset = false;
    let mut seen: BTreeSet<&str> = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(line_no, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        let known = KNOWN_KEYS
            .iter()
            .find(|&&k| k == key)
            .ok_or_else(|| Error::config(line_no, format!("unknown key `{key}`")))?;
        if !seen.insert(known) {
            return Err(Error::config(line_no, format!("duplicate key `{key}`")));
        }

        let bad = |what: &str| Error::config(line_no, format!("bad {what} `{value}`"));
        let parse_usize = |what: &str| value.parse::<usize>().map_err(|_| bad(what));
        let parse_f64 = |what: &str| {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(what))
        };
        let parse_pos_f64 = |what: &str| {
            parse_f64(what).and_then(|v| {
                if v > 0.0 {
                    Ok(v)
                } else {
                    Err(Error::config(line_no, format!("{what} must be positive, got {v}")))
                }
            })
        };

        match key {
            "dataset" => {
                if value != "splitmnist" && value != "blobs" {
                    return Err(Error::config(line_no, format!("unsupported dataset `{value}`")));
                }
                cfg.dataset = value.to_string();
                saw_dataset = true;
            }
            "scenario" => {
                cfg.scenario = Scenario::parse(value)
                    .ok_or_else(|| Error::config(line_no, format!("unsupported scenario `{value}`")))?;
            }
            "strategy" => {
                cfg.strategy = StrategyKind::parse(value).ok_or_else(|| {
                    Error::config(line_no, format!("unsupported strategy `{value}`"))
                })?;
            }
            "recl" => {
                cfg.recl = match value {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => return Err(bad("flag")),
                };
            }
            "tuning" => {
                cfg.tuning = TuningKind::parse(value).ok_or_else(|| {
                    Error::config(line_no, format!("unsupported tuning strategy `{value}`"))
                })?;
            }
            "n_tasks" => cfg.n_tasks = parse_usize("integer")?,
            "n_per_class" => cfg.n_per_class = parse_usize("integer")?,
            "n_classes" => cfg.n_classes = parse_usize("integer")?,
            "model_hidden" => {
                cfg.model_hidden = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|_| bad("layer list")))
                    .collect::<Result<_>>()?;
                if cfg.model_hidden.iter().any(|&h| h == 0) {
                    return Err(bad("layer list"));
                }
            }
            "first_layer_scale" => cfg.first_layer_scale = parse_pos_f64("scale")?,
            "lr" => cfg.lr = parse_pos_f64("learning rate")?,
            "epochs" => cfg.epochs = parse_usize("integer")?,
            "batch" => {
                cfg.batch = parse_usize("integer")?;
                if cfg.batch == 0 {
                    return Err(Error::config(line_no, "batch must be at least 1"));
                }
            }
            "recl_n_rec" => cfg.recl_n_rec = parse_usize("integer")?,
            "recl_m_policy" => {
                cfg.recl_m_policy = MPolicy::parse(value)
                    .ok_or_else(|| Error::config(line_no, format!("unsupported m policy `{value}`")))?;
            }
            "recl_m_fixed" => cfg.recl_m_fixed = parse_usize("integer")?,
            "recl_alpha" => cfg.recl_alpha = parse_pos_f64("alpha")?,
            "recl_lambda_min" => cfg.recl_lambda_min = parse_pos_f64("lambda_min")?,
            "recl_sigma_x" => cfg.recl_sigma_x = parse_pos_f64("sigma_x")?,
            "recl_lr_x" => cfg.recl_lr_x = parse_pos_f64("lr_x")?,
            "recl_lr_lambda" => cfg.recl_lr_lambda = parse_pos_f64("lr_lambda")?,
            "recl_n_trials" => cfg.recl_n_trials = parse_usize("integer")?,
            "recl_ref_per_class" => cfg.recl_ref_per_class = parse_usize("integer")?,
            "ewc_lambda" => cfg.ewc_lambda = parse_pos_f64("ewc_lambda")?,
            "er_fraction" => {
                let v = parse_f64("fraction")?;
                if !(v > 0.0 && v <= 1.0) {
                    return Err(Error::config(line_no, format!("er_fraction must be in (0, 1], got {v}")));
                }
                cfg.er_fraction = v;
            }
            "er_replay_epochs" => cfg.er_replay_epochs = parse_usize("integer")?,
            "agem_patterns" => cfg.agem_patterns = parse_usize("integer")?,
            "lwf_lambda" => cfg.lwf_lambda = parse_f64("lwf_lambda")?,
            "lwf_temperature" => cfg.lwf_temperature = parse_pos_f64("temperature")?,
            "seeds" => {
                cfg.seeds = value
                    .split(',')
                    .map(|s| s.trim().parse::<u64>().map_err(|_| bad("seed list")))
                    .collect::<Result<_>>()?;
            }
            "out_dir" => cfg.out_dir = value.to_string(),
            "manifest" => cfg.manifest = value.to_string(),
            "blobs_classes" => cfg.blobs_classes = parse_usize("integer")?,
            "blobs_dim" => cfg.blobs_dim = parse_usize("integer")?,
            "blobs_separation" => cfg.blobs_separation = parse_f64("separation")?,
            "blobs_train_per_class" => cfg.blobs_train_per_class = parse_usize("integer")?,
            "blobs_test_per_class" => cfg.blobs_test_per_class = parse_usize("integer")?,
            "blobs_scale" => cfg.blobs_scale = parse_pos_f64("scale")?,
            _ => unreachable!("key checked against KNOWN_KEYS"),
        }
    }

    if !saw_dataset {
        return Err(Error::config(0, "missing required key `dataset`"));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::config(0, "seeds must be non-empty"));
    }
    Ok(cfg)
}

/// Canonical textual form; parse(serialize(cfg)) == cfg.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let seeds = cfg
        .seeds
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let hidden = cfg
        .model_hidden
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let _ = writeln!(s, "dataset = {}", cfg.dataset);
    let _ = writeln!(s, "scenario = {}", cfg.scenario.as_str());
    let _ = writeln!(s, "strategy = {}", cfg.strategy.as_str());
    let _ = writeln!(s, "recl = {}", if cfg.recl { "on" } else { "off" });
    let _ = writeln!(s, "tuning = {}", cfg.tuning.as_str());
    let _ = writeln!(s, "n_tasks = {}", cfg.n_tasks);
    let _ = writeln!(s, "n_per_class = {}", cfg.n_per_class);
    let _ = writeln!(s, "n_classes = {}", cfg.n_classes);
    let _ = writeln!(s, "model_hidden = {hidden}");
    let _ = writeln!(s, "first_layer_scale = {}", cfg.first_layer_scale);
    let _ = writeln!(s, "lr = {}", cfg.lr);
    let _ = writeln!(s, "epochs = {}", cfg.epochs);
    let _ = writeln!(s, "batch = {}", cfg.batch);
    let _ = writeln!(s, "recl_n_rec = {}", cfg.recl_n_rec);
    let _ = writeln!(s, "recl_m_policy = {}", cfg.recl_m_policy.as_str());
    let _ = writeln!(s, "recl_m_fixed = {}", cfg.recl_m_fixed);
    let _ = writeln!(s, "recl_alpha = {}", cfg.recl_alpha);
    let _ = writeln!(s, "recl_lambda_min = {}", cfg.recl_lambda_min);
    let _ = writeln!(s, "recl_sigma_x = {}", cfg.recl_sigma_x);
    let _ = writeln!(s, "recl_lr_x = {}", cfg.recl_lr_x);
    let _ = writeln!(s, "recl_lr_lambda = {}", cfg.recl_lr_lambda);
    let _ = writeln!(s, "recl_n_trials = {}", cfg.recl_n_trials);
    let _ = writeln!(s, "recl_ref_per_class = {}", cfg.recl_ref_per_class);
    let _ = writeln!(s, "ewc_lambda = {}", cfg.ewc_lambda);
    let _ = writeln!(s, "er_fraction = {}", cfg.er_fraction);
    let _ = writeln!(s, "er_replay_epochs = {}", cfg.er_replay_epochs);
    let _ = writeln!(s, "agem_patterns = {}", cfg.agem_patterns);
    let _ = writeln!(s, "lwf_lambda = {}", cfg.lwf_lambda);
    let _ = writeln!(s, "lwf_temperature = {}", cfg.lwf_temperature);
    let _ = writeln!(s, "seeds = {seeds}");
    let _ = writeln!(s, "out_dir = {}", cfg.out_dir);
    let _ = writeln!(s, "manifest = {}", cfg.manifest);
    let _ = writeln!(s, "blobs_classes = {}", cfg.blobs_classes);
    let _ = writeln!(s, "blobs_dim = {}", cfg.blobs_dim);
    let _ = writeln!(s, "blobs_separation = {}", cfg.blobs_separation);
    let _ = writeln!(s, "blobs_train_per_class = {}", cfg.blobs_train_per_class);
    let _ = writeln!(s, "blobs_test_per_class = {}", cfg.blobs_test_per_class);
    let _ = writeln!(s, "blobs_scale = {}", cfg.blobs_scale);
    s
}

/// SHA-256 of the canonical serialization; stable across machines.
pub fn config_fingerprint(cfg: &ExperimentConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serialize_config(cfg).as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, serde::Serialize)]
pub struct SeedRun {
    pub seed: u64,
    #[serde(skip)]
    pub matrix: AccuracyMatrix,
    pub final_acc: f64,
    pub final_bwt: Option<f64>,
    #[serde(skip)]
    pub train_seconds: f64,
    #[serde(skip)]
    pub recon_seconds: f64,
    #[serde(skip)]
    pub tuning_trials: Vec<(usize, Vec<TrialRecord>)>,
    #[serde(skip)]
    pub recon_traces: Vec<(usize, Vec<LossTrace>)>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub fingerprint: String,
    pub seed_runs: Vec<SeedRun>,
    pub failures: Vec<(u64, String)>,
}

impl RunResult {
    pub fn acc_mean(&self) -> Option<f64> {
        mean(self.seed_runs.iter().map(|r| r.final_acc))
    }

    pub fn acc_std(&self) -> Option<f64> {
        std_dev(self.seed_runs.iter().map(|r| r.final_acc))
    }

    pub fn bwt_mean(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.seed_runs.iter().map(|r| r.final_bwt).collect();
        vals.and_then(|v| mean(v.into_iter()))
    }

    pub fn bwt_std(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.seed_runs.iter().map(|r| r.final_bwt).collect();
        vals.and_then(|v| std_dev(v.into_iter()))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn std_dev(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
}

/// Resolve and load the configured dataset pair (train, test).
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = match cfg.dataset.as_str() {
        "blobs" => {
            let train = make_blobs(
                cfg.blobs_train_per_class,
                cfg.blobs_classes,
                cfg.blobs_dim,
                cfg.blobs_separation,
                0xB10B,
            )?;
            let test = make_blobs(
                cfg.blobs_test_per_class,
                cfg.blobs_classes,
                cfg.blobs_dim,
                cfg.blobs_separation,
                0xB10C,
            )?;
            let maxabs = train
                .features()
                .data()
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let rescale = |ds: &LabeledDataset| -> Result<LabeledDataset> {
                LabeledDataset::new(
                    ds.features().scale(cfg.blobs_scale / maxabs),
                    ds.labels().to_vec(),
                )
            };
            (rescale(&train)?, rescale(&test)?)
        }
        "splitmnist" => {
            let manifest = resolve_manifest_path(&cfg.manifest);
            load_idx_dataset("splitmnist", &manifest)?
        }
        other => return Err(Error::config(0, format!("unsupported dataset `{other}`"))),
    };
    if cfg.n_classes == 0 {
        return Ok((train, test));
    }
    let restrict = |ds: &LabeledDataset| -> Result<LabeledDataset> {
        let idx: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.labels()[i] < cfg.n_classes)
            .collect();
        ds.subset(&idx)
    };
    Ok((restrict(&train)?, restrict(&test)?))
}

fn resolve_manifest_path(manifest: &str) -> PathBuf {
    let p = Path::new(manifest);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var(DATA_DIR_ENV) {
        Ok(dir) if !dir.is_empty() => Path::new(&dir).join(p),
        _ => p.to_path_buf(),
    }
}

/// Run every seed; per-seed failures are recorded, not fatal.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    let fingerprint = config_fingerprint(cfg);
    let (train, test) = load_dataset(cfg)?;
    let mut seed_runs = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        match run_seed(cfg, &train, &test, seed) {
            Ok(run) => seed_runs.push(run),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    Ok(RunResult {
        config: cfg.clone(),
        fingerprint,
        seed_runs,
        failures,
    })
}

fn initial_head_size(stream: &TaskStream) -> usize {
    stream.tasks[0].original_classes.len()
}

fn run_seed(
    cfg: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    seed: u64,
) -> Result<SeedRun> {
    let stream = build_task_stream(
        train,
        test,
        cfg.scenario,
        cfg.n_tasks,
        cfg.n_per_class,
        mix_seed(seed, SALT_STREAM),
    )?;

    let mut layer_sizes = vec![train.dim()];
    layer_sizes.extend_from_slice(&cfg.model_hidden);
    layer_sizes.push(initial_head_size(&stream));
    let spec = MlpSpec::new(layer_sizes, cfg.first_layer_scale)?;
    let mut model = init_mlp(&spec, mix_seed(seed, SALT_INIT));

    let strategy_params = StrategyParams {
        ewc_lambda: cfg.ewc_lambda,
        er_fraction: cfg.er_fraction,
        er_replay_epochs: cfg.er_replay_epochs,
        agem_patterns: cfg.agem_patterns,
        lwf_lambda: cfg.lwf_lambda,
        lwf_temperature: cfg.lwf_temperature,
    };
    let mut strategy = build_strategy(cfg.strategy, &strategy_params);
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch,
    };

    let mut matrix = AccuracyMatrix::new();
    let mut prev_counts: Vec<usize> = Vec::new();
    let mut ref_buffer = ReferenceBuffer::new(cfg.recl_ref_per_class);
    let mut train_seconds = 0.0;
    let mut recon_seconds = 0.0;
    let mut tuning_trials = Vec::new();
    let mut recon_traces = Vec::new();

    for (t, task) in stream.tasks.iter().enumerate() {
        let ctx = TaskContext {
            task_index: t,
            scenario: cfg.scenario,
            seed,
        };

        if cfg.recl && t > 0 {
            // Step 1 against the frozen pre-task parameters
            let m = match cfg.recl_m_policy {
                MPolicy::Sum => reconstruction_count(&prev_counts),
                MPolicy::Fixed => cfg.recl_m_fixed,
            }
            .max(1);
            let base_hp = ReconHyperparams {
                lambda_min: cfg.recl_lambda_min,
                sigma_x: cfg.recl_sigma_x,
                lr_x: cfg.recl_lr_x,
                lr_lambda: cfg.recl_lr_lambda,
                n_rec: cfg.recl_n_rec,
                m,
                alpha: cfg.recl_alpha,
            };
            let targets: Vec<usize> = (0..model.n_classes()).collect();
            let tune_seed = mix_seed(mix_seed(seed, SALT_TUNE), t as u64);

            let recon_start = Instant::now();
            let (hp, precomputed) = match cfg.tuning {
                TuningKind::Naive => {
                    let hp = tune_naive(&base_hp);
                    let outcome = reconstruct(
                        &model,
                        &hp,
                        &targets,
                        mix_seed(mix_seed(seed, SALT_RECON), t as u64),
                    )?;
                    (hp, Some(outcome))
                }
                TuningKind::Unsupervised => {
                    let out = tune_unsupervised(
                        &model,
                        &SearchSpace::default(),
                        cfg.recl_n_trials,
                        &base_hp,
                        &targets,
                        tune_seed,
                    )?;
                    tuning_trials.push((t, out.trials.clone()));
                    resolve_tuning(out, &model, &targets, seed, t)?
                }
                TuningKind::Supervised => {
                    let out = tune_supervised(
                        &model,
                        &ref_buffer,
                        &SearchSpace::default(),
                        cfg.recl_n_trials,
                        &base_hp,
                        &targets,
                        &stream.normalization_mean,
                        tune_seed,
                    )?;
                    tuning_trials.push((t, out.trials.clone()));
                    resolve_tuning(out, &model, &targets, seed, t)?
                }
            };
            recon_seconds += recon_start.elapsed().as_secs_f64();
            if let Some(outcome) = &precomputed {
                recon_traces.push((t, outcome.trace.clone()));
            }

            let new_classes = task.original_classes.len();
            let train_start = Instant::now();
            let (updated, _) = recl_train_task(
                &model,
                task,
                new_classes,
                strategy.as_mut(),
                &train_cfg,
                &ctx,
                &hp,
                precomputed,
            )?;
            train_seconds += train_start.elapsed().as_secs_f64();
            model = updated;
        } else {
            if cfg.scenario == Scenario::Cil && t > 0 {
                model = expand_head(
                    &model,
                    task.original_classes.len(),
                    mix_seed(mix_seed(seed, SALT_EXPAND), t as u64),
                )?;
            }
            let train_start = Instant::now();
            model = train_task(&model, &task.train, strategy.as_mut(), &train_cfg, &ctx)?;
            train_seconds += train_start.elapsed().as_secs_f64();
        }

        for (e, past) in stream.tasks.iter().enumerate().take(t + 1) {
            let acc = evaluate(&model, &past.test)?;
            matrix.record(t, e, acc)?;
        }
        prev_counts.push(task.train.len());
        if cfg.tuning == TuningKind::Supervised {
            ref_buffer.push_task(&task.train, mix_seed(mix_seed(seed, SALT_REF), t as u64))?;
        }
    }

    let last = cfg.n_tasks - 1;
    let final_acc = compute_acc(&matrix, last)?;
    let final_bwt = if cfg.n_tasks >= 2 {
        Some(compute_bwt(&matrix, last)?)
    } else {
        None
    };

    Ok(SeedRun {
        seed,
        matrix,
        final_acc,
        final_bwt,
        train_seconds,
        recon_seconds,
        tuning_trials,
        recon_traces,
    })
}

/// A tuning outcome either carries the winning reconstruction or fell back
/// to the defaults, in which case Step 1 still has to run.
fn resolve_tuning(
    out: crate::tuning::TuningOutcome,
    model: &ParamVector,
    targets: &[usize],
    seed: u64,
    task: usize,
) -> Result<(ReconHyperparams, Option<ReconOutcome>)> {
    if let Some(outcome) = out.outcome {
        return Ok((out.hp, Some(outcome)));
    }
    let outcome = reconstruct(
        model,
        &out.hp,
        targets,
        mix_seed(mix_seed(seed, SALT_RECON), task as u64),
    )?;
    Ok((out.hp, Some(outcome)))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ConfigSummary {
    pub fingerprint: String,
    pub dataset: String,
    pub scenario: String,
    pub strategy: String,
    pub recl: bool,
    pub tuning: String,
    pub seeds: Vec<u64>,
    /// Percentage points, matching the usual reporting convention.
    pub acc_mean: Option<f64>,
    pub acc_std: Option<f64>,
    pub bwt_mean: Option<f64>,
    pub bwt_std: Option<f64>,
    pub failed_seeds: Vec<u64>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SummaryFile {
    pub configs: Vec<ConfigSummary>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RuntimeEntry {
    pub fingerprint: String,
    pub seed: u64,
    pub train_seconds: f64,
    pub recon_seconds: f64,
}

pub fn summarize(results: &[RunResult]) -> SummaryFile {
    let configs = results
        .iter()
        .map(|r| ConfigSummary {
            fingerprint: r.fingerprint.clone(),
            dataset: r.config.dataset.clone(),
            scenario: r.config.scenario.as_str().to_string(),
            strategy: r.config.strategy.as_str().to_string(),
            recl: r.config.recl,
            tuning: r.config.tuning.as_str().to_string(),
            seeds: r.seed_runs.iter().map(|s| s.seed).collect(),
            acc_mean: r.acc_mean().map(|v| v * 100.0),
            acc_std: r.acc_std().map(|v| v * 100.0),
            bwt_mean: r.bwt_mean().map(|v| v * 100.0),
            bwt_std: r.bwt_std().map(|v| v * 100.0),
            failed_seeds: r.failures.iter().map(|(s, _)| *s).collect(),
        })
        .collect();
    SummaryFile { configs }
}

/// Write results.csv, summary.json, runtimes.json and (when tuning ran)
/// tuning_log.csv under `dir`. Returns the paths written.
pub fn emit_results(results: &[RunResult], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut written = Vec::new();

    // results.csv: one row per accuracy-matrix entry, 1-based task indices
    let csv_path = dir.join("results.csv");
    {
        let mut w = csv::Writer::from_path(&csv_path)
            .map_err(|e| Error::io(csv_path.display().to_string(), std::io::Error::other(e)))?;
        w.write_record([
            "config_fingerprint",
            "strategy",
            "recl",
            "tuning",
            "seed",
            "T",
            "tau",
            "acc",
        ])
        .map_err(|e| Error::io(csv_path.display().to_string(), std::io::Error::other(e)))?;
        for r in results {
            for run in &r.seed_runs {
                for (t, e, acc) in run.matrix.iter() {
                    w.write_record([
                        r.fingerprint.as_str(),
                        r.config.strategy.as_str(),
                        if r.config.recl { "on" } else { "off" },
                        r.config.tuning.as_str(),
                        &run.seed.to_string(),
                        &(t + 1).to_string(),
                        &(e + 1).to_string(),
                        &format!("{acc}"),
                    ])
                    .map_err(|e| {
                        Error::io(csv_path.display().to_string(), std::io::Error::other(e))
                    })?;
                }
            }
        }
        w.flush()
            .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    }
    written.push(csv_path);

    let summary_path = dir.join("summary.json");
    let summary = summarize(results);
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::io(summary_path.display().to_string(), std::io::Error::other(e)))?;
    std::fs::write(&summary_path, json.as_bytes())
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;
    written.push(summary_path);

    // wall-clock lives apart from summary.json so metrics stay bit-stable
    let runtimes_path = dir.join("runtimes.json");
    let entries: Vec<RuntimeEntry> = results
        .iter()
        .flat_map(|r| {
            r.seed_runs.iter().map(|run| RuntimeEntry {
                fingerprint: r.fingerprint.clone(),
                seed: run.seed,
                train_seconds: run.train_seconds,
                recon_seconds: run.recon_seconds,
            })
        })
        .collect();
    let json = serde_json::to_string_pretty(&entries)
        .map_err(|e| Error::io(runtimes_path.display().to_string(), std::io::Error::other(e)))?;
    std::fs::write(&runtimes_path, json.as_bytes())
        .map_err(|e| Error::io(runtimes_path.display().to_string(), e))?;
    written.push(runtimes_path);

    let any_trials = results
        .iter()
        .any(|r| r.seed_runs.iter().any(|s| !s.tuning_trials.is_empty()));
    if any_trials {
        let log_path = dir.join("tuning_log.csv");
        let mut w = csv::Writer::from_path(&log_path)
            .map_err(|e| Error::io(log_path.display().to_string(), std::io::Error::other(e)))?;
        w.write_record([
            "config_fingerprint",
            "seed",
            "task",
            "trial",
            "lambda_min",
            "sigma_x",
            "lr_x",
            "lr_lambda",
            "score",
        ])
        .map_err(|e| Error::io(log_path.display().to_string(), std::io::Error::other(e)))?;
        for r in results {
            for run in &r.seed_runs {
                for (task, trials) in &run.tuning_trials {
                    for tr in trials {
                        w.write_record([
                            r.fingerprint.as_str(),
                            &run.seed.to_string(),
                            &task.to_string(),
                            &tr.trial.to_string(),
                            &format!("{}", tr.lambda_min),
                            &format!("{}", tr.sigma_x),
                            &format!("{}", tr.lr_x),
                            &format!("{}", tr.lr_lambda),
                            &format!("{}", tr.score),
                        ])
                        .map_err(|e| {
                            Error::io(log_path.display().to_string(), std::io::Error::other(e))
                        })?;
                    }
                }
            }
        }
        w.flush()
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        written.push(log_path);
    }

    Ok(written)
}

/// Parse a results.csv back into (fingerprint, seed) -> accuracy matrices.
pub fn parse_results_csv(
    path: &Path,
) -> Result<std::collections::BTreeMap<(String, u64), AccuracyMatrix>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    let mut out: std::collections::BTreeMap<(String, u64), AccuracyMatrix> =
        std::collections::BTreeMap::new();
    for record in rdr.records() {
        let record =
            record.map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
        let fingerprint = record[0].to_string();
        let seed: u64 = record[4]
            .parse()
            .map_err(|_| Error::parse(0, "bad seed in results.csv"))?;
        let t: usize = record[5]
            .parse()
            .map_err(|_| Error::parse(0, "bad T in results.csv"))?;
        let e: usize = record[6]
            .parse()
            .map_err(|_| Error::parse(0, "bad tau in results.csv"))?;
        let acc: f64 = record[7]
            .parse()
            .map_err(|_| Error::parse(0, "bad acc in results.csv"))?;
        out.entry((fingerprint, seed))
            .or_default()
            .record(t - 1, e - 1, acc)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Chart
// ---------------------------------------------------------------------------

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Grouped bar chart of mean ACC per strategy, vanilla vs +ReCL, with
/// ±1 std whiskers. Standalone SVG.
pub fn emit_chart(summaries: &[ConfigSummary], path: &Path) -> Result<()> {
    if summaries.is_empty() {
        return Err(Error::contract("emit_chart needs at least one summary"));
    }

    let mut groups: Vec<String> = Vec::new();
    for s in summaries {
        if !groups.contains(&s.strategy) {
            groups.push(s.strategy.clone());
        }
    }

    let (width, height) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 40.0, 60.0);
    let plot_w = width - ml - mr;
    let plot_h = height - mt - mb;
    let y_max = 100.0;
    let y_of = |acc: f64| mt + plot_h * (1.0 - (acc / y_max).clamp(0.0, 1.0));

    let group_w = plot_w / groups.len() as f64;
    let bar_w = (group_w * 0.35).min(60.0);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">Average accuracy after the final task</text>"#,
        width / 2.0
    );

    // axes and gridlines
    for tick in 0..=5 {
        let v = y_max * tick as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{ml}" y1="{y}" x2="{}" y2="{y}" stroke="#dddddd" stroke-width="1"/>"##,
            width - mr
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.0}</text>"#,
            ml - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black" stroke-width="1"/>"#,
        mt + plot_h
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="1"/>"#,
        mt + plot_h,
        width - mr,
        mt + plot_h
    );

    for (gi, strategy) in groups.iter().enumerate() {
        let cx = ml + group_w * (gi as f64 + 0.5);
        let vanilla = summaries.iter().find(|s| &s.strategy == strategy && !s.recl);
        let with_recl = summaries.iter().find(|s| &s.strategy == strategy && s.recl);
        let slots: [(Option<&ConfigSummary>, f64, &str); 2] = [
            (vanilla, cx - bar_w * 0.55 - bar_w / 2.0, "#7a9ec9"),
            (with_recl, cx + bar_w * 0.55 - bar_w / 2.0, "#d98a5f"),
        ];
        for (summary, x, color) in slots {
            let Some(s) = summary else { continue };
            let Some(acc) = s.acc_mean else { continue };
            let y = y_of(acc);
            let h = mt + plot_h - y;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{bar_w:.2}" height="{h:.2}" fill="{color}"/>"#
            );
            if let Some(std) = s.acc_std {
                let cxb = x + bar_w / 2.0;
                let y1 = y_of(acc + std);
                let y2 = y_of(acc - std);
                let _ = writeln!(
                    svg,
                    r#"<line x1="{cxb:.2}" y1="{y1:.2}" x2="{cxb:.2}" y2="{y2:.2}" stroke="black" stroke-width="1.5"/>"#
                );
                let _ = writeln!(
                    svg,
                    r#"<line x1="{:.2}" y1="{y1:.2}" x2="{:.2}" y2="{y1:.2}" stroke="black" stroke-width="1.5"/>"#,
                    cxb - 5.0,
                    cxb + 5.0
                );
                let _ = writeln!(
                    svg,
                    r#"<line x1="{:.2}" y1="{y2:.2}" x2="{:.2}" y2="{y2:.2}" stroke="black" stroke-width="1.5"/>"#,
                    cxb - 5.0,
                    cxb + 5.0
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.2}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
            mt + plot_h + 18.0,
            xml_escape(strategy)
        );
    }

    // legend
    let _ = writeln!(
        svg,
        r##"<rect x="{}" y="{}" width="12" height="12" fill="#7a9ec9"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">vanilla</text>"##,
        ml,
        height - 30.0,
        ml + 18.0,
        height - 20.0
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{}" y="{}" width="12" height="12" fill="#d98a5f"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">+ReCL</text>"##,
        ml + 90.0,
        height - 30.0,
        ml + 108.0,
        height - 20.0
    );
    let _ = writeln!(svg, "</svg>");

    std::fs::write(path, svg.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config("dataset = blobs\nscenario = cil\nstrategy = finetune\n").unwrap();
        assert_eq!(cfg.batch, 64);
        assert_eq!(cfg.recl_n_rec, 1000);
        assert_eq!(cfg.tuning, TuningKind::Naive);
        assert!(!cfg.recl);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn unknown_keys_and_bad_enums_rejected_with_line() {
        let err = parse_config("dataset = blobs\nnot_a_key = 3\n").unwrap_err();
        match err {
            Error::Config { line, ref message } => {
                assert_eq!(line, 2);
                assert!(message.contains("not_a_key"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let err = parse_config("dataset = blobs\nstrategy = gpm\n").unwrap_err();
        assert!(err.to_string().contains("unsupported strategy"));

        let err = parse_config("dataset = blobs\nlr = -1\n").unwrap_err();
        assert!(err.to_string().contains("positive"));

        let err = parse_config("dataset = blobs\nseeds = \n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));

        assert!(parse_config("scenario = cil\n").is_err());
    }

    #[test]
    fn config_round_trips() {
        let text = "dataset = blobs\nscenario = dil\nstrategy = ewc\nrecl = on\ntuning = supervised\nseeds = 5,9\nlr = 0.125\nmodel_hidden = 32,16\n";
        let cfg = parse_config(text).unwrap();
        let canon = serialize_config(&cfg);
        let reparsed = parse_config(&canon).unwrap();
        assert_eq!(cfg, reparsed);
        assert_eq!(config_fingerprint(&cfg), config_fingerprint(&reparsed));
    }

    #[test]
    fn fingerprint_changes_with_config() {
        let a = parse_config("dataset = blobs\n").map(|c| config_fingerprint(&c)).unwrap();
        let b = parse_config("dataset = blobs\nlr = 0.01\n")
            .map(|c| config_fingerprint(&c))
            .unwrap();
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
    }

    fn quick_blobs_config() -> ExperimentConfig {
        let mut cfg = parse_config(
            "dataset = blobs\nscenario = cil\nstrategy = finetune\nseeds = 1,2\n",
        )
        .unwrap();
        cfg.n_tasks = 2;
        cfg.n_per_class = 30;
        cfg.model_hidden = vec![16];
        cfg.epochs = 3;
        cfg.blobs_classes = 4;
        cfg.blobs_dim = 8;
        cfg.blobs_train_per_class = 40;
        cfg.blobs_test_per_class = 10;
        cfg
    }

    #[test]
    fn run_experiment_is_deterministic_and_triangular() {
        let cfg = quick_blobs_config();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert!(a.failures.is_empty(), "{:?}", a.failures);
        assert_eq!(a.seed_runs.len(), 2);
        for (ra, rb) in a.seed_runs.iter().zip(&b.seed_runs) {
            assert_eq!(ra.final_acc, rb.final_acc);
            assert_eq!(ra.final_bwt, rb.final_bwt);
            // 2 tasks -> 3 entries
            assert_eq!(ra.matrix.len(), 3);
        }
        assert_eq!(a.fingerprint, b.fingerprint);
    }

    #[test]
    fn single_task_run_has_no_bwt() {
        let mut cfg = quick_blobs_config();
        cfg.n_tasks = 1;
        cfg.n_classes = 4;
        cfg.seeds = vec![0];
        let r = run_experiment(&cfg).unwrap();
        assert!(r.failures.is_empty(), "{:?}", r.failures);
        assert_eq!(r.seed_runs[0].final_bwt, None);
        assert_eq!(
            r.seed_runs[0].final_acc,
            r.seed_runs[0].matrix.get(0, 0).unwrap()
        );
    }

    #[test]
    fn emit_and_reparse_results() {
        let cfg = quick_blobs_config();
        let result = run_experiment(&cfg).unwrap();
        let dir = std::env::temp_dir().join("recl_harness_test");
        let _ = std::fs::remove_dir_all(&dir);
        let written = emit_results(&[result.clone()], &dir).unwrap();
        assert!(written.iter().any(|p| p.ends_with("results.csv")));
        assert!(written.iter().any(|p| p.ends_with("summary.json")));

        // 2 seeds × 2 tasks -> 2·(2+1) = 6 rows
        let text = std::fs::read_to_string(dir.join("results.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 6);

        let matrices = parse_results_csv(&dir.join("results.csv")).unwrap();
        for run in &result.seed_runs {
            let m = &matrices[&(result.fingerprint.clone(), run.seed)];
            for (t, e, acc) in run.matrix.iter() {
                assert_eq!(m.get(t, e).unwrap(), acc);
            }
        }

        // summary mean equals mean of per-seed ACC
        let summary: SummaryFile =
            serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap())
                .unwrap();
        let mean_acc = (result.seed_runs[0].final_acc + result.seed_runs[1].final_acc) / 2.0;
        assert!(
            (summary.configs[0].acc_mean.unwrap() - mean_acc * 100.0).abs() < 1e-12
        );
    }

    #[test]
    fn summary_json_is_bit_identical_across_runs() {
        let cfg = quick_blobs_config();
        let dir1 = std::env::temp_dir().join("recl_det_1");
        let dir2 = std::env::temp_dir().join("recl_det_2");
        let _ = std::fs::remove_dir_all(&dir1);
        let _ = std::fs::remove_dir_all(&dir2);
        emit_results(&[run_experiment(&cfg).unwrap()], &dir1).unwrap();
        emit_results(&[run_experiment(&cfg).unwrap()], &dir2).unwrap();
        let a = std::fs::read(dir1.join("summary.json")).unwrap();
        let b = std::fs::read(dir2.join("summary.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chart_counts_and_rejects_empty() {
        let dir = std::env::temp_dir().join("recl_chart_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("chart.svg");

        assert!(emit_chart(&[], &path).is_err());

        let mk = |strategy: &str, recl: bool, acc: f64| ConfigSummary {
            fingerprint: "f".into(),
            dataset: "blobs".into(),
            scenario: "cil".into(),
            strategy: strategy.into(),
            recl,
            tuning: "naive".into(),
            seeds: vec![0],
            acc_mean: Some(acc),
            acc_std: Some(2.0),
            bwt_mean: None,
            bwt_std: None,
            failed_seeds: vec![],
        };
        emit_chart(&[mk("finetune", false, 50.0), mk("finetune", true, 75.0)], &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();

        // one method pair -> two bars beyond the background rect and legend
        let bars = svg
            .lines()
            .filter(|l| l.contains("<rect") && l.contains("height=") && !l.contains("fill=\"white\""))
            .count();
        assert_eq!(bars, 2 + 2); // two data bars + two legend swatches

        // bar heights proportional to ACC
        let heights: Vec<f64> = svg
            .lines()
            .filter(|l| l.contains("#7a9ec9") || l.contains("#d98a5f"))
            .filter(|l| l.contains("height="))
            .filter_map(|l| {
                let h = l.split("height=\"").nth(1)?.split('"').next()?;
                h.parse().ok()
            })
            .filter(|h| *h > 12.0)
            .collect();
        assert_eq!(heights.len(), 2);
        assert!((heights[1] / heights[0] - 75.0 / 50.0).abs() < 1e-6);
    }
}
