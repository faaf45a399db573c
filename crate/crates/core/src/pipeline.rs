//! End-to-end experiment driver: data → baseline → three phases → prune →
//! save, plus metrics, summaries and trade-off curves.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compressor::Compressor;
use crate::data::{load_mnist_dir, make_synthetic_task, Dataset, SyntheticKind};
use crate::error::{Error, Result};
use crate::format::{load_model, save_model, Precision};
use crate::layers::{count_params, lenet5, Activation, CriticNetwork, InputShape, Mask, NetworkBuilder};
use crate::prune::{prune, CompressedModel};
use crate::tensor::Tensor;
use crate::trainer::{evaluate, pretrain, CompressionSchedule, MetricsRecord, Trainer, TrainerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    MnistLenet,
    SyntheticFc,
    SyntheticLstm,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::MnistLenet => "mnist-lenet",
            Task::SyntheticFc => "synthetic-fc",
            Task::SyntheticLstm => "synthetic-lstm",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist-lenet" => Ok(Task::MnistLenet),
            "synthetic-fc" => Ok(Task::SyntheticFc),
            "synthetic-lstm" => Ok(Task::SyntheticLstm),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected mnist-lenet, synthetic-fc or synthetic-lstm)"
            ))),
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    pub alpha: f64,
    pub gamma: f64,
    pub delta: f64,
    pub period: usize,
    pub beta: f64,
    pub rho: f64,
    /// Compressor hidden width `d_c`.
    pub hidden: usize,
    pub init_bound: f64,
    pub compressor_beta: Option<f64>,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_momentum: f64,
    pub phase1_rounds: usize,
    pub phase2_rounds: usize,
    pub phase3_rounds: usize,
    pub eval_interval: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub eval_mask_samples: usize,
    pub eval_examples: usize,
    pub finetune_momentum: f64,
    /// Examples held out from the end of the training set for validation.
    pub valid_size: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub latency_runs: usize,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Where baselines are cached; defaults to `out_dir`.
    pub checkpoint_dir: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "task",
    "seed",
    "alpha",
    "gamma",
    "delta",
    "period",
    "beta",
    "rho",
    "hidden",
    "init-bound",
    "compressor-beta",
    "batch-size",
    "pretrain-epochs",
    "pretrain-lr",
    "pretrain-momentum",
    "phase1-rounds",
    "phase2-rounds",
    "phase3-rounds",
    "eval-interval",
    "patience",
    "min-delta",
    "eval-mask-samples",
    "eval-examples",
    "finetune-momentum",
    "valid-size",
    "train-limit",
    "test-limit",
    "synthetic-train",
    "synthetic-test",
    "latency-runs",
    "data-dir",
    "out-dir",
    "checkpoint-dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl ExperimentConfig {
    /// Defaults tuned for each task.
    pub fn for_task(task: Task) -> Self {
        let base = ExperimentConfig {
            task,
            seed: 1,
            alpha: 0.1,
            gamma: crate::trainer::DEFAULT_GAMMA,
            delta: crate::trainer::DEFAULT_DELTA,
            period: crate::trainer::DEFAULT_PERIOD,
            beta: 0.01,
            rho: crate::trainer::DEFAULT_RHO,
            hidden: crate::compressor::DEFAULT_HIDDEN,
            init_bound: crate::compressor::DEFAULT_INIT_BOUND,
            compressor_beta: Some(0.1),
            batch_size: 64,
            pretrain_epochs: 10,
            pretrain_lr: 0.02,
            pretrain_momentum: 0.9,
            phase1_rounds: 300,
            phase2_rounds: 0,
            phase3_rounds: 6000,
            eval_interval: 100,
            patience: 5,
            min_delta: 1e-4,
            eval_mask_samples: 4,
            eval_examples: 1000,
            finetune_momentum: 0.9,
            valid_size: 1000,
            train_limit: None,
            test_limit: None,
            synthetic_train: 2000,
            synthetic_test: 1000,
            latency_runs: 1000,
            data_dir: None,
            out_dir: PathBuf::from("out"),
            checkpoint_dir: None,
        };
        match task {
            Task::MnistLenet => base,
            Task::SyntheticFc => ExperimentConfig {
                alpha: 0.5,
                beta: 0.05,
                compressor_beta: Some(0.1),
                batch_size: 32,
                pretrain_epochs: 30,
                pretrain_lr: 0.05,
                phase1_rounds: 200,
                phase3_rounds: 2000,
                eval_interval: 50,
                valid_size: 400,
                eval_examples: 400,
                ..base
            },
            Task::SyntheticLstm => ExperimentConfig {
                alpha: 0.5,
                beta: 0.05,
                compressor_beta: Some(0.1),
                batch_size: 32,
                pretrain_epochs: 600,
                pretrain_lr: 0.1,
                phase1_rounds: 200,
                phase3_rounds: 2000,
                eval_interval: 50,
                valid_size: 400,
                eval_examples: 400,
                ..base
            },
        }
    }

    /// Sets one field from its `key=value` spelling (`_` and `-` are
    /// interchangeable in keys).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "task" => self.task = value.parse()?,
            "seed" => self.seed = parse(k, value)?,
            "alpha" => self.alpha = parse(k, value)?,
            "gamma" => self.gamma = parse(k, value)?,
            "delta" => self.delta = parse(k, value)?,
            "period" => self.period = parse(k, value)?,
            "beta" => self.beta = parse(k, value)?,
            "rho" => self.rho = parse(k, value)?,
            "hidden" => self.hidden = parse(k, value)?,
            "init-bound" => self.init_bound = parse(k, value)?,
            "compressor-beta" => self.compressor_beta = optional(k, value)?,
            "batch-size" => self.batch_size = parse(k, value)?,
            "pretrain-epochs" => self.pretrain_epochs = parse(k, value)?,
            "pretrain-lr" => self.pretrain_lr = parse(k, value)?,
            "pretrain-momentum" => self.pretrain_momentum = parse(k, value)?,
            "phase1-rounds" => self.phase1_rounds = parse(k, value)?,
            "phase2-rounds" => self.phase2_rounds = parse(k, value)?,
            "phase3-rounds" => self.phase3_rounds = parse(k, value)?,
            "eval-interval" => self.eval_interval = parse(k, value)?,
            "patience" => self.patience = parse(k, value)?,
            "min-delta" => self.min_delta = parse(k, value)?,
            "eval-mask-samples" => self.eval_mask_samples = parse(k, value)?,
            "eval-examples" => self.eval_examples = parse(k, value)?,
            "finetune-momentum" => self.finetune_momentum = parse(k, value)?,
            "valid-size" => self.valid_size = parse(k, value)?,
            "train-limit" => self.train_limit = optional(k, value)?,
            "test-limit" => self.test_limit = optional(k, value)?,
            "synthetic-train" => self.synthetic_train = parse(k, value)?,
            "synthetic-test" => self.synthetic_test = parse(k, value)?,
            "latency-runs" => self.latency_runs = parse(k, value)?,
            "data-dir" => self.data_dir = optional(k, value)?,
            "out-dir" => self.out_dir = PathBuf::from(value),
            "checkpoint-dir" => self.checkpoint_dir = optional(k, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment. A `task` line is
    /// applied first so the remaining keys override that task's defaults.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some((_, task)) = pairs.iter().find(|(k, _)| k == "task") {
            let task: Task = task.parse()?;
            if task != self.task {
                *self = ExperimentConfig {
                    data_dir: self.data_dir.clone(),
                    out_dir: self.out_dir.clone(),
                    checkpoint_dir: self.checkpoint_dir.clone(),
                    ..ExperimentConfig::for_task(task)
                };
            }
        }
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::for_task(Task::MnistLenet);
        cfg.apply_kv_text(&text)?;
        Ok(cfg)
    }

    fn get(&self, key: &str) -> String {
        match key {
            "task" => self.task.name().to_string(),
            "seed" => self.seed.to_string(),
            "alpha" => self.alpha.to_string(),
            "gamma" => self.gamma.to_string(),
            "delta" => self.delta.to_string(),
            "period" => self.period.to_string(),
            "beta" => self.beta.to_string(),
            "rho" => self.rho.to_string(),
            "hidden" => self.hidden.to_string(),
            "init-bound" => self.init_bound.to_string(),
            "compressor-beta" => show(&self.compressor_beta),
            "batch-size" => self.batch_size.to_string(),
            "pretrain-epochs" => self.pretrain_epochs.to_string(),
            "pretrain-lr" => self.pretrain_lr.to_string(),
            "pretrain-momentum" => self.pretrain_momentum.to_string(),
            "phase1-rounds" => self.phase1_rounds.to_string(),
            "phase2-rounds" => self.phase2_rounds.to_string(),
            "phase3-rounds" => self.phase3_rounds.to_string(),
            "eval-interval" => self.eval_interval.to_string(),
            "patience" => self.patience.to_string(),
            "min-delta" => self.min_delta.to_string(),
            "eval-mask-samples" => self.eval_mask_samples.to_string(),
            "eval-examples" => self.eval_examples.to_string(),
            "finetune-momentum" => self.finetune_momentum.to_string(),
            "valid-size" => self.valid_size.to_string(),
            "train-limit" => show(&self.train_limit),
            "test-limit" => show(&self.test_limit),
            "synthetic-train" => self.synthetic_train.to_string(),
            "synthetic-test" => self.synthetic_test.to_string(),
            "latency-runs" => self.latency_runs.to_string(),
            "data-dir" => show(&self.data_dir.as_ref().map(|p| p.display())),
            "out-dir" => self.out_dir.display().to_string(),
            "checkpoint-dir" => show(&self.checkpoint_dir.as_ref().map(|p| p.display())),
            _ => unreachable!("every key is listed"),
        }
    }

    /// Every key as a `key = value` line; parses back with
    /// [`ExperimentConfig::apply_kv_text`].
    pub fn to_kv_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn schedule(&self) -> CompressionSchedule {
        let mut s = CompressionSchedule::new(self.alpha, self.beta);
        s.gamma = self.gamma;
        s.delta = self.delta;
        s.period = self.period;
        s.rho = self.rho;
        s
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            batch_size: self.batch_size,
            eval_interval: self.eval_interval,
            patience: self.patience,
            min_delta: self.min_delta,
            phase1_max_rounds: self.phase1_rounds,
            phase3_max_rounds: self.phase3_rounds,
            phase2_max_rounds: self.phase2_rounds,
            eval_mask_samples: self.eval_mask_samples,
            eval_examples: self.eval_examples,
            compressor_beta: self.compressor_beta,
            finetune_momentum: self.finetune_momentum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        let positive = [
            ("hidden", self.hidden),
            ("batch-size", self.batch_size),
            ("eval-interval", self.eval_interval),
            ("patience", self.patience),
            ("eval-mask-samples", self.eval_mask_samples),
            ("eval-examples", self.eval_examples),
            ("valid-size", self.valid_size),
            ("synthetic-train", self.synthetic_train),
            ("synthetic-test", self.synthetic_test),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.latency_runs < 1000 {
            return Err(Error::Config("latency-runs must be at least 1000".into()));
        }
        for (k, v) in [
            ("init-bound", self.init_bound),
            ("pretrain-lr", self.pretrain_lr),
            ("min-delta", self.min_delta),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        for (k, v) in [
            ("pretrain-momentum", self.pretrain_momentum),
            ("finetune-momentum", self.finetune_momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1)")));
            }
        }
        if self.compressor_beta.is_some_and(|b| !(b.is_finite() && b > 0.0)) {
            return Err(Error::Config("compressor-beta must be positive".into()));
        }
        if self.task == Task::MnistLenet && self.data_dir.is_none() {
            return Err(Error::Config("mnist-lenet needs a data directory".into()));
        }
        Ok(())
    }

    fn checkpoint_dir(&self) -> &Path {
        self.checkpoint_dir.as_deref().unwrap_or(&self.out_dir)
    }

    /// Location of the cached baseline for this config.
    pub fn baseline_path(&self) -> PathBuf {
        self.checkpoint_dir().join(self.baseline_name())
    }

    /// File name of the cached baseline: a hash of every field that
    /// influences pre-training.
    pub fn baseline_name(&self) -> String {
        let keys = [
            "task",
            "seed",
            "batch-size",
            "pretrain-epochs",
            "pretrain-lr",
            "pretrain-momentum",
            "valid-size",
            "train-limit",
            "synthetic-train",
            "synthetic-test",
        ];
        let text: String = keys.iter().map(|k| format!("{k}={};", self.get(k))).collect();
        format!("baseline-{}-{:016x}.model", self.task.name(), fnv1a(text.as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Independent seeds for the separate stages of one run.
fn stage_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed.wrapping_add(stage.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Train / validation / test splits for a config.
pub struct TaskData {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

pub fn load_task_data(cfg: &ExperimentConfig) -> Result<TaskData> {
    let (train, test) = match cfg.task {
        Task::MnistLenet => {
            let dir = cfg
                .data_dir
                .as_deref()
                .ok_or_else(|| Error::Config("mnist-lenet needs a data directory".into()))?;
            load_mnist_dir(dir)?
        }
        Task::SyntheticFc | Task::SyntheticLstm => {
            let kind = if cfg.task == Task::SyntheticFc {
                SyntheticKind::RedundantFeatures
            } else {
                SyntheticKind::SequenceParity
            };
            let t = make_synthetic_task(kind, stage_seed(cfg.seed, 0), cfg.synthetic_train, cfg.synthetic_test);
            (t.train, t.test)
        }
    };
    let train = match cfg.train_limit {
        Some(n) => train.take(n),
        None => train,
    };
    let test = match cfg.test_limit {
        Some(n) => test.take(n),
        None => test,
    };
    if cfg.valid_size >= train.len() {
        return Err(Error::Config(format!(
            "valid-size {} leaves no training data out of {}",
            cfg.valid_size,
            train.len()
        )));
    }
    let (train, valid) = train.split_tail(cfg.valid_size);
    Ok(TaskData { train, valid, test })
}

/// Fresh, untrained critic for the task.
pub fn build_critic(cfg: &ExperimentConfig, input: InputShape) -> Result<CriticNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, 1));
    match cfg.task {
        Task::MnistLenet => lenet5(&mut rng),
        Task::SyntheticFc => NetworkBuilder::new(input)
            .fc(32, Activation::Relu, &mut rng)
            .fc(32, Activation::Relu, &mut rng)
            .output(crate::data::SYNTH_CLASSES, &mut rng),
        Task::SyntheticLstm => NetworkBuilder::new(input)
            .lstm(24, &mut rng)
            .fc(16, Activation::Tanh, &mut rng)
            .output(2, &mut rng),
    }
}

/// Loads the cached baseline for `cfg` or trains and caches it. The second
/// value is the pre-training metrics stream (empty when loaded).
pub fn baseline(cfg: &ExperimentConfig, data: &TaskData) -> Result<(CriticNetwork, Vec<MetricsRecord>)> {
    let dir = cfg.checkpoint_dir();
    let path = cfg.baseline_path();
    if path.exists() {
        info!("loading cached baseline {}", path.display());
        return Ok((load_model(&path)?.to_critic()?, Vec::new()));
    }
    let mut net = build_critic(cfg, data.train.shape)?;
    let mut metrics = Vec::new();
    info!("pre-training baseline for {} epochs", cfg.pretrain_epochs);
    pretrain(
        &mut net,
        &data.train,
        cfg.pretrain_epochs,
        cfg.batch_size,
        cfg.pretrain_lr,
        cfg.pretrain_momentum,
        stage_seed(cfg.seed, 2),
        &mut metrics,
    )?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_model(&CompressedModel::from_critic(&net)?, &path, Precision::F64)?;
    write_metrics_csv(&path.with_extension("csv"), &metrics)?;
    Ok((net, metrics))
}

/// Accuracy of the dense model on `data`.
pub fn model_accuracy(model: &CompressedModel, data: &Dataset) -> Result<f64> {
    let mut hits = 0;
    for batch in data.batches(250) {
        let pred = model.predict(&batch.inputs)?;
        hits += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Mean and standard deviation, in milliseconds, of single-example
/// inference over `runs` repetitions.
pub fn measure_latency(model: &CompressedModel, example: &[f64], runs: usize) -> Result<(f64, f64)> {
    let input = Tensor::new(model.input.batch_shape(1), example.to_vec())?;
    model.infer(&input)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        let out = model.infer(&input)?;
        std::hint::black_box(out);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / runs as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / runs as f64;
    Ok((mean, var.sqrt()))
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut text = String::from(MetricsRecord::CSV_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One line per droppable layer, `1` for kept units.
pub fn write_masks(path: &Path, masks: &[Mask]) -> Result<()> {
    let text: String = masks.iter().map(|m| format!("{m}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_masks(path: &Path) -> Result<Vec<Mask>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            line.trim()
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    other => Err(Error::Data(format!("mask line {}: unexpected {other:?}", n + 1))),
                })
                .collect::<Result<Vec<_>>>()
                .map(Mask::from_bools)
        })
        .collect()
}

/// What a finished run reports.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub task: String,
    pub alpha: f64,
    pub seed: u64,
    pub original_params: usize,
    pub compressed_params: usize,
    pub param_fraction: f64,
    pub kept_units: Vec<usize>,
    pub original_units: Vec<usize>,
    pub baseline_accuracy: f64,
    pub masked_accuracy: f64,
    pub compressed_accuracy: f64,
    pub model_bytes: u64,
    pub model_bytes_f32: u64,
    pub latency_ms: f64,
    pub latency_std_ms: f64,
    pub phase1_rounds: usize,
    pub phase2_rounds: usize,
    pub phase3_rounds: usize,
    pub final_tau: f64,
    pub seconds: f64,
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

impl RunSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("task", self.task.clone());
        line("alpha", self.alpha.to_string());
        line("seed", self.seed.to_string());
        line("original-params", self.original_params.to_string());
        line("compressed-params", self.compressed_params.to_string());
        line("param-fraction", format!("{:.6}", self.param_fraction));
        line("kept-units", join(&self.kept_units));
        line("original-units", join(&self.original_units));
        line("baseline-accuracy", format!("{:.6}", self.baseline_accuracy));
        line("masked-accuracy", format!("{:.6}", self.masked_accuracy));
        line("compressed-accuracy", format!("{:.6}", self.compressed_accuracy));
        line("model-bytes", self.model_bytes.to_string());
        line("model-bytes-f32", self.model_bytes_f32.to_string());
        line("latency-ms", format!("{:.6}", self.latency_ms));
        line("latency-std-ms", format!("{:.6}", self.latency_std_ms));
        line("phase1-rounds", self.phase1_rounds.to_string());
        line("phase2-rounds", self.phase2_rounds.to_string());
        line("phase3-rounds", self.phase3_rounds.to_string());
        line("final-tau", self.final_tau.to_string());
        line("seconds", format!("{:.1}", self.seconds));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::Data(format!("summary lacks {k}")))
        };
        let num = |k: &str| -> Result<f64> { parse(k, &get(k)?) };
        let int = |k: &str| -> Result<usize> { parse(k, &get(k)?) };
        let list = |k: &str| -> Result<Vec<usize>> { get(k)?.split_whitespace().map(|v| parse(k, v)).collect() };
        Ok(RunSummary {
            task: get("task")?,
            alpha: num("alpha")?,
            seed: parse("seed", &get("seed")?)?,
            original_params: int("original-params")?,
            compressed_params: int("compressed-params")?,
            param_fraction: num("param-fraction")?,
            kept_units: list("kept-units")?,
            original_units: list("original-units")?,
            baseline_accuracy: num("baseline-accuracy")?,
            masked_accuracy: num("masked-accuracy")?,
            compressed_accuracy: num("compressed-accuracy")?,
            model_bytes: parse("model-bytes", &get("model-bytes")?)?,
            model_bytes_f32: parse("model-bytes-f32", &get("model-bytes-f32")?)?,
            latency_ms: num("latency-ms")?,
            latency_std_ms: num("latency-std-ms")?,
            phase1_rounds: int("phase1-rounds")?,
            phase2_rounds: int("phase2-rounds")?,
            phase3_rounds: int("phase3-rounds")?,
            final_tau: num("final-tau")?,
            seconds: num("seconds")?,
        })
    }
}

pub const MODEL_FILE: &str = "model.dpm";
pub const CRITIC_FILE: &str = "critic.model";
pub const MASKS_FILE: &str = "masks.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CONFIG_FILE: &str = "config.txt";

/// Runs compression against an already trained critic and writes every
/// artifact into `cfg.out_dir`.
pub fn compress_critic(cfg: &ExperimentConfig, data: &TaskData, net: CriticNetwork) -> Result<RunSummary> {
    let started = Instant::now();
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_kv_text()).map_err(|e| Error::io(out.join(CONFIG_FILE), e))?;

    let baseline_accuracy = evaluate(&net, &data.test, 250)?.1;
    let original_params = count_params(&net, None);
    let original_units = net.unit_counts();

    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, 3));
    let compressor = Compressor::for_views(&net.compressor_views()?, cfg.hidden, cfg.init_bound, &mut rng)?;
    let mut trainer = Trainer::new(
        net,
        compressor,
        cfg.schedule(),
        cfg.trainer_config(),
        &data.train,
        &data.valid,
        stage_seed(cfg.seed, 4),
    )?;
    info!("phase 1");
    let p1 = trainer.run_phase1(cfg.phase1_rounds)?;
    info!("phase 2");
    let masks = trainer.run_phase2()?;
    let p2 = trainer.schedule.rounds();
    // Nothing to fine-tune when no unit was removed.
    let p3 = if masks.iter().all(Mask::all_kept) {
        0
    } else {
        info!("phase 3");
        trainer.run_phase3(&masks, cfg.phase3_rounds)?.rounds
    };
    trainer.net.set_masks(&masks)?;
    let masked_accuracy = evaluate(&trainer.net, &data.test, 250)?.1;

    let model = prune(&trainer.net, &masks)?;
    let compressed_accuracy = model_accuracy(&model, &data.test)?;
    if compressed_accuracy != masked_accuracy {
        warn!("pruned accuracy {compressed_accuracy} differs from masked accuracy {masked_accuracy}");
    }
    let model_bytes = save_model(&model, &out.join(MODEL_FILE), Precision::F64)?;
    let model_bytes_f32 = crate::format::encode(&model, Precision::F32).len() as u64;
    let mut critic = trainer.net.clone();
    critic.clear_masks();
    save_model(&CompressedModel::from_critic(&critic)?, &out.join(CRITIC_FILE), Precision::F64)?;
    write_masks(&out.join(MASKS_FILE), &masks)?;
    write_metrics_csv(&out.join(METRICS_FILE), &trainer.metrics)?;

    let (latency_ms, latency_std_ms) = measure_latency(&model, data.test.example(0), cfg.latency_runs)?;
    let summary = RunSummary {
        task: cfg.task.name().to_string(),
        alpha: cfg.alpha,
        seed: cfg.seed,
        original_params,
        compressed_params: model.param_count(),
        param_fraction: model.param_count() as f64 / original_params as f64,
        kept_units: masks.iter().map(Mask::kept).collect(),
        original_units,
        baseline_accuracy,
        masked_accuracy,
        compressed_accuracy,
        model_bytes,
        model_bytes_f32,
        latency_ms,
        latency_std_ms,
        phase1_rounds: p1.rounds,
        phase2_rounds: p2,
        phase3_rounds: p3,
        final_tau: trainer.schedule.tau,
        seconds: started.elapsed().as_secs_f64(),
    };
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, summary.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Full run: data, cached or fresh baseline, compression, pruning, files.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let data = load_task_data(cfg)?;
    let (net, _) = baseline(cfg, &data)?;
    compress_critic(cfg, &data, net)
}

/// Runs the pipeline once per `alpha` in `out_dir/alpha-<a>`, sharing one
/// cached baseline, and writes `tradeoff.csv` into `out_dir`.
pub fn run_sweep(cfg: &ExperimentConfig, alphas: &[f64]) -> Result<(Vec<RunSummary>, String)> {
    cfg.validate()?;
    let data = load_task_data(cfg)?;
    let mut base = cfg.clone();
    base.checkpoint_dir = Some(cfg.checkpoint_dir().to_path_buf());
    let (net, _) = baseline(&base, &data)?;
    let mut runs = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut c = base.clone();
        c.alpha = alpha;
        c.out_dir = cfg.out_dir.join(format!("alpha-{alpha}"));
        c.validate()?;
        runs.push(compress_critic(&c, &data, net.clone())?);
    }
    let csv = emit_tradeoff_curve(&runs)?;
    let path = cfg.out_dir.join("tradeoff.csv");
    fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    Ok((runs, csv))
}

/// `alpha,param_fraction,model_bytes,accuracy,latency_ms`, one row per run,
/// largest parameter fraction first.
pub fn emit_tradeoff_curve(runs: &[RunSummary]) -> Result<String> {
    let mut alphas: Vec<f64> = runs.iter().map(|r| r.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    if alphas.len() < 2 {
        return Err(Error::Config(
            "a trade-off curve needs runs at two or more distinct alpha values".into(),
        ));
    }
    let mut sorted: Vec<&RunSummary> = runs.iter().collect();
    sorted.sort_by(|a, b| b.param_fraction.total_cmp(&a.param_fraction));
    let mut csv = String::from("alpha,param_fraction,model_bytes,accuracy,latency_ms\n");
    for r in sorted {
        let _ = writeln!(
            csv,
            "{},{:.6},{},{:.6},{:.6}",
            r.alpha, r.param_fraction, r.model_bytes, r.compressed_accuracy, r.latency_ms
        );
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_text_round_trips() {
        let mut cfg = ExperimentConfig::for_task(Task::SyntheticLstm);
        cfg.alpha = 0.25;
        cfg.train_limit = Some(77);
        cfg.data_dir = Some(PathBuf::from("/tmp/x"));
        let mut back = ExperimentConfig::for_task(Task::MnistLenet);
        back.apply_kv_text(&cfg.to_kv_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        let mut cfg = ExperimentConfig::for_task(Task::SyntheticFc);
        assert!(matches!(cfg.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("alpha", "x"), Err(Error::Config(_))));
        cfg.set("alpha", "1.5").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.set("pretrain_lr", "0.1").unwrap();
        assert_eq!(cfg.pretrain_lr, 0.1);
    }

    #[test]
    fn baseline_name_ignores_compression_knobs() {
        let a = ExperimentConfig::for_task(Task::SyntheticFc);
        let mut b = a.clone();
        b.alpha = 0.3;
        b.beta = 0.2;
        assert_eq!(a.baseline_name(), b.baseline_name());
        b.seed = 9;
        assert_ne!(a.baseline_name(), b.baseline_name());
    }

    fn summary(alpha: f64, fraction: f64) -> RunSummary {
        RunSummary {
            task: "synthetic-fc".into(),
            alpha,
            seed: 1,
            original_params: 100,
            compressed_params: (fraction * 100.0) as usize,
            param_fraction: fraction,
            kept_units: vec![3, 2],
            original_units: vec![4, 4],
            baseline_accuracy: 0.9,
            masked_accuracy: 0.8,
            compressed_accuracy: 0.8,
            model_bytes: 1000,
            model_bytes_f32: 600,
            latency_ms: 0.01,
            latency_std_ms: 0.001,
            phase1_rounds: 1,
            phase2_rounds: 2,
            phase3_rounds: 3,
            final_tau: 0.05,
            seconds: 1.0,
        }
    }

    #[test]
    fn summary_text_round_trips() {
        let s = summary(0.5, 0.4);
        assert_eq!(RunSummary::from_text(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn tradeoff_curve_contract() {
        assert!(emit_tradeoff_curve(&[summary(0.5, 0.4)]).is_err());
        assert!(emit_tradeoff_curve(&[summary(0.5, 0.4), summary(0.5, 0.3)]).is_err());
        let csv = emit_tradeoff_curve(&[summary(0.1, 0.09), summary(1.0, 1.0), summary(0.5, 0.45)]).unwrap();
        let fractions: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(fractions, vec![1.0, 0.45, 0.09]);
    }
}
