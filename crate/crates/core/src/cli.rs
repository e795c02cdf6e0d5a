//! Command-line front end: train, eval, predict, sweep, bound, synth.
//!
//! Settings resolve as command-line flags over the TOML config file over
//! built-in defaults. Exit codes: 0 success, 1 usage or config error, 2 data
//! error, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{bound_from_model, sweep_k, sweep_n, BoundParams, SweepRow};
use crate::checkpoint;
use crate::clustering::hard_assignments;
use crate::data::{
    load_csv, save_csv, split, standardize, CsvOptions, Dataset, LabelOrder, MissingPolicy, SplitSpec, SynthParams,
};
use crate::experts::PredictMode;
use crate::metrics::{predicted_classes, MetricsReport, UNDEFINED};
use crate::trainer::{history_csv, train, TrainConfig, TrainedModel};
use crate::{Error, Result};

/// Number of seeds per value in a hyperparameter sweep.
pub const SWEEP_SEEDS: usize = 5;

#[derive(Debug, Parser)]
#[command(name = "expertnet", version, about = "Deep clustering with cluster-local expert classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (train, synth) or file (other commands; stdout if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Predict with the argmax-cluster expert instead of the Q-weighted mixture.
    #[arg(long)]
    pub hard_predict: bool,
    /// Route training cohorts by argmax Q instead of sampling.
    #[arg(long)]
    pub no_sampling: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, history and validation metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Input CSV; synthetic data from the config is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Part of the stored split to evaluate on.
        #[arg(long, value_enum, default_value_t = Part::All)]
        split: Part,
    },
    /// Write per-row class probabilities and cluster assignments.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate over a grid of one hyperparameter, five seeds per value.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        parameter: Option<SweepParameter>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Tabulate the generalization bound over k or N.
    Bound {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Option<BoundAxis>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Read norms and input bounds from a trained model.
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        rho: Option<f64>,
        /// Failure probability of the bound.
        #[arg(long)]
        confidence: Option<f64>,
    },
    /// Generate the heterogeneous synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k_true: Option<usize>,
        #[arg(long)]
        n_per_cluster: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        separation: Option<f64>,
        #[arg(long)]
        flip_noise: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    Beta,
    Gamma,
    Delta,
    K,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Beta => "beta",
            SweepParameter::Gamma => "gamma",
            SweepParameter::Delta => "delta",
            SweepParameter::K => "k",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundAxis {
    K,
    N,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub label_column: String,
    pub missing: MissingPolicy,
    pub strict: bool,
    pub label_order: LabelOrder,
    /// Standardize features with statistics of the training split.
    pub standardize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        let csv = CsvOptions::default();
        DataSection {
            path: None,
            label_column: csv.label_column,
            missing: csv.missing,
            strict: csv.strict,
            label_order: csv.label_order,
            standardize: true,
        }
    }
}

impl DataSection {
    pub fn csv_options(&self) -> CsvOptions {
        CsvOptions {
            label_column: self.label_column.clone(),
            missing: self.missing,
            strict: self.strict,
            label_order: self.label_order,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub seeds: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            parameter: SweepParameter::K,
            values: vec![1.0, 2.0, 3.0, 4.0],
            seeds: SWEEP_SEEDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSection {
    pub axis: BoundAxis,
    /// Defaults to 1..=8 for k and 1e2, 1e4, 1e6 for N.
    pub values: Option<Vec<f64>>,
    pub rho: f64,
    pub delta: f64,
    pub shared_norm_caps: Vec<f64>,
    /// Per-layer caps of every expert.
    pub expert_norm_caps: Vec<f64>,
    /// Total input bound, split evenly across clusters.
    pub input_bound: f64,
    pub k: usize,
    pub n: usize,
}

impl Default for BoundSection {
    fn default() -> Self {
        BoundSection {
            axis: BoundAxis::K,
            values: None,
            rho: 1.0,
            delta: 0.1,
            shared_norm_caps: vec![1.0],
            expert_norm_caps: vec![1.0],
            input_bound: 1.0,
            k: 1,
            n: 100,
        }
    }
}

impl BoundSection {
    pub fn params(&self) -> BoundParams {
        let k = self.k.max(1);
        BoundParams {
            rho: self.rho,
            shared_norm_caps: self.shared_norm_caps.clone(),
            expert_norm_caps: vec![self.expert_norm_caps.clone(); k],
            input_bounds: vec![self.input_bound / k as f64; k],
            n: self.n,
            delta: self.delta,
        }
    }
}

/// The full config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub data: DataSection,
    pub synth: SynthParams,
    pub sweep: SweepSection,
    pub bound: BoundSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies the shared command-line overrides.
    pub fn apply(&mut self, c: &Common) {
        if let Some(s) = c.seed {
            self.train.seed = s;
            self.synth.seed = s;
        }
        if let Some(k) = c.k {
            self.train.k = k;
        }
        if let Some(v) = c.beta {
            self.train.beta = v;
        }
        if let Some(v) = c.gamma {
            self.train.gamma = v;
        }
        if let Some(v) = c.delta {
            self.train.delta = v;
        }
        if c.hard_predict {
            self.train.weighting_at_predict = false;
        }
        if c.no_sampling {
            self.train.sampling_at_train = false;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.split.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return Err(Error::Config(format!("data file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(common);
    Ok(cfg)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, data } => {
            let mut cfg = resolve(&common)?;
            if data.is_some() {
                cfg.data.path = data;
            }
            cfg.validate()?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            cmd_train(&cfg, &out).map(|_| ())
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
        } => {
            let cfg = resolve(&common)?;
            let text = cmd_eval(&checkpoint, &data, split, common.hard_predict, &cfg.data)?;
            emit(common.out.as_deref(), &text)
        }
        Command::Predict {
            common,
            checkpoint,
            data,
        } => {
            let cfg = resolve(&common)?;
            let text = cmd_predict(&checkpoint, &data, common.hard_predict, &cfg.data)?;
            emit(common.out.as_deref(), &text)
        }
        Command::Sweep {
            common,
            data,
            parameter,
            values,
            seeds,
        } => {
            let mut cfg = resolve(&common)?;
            if data.is_some() {
                cfg.data.path = data;
            }
            if let Some(p) = parameter {
                cfg.sweep.parameter = p;
            }
            if let Some(v) = values {
                cfg.sweep.values = v;
            }
            if let Some(s) = seeds {
                cfg.sweep.seeds = s;
            }
            cfg.validate()?;
            let rows = cmd_sweep(&cfg)?;
            emit(common.out.as_deref(), &sweep_csv(&rows))
        }
        Command::Bound {
            common,
            axis,
            values,
            checkpoint,
            data,
            rho,
            confidence,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(a) = axis {
                cfg.bound.axis = a;
            }
            if values.is_some() {
                cfg.bound.values = values;
            }
            if let Some(r) = rho {
                cfg.bound.rho = r;
            }
            if let Some(d) = confidence {
                cfg.bound.delta = d;
            }
            let base = match (&checkpoint, &data) {
                (Some(c), Some(d)) => model_bound_params(c, d, &cfg)?,
                _ => cfg.bound.params(),
            };
            let rows = cmd_bound(&base, cfg.bound.axis, cfg.bound.values.as_deref())?;
            emit(common.out.as_deref(), &bound_csv(cfg.bound.axis, &rows))
        }
        Command::Synth {
            common,
            k_true,
            n_per_cluster,
            dim,
            separation,
            flip_noise,
        } => {
            let mut cfg = resolve(&common)?;
            let p = &mut cfg.synth;
            if let Some(v) = k_true {
                p.k_true = v;
            }
            if let Some(v) = n_per_cluster {
                p.n_per_cluster = v;
            }
            if let Some(v) = dim {
                p.dim = v;
            }
            if let Some(v) = separation {
                p.separation = v;
            }
            if let Some(v) = flip_noise {
                p.flip_noise = v;
            }
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
            cmd_synth(&cfg.synth, &out).map(|_| ())
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Loads the configured data file, or generates synthetic data when none is set.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => load_csv(p, &cfg.data.csv_options()),
        None => Ok(crate::data::synth_heterogeneous(&cfg.synth)?.dataset),
    }
}

/// Standardized train/val/test parts plus the fitted transform.
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub standardizer: Option<crate::data::Standardizer>,
}

pub fn prepare(dataset: &Dataset, spec: &SplitSpec, standardize_features: bool) -> Result<Prepared> {
    let (train, val, test) = split(dataset, spec)?;
    if !standardize_features {
        return Ok(Prepared {
            train,
            val,
            test,
            standardizer: None,
        });
    }
    let (s, train) = standardize(&train)?;
    Ok(Prepared {
        val: s.apply(&val)?,
        test: s.apply(&test)?,
        train,
        standardizer: Some(s),
    })
}

/// Trains on the configured split; the returned model carries its standardizer.
pub fn fit(cfg: &RunConfig, dataset: &Dataset) -> Result<(TrainedModel, Prepared)> {
    let parts = prepare(dataset, &cfg.split, cfg.data.standardize)?;
    let mut model = train(&parts.train, &parts.val, &cfg.train)?;
    model.standardizer = parts.standardizer.clone();
    Ok((model, parts))
}

/// Paths written by `train`.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub metrics: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainArtifacts> {
    let dataset = load_dataset(cfg)?;
    let (model, parts) = fit(cfg, &dataset)?;
    let report = model.evaluate(&parts.val, model.config.predict_mode())?;
    fs::create_dir_all(out_dir)?;
    let artifacts = TrainArtifacts {
        checkpoint: out_dir.join("checkpoint.json"),
        history: out_dir.join("history.csv"),
        metrics: out_dir.join("metrics.csv"),
    };
    checkpoint::save(&model, Some(&cfg.split), &artifacts.checkpoint)?;
    fs::write(&artifacts.history, history_csv(&model.history))?;
    fs::write(&artifacts.metrics, report_csv("val", model.config.predict_mode(), &report))?;
    log::info!(
        "trained k={} for {} epochs (best {:?}); val auc {:.4}",
        model.k(),
        model.history.len(),
        model.best_epoch,
        report.auc
    );
    Ok(artifacts)
}

fn mode_name(mode: PredictMode) -> &'static str {
    match mode {
        PredictMode::Weighted => "weighted",
        PredictMode::Hard => "hard",
    }
}

fn part_name(part: Part) -> &'static str {
    match part {
        Part::Train => "train",
        Part::Val => "val",
        Part::Test => "test",
        Part::All => "all",
    }
}

pub fn report_csv(part: &str, mode: PredictMode, report: &MetricsReport) -> String {
    format!(
        "split,predict_mode,{}\n{part},{},{}\n",
        MetricsReport::csv_header(),
        mode_name(mode),
        report.csv_row()
    )
}

/// Reorders a dataset's label indices to match the model's label names.
pub fn align_labels(dataset: &Dataset, label_names: &[String]) -> Result<Dataset> {
    let map = dataset
        .label_names
        .iter()
        .map(|name| {
            label_names
                .iter()
                .position(|l| l == name)
                .ok_or_else(|| Error::Data(format!("label `{name}` is unknown to the model")))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        dataset.features.clone(),
        dataset.labels.iter().map(|&l| map[l]).collect(),
        dataset.feature_names.clone(),
        label_names.to_vec(),
    )
}

fn load_for_model(model: &TrainedModel, data: &Path, opts: &DataSection) -> Result<Dataset> {
    let raw = load_csv(data, &opts.csv_options())?;
    if raw.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "checkpoint expects {} features, data has {}",
            model.input_dim(),
            raw.dim()
        )));
    }
    align_labels(&raw, &model.label_names)
}

pub fn cmd_eval(ckpt: &Path, data: &Path, part: Part, hard: bool, opts: &DataSection) -> Result<String> {
    let loaded = checkpoint::load(ckpt)?;
    let model = loaded.model;
    let dataset = load_for_model(&model, data, opts)?;
    let dataset = match part {
        Part::All => dataset,
        _ => {
            let spec = loaded
                .split
                .ok_or_else(|| Error::Config("checkpoint stores no split; use --split all".into()))?;
            let (train, val, test) = split(&dataset, &spec)?;
            match part {
                Part::Train => train,
                Part::Val => val,
                _ => test,
            }
        }
    };
    let mode = if hard { PredictMode::Hard } else { model.config.predict_mode() };
    let report = model.evaluate(&model.prepare(&dataset)?, mode)?;
    Ok(report_csv(part_name(part), mode, &report))
}

pub fn cmd_predict(ckpt: &Path, data: &Path, hard: bool, opts: &DataSection) -> Result<String> {
    let model = checkpoint::load(ckpt)?.model;
    let raw = load_csv(data, &opts.csv_options())?;
    if raw.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "checkpoint expects {} features, data has {}",
            model.input_dim(),
            raw.dim()
        )));
    }
    let x = model.prepare(&raw)?.features;
    let mode = if hard { PredictMode::Hard } else { model.config.predict_mode() };
    let probs = model.predict_proba(x.view(), mode)?;
    let clusters = hard_assignments(model.soft_assignments(x.view())?.view());
    let preds = predicted_classes(probs.view());

    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["row".to_string(), "cluster".into(), "predicted".into()];
    header.extend(model.label_names.iter().map(|l| format!("p_{l}")));
    wtr.write_record(&header)?;
    for i in 0..x.nrows() {
        let mut rec = vec![i.to_string(), clusters[i].to_string(), model.label_names[preds[i]].clone()];
        rec.extend(probs.row(i).iter().map(|p| format!("{p:?}")));
        wtr.write_record(&rec)?;
    }
    finish(wtr)
}

fn finish(wtr: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// One line of sweep output; `seed` is `None` on the per-value mean rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub parameter: SweepParameter,
    pub value: f64,
    pub seed: Option<u64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub silhouette: Option<f64>,
    pub htfd: Option<f64>,
    pub status: String,
}

/// Training config for one sweep cell. Sweeping one loss weight zeroes the other two.
pub fn sweep_config(base: &TrainConfig, parameter: SweepParameter, value: f64, seed: u64) -> Result<TrainConfig> {
    let mut c = base.clone();
    c.seed = seed;
    match parameter {
        SweepParameter::Beta => (c.beta, c.gamma, c.delta) = (value, 0.0, 0.0),
        SweepParameter::Gamma => (c.beta, c.gamma, c.delta) = (0.0, value, 0.0),
        SweepParameter::Delta => (c.beta, c.gamma, c.delta) = (0.0, 0.0, value),
        SweepParameter::K => {
            if !(value >= 1.0 && value.fract() == 0.0) {
                return Err(Error::Config(format!("k must be a positive integer, got {value}")));
            }
            c.k = value as usize;
        }
    }
    c.validate()?;
    Ok(c)
}

fn mean(vals: &[Option<f64>]) -> Option<f64> {
    let got: Vec<f64> = vals.iter().flatten().copied().collect();
    (!got.is_empty() && got.len() == vals.len()).then(|| got.iter().sum::<f64>() / got.len() as f64)
}

/// Runs the grid; failed runs become rows with a status message.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRecord>> {
    let dataset = load_dataset(cfg)?;
    let parts = prepare(&dataset, &cfg.split, cfg.data.standardize)?;
    let param = cfg.sweep.parameter;
    let cells: Vec<(f64, u64)> = cfg
        .sweep
        .values
        .iter()
        .flat_map(|&v| (0..cfg.sweep.seeds as u64).map(move |s| (v, s)))
        .collect();
    let runs: Vec<SweepRecord> = cells
        .par_iter()
        .map(|&(value, offset)| {
            let seed = cfg.train.seed.wrapping_add(offset);
            let outcome = sweep_config(&cfg.train, param, value, seed)
                .and_then(|c| train(&parts.train, &parts.val, &c))
                .and_then(|m| m.evaluate(&parts.test, m.config.predict_mode()));
            match outcome {
                Ok(r) => SweepRecord {
                    parameter: param,
                    value,
                    seed: Some(seed),
                    auc: Some(r.auc),
                    f1: Some(r.f1),
                    silhouette: r.silhouette,
                    htfd: r.htfd_mean,
                    status: "ok".into(),
                },
                Err(e) => SweepRecord {
                    parameter: param,
                    value,
                    seed: Some(seed),
                    auc: None,
                    f1: None,
                    silhouette: None,
                    htfd: None,
                    status: format!("error: {e}"),
                },
            }
        })
        .collect();
    let mut rows = Vec::with_capacity(runs.len() + cfg.sweep.values.len());
    for (v, chunk) in cfg.sweep.values.iter().zip(runs.chunks(cfg.sweep.seeds.max(1))) {
        let ok = chunk.iter().filter(|r| r.status == "ok").count();
        let okc: Vec<&SweepRecord> = chunk.iter().filter(|r| r.status == "ok").collect();
        let col = |f: fn(&SweepRecord) -> Option<f64>| mean(&okc.iter().map(|r| f(r)).collect::<Vec<_>>());
        rows.extend_from_slice(chunk);
        rows.push(SweepRecord {
            parameter: param,
            value: *v,
            seed: None,
            auc: col(|r| r.auc),
            f1: col(|r| r.f1),
            silhouette: col(|r| r.silhouette),
            htfd: col(|r| r.htfd),
            status: format!("mean of {ok}/{}", chunk.len()),
        });
    }
    Ok(rows)
}

pub const SWEEP_HEADER: [&str; 8] = ["parameter", "value", "seed", "auc", "f1", "silhouette", "htfd", "status"];

pub fn sweep_csv(rows: &[SweepRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x:?}"));
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut write = || -> Result<String> {
        wtr.write_record(SWEEP_HEADER)?;
        for r in rows {
            wtr.write_record([
                r.parameter.name().to_string(),
                format!("{:?}", r.value),
                r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string()),
                opt(r.auc),
                opt(r.f1),
                opt(r.silhouette),
                opt(r.htfd),
                r.status.clone(),
            ])?;
        }
        wtr.flush()?;
        Ok(String::new())
    };
    write().expect("writing to memory cannot fail");
    finish(wtr).expect("csv output is UTF-8")
}

fn model_bound_params(ckpt: &Path, data: &Path, cfg: &RunConfig) -> Result<BoundParams> {
    let model = checkpoint::load(ckpt)?.model;
    let dataset = model.prepare(&load_for_model(&model, data, &cfg.data)?)?;
    let (params, _) = bound_from_model(&model, cfg.bound.rho, cfg.bound.delta, &dataset)?;
    Ok(params)
}

/// Bound rows along `axis`; with no values, sweeps k over 1..=8 or N over 1e2, 1e4, 1e6.
pub fn cmd_bound(base: &BoundParams, axis: BoundAxis, values: Option<&[f64]>) -> Result<Vec<SweepRow>> {
    let to_counts = |vals: &[f64]| -> Result<Vec<usize>> {
        vals.iter()
            .map(|&v| {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::InvalidArgument(format!("sweep values must be positive integers, got {v}")))
                }
            })
            .collect()
    };
    match axis {
        BoundAxis::K => {
            let ks = match values {
                Some(v) => to_counts(v)?,
                None => (1..=8).collect(),
            };
            sweep_k(base, &ks)
        }
        BoundAxis::N => {
            let ns = match values {
                Some(v) => to_counts(v)?,
                None => vec![100, 10_000, 1_000_000],
            };
            sweep_n(base, &ns)
        }
    }
}

pub fn bound_csv(axis: BoundAxis, rows: &[SweepRow]) -> String {
    let mut out = format!("{},complexity,confidence,total\n", if axis == BoundAxis::K { "k" } else { "n" });
    for r in rows {
        out.push_str(&format!(
            "{},{:?},{:?},{:?}\n",
            r.value as u64, r.terms.complexity, r.terms.confidence, r.terms.total
        ));
    }
    out
}

/// Metadata written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub generator: String,
    pub params: SynthParams,
    pub seed: u64,
    pub rows: usize,
}

/// Paths written by `synth`.
#[derive(Debug, Clone)]
pub struct SynthArtifacts {
    pub data: PathBuf,
    pub metadata: PathBuf,
    pub clusters: PathBuf,
}

pub fn cmd_synth(params: &SynthParams, out_dir: &Path) -> Result<SynthArtifacts> {
    let synth = crate::data::synth_heterogeneous(params).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    })?;
    fs::create_dir_all(out_dir)?;
    let artifacts = SynthArtifacts {
        data: out_dir.join("synth.csv"),
        metadata: out_dir.join("synth.meta.json"),
        clusters: out_dir.join("synth.clusters.csv"),
    };
    save_csv(&synth.dataset, &artifacts.data, "label")?;
    let meta = SynthMetadata {
        generator: "heterogeneous".into(),
        params: params.clone(),
        seed: params.seed,
        rows: synth.dataset.len(),
    };
    let mut text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    fs::write(&artifacts.metadata, text)?;
    let mut clusters = String::from("row,cluster\n");
    for (i, c) in synth.clusters.iter().enumerate() {
        clusters.push_str(&format!("{i},{c}\n"));
    }
    fs::write(&artifacts.clusters, clusters)?;
    Ok(artifacts)
}
