//! Config-driven experiments: one TOML file describes the data, partition,
//! model, federated schedule, diagnostics and optional fine-tuning stage.
//! Every seed writes its own directory of artifacts; a summary aggregates
//! final accuracies across seeds.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{
    partition_iid, partition_lda, partition_sharding, Dataset, Partition, PartitionStrategy, SyntheticSpec,
};
use crate::diagnostics::{factor_report, FactorReport, NormReport};
use crate::error::{Error, Result};
use crate::fl::{run_federated, Algorithm, FlConfig, RunResult};
use crate::model::{Architecture, HeadSpec, Linear, LossSpec, ModelParams};
use crate::par::{self, Execution};
use crate::pfl::{mean_std, pfl_evaluate, PflReport, PflSpec};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const NORMS_FILE: &str = "norms.jsonl";
pub const FACTORS_FILE: &str = "factors.json";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PARTITION_FILE: &str = "partition.json";
pub const PFL_JSON_FILE: &str = "pfl.json";
pub const PFL_CSV_FILE: &str = "pfl.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "mu_sweep.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Default penalty weights for the accuracy-vs-μ sweep.
pub const DEFAULT_MU_SWEEP: [f64; 7] = [0.0, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        num_classes: usize,
        dim: usize,
        class_separation: f64,
        noise_scale: f64,
        train_per_class: usize,
        test_per_class: usize,
    },
    /// Binary dataset files as written by [`Dataset::write_binary`].
    Files { train: PathBuf, test: PathBuf },
}

impl DatasetConfig {
    /// Train and test sets; synthetic data is drawn from the run seed.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Synthetic {
                num_classes,
                dim,
                class_separation,
                noise_scale,
                train_per_class,
                test_per_class,
            } => SyntheticSpec {
                num_classes: *num_classes,
                dim: *dim,
                class_separation: *class_separation,
                noise_scale: *noise_scale,
            }
            .generate_split(*train_per_class, *test_per_class, seed),
            DatasetConfig::Files { train, test } => {
                let (tr, te) = (Dataset::read_binary(train)?, Dataset::read_binary(test)?);
                if tr.dim() != te.dim() || tr.num_classes() != te.num_classes() {
                    return Err(Error::config("train and test files disagree on dimension or class count"));
                }
                Ok((tr, te))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Iid,
    Sharding,
    Lda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub strategy: StrategyName,
    /// Shards per client, for sharding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<usize>,
    /// Dirichlet concentration, for LDA.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_min_per_client")]
    pub min_per_client: usize,
    /// Fixed partition seed; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_min_per_client() -> usize {
    1
}

impl PartitionConfig {
    pub fn strategy(&self) -> Result<PartitionStrategy> {
        match self.strategy {
            StrategyName::Iid => Ok(PartitionStrategy::Iid),
            StrategyName::Sharding => self
                .s
                .map(|s| PartitionStrategy::Sharding { s })
                .ok_or_else(|| Error::config("sharding partition needs `s`")),
            StrategyName::Lda => self
                .alpha
                .map(|alpha| PartitionStrategy::Lda {
                    alpha,
                    min_per_client: self.min_per_client,
                })
                .ok_or_else(|| Error::config("lda partition needs `alpha`")),
        }
    }

    pub fn build(&self, train: &Dataset, num_clients: usize, run_seed: u64) -> Result<Partition> {
        let seed = self.seed.unwrap_or(run_seed);
        match self.strategy()? {
            PartitionStrategy::Iid => partition_iid(train, num_clients, seed),
            PartitionStrategy::Sharding { s } => partition_sharding(train, num_clients, s, seed),
            PartitionStrategy::Lda { alpha, min_per_client } => {
                partition_lda(train, num_clients, alpha, seed, min_per_client)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

fn default_feature_dim() -> usize {
    16
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: default_hidden(),
            feature_dim: default_feature_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlSection {
    #[serde(default = "defaults::num_clients")]
    pub num_clients: usize,
    #[serde(default = "defaults::fraction")]
    pub fraction: f64,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::algorithm")]
    pub algorithm: Algorithm,
    /// How clients within a round are trained; results do not depend on it.
    #[serde(default)]
    pub execution: Execution,
}

mod defaults {
    use crate::fl::Algorithm;

    pub fn num_clients() -> usize {
        20
    }
    pub fn fraction() -> f64 {
        0.25
    }
    pub fn rounds() -> usize {
        64
    }
    pub fn local_epochs() -> usize {
        5
    }
    pub fn batch_size() -> usize {
        50
    }
    pub fn lr() -> f64 {
        0.01
    }
    pub fn algorithm() -> Algorithm {
        Algorithm::FedAvg
    }
    pub fn pfl_epochs() -> usize {
        5
    }
    pub fn lr_multipliers() -> Vec<f64> {
        vec![1.0, 0.1, 0.01]
    }
    pub fn yes() -> bool {
        true
    }
    pub fn seeds() -> Vec<u64> {
        vec![0]
    }
}

impl Default for FlSection {
    fn default() -> Self {
        FlSection {
            num_clients: defaults::num_clients(),
            fraction: defaults::fraction(),
            rounds: defaults::rounds(),
            local_epochs: defaults::local_epochs(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            algorithm: defaults::algorithm(),
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Rounds between norm snapshots; defaults to `R/16` (at least 1). 0 disables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PflConfig {
    #[serde(default = "defaults::pfl_epochs")]
    pub epochs: usize,
    /// Defaults to the federated batch size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Grid of fine-tuning rates as multiples of the federated `lr`.
    #[serde(default = "defaults::lr_multipliers")]
    pub lr_multipliers: Vec<f64>,
    /// Also train a frozen classifier while fine-tuning.
    #[serde(default = "defaults::yes")]
    pub unfreeze: bool,
}

impl Default for PflConfig {
    fn default() -> Self {
        PflConfig {
            epochs: defaults::pfl_epochs(),
            batch_size: None,
            lr_multipliers: defaults::lr_multipliers(),
            unfreeze: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    /// Run seeds concurrently.
    #[serde(default)]
    pub parallel_seeds: bool,
    /// Repeat the run as FedFR once per penalty weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_sweep: Option<Vec<f64>>,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub fl: FlSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pfl: Option<PflConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn snapshot_every(&self) -> usize {
        self.diagnostics
            .snapshot_every
            .unwrap_or((self.fl.rounds / 16).max(1))
    }

    pub fn fl_config(&self, seed: u64) -> FlConfig {
        FlConfig {
            num_clients: self.fl.num_clients,
            fraction: self.fl.fraction,
            rounds: self.fl.rounds,
            local_epochs: self.fl.local_epochs,
            batch_size: self.fl.batch_size,
            lr: self.fl.lr,
            algorithm: self.fl.algorithm,
            seed,
            snapshot_every: self.snapshot_every(),
            execution: self.fl.execution,
        }
    }

    pub fn architecture(&self, train: &Dataset) -> Architecture {
        Architecture {
            input_dim: train.dim(),
            hidden: self.model.hidden.clone(),
            feature_dim: self.model.feature_dim,
            num_classes: train.num_classes(),
        }
    }

    pub fn pfl_spec(&self) -> Option<PflSpec> {
        self.pfl.as_ref().map(|p| PflSpec {
            epochs: p.epochs,
            batch_size: p.batch_size.unwrap_or(self.fl.batch_size),
            lr_grid: p.lr_multipliers.iter().map(|m| m * self.fl.lr).collect(),
            loss: self.fl.algorithm.loss(),
            unfreeze: p.unfreeze,
            execution: self.fl.execution,
        })
    }

    /// Checks every component invariant that can be checked before training,
    /// including building the partition for the first seed.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seed list has duplicates"));
        }
        if let Some(sweep) = &self.mu_sweep {
            if sweep.is_empty() {
                return Err(Error::config("mu sweep is empty"));
            }
            for &mu in sweep {
                Algorithm::FedFr { mu }.validate()?;
            }
        }
        if let Some(p) = &self.pfl {
            if p.epochs == 0 || p.batch_size == Some(0) {
                return Err(Error::config("fine-tuning epochs and batch size must be positive"));
            }
            if p.lr_multipliers.is_empty() || p.lr_multipliers.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
                return Err(Error::config("fine-tuning learning-rate multipliers must be non-negative"));
            }
        }
        if let DatasetConfig::Synthetic {
            train_per_class,
            test_per_class,
            ..
        } = self.dataset
        {
            if train_per_class == 0 || test_per_class == 0 {
                return Err(Error::config("examples per class must be positive"));
            }
        }
        self.fl_config(self.seeds[0]).validate()?;
        let (train, _) = self.dataset.load(self.seeds[0])?;
        let arch = self.architecture(&train);
        arch.validate()?;
        self.fl.algorithm.init_model(&arch, 0)?;
        self.partition.build(&train, self.fl.num_clients, self.seeds[0])?;
        Ok(())
    }

    fn with_algorithm(&self, algorithm: Algorithm, out_dir: PathBuf) -> ExperimentConfig {
        let mut c = self.clone();
        c.fl.algorithm = algorithm;
        c.out_dir = out_dir;
        c.mu_sweep = None;
        c
    }
}

/// Reads and fully validates a TOML experiment file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    ExperimentConfig::from_toml(&text, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// A trained model as named parameter arrays plus enough metadata to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub rounds: usize,
    pub head: HeadSpec,
    pub loss: LossSpec,
    pub frozen_classifier: bool,
    pub parameters: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(model: &ModelParams, algorithm: Algorithm, seed: u64, rounds: usize) -> Self {
        Checkpoint {
            algorithm,
            seed,
            rounds,
            head: model.head,
            loss: algorithm.loss(),
            frozen_classifier: model.frozen_classifier,
            parameters: model
                .named_tensors()
                .into_iter()
                .map(|(name, t)| NamedTensor { name, tensor: t.clone() })
                .collect(),
        }
    }

    pub fn model(&self) -> Result<ModelParams> {
        let find = |name: &str| {
            self.parameters
                .iter()
                .find(|p| p.name == name)
                .map(|p| p.tensor.clone())
                .ok_or_else(|| Error::config(format!("checkpoint lacks parameter `{name}`")))
        };
        let n_layers = self.parameters.iter().filter(|p| p.name.ends_with(".weight")).count();
        let layers = (0..n_layers)
            .map(|i| {
                Ok(Linear {
                    weight: find(&format!("extractor.{i}.weight"))?,
                    bias: find(&format!("extractor.{i}.bias"))?,
                })
            })
            .collect::<Result<_>>()?;
        let model = ModelParams {
            layers,
            classifier: find("classifier")?,
            head: self.head,
            frozen_classifier: self.frozen_classifier,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub final_accuracy: Option<f64>,
    /// Best-grid personalized mean accuracy, when fine-tuning ran.
    pub pfl_best: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: String,
    pub seeds: Vec<SeedOutcome>,
    /// Mean and population std of final accuracy over the seeds that finished.
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
}

impl Summary {
    pub fn failures(&self) -> usize {
        self.seeds.iter().filter(|s| s.error.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub mu: f64,
    pub dir: PathBuf,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExperimentOutcome {
    Single(Summary),
    Sweep(Vec<SweepPoint>),
}

impl ExperimentOutcome {
    /// Seeds that failed, over all sweep points.
    pub fn failures(&self, root: &Path) -> Result<usize> {
        match self {
            ExperimentOutcome::Single(s) => Ok(s.failures()),
            ExperimentOutcome::Sweep(points) => points.iter().try_fold(0, |acc, p| {
                let s: Summary = read_json(&root.join(&p.dir).join(SUMMARY_FILE))?;
                Ok(acc + s.failures())
            }),
        }
    }
}

pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed_{seed}"))
}

/// Runs every seed (and every sweep point) and writes all artifacts.
/// Failing seeds are recorded in the summary rather than aborting the others.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    fs::create_dir_all(&config.out_dir)?;
    fs::write(config.out_dir.join(CONFIG_FILE), config.to_toml()?)?;
    match &config.mu_sweep {
        None => Ok(ExperimentOutcome::Single(run_seeds(config)?)),
        Some(sweep) => {
            let mut points = Vec::with_capacity(sweep.len());
            for (i, &mu) in sweep.iter().enumerate() {
                let dir = PathBuf::from(format!("mu_{i}"));
                let sub = config.with_algorithm(Algorithm::FedFr { mu }, config.out_dir.join(&dir));
                fs::create_dir_all(&sub.out_dir)?;
                fs::write(sub.out_dir.join(CONFIG_FILE), sub.to_toml()?)?;
                let summary = run_seeds(&sub)?;
                points.push(SweepPoint {
                    mu,
                    dir,
                    mean_accuracy: summary.mean_accuracy,
                    std_accuracy: summary.std_accuracy,
                });
            }
            write_json(&config.out_dir.join(SWEEP_FILE), &points)?;
            Ok(ExperimentOutcome::Sweep(points))
        }
    }
}

fn run_seeds(config: &ExperimentConfig) -> Result<Summary> {
    let exec = if config.parallel_seeds {
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    let outcomes = par::map(exec, &config.seeds, |&seed| match run_seed(config, seed) {
        Ok((acc, pfl)) => SeedOutcome {
            seed,
            final_accuracy: acc,
            pfl_best: pfl,
            error: None,
        },
        Err(e) => SeedOutcome {
            seed,
            final_accuracy: None,
            pfl_best: None,
            error: Some(e.to_string()),
        },
    });
    let finals: Vec<f64> = outcomes.iter().filter_map(|o| o.final_accuracy).collect();
    let (mean, std) = mean_std(&finals);
    let summary = Summary {
        algorithm: config.fl.algorithm.label(),
        seeds: outcomes,
        mean_accuracy: (!finals.is_empty()).then_some(mean),
        std_accuracy: (!finals.is_empty()).then_some(std),
    };
    write_json(&config.out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Everything needed to rerun diagnostics or fine-tuning for one seed.
pub struct SeedContext {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub arch: Architecture,
}

pub fn seed_context(config: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let (train, test) = config.dataset.load(seed)?;
    let partition = config.partition.build(&train, config.fl.num_clients, seed)?;
    let arch = config.architecture(&train);
    Ok(SeedContext {
        train,
        test,
        partition,
        arch,
    })
}

fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<(Option<f64>, Option<f64>)> {
    let dir = seed_dir(&config.out_dir, seed);
    fs::create_dir_all(&dir)?;
    let ctx = seed_context(config, seed)?;
    ctx.partition.write_json(&dir.join(PARTITION_FILE))?;

    let fl = config.fl_config(seed);
    let result = run_federated(&fl, &ctx.arch, &ctx.train, &ctx.test, &ctx.partition)?;
    write_run_artifacts(&dir, &result)?;
    Checkpoint::new(&result.final_model, fl.algorithm, seed, fl.rounds).write(&dir.join(CHECKPOINT_FILE))?;
    let factors = write_factor_artifacts(&dir, &result.final_model, &ctx.test, Some(fl.rounds))?;
    debug_assert_eq!(factors.model, "global");

    let pfl_best = match config.pfl_spec() {
        Some(spec) => {
            let report = pfl_evaluate(
                &fl.algorithm.label(),
                &result.final_model,
                &ctx.partition,
                &ctx.train,
                &ctx.test,
                &spec,
                seed,
            )?;
            write_pfl_artifacts(&dir, &report)?;
            Some(report.best_row().mean)
        }
        None => None,
    };
    Ok((result.final_accuracy(), pfl_best))
}

fn write_run_artifacts(dir: &Path, result: &RunResult) -> Result<()> {
    write_jsonl(&dir.join(METRICS_FILE), &result.metrics)?;
    write_jsonl(&dir.join(NORMS_FILE), &result.snapshots)
}

/// Global-model factor report plus its heatmap CSV.
pub fn write_factor_artifacts(
    dir: &Path,
    model: &ModelParams,
    test: &Dataset,
    round: Option<usize>,
) -> Result<FactorReport> {
    let report = factor_report(model, test, round, "global")?;
    write_json(&dir.join(FACTORS_FILE), &report)?;
    report.write_heatmap_csv(&dir.join(HEATMAP_FILE))?;
    Ok(report)
}

pub fn write_pfl_artifacts(dir: &Path, report: &PflReport) -> Result<()> {
    write_json(&dir.join(PFL_JSON_FILE), report)?;
    report.write_csv(&dir.join(PFL_CSV_FILE))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    NormCurves,
    Heatmaps,
    MuSweep,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [PlotKind::NormCurves, PlotKind::Heatmaps, PlotKind::MuSweep];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::NormCurves => "norm-curves",
            PlotKind::Heatmaps => "heatmaps",
            PlotKind::MuSweep => "mu-sweep",
        }
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown plot kind `{s}` (norm-curves, heatmaps, mu-sweep)")))
    }
}

/// Long-format CSV for one figure kind, written next to the artifacts it
/// reads. `run_dir` is a seed directory for norm curves and heatmaps and the
/// experiment root for the μ sweep. Returns the CSV path.
pub fn emit_plot_data(run_dir: &Path, kind: PlotKind) -> Result<PathBuf> {
    let out = run_dir.join(format!("plot_{}.csv", kind.name().replace('-', "_")));
    match kind {
        PlotKind::NormCurves => {
            let reports: Vec<NormReport> = read_jsonl(&require(run_dir, NORMS_FILE)?)?;
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["round", "series", "value"])?;
            for r in &reports {
                for (name, value) in r.series() {
                    w.write_record([r.round.to_string(), name.to_string(), value.map_or(String::new(), |v| v.to_string())])?;
                }
            }
            w.flush()?;
        }
        PlotKind::Heatmaps => {
            let report: FactorReport = read_json(&require(run_dir, FACTORS_FILE)?)?;
            report.write_heatmap_csv(&out)?;
        }
        PlotKind::MuSweep => {
            let points: Vec<SweepPoint> = read_json(&require(run_dir, SWEEP_FILE)?)?;
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["mu", "accuracy"])?;
            for p in &points {
                w.write_record([p.mu.to_string(), p.mean_accuracy.map_or(String::new(), |v| v.to_string())])?;
            }
            w.flush()?;
        }
    }
    Ok(out)
}

fn require(dir: &Path, file: &str) -> Result<PathBuf> {
    let path = dir.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// One compact JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        serde_json::to_writer(&mut w, v)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
