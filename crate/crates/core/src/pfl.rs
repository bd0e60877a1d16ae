//! Personalized evaluation: every client fine-tunes its own copy of the
//! converged global model and is scored on the test examples of the classes
//! it holds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{client_classes, Dataset, Partition};
use crate::error::{Error, Result};
use crate::fl::{evaluate_subset, local_train, LocalSpec};
use crate::model::{LossSpec, ModelParams};
use crate::par::{self, Execution};
use crate::rng::{derive_seed, stream};

/// Test indices whose label is one of client `n`'s training classes.
pub fn build_personal_testset(
    test: &Dataset,
    partition: &Partition,
    train: &Dataset,
    n: usize,
) -> Result<Vec<usize>> {
    let classes = client_classes(partition, train, n)?;
    if classes.is_empty() {
        return Err(Error::EmptyTestSet(n));
    }
    Ok((0..test.len()).filter(|&i| classes.contains(&test.label(i))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTuneSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossSpec,
    /// Train a previously frozen classifier too (the "-FT" variants).
    pub unfreeze: bool,
}

/// Local SGD on a copy of the global model over one client's training data.
pub fn fine_tune(
    global: &ModelParams,
    train: &Dataset,
    indices: &[usize],
    spec: &FineTuneSpec,
    seed: u64,
    client: usize,
) -> Result<ModelParams> {
    if spec.epochs == 0 {
        return Err(Error::config("fine-tuning needs at least one epoch"));
    }
    let mut start = global.clone();
    if spec.unfreeze {
        start.frozen_classifier = false;
    }
    let local = LocalSpec {
        epochs: spec.epochs,
        batch_size: spec.batch_size,
        lr: spec.lr,
        loss: spec.loss,
    };
    Ok(local_train(&start, train, indices, &local, seed, client)?.model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalResult {
    /// Fine-tuning learning rate; `None` for the un-tuned global model.
    pub lr: Option<f64>,
    pub epochs: usize,
    pub clients: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over clients.
    pub std: f64,
}

impl PersonalResult {
    fn new(lr: Option<f64>, epochs: usize, clients: Vec<usize>, accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        PersonalResult {
            lr,
            epochs,
            clients,
            accuracies,
            mean,
            std,
        }
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PflReport {
    pub algorithm: String,
    /// Global model scored on each client's personal test set.
    pub global: PersonalResult,
    /// One row per learning rate in the grid, in grid order.
    pub rows: Vec<PersonalResult>,
    /// Index into `rows` of the highest mean.
    pub best: usize,
    /// Clients skipped for having no classes (and so no personal test set).
    pub excluded: Vec<usize>,
}

impl PflReport {
    pub fn best_row(&self) -> &PersonalResult {
        &self.rows[self.best]
    }

    /// CSV rows `algorithm,lr,epochs,mean,std,clients`, global baseline first.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["algorithm", "lr", "epochs", "mean", "std", "clients"])?;
        for r in std::iter::once(&self.global).chain(&self.rows) {
            w.write_record([
                self.algorithm.clone(),
                r.lr.map_or_else(|| "global".to_string(), |v| v.to_string()),
                r.epochs.to_string(),
                r.mean.to_string(),
                r.std.to_string(),
                r.clients.len().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PflSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_grid: Vec<f64>,
    pub loss: LossSpec,
    pub unfreeze: bool,
    pub execution: Execution,
}

/// Fine-tunes every client at every grid learning rate and reports per-LR
/// mean ± std of personalized accuracy plus the best row by mean.
pub fn pfl_evaluate(
    algorithm: &str,
    global: &ModelParams,
    partition: &Partition,
    train: &Dataset,
    test: &Dataset,
    spec: &PflSpec,
    seed: u64,
) -> Result<PflReport> {
    if spec.lr_grid.is_empty() {
        return Err(Error::config("fine-tuning learning-rate grid is empty"));
    }
    let mut clients = Vec::new();
    let mut excluded = Vec::new();
    let mut testsets = Vec::new();
    for n in 0..partition.num_clients {
        match build_personal_testset(test, partition, train, n) {
            Ok(set) if !set.is_empty() && !partition.client(n).is_empty() => {
                clients.push(n);
                testsets.push(set);
            }
            Ok(_) | Err(Error::EmptyTestSet(_)) => excluded.push(n),
            Err(e) => return Err(e),
        }
    }
    if clients.is_empty() {
        return Err(Error::config("no client has a personal test set"));
    }
    let jobs: Vec<(usize, &Vec<usize>)> = clients.iter().copied().zip(&testsets).collect();

    let global_acc = par::map(spec.execution, &jobs, |&(_, set)| evaluate_subset(global, test, set))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let global_row = PersonalResult::new(None, 0, clients.clone(), global_acc);

    let mut rows = Vec::with_capacity(spec.lr_grid.len());
    for &lr in &spec.lr_grid {
        let ft = FineTuneSpec {
            epochs: spec.epochs,
            batch_size: spec.batch_size,
            lr,
            loss: spec.loss,
            unfreeze: spec.unfreeze,
        };
        let accs = par::map(spec.execution, &jobs, |&(n, set)| {
            let s = derive_seed(&[seed, stream::FINE_TUNE, n as u64]);
            let tuned = fine_tune(global, train, partition.client(n), &ft, s, n)?;
            evaluate_subset(&tuned, test, set)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        rows.push(PersonalResult::new(Some(lr), spec.epochs, clients.clone(), accs));
    }
    let best = (0..rows.len())
        .fold(0, |b, i| if rows[i].mean > rows[b].mean { i } else { b });
    Ok(PflReport {
        algorithm: algorithm.to_string(),
        global: global_row,
        rows,
        best,
        excluded,
    })
}
