//! The federated round loop: client sampling, broadcast, local SGD,
//! convex aggregation, step-decayed learning rate, and evaluation.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Partition};
use crate::diagnostics::{norm_report, NormReport};
use crate::error::{Error, Result};
use crate::model::{Architecture, HeadSpec, LossSpec, ModelParams};
use crate::par::{self, Execution};
use crate::rng::{derive_seed, rng_for, stream};

/// Tolerance on `Σ wₙ = 1` for aggregation weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Examples per forward pass during evaluation.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Algorithm {
    FedAvg,
    /// Cosine logits on normalized features, trainable classifier.
    FedFn,
    /// Cross entropy plus `mu·‖f‖₂` on the standard head.
    FedFr { mu: f64 },
    /// Standard head with the classifier frozen at its random init.
    FedBabu,
    SphereFedCe { tau: f64 },
    SphereFedMse { tau: f64 },
}

impl Algorithm {
    pub fn head(&self) -> HeadSpec {
        match *self {
            Algorithm::FedAvg | Algorithm::FedFr { .. } | Algorithm::FedBabu => HeadSpec::standard(),
            Algorithm::FedFn => HeadSpec::normalized(),
            Algorithm::SphereFedCe { tau } | Algorithm::SphereFedMse { tau } => {
                HeadSpec::frozen_orthonormal(tau)
            }
        }
    }

    pub fn loss(&self) -> LossSpec {
        match *self {
            Algorithm::FedFr { mu } => LossSpec::feature_norm_penalty(mu),
            Algorithm::SphereFedMse { .. } => LossSpec::mse_onehot(),
            _ => LossSpec::cross_entropy(),
        }
    }

    pub fn frozen_classifier(&self) -> bool {
        matches!(
            self,
            Algorithm::FedBabu | Algorithm::SphereFedCe { .. } | Algorithm::SphereFedMse { .. }
        )
    }

    pub fn label(&self) -> String {
        match *self {
            Algorithm::FedAvg => "FedAVG".into(),
            Algorithm::FedFn => "FedFN".into(),
            Algorithm::FedFr { mu } => format!("FedFR(mu={mu})"),
            Algorithm::FedBabu => "FedBABU".into(),
            Algorithm::SphereFedCe { tau } => format!("SphereFed-CE(tau={tau})"),
            Algorithm::SphereFedMse { tau } => format!("SphereFed-MSE(tau={tau})"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.head().validate()?;
        self.loss().check_head(&self.head())
    }

    /// Fresh global model for this algorithm.
    pub fn init_model(&self, arch: &Architecture, seed: u64) -> Result<ModelParams> {
        ModelParams::init(arch, self.head(), self.frozen_classifier(), seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlConfig {
    pub num_clients: usize,
    pub fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Norm snapshot after every `snapshot_every`-th round; 0 disables.
    pub snapshot_every: usize,
    pub execution: Execution,
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("number of clients must be positive"));
        }
        if !(self.fraction > 0.0) {
            return Err(Error::config("fraction must be positive"));
        }
        if self.fraction > 1.0 {
            return Err(Error::config("fraction must be at most 1"));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("local epochs and batch size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        self.algorithm.validate()
    }

    pub fn clients_per_round(&self) -> usize {
        clients_per_round(self.num_clients, self.fraction)
    }

    fn is_snapshot_round(&self, round: usize) -> bool {
        self.snapshot_every > 0 && (round + 1) % self.snapshot_every == 0
    }
}

fn clients_per_round(n: usize, r: f64) -> usize {
    // Guard against 0.1·100 = 10.000000000000002 rounding up to 11.
    let exact = r * n as f64;
    let rounded = exact.round();
    let k = if (exact - rounded).abs() < 1e-9 { rounded } else { exact.ceil() };
    (k as usize).clamp(1, n)
}

/// `⌈r·N⌉` distinct clients, uniform without replacement, keyed by `(seed, round)`.
/// Returned in ascending order.
pub fn sample_clients(num_clients: usize, fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    let k = clients_per_round(num_clients, fraction);
    let mut rng = rng_for(&[seed, stream::SAMPLING, round as u64]);
    let mut picked = index::sample(&mut rng, num_clients, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Step decay: `η` before `⌊R/2⌋`, `0.1η` before `⌊3R/4⌋`, `0.01η` after.
pub fn lr_at_round(eta: f64, rounds: usize, round: usize) -> f64 {
    if round < rounds / 2 {
        eta
    } else if round < 3 * rounds / 4 {
        0.1 * eta
    } else {
        0.01 * eta
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossSpec,
}

#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub model: ModelParams,
    /// Mean of the per-batch training losses.
    pub mean_loss: f64,
}

/// Mini-batch SGD on a private copy of `model` over the examples `indices`.
/// Each epoch reshuffles with a stream derived from `seed`; the short final
/// batch is kept. Errors carry the client id and the running batch number.
pub fn local_train(
    model: &ModelParams,
    data: &Dataset,
    indices: &[usize],
    spec: &LocalSpec,
    seed: u64,
    client: usize,
) -> Result<LocalUpdate> {
    if indices.is_empty() {
        return Err(Error::config(format!("client {client} has no local data")));
    }
    if spec.epochs == 0 || spec.batch_size == 0 {
        return Err(Error::config("local epochs and batch size must be positive"));
    }
    let mut local = model.clone();
    let mut order = indices.to_vec();
    let mut total_loss = 0.0;
    let mut batches = 0usize;
    for epoch in 0..spec.epochs {
        let mut rng = rng_for(&[seed, epoch as u64]);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(spec.batch_size) {
            let wrap = |e: Error| Error::Training {
                client,
                batch: batches,
                source: Box::new(e),
            };
            let (xs, ys) = data.batch(chunk).map_err(wrap)?;
            let (loss, grads) = local.gradients(&spec.loss, &xs, &ys).map_err(wrap)?;
            local.apply_sgd(&grads, spec.lr);
            total_loss += loss;
            batches += 1;
        }
    }
    Ok(LocalUpdate {
        model: local,
        mean_loss: total_loss / batches as f64,
    })
}

/// Parameter-wise convex combination `Σ wₙ θₙ`, accumulated in list order.
/// A frozen classifier is copied from the first model unchanged.
pub fn aggregate(models: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::config("cannot aggregate an empty model list"))?;
    if models.len() != weights.len() {
        return Err(Error::config(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::config("aggregation weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::config(format!("aggregation weights sum to {total}, not 1")));
    }
    if let Some(bad) = models.iter().position(|m| !m.same_architecture(first)) {
        return Err(Error::dim(format!("model {bad} differs in architecture")));
    }

    let mut out = first.clone();
    let frozen = first.frozen_classifier;
    let n_tensors = first.tensors().len();
    let classifier_slot = n_tensors - 1;
    let mut sums: Vec<Vec<f64>> = first.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for (m, &w) in models.iter().zip(weights) {
        for (slot, (acc, t)) in sums.iter_mut().zip(m.tensors()).enumerate() {
            if frozen && slot == classifier_slot {
                continue;
            }
            acc.iter_mut().zip(t.data()).for_each(|(a, v)| *a += w * v);
        }
    }
    for (slot, (t, acc)) in out.tensors_mut().into_iter().zip(sums).enumerate() {
        if frozen && slot == classifier_slot {
            continue;
        }
        *t = crate::tensor::Tensor::new(t.shape().to_vec(), acc)?;
    }
    Ok(out)
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted classes for the given example indices.
pub fn predict(model: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (xs, _) = dataset.batch(chunk)?;
        let f = model.features_batch(&xs)?;
        let z = model.logits_batch(&f)?;
        out.extend((0..z.rows()).map(|r| argmax(z.row(r))));
    }
    Ok(out)
}

/// Accuracy over a subset of examples.
pub fn evaluate_subset(model: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::config("cannot evaluate on an empty set"));
    }
    let preds = predict(model, dataset, indices)?;
    let correct = preds
        .iter()
        .zip(indices)
        .filter(|(p, &i)| **p == dataset.label(i))
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

/// Fraction of examples whose argmax logit equals the label.
pub fn evaluate(model: &ModelParams, dataset: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    evaluate_subset(model, dataset, &all)
}

/// One JSONL record per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub lr: f64,
    pub acc: f64,
    /// Mean local training loss of the round; `None` if no client trained.
    pub loss: Option<f64>,
    pub alg: String,
    pub seed: u64,
    /// Index into [`RunResult::snapshots`] when this round was snapshotted.
    #[serde(skip)]
    pub snapshot: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub initial_model: ModelParams,
    pub final_model: ModelParams,
    pub metrics: Vec<RoundMetrics>,
    pub snapshots: Vec<NormReport>,
}

impl RunResult {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.acc)
    }
}

/// Per-client training stream for a round.
pub fn local_seed(seed: u64, round: usize, client: usize) -> u64 {
    derive_seed(&[seed, stream::LOCAL, round as u64, client as u64])
}

/// `R` rounds of sample → broadcast → local SGD → data-weighted aggregation.
/// Local training of the selected clients may run concurrently; aggregation
/// always reduces in ascending client order, so the result does not depend
/// on [`Execution`].
pub fn run_federated(
    config: &FlConfig,
    arch: &Architecture,
    train: &Dataset,
    test: &Dataset,
    partition: &Partition,
) -> Result<RunResult> {
    config.validate()?;
    if partition.num_clients != config.num_clients {
        return Err(Error::config(format!(
            "partition has {} clients, config expects {}",
            partition.num_clients, config.num_clients
        )));
    }
    if arch.input_dim != train.dim() || arch.num_classes != train.num_classes() {
        return Err(Error::config("architecture does not match the dataset"));
    }
    partition.validate_against(train.len())?;

    let initial = config.algorithm.init_model(arch, config.seed)?;
    let loss = config.algorithm.loss();
    let mut global = initial.clone();
    let mut metrics = Vec::with_capacity(config.rounds);
    let mut snapshots = Vec::new();
    let alg = config.algorithm.label();

    for round in 0..config.rounds {
        let lr = lr_at_round(config.lr, config.rounds, round);
        let selected: Vec<usize> = sample_clients(config.num_clients, config.fraction, round, config.seed)
            .into_iter()
            .filter(|&k| !partition.client(k).is_empty())
            .collect();
        let spec = LocalSpec {
            epochs: config.local_epochs,
            batch_size: config.batch_size,
            lr,
            loss,
        };
        let updates: Vec<LocalUpdate> = par::map(config.execution, &selected, |&k| {
            local_train(&global, train, partition.client(k), &spec, local_seed(config.seed, round, k), k)
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let mean_loss = (!updates.is_empty())
            .then(|| updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64);
        if !updates.is_empty() {
            let total: usize = selected.iter().map(|&k| partition.client(k).len()).sum();
            let weights: Vec<f64> = selected
                .iter()
                .map(|&k| partition.client(k).len() as f64 / total as f64)
                .collect();
            let locals: Vec<ModelParams> = updates.iter().map(|u| u.model.clone()).collect();
            global = aggregate(&locals, &weights)?;
        }

        let acc = evaluate(&global, test)?;
        let snapshot = if config.is_snapshot_round(round) && !updates.is_empty() {
            let locals: Vec<(usize, &ModelParams)> =
                selected.iter().copied().zip(updates.iter().map(|u| &u.model)).collect();
            snapshots.push(norm_report(&locals, &global, partition, train, test, round)?);
            Some(snapshots.len() - 1)
        } else {
            None
        };
        metrics.push(RoundMetrics {
            round,
            lr,
            acc,
            loss: mean_loss,
            alg: alg.clone(),
            seed: config.seed,
            snapshot,
        });
    }

    Ok(RunResult {
        initial_model: initial,
        final_model: global,
        metrics,
        snapshots,
    })
}

/// Single-machine SGD with the same schedule and seeds as a one-client,
/// full-participation federated run.
pub fn train_centralized(config: &FlConfig, arch: &Architecture, train: &Dataset) -> Result<ModelParams> {
    config.validate()?;
    let mut model = config.algorithm.init_model(arch, config.seed)?;
    let all: Vec<usize> = (0..train.len()).collect();
    for round in 0..config.rounds {
        let spec = LocalSpec {
            epochs: config.local_epochs,
            batch_size: config.batch_size,
            lr: lr_at_round(config.lr, config.rounds, round),
            loss: config.algorithm.loss(),
        };
        model = local_train(&model, train, &all, &spec, local_seed(config.seed, round, 0), 0)?.model;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition_iid, partition_sharding, SyntheticSpec};
    use crate::model::Linear;
    use crate::tensor::Tensor;

    fn small_problem(seed: u64) -> (Architecture, Dataset, Dataset) {
        let spec = SyntheticSpec {
            num_classes: 4,
            dim: 6,
            class_separation: 3.0,
            noise_scale: 1.0,
        };
        let (train, test) = spec.generate_split(20, 10, seed).unwrap();
        let arch = Architecture {
            input_dim: 6,
            hidden: vec![8],
            feature_dim: 5,
            num_classes: 4,
        };
        (arch, train, test)
    }

    fn config(algorithm: Algorithm, num_clients: usize, fraction: f64, rounds: usize) -> FlConfig {
        FlConfig {
            num_clients,
            fraction,
            rounds,
            local_epochs: 2,
            batch_size: 8,
            lr: 0.1,
            algorithm,
            seed: 3,
            snapshot_every: 2,
            execution: Execution::Sequential,
        }
    }

    #[test]
    fn sampling_counts_and_determinism() {
        let picked = sample_clients(100, 0.1, 7, 1);
        assert_eq!(picked.len(), 10);
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(picked, sample_clients(100, 0.1, 7, 1));
        assert_ne!(picked, sample_clients(100, 0.1, 8, 1));
        assert_eq!(sample_clients(20, 1.0, 0, 5), (0..20).collect::<Vec<_>>());
        assert_eq!(sample_clients(20, 0.25, 0, 5).len(), 5);
        assert_eq!(sample_clients(3, 0.01, 0, 5).len(), 1);
    }

    #[test]
    fn lr_schedule_boundaries() {
        assert_eq!(lr_at_round(0.01, 320, 0), 0.01);
        assert_eq!(lr_at_round(0.01, 320, 159), 0.01);
        assert_eq!(lr_at_round(0.01, 320, 160), 0.1 * 0.01);
        assert_eq!(lr_at_round(0.01, 320, 239), 0.1 * 0.01);
        assert_eq!(lr_at_round(0.01, 320, 240), 0.01 * 0.01);
        let seq: Vec<f64> = (0..4).map(|r| lr_at_round(1.0, 4, r)).collect();
        assert_eq!(seq, vec![1.0, 1.0, 0.1, 0.01]);
    }

    #[test]
    fn config_rejects_bad_fraction() {
        let mut c = config(Algorithm::FedAvg, 4, 0.0, 1);
        assert!(c.validate().unwrap_err().to_string().contains("fraction must be positive"));
        c.fraction = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_lr_local_training_is_identity() {
        let (arch, train, _) = small_problem(0);
        let model = Algorithm::FedAvg.init_model(&arch, 1).unwrap();
        let spec = LocalSpec {
            epochs: 3,
            batch_size: 7,
            lr: 0.0,
            loss: LossSpec::cross_entropy(),
        };
        let idx: Vec<usize> = (0..30).collect();
        let out = local_train(&model, &train, &idx, &spec, 9, 0).unwrap();
        assert_eq!(out.model, model);
        assert!(out.mean_loss.is_finite());
    }

    #[test]
    fn local_step_matches_hand_computed_sgd() {
        // One scalar feature f = w·x + b, frozen two-row classifier, one full batch.
        let xs = [0.5, -1.0, 2.0];
        let ys = [0usize, 1, 1];
        let data = Dataset::new(Tensor::matrix(3, 1, xs.to_vec()).unwrap(), ys.to_vec(), 2).unwrap();
        let (w, b, c) = (0.7, -0.2, [1.5, -0.5]);
        let model = ModelParams {
            layers: vec![Linear {
                weight: Tensor::matrix(1, 1, vec![w]).unwrap(),
                bias: Tensor::vector(vec![b]).unwrap(),
            }],
            classifier: Tensor::matrix(2, 1, c.to_vec()).unwrap(),
            head: HeadSpec::standard(),
            frozen_classifier: true,
        };
        let lr = 0.3;
        let spec = LocalSpec {
            epochs: 1,
            batch_size: 3,
            lr,
            loss: LossSpec::cross_entropy(),
        };
        let out = local_train(&model, &data, &[0, 1, 2], &spec, 4, 0).unwrap().model;

        let (mut gw, mut gb) = (0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            let f = w * x + b;
            let z = [c[0] * f, c[1] * f];
            let m = z[0].max(z[1]);
            let e = [(z[0] - m).exp(), (z[1] - m).exp()];
            let p = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
            let df: f64 = (0..2).map(|k| (p[k] - f64::from(u8::from(k == y))) * c[k]).sum::<f64>() / 3.0;
            gw += df * x;
            gb += df;
        }
        assert!((out.layers[0].weight.item() - (w - lr * gw)).abs() < 1e-12);
        assert!((out.layers[0].bias.item() - (b - lr * gb)).abs() < 1e-12);
        assert_eq!(out.classifier, model.classifier);
    }

    #[test]
    fn aggregate_matches_flat_weighted_mean() {
        let (arch, _, _) = small_problem(0);
        let models: Vec<ModelParams> = (0..3)
            .map(|s| Algorithm::FedAvg.init_model(&arch, s).unwrap())
            .collect();
        let weights = [0.2, 0.5, 0.3];
        let agg = aggregate(&models, &weights).unwrap();
        for (slot, t) in agg.tensors().into_iter().enumerate() {
            for (i, v) in t.data().iter().enumerate() {
                let oracle: f64 = models
                    .iter()
                    .zip(weights)
                    .map(|(m, w)| w * m.tensors()[slot].data()[i])
                    .sum();
                assert!((v - oracle).abs() < 1e-12);
            }
        }
        assert_eq!(aggregate(&models[..2], &[1.0, 0.0]).unwrap(), models[0]);
        let same = vec![models[1].clone(); 3];
        let fixed = aggregate(&same, &weights).unwrap();
        for (a, b) in fixed.tensors().into_iter().zip(models[1].tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        assert!(aggregate(&models, &[0.5, 0.5, 0.5]).is_err());
        assert!(aggregate(&[], &[]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[-1.0, -0.5, -2.0]), 1);
    }

    #[test]
    fn evaluate_breaks_ties_toward_lowest_class() {
        let data = Dataset::new(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(), vec![0, 1], 2).unwrap();
        let model = ModelParams {
            layers: vec![Linear {
                weight: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                bias: Tensor::vector(vec![0.0]).unwrap(),
            }],
            classifier: Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(),
            head: HeadSpec::standard(),
            frozen_classifier: false,
        };
        assert_eq!(predict(&model, &data, &[0, 1]).unwrap(), vec![0, 0]);
        assert_eq!(evaluate(&model, &data).unwrap(), 0.5);
    }

    #[test]
    fn zero_rounds_returns_initial_model() {
        let (arch, train, test) = small_problem(1);
        let part = partition_iid(&train, 4, 0).unwrap();
        let res = run_federated(&config(Algorithm::FedAvg, 4, 0.5, 0), &arch, &train, &test, &part).unwrap();
        assert_eq!(res.final_model, res.initial_model);
        assert!(res.metrics.is_empty());
    }

    #[test]
    fn single_full_client_equals_centralized() {
        let (arch, train, test) = small_problem(2);
        let part = partition_iid(&train, 1, 0).unwrap();
        let cfg = config(Algorithm::FedAvg, 1, 1.0, 3);
        let fed = run_federated(&cfg, &arch, &train, &test, &part).unwrap();
        let central = train_centralized(&cfg, &arch, &train).unwrap();
        // The partition shuffles example order, so compare up to summation order.
        let ordered: Vec<usize> = (0..train.len()).collect();
        let same_order = part.client(0) == ordered.as_slice();
        for (a, b) in fed.final_model.tensors().into_iter().zip(central.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                if same_order {
                    assert_eq!(x, y);
                } else {
                    assert!((x - y).abs() < 1e-6, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn feature_penalty_at_zero_is_fedavg() {
        let (arch, train, test) = small_problem(3);
        let part = partition_sharding(&train, 4, 2, 0).unwrap();
        let a = run_federated(&config(Algorithm::FedAvg, 4, 0.5, 4), &arch, &train, &test, &part).unwrap();
        let b = run_federated(&config(Algorithm::FedFr { mu: 0.0 }, 4, 0.5, 4), &arch, &train, &test, &part).unwrap();
        assert_eq!(a.final_model, b.final_model);
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!((x.round, x.lr, x.acc, x.loss), (y.round, y.lr, y.acc, y.loss));
        }
    }

    #[test]
    fn frozen_classifiers_survive_training_bitwise() {
        let (arch, train, test) = small_problem(4);
        let part = partition_sharding(&train, 4, 2, 1).unwrap();
        for alg in [
            Algorithm::FedBabu,
            Algorithm::SphereFedCe { tau: 5.0 },
            Algorithm::SphereFedMse { tau: 1.0 },
        ] {
            let res = run_federated(&config(alg, 4, 0.5, 5), &arch, &train, &test, &part).unwrap();
            assert_eq!(res.final_model.classifier, res.initial_model.classifier);
            assert_ne!(res.final_model.layers, res.initial_model.layers);
        }
    }

    #[test]
    fn runs_are_deterministic_across_execution_modes() {
        let (arch, train, test) = small_problem(5);
        let part = partition_sharding(&train, 4, 2, 2).unwrap();
        let mut cfg = config(Algorithm::FedFn, 4, 0.75, 4);
        let seq = run_federated(&cfg, &arch, &train, &test, &part).unwrap();
        cfg.execution = Execution::Parallel;
        let par = run_federated(&cfg, &arch, &train, &test, &part).unwrap();
        let again = run_federated(&cfg, &arch, &train, &test, &part).unwrap();
        assert_eq!(seq.final_model, par.final_model);
        assert_eq!(seq.metrics, par.metrics);
        assert_eq!(par.metrics, again.metrics);
        assert_eq!(seq.snapshots, par.snapshots);
        assert_eq!(seq.snapshots.len(), 2);
    }

    #[test]
    fn mismatched_partition_is_rejected() {
        let (arch, train, test) = small_problem(6);
        let part = partition_iid(&train, 4, 0).unwrap();
        let err = run_federated(&config(Algorithm::FedAvg, 5, 0.5, 1), &arch, &train, &test, &part).unwrap_err();
        assert!(err.is_config());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tiny(seed: u64) -> ModelParams {
            let arch = Architecture {
                input_dim: 3,
                hidden: vec![4],
                feature_dim: 4,
                num_classes: 3,
            };
            ModelParams::init(&arch, HeadSpec::standard(), false, seed).unwrap()
        }

        proptest! {
            #[test]
            fn sampling_is_sorted_distinct_and_keyed(
                n in 1usize..200,
                r in 0.001f64..=1.0,
                round in 0usize..1000,
                seed in any::<u64>(),
            ) {
                let picked = sample_clients(n, r, round, seed);
                prop_assert_eq!(picked.len(), clients_per_round(n, r));
                prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(picked.iter().all(|&c| c < n));
                prop_assert_eq!(picked, sample_clients(n, r, round, seed));
            }

            #[test]
            fn lr_steps_down_monotonically(eta in 1e-4f64..1.0, rounds in 1usize..400) {
                let lrs: Vec<f64> = (0..rounds).map(|t| lr_at_round(eta, rounds, t)).collect();
                prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
                prop_assert!(lrs.iter().all(|&l| l == eta || l == 0.1 * eta || l == 0.01 * eta));
            }

            #[test]
            fn aggregate_is_a_convex_combination(w in 0.0f64..=1.0, a in any::<u64>(), b in any::<u64>()) {
                let (ma, mb) = (tiny(a), tiny(b));
                let out = aggregate(&[ma.clone(), mb.clone()], &[w, 1.0 - w]).unwrap();
                for ((o, x), y) in out.tensors().iter().zip(ma.tensors()).zip(mb.tensors()) {
                    for ((&o, &x), &y) in o.data().iter().zip(x.data()).zip(y.data()) {
                        prop_assert!(o >= x.min(y) - 1e-12 && o <= x.max(y) + 1e-12);
                    }
                }
                let same = aggregate(&[ma.clone(), ma.clone()], &[w, 1.0 - w]).unwrap();
                for (o, x) in same.tensors().iter().zip(ma.tensors()) {
                    for (&o, &x) in o.data().iter().zip(x.data()) {
                        prop_assert!((o - x).abs() <= 1e-12 * x.abs().max(1.0));
                    }
                }
            }
        }
    }
}
