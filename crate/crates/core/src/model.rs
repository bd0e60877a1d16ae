//! MLP feature extractor plus the classifier heads and losses under comparison.
//!
//! Logit rules for a feature `f` and classifier `W` (C×d, no bias):
//!
//! * `Standard`:          `W f`
//! * `NormalizedFeature`: `W f/‖f‖`
//! * `FrozenOrthonormal`: `τ W f/‖f‖` with orthonormal, frozen rows, so every
//!   logit lies in `[-τ, τ]`.

use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::{checked_norm, dot, softmax_raw, Tensor};

/// Tolerance for `W Wᵀ = I` on orthonormal classifiers.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Standard,
    NormalizedFeature,
    FrozenOrthonormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Logit scale; only meaningful for `FrozenOrthonormal`.
    pub tau: f64,
}

impl HeadSpec {
    pub const fn standard() -> Self {
        HeadSpec {
            kind: HeadKind::Standard,
            tau: 1.0,
        }
    }

    pub const fn normalized() -> Self {
        HeadSpec {
            kind: HeadKind::NormalizedFeature,
            tau: 1.0,
        }
    }

    pub const fn frozen_orthonormal(tau: f64) -> Self {
        HeadSpec {
            kind: HeadKind::FrozenOrthonormal,
            tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    MseOneHot,
    CrossEntropyPlusFeatureNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Weight on the raw feature norm; only used by `CrossEntropyPlusFeatureNorm`.
    pub mu: f64,
}

impl LossSpec {
    pub const fn cross_entropy() -> Self {
        LossSpec {
            kind: LossKind::CrossEntropy,
            mu: 0.0,
        }
    }

    pub const fn mse_onehot() -> Self {
        LossSpec {
            kind: LossKind::MseOneHot,
            mu: 0.0,
        }
    }

    pub const fn feature_norm_penalty(mu: f64) -> Self {
        LossSpec {
            kind: LossKind::CrossEntropyPlusFeatureNorm,
            mu,
        }
    }

    /// Rejects loss/head pairings the models do not define.
    pub fn check_head(&self, head: &HeadSpec) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config(format!("mu must be non-negative, got {}", self.mu)));
        }
        match (self.kind, head.kind) {
            (LossKind::MseOneHot, HeadKind::FrozenOrthonormal) => Ok(()),
            (LossKind::MseOneHot, other) => Err(Error::config(format!(
                "one-hot MSE loss requires the frozen orthonormal head, got {other:?}"
            ))),
            (LossKind::CrossEntropyPlusFeatureNorm, HeadKind::Standard) => Ok(()),
            (LossKind::CrossEntropyPlusFeatureNorm, other) => Err(Error::config(format!(
                "feature-norm penalty is defined on the standard head, got {other:?}"
            ))),
            (LossKind::CrossEntropy, _) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out × in`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Layer sizes of the extractor and the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.num_classes == 0 {
            return Err(Error::config("layer sizes and class count must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer sizes must be positive"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.feature_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Each layer is followed by ReLU except the last.
    pub layers: Vec<Linear>,
    /// `C × d`
    pub classifier: Tensor,
    pub head: HeadSpec,
    pub frozen_classifier: bool,
}

/// Tape handles for one bound copy of the parameters.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub layers: Vec<(Var, Var)>,
    pub classifier: Var,
}

/// Gradients mirroring [`ModelParams`]'s trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<(Tensor, Tensor)>,
    pub classifier: Tensor,
}

impl ModelParams {
    /// PyTorch-style uniform `±1/√fan_in` init for every layer; the classifier
    /// is orthonormal for `FrozenOrthonormal` heads.
    pub fn init(arch: &Architecture, head: HeadSpec, frozen_classifier: bool, seed: u64) -> Result<Self> {
        arch.validate()?;
        head.validate()?;
        let mut rng = rng_for(&[seed, stream::INIT]);
        let mut uniform_tensor = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let n = shape.iter().product();
            Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect())
        };
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(inp, out)| Linear {
                weight: uniform_tensor(&[out, inp], inp),
                bias: uniform_tensor(&[out], inp),
            })
            .collect();
        let (classifier, frozen) = match head.kind {
            HeadKind::FrozenOrthonormal => (
                orthonormal_classifier_init(arch.num_classes, arch.feature_dim, seed)?,
                true,
            ),
            _ => (
                uniform_tensor(&[arch.num_classes, arch.feature_dim], arch.feature_dim),
                frozen_classifier,
            ),
        };
        let params = ModelParams {
            layers,
            classifier,
            head,
            frozen_classifier: frozen,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.rows()
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if self.layers.is_empty() {
            return Err(Error::dim("extractor needs at least one layer"));
        }
        let mut prev = self.layers[0].weight.cols();
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.rank() != 2 || l.weight.cols() != prev || l.bias.shape() != [l.weight.rows()] {
                return Err(Error::dim(format!(
                    "layer {i}: weight {:?}, bias {:?}, expected input {prev}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
            prev = l.weight.rows();
        }
        if self.classifier.rank() != 2 || self.classifier.cols() != prev {
            return Err(Error::dim(format!(
                "classifier {:?} does not match feature dim {prev}",
                self.classifier.shape()
            )));
        }
        if self.head.kind == HeadKind::FrozenOrthonormal && self.frozen_classifier {
            let dev = orthonormality_defect(&self.classifier);
            if dev > ORTHONORMAL_TOL {
                return Err(Error::config(format!(
                    "frozen orthonormal classifier deviates from orthonormal by {dev:e}"
                )));
            }
        }
        Ok(())
    }

    /// Same architecture (shapes), ignoring values and head.
    pub fn same_architecture(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape())
            && self.classifier.shape() == other.classifier.shape()
    }

    /// All parameter tensors in a fixed order: layer weights and biases, then the classifier.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        out.push(&self.classifier);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("extractor.{i}.weight"), &l.weight));
            out.push((format!("extractor.{i}.bias"), &l.bias));
        }
        out.push(("classifier".to_string(), &self.classifier));
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        out.push(&mut self.classifier);
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect();
        BoundParams {
            layers,
            classifier: tape.leaf(self.classifier.clone()),
        }
    }

    /// Extractor forward on a `B×in` batch (or a single `[in]` vector).
    pub fn features_on(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let mut h = x;
        let last = bound.layers.len() - 1;
        for (i, &(w, b)) in bound.layers.iter().enumerate() {
            h = linear(tape, h, w, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn logits_on(&self, tape: &mut Tape, bound: &BoundParams, f: Var) -> Result<Var> {
        let input = match self.head.kind {
            HeadKind::Standard => f,
            HeadKind::NormalizedFeature | HeadKind::FrozenOrthonormal => tape.row_normalize(f)?,
        };
        let z = linear_no_bias(tape, input, bound.classifier)?;
        match self.head.kind {
            HeadKind::FrozenOrthonormal if self.head.tau != 1.0 => tape.scale(z, self.head.tau),
            _ => Ok(z),
        }
    }

    /// Batch-mean loss on the tape.
    pub fn loss_on(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        spec: &LossSpec,
        x: Var,
        labels: &[usize],
    ) -> Result<Var> {
        spec.check_head(&self.head)?;
        let f = self.features_on(tape, bound, x)?;
        let z = self.logits_on(tape, bound, f)?;
        match spec.kind {
            LossKind::CrossEntropy => tape.softmax_cross_entropy(z, labels),
            LossKind::MseOneHot => tape.mse_onehot(z, labels),
            LossKind::CrossEntropyPlusFeatureNorm => {
                let ce = tape.softmax_cross_entropy(z, labels)?;
                let norms = tape.row_norm(f)?;
                let mean_norm = tape.mean(norms)?;
                let penalty = tape.scale(mean_norm, spec.mu)?;
                tape.add(ce, penalty)
            }
        }
    }

    /// Loss value and gradients over a `B×in` batch.
    pub fn gradients(&self, spec: &LossSpec, xs: &Tensor, labels: &[usize]) -> Result<(f64, ParamGrads)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(xs.clone());
        let loss = self.loss_on(&mut tape, &bound, spec, x, labels)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        Ok((
            value,
            ParamGrads {
                layers: bound
                    .layers
                    .iter()
                    .map(|&(w, b)| (grads.wrt(w), grads.wrt(b)))
                    .collect(),
                classifier: grads.wrt(bound.classifier),
            },
        ))
    }

    /// In-place SGD step `θ ← θ − lr·∇θ`; a frozen classifier is left untouched.
    pub fn apply_sgd(&mut self, grads: &ParamGrads, lr: f64) {
        fn step(t: &mut Tensor, g: &Tensor, lr: f64) {
            let mut data = std::mem::replace(t, Tensor::zeros(&[])).into_data();
            data.iter_mut().zip(g.data()).for_each(|(p, gv)| *p -= lr * gv);
            *t = Tensor::from_parts(g.shape().to_vec(), data);
        }
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            step(&mut layer.weight, gw, lr);
            step(&mut layer.bias, gb, lr);
        }
        if !self.frozen_classifier {
            step(&mut self.classifier, &grads.classifier, lr);
        }
    }

    /// Features for a `B×in` batch without recording gradients.
    pub fn features_batch(&self, xs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(xs.clone());
        let f = self.features_on(&mut tape, &bound, x)?;
        Ok(tape.value(f).clone())
    }

    pub fn logits_batch(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let f = tape.leaf(features.clone());
        let z = self.logits_on(&mut tape, &bound, f)?;
        Ok(tape.value(z).clone())
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = linear_no_bias(tape, x, w)?;
    tape.add_bias(h, b)
}

/// `x Wᵀ` for a `B×in` batch; single vectors are lifted to `1×in` rows by callers.
fn linear_no_bias(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    tape.matmul(x, wt)
}

/// Final-layer features `f(x)` for one input vector.
pub fn extract_features(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 || x.len() != params.input_dim() {
        return Err(Error::dim(format!(
            "input {:?} for extractor expecting {}",
            x.shape(),
            params.input_dim()
        )));
    }
    let f = params.features_batch(&x.reshape(&[1, x.len()])?)?;
    f.reshape(&[f.len()])
}

/// Logits for one feature vector under the model's head.
pub fn logits(params: &ModelParams, f: &Tensor) -> Result<Tensor> {
    if f.rank() != 1 || f.len() != params.feature_dim() {
        return Err(Error::dim(format!(
            "feature {:?} for classifier expecting {}",
            f.shape(),
            params.feature_dim()
        )));
    }
    let z = params.logits_batch(&f.reshape(&[1, f.len()])?)?;
    z.reshape(&[z.len()])
}

/// Loss of one example.
pub fn loss(spec: &LossSpec, params: &ModelParams, x: &Tensor, y: usize) -> Result<f64> {
    if y >= params.num_classes() {
        return Err(Error::Index {
            index: y,
            bound: params.num_classes(),
        });
    }
    if x.rank() != 1 || x.len() != params.input_dim() {
        return Err(Error::dim("input dimension mismatch"));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xv = tape.leaf(x.reshape(&[1, x.len()])?);
    let l = params.loss_on(&mut tape, &bound, spec, xv, &[y])?;
    Ok(tape.value(l).item())
}

/// `C × d` matrix with orthonormal rows: modified Gram–Schmidt (with one
/// re-orthogonalization pass) over a seeded Gaussian matrix.
pub fn orthonormal_classifier_init(num_classes: usize, dim: usize, seed: u64) -> Result<Tensor> {
    if num_classes == 0 || dim == 0 {
        return Err(Error::config("classifier dimensions must be positive"));
    }
    if dim < num_classes {
        return Err(Error::Infeasible(format!(
            "cannot fit {num_classes} orthonormal rows in dimension {dim}"
        )));
    }
    let mut rng = rng_for(&[seed, stream::CLASSIFIER]);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _pass in 0..2 {
            for q in &rows {
                let p = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = checked_norm(&v)?;
        v.iter_mut().for_each(|a| *a /= n);
        rows.push(v);
    }
    Tensor::from_rows(&rows)
}

/// Max absolute entry of `W Wᵀ − I`.
pub fn orthonormality_defect(w: &Tensor) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..w.rows() {
        for j in 0..w.rows() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot(w.row(i), w.row(j)) - target).abs());
        }
    }
    worst
}

/// Closed-form classifier gradient of the cross-entropy under a
/// normalized-feature head: `(softmax(ẑ) − onehot(y)) · f̂ᵀ`.
pub fn classifier_gradient(params: &ModelParams, x: &Tensor, y: usize) -> Result<Tensor> {
    if params.head.kind != HeadKind::NormalizedFeature {
        return Err(Error::config("closed-form classifier gradient needs the normalized-feature head"));
    }
    if y >= params.num_classes() {
        return Err(Error::Index {
            index: y,
            bound: params.num_classes(),
        });
    }
    let f = extract_features(params, x)?;
    let n = checked_norm(f.data())?;
    let fhat: Vec<f64> = f.data().iter().map(|v| v / n).collect();
    let zhat: Vec<f64> = (0..params.num_classes())
        .map(|c| dot(params.classifier.row(c), &fhat))
        .collect();
    let mut delta = softmax_raw(&zhat);
    delta[y] -= 1.0;
    let d = fhat.len();
    let mut out = Vec::with_capacity(delta.len() * d);
    for dc in &delta {
        out.extend(fhat.iter().map(|fv| dc * fv));
    }
    Tensor::matrix(delta.len(), d, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_model(d: usize, head: HeadSpec) -> ModelParams {
        ModelParams {
            layers: vec![Linear {
                weight: Tensor::identity(d),
                bias: Tensor::zeros(&[d]),
            }],
            classifier: Tensor::identity(d),
            head,
            frozen_classifier: head.kind == HeadKind::FrozenOrthonormal,
        }
    }

    fn random_model(rng: &mut ChaCha8Rng, head: HeadSpec) -> ModelParams {
        let arch = Architecture {
            input_dim: 5,
            hidden: vec![7],
            feature_dim: 6,
            num_classes: 4,
        };
        ModelParams::init(&arch, head, false, rng.random()).unwrap()
    }

    fn rand_input(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::vector((0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec()).unwrap()
    }

    #[test]
    fn extract_features_examples() {
        let m = identity_model(2, HeadSpec::standard());
        assert_eq!(extract_features(&m, &v(&[1.0, 2.0])).unwrap().data(), &[1.0, 2.0]);

        let two_layer = ModelParams {
            layers: vec![
                Linear {
                    weight: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap(),
                    bias: Tensor::zeros(&[2]),
                },
                Linear {
                    weight: Tensor::identity(2),
                    bias: Tensor::zeros(&[2]),
                },
            ],
            ..m.clone()
        };
        assert_eq!(extract_features(&two_layer, &v(&[1.0, 1.0])).unwrap().data(), &[1.0, 0.0]);

        let mut zero = identity_model(2, HeadSpec::normalized());
        zero.layers[0].weight = Tensor::zeros(&[2, 2]);
        let f = extract_features(&zero, &v(&[1.0, 2.0])).unwrap();
        assert!(f.data().iter().all(|&x| x == 0.0));
        assert!(matches!(logits(&zero, &f), Err(Error::DegenerateNorm { .. })));
        assert!(matches!(extract_features(&m, &v(&[1.0])), Err(Error::Dimension(_))));
    }

    #[test]
    fn logits_examples() {
        let f = v(&[3.0, 4.0]);
        let z = logits(&identity_model(2, HeadSpec::standard()), &f).unwrap();
        assert_eq!(z.data(), &[3.0, 4.0]);
        let z = logits(&identity_model(2, HeadSpec::normalized()), &f).unwrap();
        assert!((z.data()[0] - 0.6).abs() < 1e-15 && (z.data()[1] - 0.8).abs() < 1e-15);
        let z = logits(&identity_model(2, HeadSpec::frozen_orthonormal(15.0)), &f).unwrap();
        assert!((z.data()[0] - 9.0).abs() < 1e-12 && (z.data()[1] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn feature_norm_penalty_reduces_to_ce_at_zero_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(&mut rng, HeadSpec::standard());
        for _ in 0..50 {
            let x = rand_input(&mut rng, 5);
            let y = rng.random_range(0..4);
            let a = loss(&LossSpec::cross_entropy(), &m, &x, y).unwrap();
            let b = loss(&LossSpec::feature_norm_penalty(0.0), &m, &x, y).unwrap();
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn feature_norm_penalty_is_additive() {
        let m = identity_model(2, HeadSpec::standard());
        let x = v(&[3.0, 4.0]);
        let ce = loss(&LossSpec::cross_entropy(), &m, &x, 1).unwrap();
        let mu = 0.01;
        let total = loss(&LossSpec::feature_norm_penalty(mu), &m, &x, 1).unwrap();
        assert!((total - (ce + 5.0 * mu)).abs() < 1e-14);
    }

    #[test]
    fn mse_perfect_fit_is_zero_and_needs_frozen_head() {
        let m = identity_model(3, HeadSpec::frozen_orthonormal(1.0));
        assert_eq!(loss(&LossSpec::mse_onehot(), &m, &v(&[0.0, 2.0, 0.0]), 1).unwrap(), 0.0);
        let std_model = identity_model(3, HeadSpec::standard());
        assert!(loss(&LossSpec::mse_onehot(), &std_model, &v(&[0.0, 2.0, 0.0]), 1)
            .unwrap_err()
            .is_config());
        let nf = identity_model(3, HeadSpec::normalized());
        assert!(loss(&LossSpec::feature_norm_penalty(0.1), &nf, &v(&[1.0, 0.0, 0.0]), 0)
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn orthonormal_init_examples() {
        let w = orthonormal_classifier_init(10, 16, 3).unwrap();
        assert!(orthonormality_defect(&w) <= ORTHONORMAL_TOL);
        let single = orthonormal_classifier_init(1, 3, 0).unwrap();
        assert_eq!(single.shape(), &[1, 3]);
        assert!((crate::tensor::norm_raw(single.row(0)) - 1.0).abs() < 1e-12);
        assert_eq!(w, orthonormal_classifier_init(10, 16, 3).unwrap());
        assert!(matches!(orthonormal_classifier_init(5, 4, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn classifier_gradient_matches_autodiff() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let m = random_model(&mut rng, HeadSpec::normalized());
            let x = rand_input(&mut rng, 5);
            let y = rng.random_range(0..4);
            let closed = classifier_gradient(&m, &x, y).unwrap();
            let (_, g) = m
                .gradients(&LossSpec::cross_entropy(), &x.reshape(&[1, 5]).unwrap(), &[y])
                .unwrap();
            for (a, b) in closed.data().iter().zip(g.classifier.data()) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn classifier_gradient_ignores_feature_scale_and_vanishes_at_fit() {
        let mut m = identity_model(2, HeadSpec::normalized());
        let g1 = classifier_gradient(&m, &v(&[3.0, 4.0]), 0).unwrap();
        let g10 = classifier_gradient(&m, &v(&[30.0, 40.0]), 0).unwrap();
        for (a, b) in g1.data().iter().zip(g10.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        m.classifier = Tensor::from_rows(&[vec![1000.0, 0.0], vec![-1000.0, 0.0]]).unwrap();
        let g = classifier_gradient(&m, &v(&[1.0, 0.0]), 0).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));
        assert!(classifier_gradient(&identity_model(2, HeadSpec::standard()), &v(&[1.0, 0.0]), 0).is_err());
    }

    #[test]
    fn logit_scaling_by_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let std_m = random_model(&mut rng, HeadSpec::standard());
        let mut nf = std_m.clone();
        nf.head = HeadSpec::normalized();
        for _ in 0..20 {
            let f = rand_input(&mut rng, 6);
            for c in [0.1, 10.0] {
                let scaled = Tensor::vector(f.data().iter().map(|x| x * c).collect()).unwrap();
                let a = logits(&nf, &f).unwrap();
                let b = logits(&nf, &scaled).unwrap();
                a.data().iter().zip(b.data()).for_each(|(p, q)| assert!((p - q).abs() <= 1e-10));
                let a = logits(&std_m, &f).unwrap();
                let b = logits(&std_m, &scaled).unwrap();
                a.data()
                    .iter()
                    .zip(b.data())
                    .for_each(|(p, q)| assert!((c * p - q).abs() <= 1e-10 * (1.0 + q.abs())));
            }
        }
    }

    #[test]
    fn frozen_orthonormal_logits_are_bounded_by_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for tau in [1.0, 15.0] {
            let m = random_model(&mut rng, HeadSpec::frozen_orthonormal(tau));
            assert!(m.frozen_classifier);
            for _ in 0..200 {
                let f = rand_input(&mut rng, 6);
                let z = logits(&m, &f).unwrap();
                assert!(z.data().iter().all(|v| v.abs() <= tau + 1e-12));
            }
        }
    }

    #[test]
    fn normalized_extractor_gradients_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let m = random_model(&mut rng, HeadSpec::normalized());
            let xs = Tensor::matrix(3, 5, (0..15).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
            let w0 = m.layers[0].weight.clone();
            let err = grad_check(
                |t, w| {
                    let mut bound = m.bind(t);
                    bound.layers[0].0 = w;
                    let x = t.leaf(xs.clone());
                    m.loss_on(t, &bound, &LossSpec::cross_entropy(), x, &labels)
                },
                &w0,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn frozen_classifier_survives_sgd_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = random_model(&mut rng, HeadSpec::frozen_orthonormal(1.0));
        let before = m.classifier.clone();
        let xs = Tensor::matrix(2, 5, (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (_, g) = m.gradients(&LossSpec::mse_onehot(), &xs, &[0, 1]).unwrap();
        assert!(g.classifier.data().iter().any(|&x| x != 0.0));
        m.apply_sgd(&g, 0.5);
        assert_eq!(m.classifier, before);
    }

    #[test]
    fn validate_catches_broken_orthonormal_classifier() {
        let mut m = identity_model(2, HeadSpec::frozen_orthonormal(1.0));
        m.validate().unwrap();
        m.classifier = Tensor::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        assert!(m.validate().is_err());
    }
}
