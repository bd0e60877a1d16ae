//! Representation diagnostics: the four similarity factors (weight similarity,
//! inter-class prototype similarity, intra-class similarity, prototype–weight
//! alignment) and local-vs-global classifier weight / feature norm reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{client_classes, Dataset, Partition};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{checked_norm, cosine, dot, norm_raw, Tensor};

/// Features of every example, `n × d`.
fn all_features(model: &ModelParams, dataset: &Dataset) -> Result<Tensor> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let (xs, _) = dataset.batch(&all)?;
    model.features_batch(&xs)
}

fn class_means(features: &Tensor, dataset: &Dataset, normalized: bool) -> Result<Vec<Vec<f64>>> {
    let d = features.cols();
    (0..dataset.num_classes())
        .map(|c| {
            let idx = dataset.class_indices(c);
            if idx.is_empty() {
                return Err(Error::MissingClass(c));
            }
            let mut acc = vec![0.0; d];
            for &i in idx {
                let f = features.row(i);
                let scale = if normalized { 1.0 / checked_norm(f)? } else { 1.0 };
                acc.iter_mut().zip(f).for_each(|(a, v)| *a += v * scale);
            }
            Ok(acc.into_iter().map(|v| v / idx.len() as f64).collect())
        })
        .collect()
}

/// Class prototypes as columns of a `d × C` matrix: the mean feature (or mean
/// normalized feature) over each class's examples.
pub fn compute_prototypes(model: &ModelParams, dataset: &Dataset, normalized: bool) -> Result<Tensor> {
    let features = all_features(model, dataset)?;
    let means = class_means(&features, dataset, normalized)?;
    Tensor::from_rows(&means)?.transpose()
}

/// Cosine Gram matrix of a list of vectors; exactly symmetric with unit diagonal.
fn cosine_gram(vectors: &[&[f64]]) -> Result<Tensor> {
    let unit: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let n = checked_norm(v)?;
            Ok(v.iter().map(|x| x / n).collect())
        })
        .collect::<Result<_>>()?;
    let c = unit.len();
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        out[i * c + i] = 1.0;
        for j in i + 1..c {
            let s = dot(&unit[i], &unit[j]).clamp(-1.0, 1.0);
            out[i * c + j] = s;
            out[j * c + i] = s;
        }
    }
    Tensor::matrix(c, c, out)
}

/// `N(W)ᵀ N(W)` for a `C × d` classifier with rows scaled to unit length.
pub fn weight_similarity(classifier: &Tensor) -> Result<Tensor> {
    if classifier.rank() != 2 {
        return Err(Error::dim("classifier must be a matrix"));
    }
    let rows: Vec<&[f64]> = (0..classifier.rows()).map(|r| classifier.row(r)).collect();
    cosine_gram(&rows)
}

/// Cosine Gram matrix of the prototype columns of a `d × C` matrix.
pub fn inter_class_similarity(prototypes: &Tensor) -> Result<Tensor> {
    let cols = prototypes.transpose()?;
    let rows: Vec<&[f64]> = (0..cols.rows()).map(|r| cols.row(r)).collect();
    cosine_gram(&rows)
}

/// Per class, the mean cosine between each example's feature and the class's
/// (unnormalized) mean feature.
pub fn intra_class_similarity(model: &ModelParams, dataset: &Dataset) -> Result<Vec<f64>> {
    let features = all_features(model, dataset)?;
    intra_from_features(&features, dataset)
}

fn intra_from_features(features: &Tensor, dataset: &Dataset) -> Result<Vec<f64>> {
    let protos = class_means(features, dataset, false)?;
    (0..dataset.num_classes())
        .map(|c| {
            let idx = dataset.class_indices(c);
            let total = idx
                .iter()
                .map(|&i| cosine(features.row(i), &protos[c]))
                .sum::<Result<f64>>()?;
            Ok(total / idx.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `cos(θ_c, prototype_c)` per class.
    pub cosine: Vec<f64>,
    /// `⟨θ_c, prototype_c⟩` per class.
    pub inner_product: Vec<f64>,
}

pub fn prototype_weight_alignment(model: &ModelParams, dataset: &Dataset) -> Result<Alignment> {
    let features = all_features(model, dataset)?;
    alignment_from_features(model, &features, dataset)
}

fn alignment_from_features(model: &ModelParams, features: &Tensor, dataset: &Dataset) -> Result<Alignment> {
    let protos = class_means(features, dataset, false)?;
    let mut cos = Vec::with_capacity(protos.len());
    let mut inner = Vec::with_capacity(protos.len());
    for (c, p) in protos.iter().enumerate() {
        let w = model.classifier.row(c);
        cos.push(cosine(w, p)?);
        inner.push(dot(w, p));
    }
    Ok(Alignment {
        cosine: cos,
        inner_product: inner,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorReport {
    pub round: Option<usize>,
    /// `"global"` or `"client-<n>"`.
    pub model: String,
    pub weight_similarity: Tensor,
    pub inter_class_similarity: Tensor,
    pub intra_class_similarity: Vec<f64>,
    pub prototype_weight_alignment: Vec<f64>,
    pub prototype_weight_inner_product: Vec<f64>,
}

/// All four factors of `model` on `dataset` (normally the test set).
pub fn factor_report(model: &ModelParams, dataset: &Dataset, round: Option<usize>, tag: &str) -> Result<FactorReport> {
    let features = all_features(model, dataset)?;
    let protos = class_means(&features, dataset, false)?;
    let proto_refs: Vec<&[f64]> = protos.iter().map(Vec::as_slice).collect();
    let alignment = alignment_from_features(model, &features, dataset)?;
    Ok(FactorReport {
        round,
        model: tag.to_string(),
        weight_similarity: weight_similarity(&model.classifier)?,
        inter_class_similarity: cosine_gram(&proto_refs)?,
        intra_class_similarity: intra_from_features(&features, dataset)?,
        prototype_weight_alignment: alignment.cosine,
        prototype_weight_inner_product: alignment.inner_product,
    })
}

impl FactorReport {
    /// Long-format heatmap rows `matrix,i,j,value` for both similarity matrices.
    pub fn write_heatmap_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["matrix", "i", "j", "value"])?;
        for (name, m) in [
            ("weight_similarity", &self.weight_similarity),
            ("inter_class_similarity", &self.inter_class_similarity),
        ] {
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    w.write_record([name.to_string(), i.to_string(), j.to_string(), m.get(i, j).to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_of(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Norm means of one local model. `None` marks an empty class group or test subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientNorms {
    pub client: usize,
    pub id_classes: Vec<usize>,
    pub weight_norm_id: Option<f64>,
    pub weight_norm_ood: Option<f64>,
    pub feature_norm_id: Option<f64>,
    pub feature_norm_ood: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub round: usize,
    pub clients: Vec<ClientNorms>,
    /// Mean classifier row norm of the global model over all classes.
    pub global_weight_norm: f64,
    /// Mean feature norm of the global model over the full test set.
    pub global_feature_norm: f64,
    /// Mean over clients of (local ID feature-norm mean − global feature-norm mean).
    pub feature_norm_gap: Option<f64>,
}

impl NormReport {
    pub fn mean_over_clients(&self, pick: impl Fn(&ClientNorms) -> Option<f64>) -> Option<f64> {
        mean_of(self.clients.iter().filter_map(pick))
    }

    /// Named series for norm-curve plots, in a fixed order.
    pub fn series(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("local_id_weight_norm", self.mean_over_clients(|c| c.weight_norm_id)),
            ("local_ood_weight_norm", self.mean_over_clients(|c| c.weight_norm_ood)),
            ("global_weight_norm", Some(self.global_weight_norm)),
            ("local_id_feature_norm", self.mean_over_clients(|c| c.feature_norm_id)),
            ("local_ood_feature_norm", self.mean_over_clients(|c| c.feature_norm_ood)),
            ("global_feature_norm", Some(self.global_feature_norm)),
            ("feature_norm_gap", self.feature_norm_gap),
        ]
    }
}

fn feature_norms(model: &ModelParams, dataset: &Dataset) -> Result<Vec<f64>> {
    let f = all_features(model, dataset)?;
    Ok((0..f.rows()).map(|r| norm_raw(f.row(r))).collect())
}

fn row_norm_mean<'a>(classifier: &Tensor, classes: impl IntoIterator<Item = &'a usize>) -> Option<f64> {
    mean_of(classes.into_iter().map(|&c| norm_raw(classifier.row(c))))
}

/// Weight and feature norm means of each local model split by its ID / OOD
/// classes, against the global model's overall means.
pub fn norm_report(
    local_models: &[(usize, &ModelParams)],
    global: &ModelParams,
    partition: &Partition,
    train: &Dataset,
    test: &Dataset,
    round: usize,
) -> Result<NormReport> {
    let num_classes = train.num_classes();
    let global_feature_norm = mean_of(feature_norms(global, test)?)
        .ok_or_else(|| Error::config("norm report needs a non-empty test set"))?;
    let all_classes: Vec<usize> = (0..global.num_classes()).collect();
    let global_weight_norm = row_norm_mean(&global.classifier, &all_classes).unwrap_or(0.0);

    let mut clients = Vec::with_capacity(local_models.len());
    for &(k, model) in local_models {
        let id = client_classes(partition, train, k)?;
        let ood: Vec<usize> = (0..num_classes).filter(|c| !id.contains(c)).collect();
        let norms = feature_norms(model, test)?;
        let (mut id_norms, mut ood_norms) = (Vec::new(), Vec::new());
        for (i, n) in norms.into_iter().enumerate() {
            if id.contains(&test.label(i)) {
                id_norms.push(n);
            } else {
                ood_norms.push(n);
            }
        }
        clients.push(ClientNorms {
            client: k,
            id_classes: id.iter().copied().collect(),
            weight_norm_id: row_norm_mean(&model.classifier, &id),
            weight_norm_ood: row_norm_mean(&model.classifier, &ood),
            feature_norm_id: mean_of(id_norms),
            feature_norm_ood: mean_of(ood_norms),
        });
    }
    let feature_norm_gap = mean_of(
        clients
            .iter()
            .filter_map(|c| c.feature_norm_id.map(|v| v - global_feature_norm)),
    );
    Ok(NormReport {
        round,
        clients,
        global_weight_norm,
        global_feature_norm,
        feature_norm_gap,
    })
}
