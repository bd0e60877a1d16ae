//! Labeled datasets, a seeded Gaussian-mixture generator, and the client
//! partition strategies (IID, label sharding, per-class Dirichlet).

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

/// Retry budget for Dirichlet re-draws.
pub const LDA_MAX_ATTEMPTS: u64 = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × dim`, one example per row.
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    class_index: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rank() != 2 || inputs.rows() != labels.len() {
            return Err(Error::dim(format!(
                "inputs {:?} with {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::Index {
                    index: y,
                    bound: num_classes,
                });
            }
            class_index[y].push(i);
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Ascending indices of the examples labeled `c`.
    pub fn class_indices(&self, c: usize) -> &[usize] {
        &self.class_index[c]
    }

    /// Inputs (`k × dim`) and labels for the given example indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    index: i,
                    bound: self.len(),
                });
            }
            data.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::matrix(indices.len(), d, data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (x, y) = self.batch(indices)?;
        Dataset::new(x, y, self.num_classes)
    }

    /// Binary layout, little endian: `n: u64, dim: u64, classes: u64`, then
    /// `n·dim` f64 inputs row-major, then `n` u32 labels.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u64::<LittleEndian>(self.dim() as u64)?;
        w.write_u64::<LittleEndian>(self.num_classes as u64)?;
        for &v in self.inputs.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
        for &y in &self.labels {
            w.write_u32::<LittleEndian>(y as u32)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Dataset> {
        let mut r = BufReader::new(File::open(path)?);
        let n = r.read_u64::<LittleEndian>()? as usize;
        let dim = r.read_u64::<LittleEndian>()? as usize;
        let classes = r.read_u64::<LittleEndian>()? as usize;
        let mut data = vec![0.0; n * dim];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("{} trailing bytes", rest.len()),
            });
        }
        Dataset::new(Tensor::matrix(n, dim, data)?, labels, classes)
    }

    /// CSV with columns `x0..x{dim-1},label`, for inspection.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.input(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub class_separation: f64,
    pub noise_scale: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 {
            return Err(Error::config("synthetic data needs positive class count and dimension"));
        }
        if !(self.class_separation > 0.0 && self.noise_scale > 0.0) {
            return Err(Error::config("class separation and noise scale must be positive"));
        }
        Ok(())
    }

    /// Class means on a sphere of radius `separation·noise`. Of up to 64
    /// seeded draws, the first whose closest pair is at least that far apart
    /// wins; otherwise the best-separated draw is kept.
    pub fn class_means(&self, seed: u64) -> Vec<Vec<f64>> {
        let target = self.class_separation * self.noise_scale;
        let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
        for attempt in 0..64u64 {
            let mut rng = rng_for(&[seed, stream::DATA_MEANS, attempt]);
            let means: Vec<Vec<f64>> = (0..self.num_classes)
                .map(|_| {
                    let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    v.into_iter().map(|x| x / n * target).collect()
                })
                .collect();
            let min_dist = min_pairwise_distance(&means);
            if min_dist >= target {
                return means;
            }
            if best.as_ref().is_none_or(|(d, _)| min_dist > *d) {
                best = Some((min_dist, means));
            }
        }
        best.map(|(_, m)| m).unwrap_or_default()
    }

    fn sample(&self, means: &[Vec<f64>], n_per_class: usize, seed: u64, tag: u64) -> Result<Dataset> {
        let noise = Normal::new(0.0, self.noise_scale)
            .map_err(|e| Error::config(format!("noise scale: {e}")))?;
        let mut rng = rng_for(&[seed, tag]);
        let mut data = Vec::with_capacity(self.num_classes * n_per_class * self.dim);
        let mut labels = Vec::with_capacity(self.num_classes * n_per_class);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..n_per_class {
                data.extend(mean.iter().map(|m| m + noise.sample(&mut rng)));
                labels.push(c);
            }
        }
        Dataset::new(Tensor::matrix(labels.len(), self.dim, data)?, labels, self.num_classes)
    }

    /// Train and test sets drawn around the same class means.
    pub fn generate_split(&self, n_train_per_class: usize, n_test_per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        if n_train_per_class == 0 || n_test_per_class == 0 {
            return Err(Error::config("examples per class must be positive"));
        }
        let means = self.class_means(seed);
        Ok((
            self.sample(&means, n_train_per_class, seed, stream::DATA_TRAIN)?,
            self.sample(&means, n_test_per_class, seed, stream::DATA_TEST)?,
        ))
    }
}

fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Balanced Gaussian mixture: `n_per_class` examples per class around seeded means.
pub fn gen_synthetic(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    class_separation: f64,
    noise_scale: f64,
    seed: u64,
) -> Result<Dataset> {
    let spec = SyntheticSpec {
        num_classes,
        dim,
        class_separation,
        noise_scale,
    };
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::config("examples per class must be positive"));
    }
    let means = spec.class_means(seed);
    spec.sample(&means, n_per_class, seed, stream::DATA_TRAIN)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", content = "params", rename_all = "snake_case")]
pub enum PartitionStrategy {
    Iid,
    Sharding {
        s: usize,
    },
    Lda {
        alpha: f64,
        min_per_client: usize,
    },
}

/// Disjoint assignment of example indices to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    #[serde(flatten)]
    pub strategy: PartitionStrategy,
    pub seed: u64,
    #[serde(rename = "N")]
    pub num_clients: usize,
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn client(&self, n: usize) -> &[usize] {
        &self.assignments[n]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Checks disjointness, index validity and exact coverage of `0..len`.
    pub fn validate_against(&self, dataset_len: usize) -> Result<()> {
        if self.assignments.len() != self.num_clients {
            return Err(Error::config(format!(
                "partition lists {} clients but declares {}",
                self.assignments.len(),
                self.num_clients
            )));
        }
        let mut seen = vec![false; dataset_len];
        for &i in self.assignments.iter().flatten() {
            if i >= dataset_len {
                return Err(Error::Index {
                    index: i,
                    bound: dataset_len,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::config(format!("example {i} assigned twice")));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::config(format!("example {missing} is unassigned")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Partition> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn check_clients(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::config("number of clients must be positive"));
    }
    Ok(())
}

/// Exactly `|D(c)|/N` examples of every class per client, shuffled within class.
pub fn partition_iid(dataset: &Dataset, num_clients: usize, seed: u64) -> Result<Partition> {
    check_clients(num_clients)?;
    let mut rng = rng_for(&[seed, stream::PARTITION]);
    let mut assignments = vec![Vec::new(); num_clients];
    for c in 0..dataset.num_classes() {
        let mut idx = dataset.class_indices(c).to_vec();
        if idx.len() % num_clients != 0 {
            return Err(Error::config(format!(
                "IID partition needs every class count divisible by N: class {c} has {} examples for {num_clients} clients",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let per = idx.len() / num_clients;
        for (k, chunk) in idx.chunks(per.max(1)).enumerate().take(num_clients) {
            assignments[k].extend_from_slice(chunk);
        }
    }
    assignments.iter_mut().for_each(|a| a.sort_unstable());
    Ok(Partition {
        strategy: PartitionStrategy::Iid,
        seed,
        num_clients,
        assignments,
    })
}

/// Shard size for label sharding, or the divisibility rule it violates.
pub fn shard_size(dataset: &Dataset, num_clients: usize, s: usize) -> Result<usize> {
    check_clients(num_clients)?;
    if s == 0 {
        return Err(Error::config("shards per client must be positive"));
    }
    let shards = num_clients * s;
    if dataset.is_empty() || dataset.len() % shards != 0 {
        return Err(Error::config(format!(
            "sharding needs |D| divisible by N·s: {} examples, {shards} shards",
            dataset.len()
        )));
    }
    let size = dataset.len() / shards;
    for c in 0..dataset.num_classes() {
        if dataset.class_indices(c).len() % size != 0 {
            return Err(Error::config(format!(
                "sharding needs the shard size {size} to divide every class count; class {c} has {}",
                dataset.class_indices(c).len()
            )));
        }
    }
    Ok(size)
}

/// Label-sorted data cut into `N·s` single-class shards of equal size, `s`
/// shards dealt to each client through a seeded permutation.
pub fn partition_sharding(dataset: &Dataset, num_clients: usize, s: usize, seed: u64) -> Result<Partition> {
    let size = shard_size(dataset, num_clients, s)?;
    let sorted: Vec<usize> = (0..dataset.num_classes())
        .flat_map(|c| dataset.class_indices(c).iter().copied())
        .collect();
    let shards: Vec<&[usize]> = sorted.chunks(size).collect();
    let mut order: Vec<usize> = (0..shards.len()).collect();
    order.shuffle(&mut rng_for(&[seed, stream::PARTITION]));
    let assignments = order
        .chunks(s)
        .map(|ids| {
            let mut a: Vec<usize> = ids.iter().flat_map(|&i| shards[i].iter().copied()).collect();
            a.sort_unstable();
            a
        })
        .collect();
    Ok(Partition {
        strategy: PartitionStrategy::Sharding { s },
        seed,
        num_clients,
        assignments,
    })
}

/// Symmetric Dirichlet draw over `n` clients via normalized Gamma variates.
fn dirichlet(rng: &mut crate::rng::Rng, n: usize, alpha: f64) -> Result<Option<Vec<f64>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config(format!("alpha: {e}")))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Ok(None);
    }
    Ok(Some(draws.into_iter().map(|g| g / total).collect()))
}

/// Integer counts `⌊p_k·total⌋` with the remainder handed out by largest
/// fractional part (ties to the lower index). Counts sum to `total`.
pub fn apportion(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainder = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if remainder == 0 {
            break;
        }
        counts[k] += 1;
        remainder -= 1;
    }
    counts
}

/// Per-class Dirichlet(α) proportions over clients, re-drawn (bounded) until
/// every client holds at least `min_per_client` examples.
pub fn partition_lda(
    dataset: &Dataset,
    num_clients: usize,
    alpha: f64,
    seed: u64,
    min_per_client: usize,
) -> Result<Partition> {
    check_clients(num_clients)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be positive, got {alpha}")));
    }
    'attempt: for attempt in 0..LDA_MAX_ATTEMPTS {
        let mut rng = rng_for(&[seed, stream::PARTITION, attempt]);
        let mut assignments = vec![Vec::new(); num_clients];
        for c in 0..dataset.num_classes() {
            let mut idx = dataset.class_indices(c).to_vec();
            idx.shuffle(&mut rng);
            let Some(p) = dirichlet(&mut rng, num_clients, alpha)? else {
                continue 'attempt;
            };
            let mut start = 0;
            for (k, count) in apportion(&p, idx.len()).into_iter().enumerate() {
                assignments[k].extend_from_slice(&idx[start..start + count]);
                start += count;
            }
        }
        if assignments.iter().all(|a| a.len() >= min_per_client) {
            assignments.iter_mut().for_each(|a| a.sort_unstable());
            return Ok(Partition {
                strategy: PartitionStrategy::Lda {
                    alpha,
                    min_per_client,
                },
                seed,
                num_clients,
                assignments,
            });
        }
    }
    Err(Error::Infeasible(format!(
        "no Dirichlet(α={alpha}) draw gave every one of {num_clients} clients at least {min_per_client} examples in {LDA_MAX_ATTEMPTS} attempts"
    )))
}

/// Labels present in client `n`'s training indices (its in-distribution classes).
pub fn client_classes(partition: &Partition, dataset: &Dataset, n: usize) -> Result<BTreeSet<usize>> {
    if n >= partition.num_clients {
        return Err(Error::Index {
            index: n,
            bound: partition.num_clients,
        });
    }
    Ok(partition.client(n).iter().map(|&i| dataset.label(i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> Dataset {
        gen_synthetic(10, 4, 50, 4.0, 1.0, 7).unwrap()
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let d = toy();
        assert_eq!(d.len(), 500);
        for c in 0..10 {
            assert_eq!(d.class_indices(c).len(), 50);
        }
        assert_eq!(d, toy());
        assert_ne!(d, gen_synthetic(10, 4, 50, 4.0, 1.0, 8).unwrap());
    }

    #[test]
    fn well_separated_data_is_nearest_centroid_separable() {
        let d = gen_synthetic(10, 16, 50, 12.0, 0.5, 3).unwrap();
        // oracle: empirical class centroids, 1-nearest-centroid assignment
        let centroids: Vec<Vec<f64>> = (0..10)
            .map(|c| {
                let idx = d.class_indices(c);
                let mut m = vec![0.0; d.dim()];
                for &i in idx {
                    m.iter_mut().zip(d.input(i)).for_each(|(a, b)| *a += b);
                }
                m.into_iter().map(|v| v / idx.len() as f64).collect()
            })
            .collect();
        let correct = (0..d.len())
            .filter(|&i| {
                let x = d.input(i);
                let best = (0..10)
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(&centroids[a]).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = x.iter().zip(&centroids[b]).map(|(p, q)| (p - q).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == d.label(i)
            })
            .count();
        assert!(correct as f64 / d.len() as f64 > 0.99);
    }

    #[test]
    fn iid_examples() {
        let d = toy();
        let p = partition_iid(&d, 10, 1).unwrap();
        p.validate_against(d.len()).unwrap();
        for n in 0..10 {
            assert_eq!(p.client(n).len(), 50);
            assert_eq!(client_classes(&p, &d, n).unwrap().len(), 10);
            for c in 0..10 {
                assert_eq!(p.client(n).iter().filter(|&&i| d.label(i) == c).count(), 5);
            }
        }
        let whole = partition_iid(&d, 1, 1).unwrap();
        assert_eq!(whole.client(0), (0..500).collect::<Vec<_>>().as_slice());
        assert!(partition_iid(&d, 7, 1).unwrap_err().is_config());
    }

    #[test]
    fn sharding_examples() {
        let d = toy();
        assert_eq!(shard_size(&d, 10, 2).unwrap(), 25);
        let p = partition_sharding(&d, 10, 2, 4).unwrap();
        p.validate_against(d.len()).unwrap();
        for n in 0..10 {
            assert_eq!(p.client(n).len(), 50);
            assert!(client_classes(&p, &d, n).unwrap().len() <= 2);
        }
        assert!(partition_sharding(&d, 10, 3, 4).unwrap_err().is_config());
    }

    #[test]
    fn sharding_with_s_equal_c_covers_all_classes_when_shards_align() {
        // 10 clients × 10 shards of 5: each class is 10 shards, so a client
        // can hold up to 10 distinct classes.
        let d = toy();
        let p = partition_sharding(&d, 10, 10, 0).unwrap();
        let max = (0..10).map(|n| client_classes(&p, &d, n).unwrap().len()).max().unwrap();
        assert!(max <= 10);
        p.validate_against(d.len()).unwrap();
    }

    #[test]
    fn lda_conserves_and_is_deterministic() {
        let d = toy();
        let p = partition_lda(&d, 10, 0.5, 9, 1).unwrap();
        p.validate_against(d.len()).unwrap();
        assert_eq!(p, partition_lda(&d, 10, 0.5, 9, 1).unwrap());
        assert!(matches!(partition_lda(&d, 10, 0.01, 9, 60), Err(Error::Infeasible(_))));
        assert!(partition_lda(&d, 10, 0.0, 9, 1).unwrap_err().is_config());
    }

    #[test]
    fn lda_large_alpha_is_near_uniform() {
        let d = gen_synthetic(2, 2, 2000, 4.0, 1.0, 0).unwrap();
        for seed in 0..100 {
            let p = partition_lda(&d, 10, 1000.0, seed, 0).unwrap();
            for n in 0..10 {
                for c in 0..2 {
                    let share = p.client(n).iter().filter(|&&i| d.label(i) == c).count() as f64;
                    assert!((share - 200.0).abs() <= 40.0, "seed {seed}: {share}");
                }
            }
        }
    }

    #[test]
    fn empty_lda_client_has_no_classes() {
        let d = gen_synthetic(2, 2, 5, 4.0, 1.0, 0).unwrap();
        let p = Partition {
            strategy: PartitionStrategy::Lda {
                alpha: 0.1,
                min_per_client: 0,
            },
            seed: 0,
            num_clients: 2,
            assignments: vec![(0..10).collect(), vec![]],
        };
        assert!(client_classes(&p, &d, 1).unwrap().is_empty());
        assert!(client_classes(&p, &d, 2).is_err());
    }

    #[test]
    fn partition_json_shape() {
        let d = toy();
        let p = partition_sharding(&d, 10, 2, 4).unwrap();
        let v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(v["strategy"], "sharding");
        assert_eq!(v["params"]["s"], 2);
        assert_eq!(v["N"], 10);
        assert_eq!(v["assignments"].as_array().unwrap().len(), 10);
        let back: Partition = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
        let iid = partition_iid(&d, 5, 0).unwrap();
        let back: Partition = serde_json::from_str(&iid.to_json().unwrap()).unwrap();
        assert_eq!(back, iid);
    }

    #[test]
    fn binary_and_csv_export() {
        let d = gen_synthetic(3, 2, 4, 4.0, 1.0, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("d.bin");
        d.write_binary(&bin).unwrap();
        assert_eq!(std::fs::metadata(&bin).unwrap().len(), 24 + 12 * 2 * 8 + 12 * 4);
        assert_eq!(Dataset::read_binary(&bin).unwrap(), d);
        let csv_path = dir.path().join("d.csv");
        d.write_csv(&csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(text.starts_with("x0,x1,label"));
    }

    #[test]
    fn apportion_conserves() {
        assert_eq!(apportion(&[0.5, 0.25, 0.25], 10), vec![5, 3, 2]);
        assert_eq!(apportion(&[1.0 / 3.0; 3], 10).iter().sum::<usize>(), 10);
    }

    proptest! {
        #[test]
        fn apportion_sums_to_total(raw in prop::collection::vec(0.0f64..1.0, 1..12), total in 0usize..500) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 0.0);
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let counts = apportion(&p, total);
            prop_assert_eq!(counts.iter().sum::<usize>(), total);
            for (c, pk) in counts.iter().zip(&p) {
                prop_assert!((*c as f64 - pk * total as f64).abs() < 1.0 + 1e-9);
            }
        }

        #[test]
        fn sharding_invariants(seed in any::<u64>(), s in prop::sample::select(vec![1usize, 2, 5, 10])) {
            let d = toy();
            let p = partition_sharding(&d, 10, s, seed).unwrap();
            prop_assert!(p.validate_against(d.len()).is_ok());
            for n in 0..10 {
                prop_assert!(client_classes(&p, &d, n).unwrap().len() <= s);
            }
        }
    }
}
