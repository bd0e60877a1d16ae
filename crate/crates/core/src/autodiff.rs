//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its forward value; inputs always have a
//! smaller index than their consumers, so walking the tape from the output
//! back to index 0 is a reverse topological order and each node is visited
//! once.
//!
//! Row-wise ops (`row_norm`, `row_normalize`, the losses) treat a rank-1
//! tensor as a single row and a rank-2 tensor as a batch of rows.

use crate::error::{Error, Result};
use crate::tensor::{
    checked_norm, cross_entropy_raw, matmul_raw, softmax_raw, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    Square(Var),
    RowNorm(Var),
    RowNormalize { input: Var, norms: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    MseOneHot { logits: Var, labels: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to the tape's nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?.check_finite("matmul")?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// Adds a length-`n` bias to every row of a `B×n` (or length-`n`) input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || xv.rank() == 0 || xv.cols() != bv.len() {
            return Err(Error::dim(format!(
                "bias {:?} against input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let n = bv.len();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % n])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data).check_finite("add_bias")?;
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data).check_finite("add")?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c).check_finite("scale")?;
        Ok(self.push(out, Op::Scale(x, c)))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v).check_finite("square")?;
        Ok(self.push(out, Op::Square(x)))
    }

    /// Per-row L2 norm: `B×d -> [B]`, `[d] -> scalar`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let norms = row_norms(xv)?;
        let out = match xv.rank() {
            2 => Tensor::from_parts(vec![xv.rows()], norms),
            _ => Tensor::from_parts(vec![], norms),
        };
        Ok(self.push(out, Op::RowNorm(x)))
    }

    /// Scales every row to unit L2 norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let norms = row_norms(xv)?;
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v / norms[i / c])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::RowNormalize { input: x, norms }))
    }

    /// Mean over rows of `-log softmax(z_i)[y_i]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let zv = self.value(logits);
        check_labels(zv, labels)?;
        let c = zv.cols();
        let rows = zv.rows();
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(zv.len());
        for (i, &y) in labels.iter().enumerate() {
            let z = zv.row(i);
            total += cross_entropy_raw(z, y);
            probs.extend(softmax_raw(z));
        }
        debug_assert_eq!(probs.len(), rows * c);
        let out = Tensor::scalar(total / rows as f64)?;
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over rows of `(1/C) * sum_j (z_ij - onehot(y_i)_j)^2`.
    pub fn mse_onehot(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let zv = self.value(logits);
        check_labels(zv, labels)?;
        let c = zv.cols();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z = zv.row(i);
            let sq: f64 = z
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    let t = if j == y { 1.0 } else { 0.0 };
                    (v - t) * (v - t)
                })
                .sum();
            total += sq / c as f64;
        }
        let out = Tensor::scalar(total / zv.rows() as f64)?;
        Ok(self.push(
            out,
            Op::MseOneHot {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).data().iter().sum())?;
        Ok(self.push(out, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let out = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.len() as f64)?;
        Ok(self.push(out, Op::Mean(x)))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar output, got {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // grad_a = g · bᵀ, grad_b = aᵀ · g
                    let bt = bv.transpose()?;
                    let ga = matmul_raw(&g, bt.data(), m, n, k);
                    let at = av.transpose()?;
                    let gb = matmul_raw(at.data(), &g, k, m, n);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Transpose(a) => {
                    let gt = Tensor::from_parts(node.value.shape().to_vec(), g).transpose()?;
                    accumulate(&mut grads, *a, gt.data());
                }
                Op::AddBias(x, bias) => {
                    let n = self.value(*bias).len();
                    let mut gb = vec![0.0; n];
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                    accumulate(&mut grads, *x, &g);
                    accumulate(&mut grads, *bias, &gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Scale(x, c) => {
                    let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Square(x) => {
                    let xv = self.value(*x).data();
                    let gx: Vec<f64> = g.iter().zip(xv).map(|(gi, xi)| 2.0 * xi * gi).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::RowNorm(x) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let norms = node.value.data();
                    let gx: Vec<f64> = xv
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| g[i / c] * v / norms[i / c])
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::RowNormalize { input, norms } => {
                    // Quotient rule: (g - (g·y) y) / ‖x‖ per row, y = x/‖x‖.
                    let y = &node.value;
                    let c = y.cols();
                    let mut gx = vec![0.0; g.len()];
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let proj = crate::tensor::dot(gr, yr);
                        for j in 0..c {
                            gx[r * c + j] = (gr[j] - proj * yr[j]) / n;
                        }
                    }
                    accumulate(&mut grads, *input, &gx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = self.value(*logits).cols();
                    let scale = g[0] / labels.len() as f64;
                    let mut gz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        gz[i * c + y] -= scale;
                    }
                    accumulate(&mut grads, *logits, &gz);
                }
                Op::MseOneHot { logits, labels } => {
                    let zv = self.value(*logits);
                    let c = zv.cols();
                    let scale = 2.0 * g[0] / (labels.len() * c) as f64;
                    let gz: Vec<f64> = zv
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &z)| {
                            let t = if labels[i / c] == i % c { 1.0 } else { 0.0 };
                            scale * (z - t)
                        })
                        .collect();
                    accumulate(&mut grads, *logits, &gz);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, &vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, &vec![g[0] / n as f64; n]);
                }
            }
            // Interior node gradients are released once propagated.
            grads[idx] = None;
        }

        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("backward produced a non-finite gradient".into()));
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn row_norms(x: &Tensor) -> Result<Vec<f64>> {
    if x.rank() == 0 || x.is_empty() {
        return Err(Error::dim("row norm needs a non-empty vector or matrix"));
    }
    (0..x.rows()).map(|r| checked_norm(x.row(r))).collect()
}

fn check_labels(z: &Tensor, labels: &[usize]) -> Result<()> {
    if z.rank() == 0 || z.is_empty() {
        return Err(Error::dim("logits must be a vector or matrix"));
    }
    if labels.len() != z.rows() {
        return Err(Error::dim(format!(
            "{} labels for {} logit rows",
            labels.len(),
            z.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= z.cols()) {
        return Err(Error::Index {
            index: bad,
            bound: z.cols(),
        });
    }
    Ok(())
}

/// Compares the tape gradient of a scalar function against central finite
/// differences, returning the largest per-coordinate relative error
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(function: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::config(format!("eps {eps:e} outside [1e-8, 1e-4]")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = function(&mut tape, x)?;
    let analytic = tape.backward(y)?.wrt(x);

    let eval = |p: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::new(point.shape().to_vec(), p)?);
        let out = function(&mut t, v)?;
        let val = t.value(out).item();
        if val.is_finite() {
            Ok(val)
        } else {
            Err(Error::Numeric("function value is not finite".into()))
        }
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += eps;
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);

        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let m: f64 = rng.random_range(0.5..2.0);
                if rng.random_bool(0.5) { m } else { -m }
            })
            .collect()
    }

    #[test]
    fn norm_gradient_matches_analytic() {
        let p = Tensor::vector(vec![3.0, 4.0]).unwrap();
        let err = grad_check(|t, v| t.row_norm(v), &p, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
        let mut t = Tape::new();
        let v = t.leaf(p);
        let n = t.row_norm(v).unwrap();
        let g = t.backward(n).unwrap().wrt(v);
        assert!((g.data()[0] - 0.6).abs() < 1e-15 && (g.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sum_of_squares_is_exact_under_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = Tensor::vector(rand_vec(&mut rng, 4)).unwrap();
            let err = grad_check(
                |t, v| {
                    let s = t.square(v)?;
                    t.sum(s)
                },
                &p,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-8, "{err}");
        }
    }

    #[test]
    fn composite_ce_normalize_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let w = Tensor::matrix(3, 4, rand_vec(&mut rng, 12)).unwrap();
            let x = Tensor::matrix(4, 1, rand_vec(&mut rng, 4)).unwrap();
            let y = rng.random_range(0..3);
            let err = grad_check(
                |t, wv| {
                    let xv = t.leaf(x.clone());
                    let z = t.matmul(wv, xv)?;
                    let zt = t.transpose(z)?;
                    let zn = t.row_normalize(zt)?;
                    t.softmax_cross_entropy(zn, &[y])
                },
                &w,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn normalize_backward_kills_radial_direction() {
        // loss = <normalize(v), u> for constant u. An upstream gradient u along
        // v̂ has no tangential part, so the input gradient vanishes; for any u
        // the input gradient is orthogonal to v.
        let v = vec![1.0, -2.0, 0.5];
        let vhat: Vec<f64> = {
            let n = dot(&v, &v).sqrt();
            v.iter().map(|x| x / n).collect()
        };
        for (u, expect_zero) in [(vhat.clone(), true), (vec![2.0, 1.0, 0.0], false)] {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::matrix(1, 3, v.clone()).unwrap());
            let y = t.row_normalize(x).unwrap();
            let uv = t.leaf(Tensor::matrix(3, 1, u).unwrap());
            let prod = t.matmul(y, uv).unwrap();
            let out = t.sum(prod).unwrap();
            let g = t.backward(out).unwrap().wrt(x);
            assert!(dot(g.data(), &v).abs() < 1e-12);
            if expect_zero {
                assert!(g.data().iter().all(|x| x.abs() < 1e-12));
            } else {
                assert!(g.data().iter().any(|x| x.abs() > 1e-3));
            }
        }
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let z = rand_vec(&mut rng, 6);
            let c: f64 = rng.random_range(-50.0..50.0);
            let y = rng.random_range(0..6);
            let a = cross_entropy_raw(&z, y);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            assert!((a - cross_entropy_raw(&shifted, y)).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_visits_shared_nodes_once() {
        // y = x·x via add(x, x) reuse: d/dx sum(x + x) = 2
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let s = t.add(x, x).unwrap();
        let out = t.sum(s).unwrap();
        assert_eq!(t.backward(out).unwrap().wrt(x).data(), &[2.0, 2.0]);
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let p = Tensor::vector(vec![1.0]).unwrap();
        assert!(grad_check(|t, v| t.sum(v), &p, 1e-2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sum_of_squares_is_exact(
                v in prop::collection::vec((0.5f64..2.0, any::<bool>()), 1..16),
            ) {
                let p = Tensor::vector(v.into_iter().map(|(m, neg)| if neg { -m } else { m }).collect()).unwrap();
                let err = grad_check(
                    |t, x| {
                        let sq = t.square(x)?;
                        t.sum(sq)
                    },
                    &p,
                    1e-6,
                )
                .unwrap();
                prop_assert!(err < 1e-8, "err {err:e}");
            }

            #[test]
            fn normalized_rows_have_unit_norm(
                rows in 1usize..6,
                v in prop::collection::vec(-50.0f64..50.0, 24),
            ) {
                let data: Vec<f64> = v[..rows * 4].to_vec();
                prop_assume!(data.chunks(4).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6));
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::new(vec![rows, 4], data).unwrap());
                let y = tape.row_normalize(x).unwrap();
                for r in tape.value(y).data().chunks(4) {
                    prop_assert!((dot(r, r).sqrt() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
