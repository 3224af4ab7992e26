//! Frozen-encoder probes: multinomial logistic regression and cosine k-NN.

use semppl_core::nets::NetworkPair;
use semppl_core::plqueue::{reduce_neighbors, Neighbor};
use semppl_core::synthdata::Dataset;
use semppl_core::{Result, Scalar};
use serde::{Deserialize, Serialize};

pub const PROBE_NEIGHBORS: usize = 5;
const LINEAR_ITERATIONS: usize = 500;
const LINEAR_L2: f64 = 1e-4;
const MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Linear,
    Knn,
}

/// Row-major feature matrix with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Features {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Encoder outputs of a labelled dataset, computed in eval mode.
pub fn encode<S: Scalar>(nets: &NetworkPair<S>, data: &Dataset<S>) -> Result<Features> {
    let labels = data
        .labels()
        .ok_or_else(|| semppl_core::Error::Contract("probe data needs labels".into()))?
        .to_vec();
    let out = nets.encode(&data.to_tensor())?;
    Ok(Features {
        dim: out.cols(),
        values: out.data().iter().map(|v| v.as_f64()).collect(),
        labels,
    })
}

pub fn evaluate_probe<S: Scalar>(
    nets: &NetworkPair<S>,
    train: &Dataset<S>,
    test: &Dataset<S>,
    mode: ProbeMode,
) -> Result<f64> {
    let (tr, te) = (encode(nets, train)?, encode(nets, test)?);
    let classes = train.num_classes().max(test.num_classes());
    Ok(match mode {
        ProbeMode::Linear => linear_probe(&tr, &te, classes),
        ProbeMode::Knn => knn_probe(&tr, &te, PROBE_NEIGHBORS),
    })
}

fn standardizer(train: &Features) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (train.rows() as f64, train.dim);
    let mut mean = vec![0.0; d];
    for i in 0..train.rows() {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut sd = vec![0.0; d];
    for i in 0..train.rows() {
        for ((s, v), m) in sd.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    sd.iter_mut().for_each(|s| *s = (*s / n).sqrt().max(1e-8));
    (mean, sd)
}

fn standardize(f: &Features, mean: &[f64], sd: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.values.len());
    for i in 0..f.rows() {
        out.extend(
            f.row(i)
                .iter()
                .zip(mean)
                .zip(sd)
                .map(|((v, m), s)| (v - m) / s),
        );
    }
    out
}

/// `logits = X W + b` with `X` row-major `n x d` and `W` row-major `d x c`.
fn logits(x: &[f64], n: usize, d: usize, w: &[f64], b: &[f64], c: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
    f64::gemm(
        n,
        d,
        c,
        1.0,
        x,
        (d as isize, 1),
        w,
        (c as isize, 1),
        1.0,
        &mut out,
        (c as isize, 1),
    );
    out
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Softmax regression on standardized features by full-batch gradient
/// descent with heavy-ball momentum; returns test accuracy.
pub fn linear_probe(train: &Features, test: &Features, classes: usize) -> f64 {
    let (n, d, c) = (train.rows(), train.dim, classes.max(1));
    let (mean, sd) = standardizer(train);
    let x = standardize(train, &mean, &sd);
    // Curvature of the mean cross-entropy is at most 0.5 * lambda_max(X^T X / n).
    let lr = 1.0 / (0.5 * top_eigenvalue(&x, n, d) + LINEAR_L2);
    let (mut w, mut b) = (vec![0.0; d * c], vec![0.0; c]);
    let (mut vw, mut vb) = (vec![0.0; d * c], vec![0.0; c]);
    for _ in 0..LINEAR_ITERATIONS {
        let mut g = logits(&x, n, d, &w, &b, c);
        for (row, &y) in g.chunks_mut(c).zip(&train.labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for v in row.iter_mut() {
                *v = (*v - max).exp() / z / n as f64;
            }
            row[y] -= 1.0 / n as f64;
        }
        let mut gw: Vec<f64> = w.iter().map(|v| LINEAR_L2 * v).collect();
        f64::gemm(
            d,
            n,
            c,
            1.0,
            &x,
            (1, d as isize),
            &g,
            (c as isize, 1),
            1.0,
            &mut gw,
            (c as isize, 1),
        );
        let mut gb = vec![0.0; c];
        for row in g.chunks(c) {
            for (a, v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
        let norm: f64 = gw.iter().chain(&gb).map(|v| v * v).sum::<f64>().sqrt();
        for ((wi, vi), gi) in w.iter_mut().zip(&mut vw).zip(&gw) {
            *vi = MOMENTUM * *vi - lr * gi;
            *wi += *vi;
        }
        for ((bi, vi), gi) in b.iter_mut().zip(&mut vb).zip(&gb) {
            *vi = MOMENTUM * *vi - lr * gi;
            *bi += *vi;
        }
        if norm < 1e-7 {
            break;
        }
    }
    let xt = standardize(test, &mean, &sd);
    let out = logits(&xt, test.rows(), d, &w, &b, c);
    let hits = out
        .chunks(c)
        .zip(&test.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / test.rows() as f64
}

fn top_eigenvalue(x: &[f64], n: usize, d: usize) -> f64 {
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..30 {
        let mut xv = vec![0.0; n];
        f64::gemm(
            n,
            d,
            1,
            1.0,
            x,
            (d as isize, 1),
            &v,
            (1, 1),
            0.0,
            &mut xv,
            (1, 1),
        );
        let mut next = vec![0.0; d];
        f64::gemm(
            d,
            n,
            1,
            1.0 / n as f64,
            x,
            (1, d as isize),
            &xv,
            (1, 1),
            0.0,
            &mut next,
            (1, 1),
        );
        lambda = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        if lambda == 0.0 {
            return 0.0;
        }
        v = next.iter().map(|a| a / lambda).collect();
    }
    lambda
}

fn normalized_rows(f: &Features) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.values.len());
    for i in 0..f.rows() {
        let r = f.row(i);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.extend(r.iter().map(|v| v / n));
    }
    out
}

/// Cosine k-NN accuracy; the modal label wins, ties to the nearest.
pub fn knn_probe(train: &Features, test: &Features, k: usize) -> f64 {
    let (n, m, d) = (train.rows(), test.rows(), train.dim);
    let k = k.min(n).max(1);
    let (a, q) = (normalized_rows(train), normalized_rows(test));
    let mut sims = vec![0.0; m * n];
    f64::gemm(
        m,
        d,
        n,
        1.0,
        &q,
        (d as isize, 1),
        &a,
        (1, d as isize),
        0.0,
        &mut sims,
        (n as isize, 1),
    );
    let mut hits = 0;
    for (row, &y) in sims.chunks(n).zip(&test.labels) {
        let mut best: Vec<Neighbor<f64>> = Vec::with_capacity(k + 1);
        for (i, &s) in row.iter().enumerate() {
            let cand = Neighbor {
                label: train.labels[i],
                similarity: s,
                stamp: i as u64,
            };
            let pos = best
                .iter()
                .position(|b| s > b.similarity || (s == b.similarity && cand.stamp < b.stamp))
                .unwrap_or(best.len());
            if pos < k {
                best.insert(pos, cand);
                best.truncate(k);
            }
        }
        if reduce_neighbors(&best).0 == y {
            hits += 1;
        }
    }
    hits as f64 / m as f64
}
