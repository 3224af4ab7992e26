//! Independent reference implementations shared by integration tests.
#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

pub mod gradients;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use semppl_core::ndgrad::{Tape, Tensor};
use semppl_core::objective::{aggregate_views, draw_loss_inputs, LossConfig};
use semppl_core::plqueue::{LabeledQueue, Neighbor, QueueBank};

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
            return unit(&v);
        }
    }
}

pub fn random_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| random_unit(rng, dim)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exhaustive scan, sort by (similarity desc, stamp asc), truncate.
pub fn knn_by_sort(queue: &LabeledQueue<f64>, q: &[f64], k: usize) -> Vec<Neighbor<f64>> {
    let mut all: Vec<Neighbor<f64>> = queue
        .entries()
        .map(|e| Neighbor {
            label: e.label,
            similarity: dot(q, e.embedding),
            stamp: e.stamp,
        })
        .collect();
    all.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap()
            .then(a.stamp.cmp(&b.stamp))
    });
    all.truncate(k);
    all
}

pub struct NaiveLoss {
    pub total: f64,
    pub l_augm: f64,
    pub l_sempos: f64,
    pub i_augm: f64,
    pub i_sempos: f64,
    pub fallbacks: usize,
}

fn phi(u: &[f64], v: &[f64], tau: f64) -> f64 {
    tau * (dot(u, v) / tau).exp()
}

fn term(anchor: &[f64], pos: &[f64], negs: &[&[f64]], tau: f64) -> (f64, Vec<f64>) {
    let mut scores = vec![phi(anchor, pos, tau)];
    scores.extend(negs.iter().map(|n| phi(anchor, n, tau)));
    let z: f64 = scores.iter().sum();
    let probs: Vec<f64> = scores.iter().map(|s| s / z).collect();
    (-(probs[0]).ln(), probs)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a.ln() - b.ln())).sum()
}

/// Loop-by-loop loss. Draws negatives and semantic positives from `rng` in
/// the order: per anchor, negatives, then (target view, draw) positives.
pub fn naive_loss(
    online_large: &[Vec<Vec<f64>>],
    online_small: &[Vec<Vec<f64>>],
    targets: &[Vec<Vec<f64>>],
    bank: &QueueBank<f64>,
    labels: &[usize],
    config: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> NaiveLoss {
    let b = labels.len();
    let (l, p) = (config.num_large, config.num_semantic_positives);
    let tau = config.temperature;
    let mut negs: Vec<Vec<usize>> = Vec::new();
    // sem[m][j][q]
    let mut sem: Vec<Vec<Vec<Vec<f64>>>> = Vec::new();
    let mut fallbacks = 0;
    for m in 0..b {
        let n = config.num_negatives.min(b - 1);
        negs.push(
            index::sample(rng, b - 1, n)
                .into_iter()
                .map(|i| if i >= m { i + 1 } else { i })
                .collect(),
        );
        let mut per_view = Vec::new();
        for j in 0..l {
            let mut draws = Vec::new();
            for _ in 0..p {
                let matching: Vec<Vec<f64>> = bank
                    .queue(j)
                    .entries()
                    .filter(|e| e.label == labels[m])
                    .map(|e| e.embedding.to_vec())
                    .collect();
                if matching.is_empty() {
                    fallbacks += 1;
                    draws.push(targets[j][m].clone());
                } else {
                    let pick = rng.random_range(0..matching.len());
                    draws.push(matching[pick].clone());
                }
            }
            per_view.push(draws);
        }
        sem.push(per_view);
    }

    let online: Vec<&Vec<Vec<f64>>> = online_large.iter().chain(online_small).collect();
    let (mut aug, mut sp) = (0.0, 0.0);
    for view in &online {
        for j in 0..l {
            for m in 0..b {
                let nv: Vec<&[f64]> = negs[m].iter().map(|&n| targets[j][n].as_slice()).collect();
                aug += term(&view[m], &targets[j][m], &nv, tau).0;
                for q in 0..p {
                    sp += term(&view[m], &sem[m][j][q], &nv, tau).0;
                }
            }
        }
    }
    let norm = ((l + config.num_small) * l * (1 + p) * b) as f64;
    let (l_augm, l_sempos) = (aug / norm, sp / norm);

    let (fi, fj) = (0usize, 1usize.min(l - 1));
    let (mut ia, mut is) = (0.0, 0.0);
    for m in 0..b {
        let nf: Vec<&[f64]> = negs[m].iter().map(|&n| targets[fj][n].as_slice()).collect();
        let ns: Vec<&[f64]> = negs[m].iter().map(|&n| targets[fi][n].as_slice()).collect();
        let (_, p1) = term(&online_large[fi][m], &targets[fj][m], &nf, tau);
        let (_, p2) = term(&online_large[fj][m], &targets[fi][m], &ns, tau);
        ia += kl(&p1, &p2);
        if config.alpha > 0.0 && p > 0 {
            let (_, p1) = term(&online_large[fi][m], &sem[m][fj][0], &nf, tau);
            let (_, p2) = term(&online_large[fj][m], &sem[m][fi][0], &ns, tau);
            is += kl(&p1, &p2);
        }
    }
    let per = (config.normalizer() * b) as f64;
    let (i_augm, i_sempos) = (ia / per, is / per);
    let total = config.contrastive_scale * (l_augm + config.alpha * l_sempos)
        + config.invariance_scale * (i_augm + i_sempos);
    NaiveLoss {
        total,
        l_augm,
        l_sempos,
        i_augm,
        i_sempos,
        fallbacks,
    }
}

/// Bank with random init plus some enqueued labelled entries, leaving one
/// class absent from the last queue so the fallback path runs.
pub fn seeded_bank(views: usize, capacity: usize, dim: usize, seed: u64) -> QueueBank<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let mut bank = QueueBank::new(views, capacity, dim);
    bank.init_random(&[0, 1, 2], seed).unwrap();
    for v in 0..views {
        for i in 0..capacity / 2 {
            bank.enqueue_labeled(v, &random_unit(&mut rng, dim), i % 3)
                .unwrap();
        }
    }
    if views > 1 {
        // refill the last queue without class 2
        for i in 0..capacity {
            bank.enqueue_labeled(views - 1, &random_unit(&mut rng, dim), i % 2)
                .unwrap();
        }
    }
    bank
}

/// Largest absolute gap between `aggregate_views` and [`naive_loss`] over
/// the total and every component, on random unit embeddings.
pub fn loss_gap(config: &LossConfig, seed: u64, batch: usize, dim: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let large: Vec<_> = (0..config.num_large)
        .map(|_| random_rows(&mut rng, batch, dim))
        .collect();
    let small: Vec<_> = (0..config.num_small)
        .map(|_| random_rows(&mut rng, batch, dim))
        .collect();
    let targets: Vec<_> = (0..config.num_large)
        .map(|_| random_rows(&mut rng, batch, dim))
        .collect();
    let labels: Vec<usize> = (0..batch).map(|m| (m * 7 + seed as usize) % 4).collect();
    let bank = seeded_bank(config.num_large, 24, dim, seed);

    let to_t = |rows: &Vec<Vec<f64>>| Tensor::from_rows(rows).unwrap();
    let tape = Tape::new();
    let ol: Vec<_> = large.iter().map(|r| tape.leaf(&to_t(r))).collect();
    let os: Vec<_> = small.iter().map(|r| tape.leaf(&to_t(r))).collect();
    let tl: Vec<_> = targets.iter().map(to_t).collect();
    let mut draw_rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let inputs = draw_loss_inputs(&bank, &labels, &tl, config, &mut draw_rng).unwrap();
    let got = aggregate_views(&tape, &ol, &os, &tl, &inputs, config).unwrap();

    let mut oracle_rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let want = naive_loss(
        &large,
        &small,
        &targets,
        &bank,
        &labels,
        config,
        &mut oracle_rng,
    );
    assert_eq!(got.fallback_count, want.fallbacks);
    [
        (got.total.item(), want.total),
        (got.l_augm, want.l_augm),
        (got.l_sempos, want.l_sempos),
        (got.i_augm, want.i_augm),
        (got.i_sempos, want.i_sempos),
    ]
    .iter()
    .map(|(a, b)| (a - b).abs())
    .fold(0.0, f64::max)
}

/// Small direction palette so exact similarity ties are common.
pub fn palette(dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(dim as u64);
    (0..6).map(|_| random_unit(&mut rng, dim)).collect()
}
