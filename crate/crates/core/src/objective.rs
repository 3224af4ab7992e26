//! Contrastive objective over augmentation and semantic positives, the
//! invariance penalty and the multi-view aggregation.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor};
use crate::plqueue::QueueBank;
use crate::scalar::{self, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub invariance_scale: f64,
    pub contrastive_scale: f64,
    pub num_negatives: usize,
    pub num_large: usize,
    pub num_small: usize,
    pub num_semantic_positives: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            alpha: 0.2,
            invariance_scale: 5.0,
            contrastive_scale: 0.3,
            num_negatives: 10,
            num_large: 4,
            num_small: 2,
            num_semantic_positives: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Spec(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("invariance_scale", self.invariance_scale),
            ("contrastive_scale", self.contrastive_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Spec(format!(
                    "{name} must be a non-negative number, got {v}"
                )));
            }
        }
        if self.num_large == 0 {
            return Err(Error::Spec("num_large must be at least 1".into()));
        }
        Ok(())
    }

    /// Divisor shared by the contrastive sums and the invariance pair:
    /// `(L + S) * L * (1 + P)`.
    pub fn normalizer(&self) -> usize {
        (self.num_large + self.num_small) * self.num_large * (1 + self.num_semantic_positives)
    }

    /// Whether the semantic branch participates at all.
    pub fn semantic_enabled(&self) -> bool {
        self.alpha > 0.0 && self.num_semantic_positives > 0
    }
}

/// `tau * exp(<u, v> / tau)`.
pub fn phi<S: Scalar>(u: &[S], v: &[S], tau: S) -> S {
    tau * (scalar::dot(u, v) / tau).exp()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeDraw {
    pub indices: Vec<usize>,
    /// Set when fewer than the requested negatives were available.
    pub clamped: bool,
}

/// Uniform draw without replacement of batch indices other than `anchor`.
pub fn sample_negatives<R: Rng>(
    batch: usize,
    anchor: usize,
    n_neg: usize,
    rng: &mut R,
) -> Result<NegativeDraw> {
    if batch < 2 {
        return Err(Error::BatchTooSmall(batch));
    }
    if anchor >= batch {
        return Err(Error::Contract(format!(
            "anchor {anchor} outside batch of {batch}"
        )));
    }
    let n = n_neg.min(batch - 1);
    let indices = index::sample(rng, batch - 1, n)
        .into_iter()
        .map(|i| if i >= anchor { i + 1 } else { i })
        .collect();
    Ok(NegativeDraw {
        indices,
        clamped: n < n_neg,
    })
}

/// Single-anchor contrastive loss and the positive's probability.
///
/// `anchor` is a `1 x p` row on `tape`; positive and negatives are treated
/// as constants.
pub fn contrastive_term<S: Scalar>(
    tape: &Tape<S>,
    anchor: &Tensor<S>,
    positive: &[S],
    negatives: &[&[S]],
    tau: S,
) -> Result<(Tensor<S>, S)> {
    let p = positive.len();
    let anchor = anchor.reshape(vec![1, p]).map_err(|_| Error::Dimension {
        op: "contrastive_term",
        lhs: anchor.shape().to_vec(),
        rhs: vec![p],
    })?;
    let mut cand = Vec::with_capacity((1 + negatives.len()) * p);
    cand.extend_from_slice(positive);
    for n in negatives {
        if n.len() != p {
            return Err(Error::Dimension {
                op: "contrastive_term",
                lhs: vec![p],
                rhs: vec![n.len()],
            });
        }
        cand.extend_from_slice(n);
    }
    let cand = Tensor::new(vec![1, 1 + negatives.len(), p], cand)?;
    let (loss, log_probs) = contrastive_rows(tape, &anchor, &cand, tau)?;
    let loss = tape.sum(&loss)?;
    let prob = log_probs.data()[0].exp();
    Ok((loss, prob))
}

/// Row-wise contrastive loss: `anchors` is `B x p`, `candidates` is
/// `B x K x p` with each row's positive first. Returns the `B` losses and
/// the `B x K` log-probabilities.
pub fn contrastive_rows<S: Scalar>(
    tape: &Tape<S>,
    anchors: &Tensor<S>,
    candidates: &Tensor<S>,
    tau: S,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let scores = tape.candidate_scores(anchors, &candidates.detach())?;
    let logits = tape.mul_scalar(&scores, S::one() / tau)?;
    let log_probs = tape.log_softmax(&logits)?;
    let pos = tape.select_column(&log_probs, 0)?;
    Ok((tape.mul_scalar(&pos, -S::one())?, log_probs))
}

/// `sum_k sg[p1 log p1] - p1 log p2`, averaged over rows.
///
/// `forward_log_probs` is a constant `B x K` matrix; gradients reach only
/// `swapped_log_probs`.
pub fn invariance_term<S: Scalar>(
    tape: &Tape<S>,
    forward_log_probs: &[S],
    swapped_log_probs: &Tensor<S>,
) -> Result<Tensor<S>> {
    if forward_log_probs.len() != swapped_log_probs.len() {
        return Err(Error::Dimension {
            op: "invariance_term",
            lhs: vec![forward_log_probs.len()],
            rhs: swapped_log_probs.shape().to_vec(),
        });
    }
    let shape = swapped_log_probs.shape().to_vec();
    let rows = if shape.len() > 1 { shape[0] } else { 1 };
    let weights: Vec<S> = forward_log_probs.iter().map(|l| l.exp()).collect();
    let entropy_side: S = weights
        .iter()
        .zip(forward_log_probs)
        .fold(S::zero(), |acc, (&w, &l)| acc + w * l);
    let weights = Tensor::new(shape, weights)?;
    let cross = tape.sum(&tape.mul(&weights, swapped_log_probs)?)?;
    let diff = tape.sub(&Tensor::scalar(entropy_side), &cross)?;
    tape.mul_scalar(&diff, S::one() / S::lit(rows as f64))
}

/// Negatives and semantic positives drawn for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossInputs<S> {
    pub batch: usize,
    pub dim: usize,
    pub num_large: usize,
    pub num_semantic: usize,
    /// Negative indices per anchor, shared by every view pair.
    pub negatives: Vec<Vec<usize>>,
    /// Row-major `[j][p][m][dim]`.
    pub semantic: Vec<S>,
    pub fallback_count: usize,
    pub negatives_clamped: bool,
}

impl<S: Scalar> LossInputs<S> {
    pub fn semantic_positive(&self, view: usize, draw: usize, anchor: usize) -> &[S] {
        let off = ((view * self.num_semantic + draw) * self.batch + anchor) * self.dim;
        &self.semantic[off..off + self.dim]
    }
}

/// Draws the step's negatives and semantic positives.
///
/// Order: for each anchor, its negatives, then one positive per
/// (large view, draw) pair. Semantic positives for anchor `m` come from
/// queue `j` entries labelled `labels[m]`, falling back to `targets[j][m]`.
pub fn draw_loss_inputs<S: Scalar, R: Rng>(
    bank: &QueueBank<S>,
    labels: &[usize],
    targets: &[Tensor<S>],
    config: &LossConfig,
    rng: &mut R,
) -> Result<LossInputs<S>> {
    let batch = labels.len();
    let (l, p) = (config.num_large, config.num_semantic_positives);
    if targets.len() != l || bank.views() < l {
        return Err(Error::Contract(format!(
            "expected {l} target views and queues, got {} and {}",
            targets.len(),
            bank.views()
        )));
    }
    let dim = targets[0].cols();
    for t in targets {
        if t.shape() != [batch, dim] {
            return Err(Error::Dimension {
                op: "draw_loss_inputs",
                lhs: vec![batch, dim],
                rhs: t.shape().to_vec(),
            });
        }
    }
    let mut negatives = Vec::with_capacity(batch);
    let mut semantic = vec![S::zero(); l * p * batch * dim];
    let mut fallback_count = 0;
    let mut clamped = false;
    for (m, &label) in labels.iter().enumerate() {
        let draw = sample_negatives(batch, m, config.num_negatives, rng)?;
        clamped |= draw.clamped;
        negatives.push(draw.indices);
        for (j, target) in targets.iter().enumerate() {
            for q in 0..p {
                let d = bank.sample_semantic_positive(j, label, target.row(m), rng);
                fallback_count += usize::from(d.fallback);
                let off = ((j * p + q) * batch + m) * dim;
                semantic[off..off + dim].copy_from_slice(&d.embedding);
            }
        }
    }
    Ok(LossInputs {
        batch,
        dim,
        num_large: l,
        num_semantic: p,
        negatives,
        semantic,
        fallback_count,
        negatives_clamped: clamped,
    })
}

/// Forward-side log-probabilities of the invariance pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenForward<S> {
    pub augm: Vec<S>,
    pub sempos: Option<Vec<S>>,
}

pub struct LossBreakdown<S> {
    pub total: Tensor<S>,
    pub l_augm: S,
    pub l_sempos: S,
    pub i_augm: S,
    pub i_sempos: S,
    pub fallback_count: usize,
    pub negatives_clamped: bool,
    pub forward: FrozenForward<S>,
}

fn candidates<S: Scalar>(
    target: &Tensor<S>,
    positive: impl Fn(usize) -> Vec<S>,
    negatives: &[Vec<usize>],
) -> Result<Tensor<S>> {
    let (batch, dim) = (target.rows(), target.cols());
    let k = 1 + negatives.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(batch * k * dim);
    for (m, negs) in negatives.iter().enumerate() {
        data.extend_from_slice(&positive(m));
        for &n in negs {
            data.extend_from_slice(target.row(n));
        }
    }
    Tensor::new(vec![batch, k, dim], data)
}

/// Full multi-view loss. `online_large` and `online_small` are `B x p`
/// normalized online embeddings on `tape`; `targets` the large-view target
/// embeddings, treated as constants.
pub fn aggregate_views<S: Scalar>(
    tape: &Tape<S>,
    online_large: &[Tensor<S>],
    online_small: &[Tensor<S>],
    targets: &[Tensor<S>],
    inputs: &LossInputs<S>,
    config: &LossConfig,
) -> Result<LossBreakdown<S>> {
    aggregate_views_frozen(
        tape,
        online_large,
        online_small,
        targets,
        inputs,
        config,
        None,
    )
}

/// [`aggregate_views`] with the invariance forward side pinned to
/// `frozen` instead of the values computed from the current embeddings.
pub fn aggregate_views_frozen<S: Scalar>(
    tape: &Tape<S>,
    online_large: &[Tensor<S>],
    online_small: &[Tensor<S>],
    targets: &[Tensor<S>],
    inputs: &LossInputs<S>,
    config: &LossConfig,
    frozen: Option<&FrozenForward<S>>,
) -> Result<LossBreakdown<S>> {
    config.validate()?;
    let (l, p) = (config.num_large, config.num_semantic_positives);
    if online_large.len() != l || online_small.len() != config.num_small || targets.len() != l {
        return Err(Error::Contract(format!(
            "expected {l} large, {} small and {l} target views",
            config.num_small
        )));
    }
    if inputs.num_large != l || inputs.num_semantic != p || inputs.batch != targets[0].rows() {
        return Err(Error::Contract(
            "loss inputs drawn for a different configuration".into(),
        ));
    }
    let tau = S::lit(config.temperature);
    let batch = inputs.batch;
    let targets: Vec<Tensor<S>> = targets.iter().map(Tensor::detach).collect();

    let augm_cands = targets
        .iter()
        .map(|t| candidates(t, |m| t.row(m).to_vec(), &inputs.negatives))
        .collect::<Result<Vec<_>>>()?;
    let sem_cands = (0..l)
        .map(|j| {
            (0..p)
                .map(|q| {
                    candidates(
                        &targets[j],
                        |m| inputs.semantic_positive(j, q, m).to_vec(),
                        &inputs.negatives,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    // invariance pair: anchor view 0 against target 1, and the swap
    let (fwd_i, fwd_j) = (0, 1.min(l - 1));
    let (swp_i, swp_j) = (fwd_j, fwd_i);
    let mut kept_augm: [Option<Tensor<S>>; 2] = [None, None];
    let mut kept_sem: [Option<Tensor<S>>; 2] = [None, None];

    let mut augm_sum: Option<Tensor<S>> = None;
    let mut sem_sum: Option<Tensor<S>> = None;
    let accumulate = |acc: &mut Option<Tensor<S>>, term: Tensor<S>| -> Result<()> {
        *acc = Some(match acc.take() {
            None => term,
            Some(a) => tape.add(&a, &term)?,
        });
        Ok(())
    };

    for (i, anchors) in online_large.iter().chain(online_small).enumerate() {
        for j in 0..l {
            let (losses, log_probs) = contrastive_rows(tape, anchors, &augm_cands[j], tau)?;
            accumulate(&mut augm_sum, tape.sum(&losses)?)?;
            if (i, j) == (fwd_i, fwd_j) {
                kept_augm[0] = Some(log_probs.clone());
            }
            if (i, j) == (swp_i, swp_j) {
                kept_augm[1] = Some(log_probs);
            }
            for (q, cands) in sem_cands[j].iter().enumerate() {
                let (losses, log_probs) = contrastive_rows(tape, anchors, cands, tau)?;
                accumulate(&mut sem_sum, tape.sum(&losses)?)?;
                if q == 0 && (i, j) == (fwd_i, fwd_j) {
                    kept_sem[0] = Some(log_probs.clone());
                }
                if q == 0 && (i, j) == (swp_i, swp_j) {
                    kept_sem[1] = Some(log_probs);
                }
            }
        }
    }

    let scale = S::one() / S::lit((config.normalizer() * batch) as f64);
    let l_augm = tape.mul_scalar(&augm_sum.expect("at least one pair"), scale)?;
    let l_sempos = match sem_sum {
        Some(s) => tape.mul_scalar(&s, scale)?,
        None => Tensor::scalar(S::zero()),
    };

    let fwd_augm = match frozen {
        Some(f) => f.augm.clone(),
        None => kept_augm[0]
            .as_ref()
            .expect("forward pair present")
            .data()
            .to_vec(),
    };
    let i_augm = invariance_term(
        tape,
        &fwd_augm,
        kept_augm[1].as_ref().expect("swapped pair present"),
    )?;
    let mut fwd_sem = None;
    let i_sempos = if config.semantic_enabled() {
        let values = match frozen.and_then(|f| f.sempos.clone()) {
            Some(v) => v,
            None => kept_sem[0]
                .as_ref()
                .expect("forward pair present")
                .data()
                .to_vec(),
        };
        let term = invariance_term(
            tape,
            &values,
            kept_sem[1].as_ref().expect("swapped pair present"),
        )?;
        fwd_sem = Some(values);
        Some(term)
    } else {
        None
    };

    let contrastive = tape.add(&l_augm, &tape.mul_scalar(&l_sempos, S::lit(config.alpha))?)?;
    let contrastive = tape.mul_scalar(&contrastive, S::lit(config.contrastive_scale))?;
    let shared = S::one() / S::lit(config.normalizer() as f64);
    let i_augm = tape.mul_scalar(&i_augm, shared)?;
    let i_sempos = i_sempos.map(|t| tape.mul_scalar(&t, shared)).transpose()?;
    let invariance = match &i_sempos {
        Some(s) => tape.add(&i_augm, s)?,
        None => i_augm.clone(),
    };
    let invariance = tape.mul_scalar(&invariance, S::lit(config.invariance_scale))?;
    let total = tape.add(&contrastive, &invariance)?;

    Ok(LossBreakdown {
        total,
        l_augm: l_augm.item(),
        l_sempos: l_sempos.item(),
        i_augm: i_augm.item(),
        i_sempos: i_sempos.map_or(S::zero(), |t| t.item()),
        fallback_count: inputs.fallback_count,
        negatives_clamped: inputs.negatives_clamped,
        forward: FrozenForward {
            augm: fwd_augm,
            sempos: fwd_sem,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn phi_closed_forms() {
        let tau = 0.2;
        assert!(close(phi(&[1.0, 0.0], &[0.0, 1.0], tau), 0.2, 1e-15));
        assert!(close(
            phi(&[1.0, 0.0], &[1.0, 0.0], tau),
            0.2 * 5f64.exp(),
            1e-12
        ));
        assert!(close(phi(&[1.0, 0.0], &[1.0, 0.0], tau), 29.6826, 1e-4));
        assert!(close(phi(&[1.0, 0.0], &[-1.0, 0.0], tau), 0.0013476, 1e-7));
    }

    #[test]
    fn negatives_clamp_and_exclusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = sample_negatives(2, 1, 10, &mut rng).unwrap();
        assert_eq!(d.indices, vec![0]);
        assert!(d.clamped);
        for anchor in 0..6 {
            let d = sample_negatives(6, anchor, 3, &mut rng).unwrap();
            assert!(!d.clamped);
            assert_eq!(d.indices.len(), 3);
            assert!(!d.indices.contains(&anchor));
            let mut s = d.indices.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 3);
        }
        assert!(matches!(
            sample_negatives(1, 0, 1, &mut rng),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn negatives_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (batch, anchor, draws) = (6, 2, 100_000);
        let mut counts = [0usize; 6];
        for _ in 0..draws {
            for i in sample_negatives(batch, anchor, 1, &mut rng)
                .unwrap()
                .indices
            {
                counts[i] += 1;
            }
        }
        assert_eq!(counts[anchor], 0);
        for (i, &c) in counts.iter().enumerate().filter(|(i, _)| *i != anchor) {
            assert!(close(c as f64 / draws as f64, 0.2, 0.02), "index {i}: {c}");
        }
    }

    #[test]
    fn contrastive_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(&Tensor::vector(&[1.0, 0.0]));
        let (loss, prob) = contrastive_term(&tape, &a, &[1.0, 0.0], &[], 0.2).unwrap();
        assert_eq!(loss.item(), 0.0);
        assert_eq!(prob, 1.0);

        let (loss, _) = contrastive_term(&tape, &a, &[0.6, 0.8], &[&[0.6, -0.8]], 0.2).unwrap();
        assert!(close(loss.item(), 2f64.ln(), 1e-12));

        let (loss, prob) = contrastive_term(&tape, &a, &[1.0, 0.0], &[&[0.0, 1.0]], 0.2).unwrap();
        let expected = -(5f64.exp() / (5f64.exp() + 1.0)).ln();
        assert!(close(loss.item(), expected, 1e-12));
        assert!(close(loss.item(), 0.0067153, 1e-7));
        assert!(close(prob, (-expected).exp(), 1e-12));
    }

    #[test]
    fn contrastive_matches_phi_ratio() {
        let tape = Tape::<f64>::new();
        let u = [0.6, 0.8, 0.0];
        let pos = [0.0, 0.6, 0.8];
        let negs = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]];
        let neg_refs: Vec<&[f64]> = negs.iter().map(|n| n.as_slice()).collect();
        let a = tape.leaf(&Tensor::vector(&u));
        let (loss, _) = contrastive_term(&tape, &a, &pos, &neg_refs, 0.3).unwrap();
        let num = phi(&u, &pos, 0.3);
        let den = num + negs.iter().map(|n| phi(&u, n, 0.3)).sum::<f64>();
        assert!(close(loss.item(), -(num / den).ln(), 1e-12));
    }

    #[test]
    fn invariance_identical_is_zero_and_nonnegative() {
        let tape = Tape::<f64>::new();
        let lp: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
        let swapped = tape.leaf(&Tensor::new(vec![1, 3], lp.clone()).unwrap());
        let v = invariance_term(&tape, &lp, &swapped).unwrap();
        assert!(v.item().abs() < 1e-15);

        let other: Vec<f64> = [0.2f64, 0.2, 0.6].iter().map(|p| p.ln()).collect();
        let swapped = tape.leaf(&Tensor::new(vec![1, 3], other).unwrap());
        assert!(invariance_term(&tape, &lp, &swapped).unwrap().item() > 0.0);
    }

    #[test]
    fn loss_config_defaults_and_validation() {
        let c = LossConfig::default();
        assert_eq!(c.normalizer(), 6 * 4 * 4);
        assert!(c.validate().is_ok());
        let bad = LossConfig {
            temperature: 0.0,
            ..c.clone()
        };
        assert!(bad.validate().is_err());
    }

    fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Tensor<f64> {
        use rand_distr::StandardNormal;
        let data: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = scalar::norm(&v);
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        Tensor::from_rows(&data).unwrap()
    }

    fn setup(
        config: &LossConfig,
        batch: usize,
        dim: usize,
        seed: u64,
    ) -> (
        Vec<Tensor<f64>>,
        Vec<Tensor<f64>>,
        Vec<Tensor<f64>>,
        LossInputs<f64>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let large: Vec<_> = (0..config.num_large)
            .map(|_| unit_rows(&mut rng, batch, dim))
            .collect();
        let small: Vec<_> = (0..config.num_small)
            .map(|_| unit_rows(&mut rng, batch, dim))
            .collect();
        let targets: Vec<_> = (0..config.num_large)
            .map(|_| unit_rows(&mut rng, batch, dim))
            .collect();
        let mut bank = QueueBank::new(config.num_large, 16, dim);
        bank.init_random(&[0, 1, 2], seed).unwrap();
        let labels: Vec<usize> = (0..batch).map(|m| m % 3).collect();
        let inputs = draw_loss_inputs(&bank, &labels, &targets, config, &mut rng).unwrap();
        (large, small, targets, inputs)
    }

    #[test]
    fn single_pair_reduces_to_plain_contrastive() {
        let config = LossConfig {
            num_large: 1,
            num_small: 0,
            num_semantic_positives: 0,
            invariance_scale: 0.0,
            contrastive_scale: 1.0,
            num_negatives: 3,
            ..LossConfig::default()
        };
        let (large, small, targets, inputs) = setup(&config, 5, 4, 1);
        let tape = Tape::new();
        let online: Vec<_> = large.iter().map(|t| tape.leaf(t)).collect();
        let b = aggregate_views(&tape, &online, &small, &targets, &inputs, &config).unwrap();
        let mut expected = 0.0;
        for m in 0..5 {
            let negs: Vec<&[f64]> = inputs.negatives[m]
                .iter()
                .map(|&n| targets[0].row(n))
                .collect();
            let t2 = Tape::new();
            let a = t2.leaf(&Tensor::vector(large[0].row(m)));
            expected += contrastive_term(&t2, &a, targets[0].row(m), &negs, 0.2)
                .unwrap()
                .0
                .item();
        }
        assert!(close(b.total.item(), expected / 5.0, 1e-12));
    }

    #[test]
    fn breakdown_reconstructs_total() {
        let config = LossConfig::default();
        let (large, small, targets, inputs) = setup(&config, 8, 6, 2);
        let tape = Tape::new();
        let online: Vec<_> = large.iter().map(|t| tape.leaf(t)).collect();
        let online_small: Vec<_> = small.iter().map(|t| tape.leaf(t)).collect();
        let b = aggregate_views(&tape, &online, &online_small, &targets, &inputs, &config).unwrap();
        let rebuilt = config.contrastive_scale * (b.l_augm + config.alpha * b.l_sempos)
            + config.invariance_scale * (b.i_augm + b.i_sempos);
        assert!(close(b.total.item(), rebuilt, 1e-12));
        assert!(b.i_augm >= -1e-12 && b.i_sempos >= -1e-12);
    }

    #[test]
    fn semantic_fed_augmentation_positive_matches_augmentation_term() {
        let config = LossConfig {
            num_semantic_positives: 1,
            ..LossConfig::default()
        };
        let (large, small, targets, mut inputs) = setup(&config, 6, 5, 3);
        for j in 0..config.num_large {
            for m in 0..6 {
                let off = (j * 6 + m) * 5;
                inputs.semantic[off..off + 5].copy_from_slice(targets[j].row(m));
            }
        }
        let tape = Tape::new();
        let b = aggregate_views(&tape, &large, &small, &targets, &inputs, &config).unwrap();
        assert!(close(b.l_augm, b.l_sempos, 1e-12));
        assert!(close(b.i_augm, b.i_sempos, 1e-12));
    }

    #[test]
    fn alpha_zero_ignores_semantic_positives() {
        let config = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        let (large, small, targets, inputs) = setup(&config, 8, 6, 4);
        let mut scrambled = inputs.clone();
        scrambled.semantic.reverse();
        let run = |inputs: &LossInputs<f64>| {
            let tape = Tape::new();
            let online: Vec<_> = large.iter().map(|t| tape.leaf(t)).collect();
            let b = aggregate_views(&tape, &online, &small, &targets, inputs, &config).unwrap();
            let g = tape.backward(&b.total).unwrap();
            let grads: Vec<Vec<f64>> = online.iter().map(|o| g.get(o).unwrap().to_vec()).collect();
            (b.total.item(), b.l_sempos, b.i_sempos, grads)
        };
        let (t0, l0, i0, g0) = run(&inputs);
        let (t1, l1, _, g1) = run(&scrambled);
        assert!(l0 > 0.0 && l1 > 0.0);
        assert_ne!(l0, l1);
        assert_eq!(i0, 0.0);
        assert_eq!(t0, t1);
        assert_eq!(g0, g1);
    }

    #[test]
    fn targets_receive_no_gradient() {
        let config = LossConfig::default();
        let (large, small, targets, inputs) = setup(&config, 6, 4, 6);
        let tape = Tape::new();
        let online: Vec<_> = large.iter().map(|t| tape.leaf(t)).collect();
        let tracked: Vec<_> = targets.iter().map(|t| tape.leaf(t)).collect();
        let b = aggregate_views(&tape, &online, &small, &tracked, &inputs, &config).unwrap();
        let g = tape.backward(&b.total).unwrap();
        for t in &tracked {
            assert!(g.get(t).unwrap().data().iter().all(|&v| v == 0.0));
        }
        assert!(online
            .iter()
            .any(|o| g.get(o).unwrap().data().iter().any(|&v| v != 0.0)));
    }
}
