//! The training loop.
//!
//! Every random stream is derived from `(seed, purpose, counter)`, so the
//! run state is fully captured by the weights, optimizer buffers, queues
//! and the epoch/step counters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semppl_core::ndgrad::{Mode, Tape, Tensor};
use semppl_core::nets::NetworkPair;
use semppl_core::objective::{aggregate_views, draw_loss_inputs};
use semppl_core::optim::{Lars, LrSchedule};
use semppl_core::plqueue::{QueueBank, Voting};
use semppl_core::synthdata::{make_batch_views, mix, split_labels, Dataset, GaussianMixture};
use semppl_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{report_from_counts, MetricsRow};
use crate::probe::{evaluate_probe, ProbeMode};

const STREAM_NETWORKS: u64 = 1;
const STREAM_QUEUES: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_VIEWS: u64 = 5;
const STREAM_LOSS: u64 = 6;
const TEST_STREAM: u64 = 1;

/// Per-epoch quantities that are not part of the metrics table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub labeled_seen: u64,
    pub enqueued: u64,
    /// Anchors whose semantic-positive label equals their true label.
    pub semantic_label_correct: u64,
    pub semantic_label_total: u64,
    pub negatives_clamped: bool,
    /// Running hash of every view tensor consumed so far.
    pub view_digest: u64,
}

impl EpochDiagnostics {
    pub fn semantic_label_accuracy(&self) -> f64 {
        if self.semantic_label_total == 0 {
            1.0
        } else {
            self.semantic_label_correct as f64 / self.semantic_label_total as f64
        }
    }
}

/// Training and held-out data plus the labelled mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RunData<S> {
    pub train: Dataset<S>,
    pub test: Dataset<S>,
    pub labeled: Vec<bool>,
}

impl<S: Scalar> RunData<S> {
    pub fn generate(config: &TrainConfig) -> Result<Self> {
        let mixture = GaussianMixture::new(&config.dataset)?;
        let train = mixture.sample::<S>(config.dataset.samples_per_class, 0)?;
        let test = mixture.sample::<S>(config.train.test_samples_per_class, TEST_STREAM)?;
        let split = split_labels(
            &train,
            config.train.label_fraction,
            mix(&[config.train.seed, STREAM_SPLIT]),
        )?;
        let labeled = split.mask(train.len());
        Ok(Self {
            train,
            test,
            labeled,
        })
    }
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    loss_total: f64,
    loss_augm: f64,
    loss_sempos: f64,
    inv_augm: f64,
    inv_sempos: f64,
    votes: Vec<(usize, bool)>,
    fallbacks: usize,
    lr: f64,
    diag: EpochDiagnostics,
}

pub struct Trainer<S> {
    config: TrainConfig,
    data: RunData<S>,
    nets: NetworkPair<S>,
    bank: QueueBank<S>,
    lars: Lars<S>,
    schedule: LrSchedule,
    epoch: usize,
    global_step: u64,
    view_digest: u64,
    metrics: Vec<MetricsRow>,
    diagnostics: Vec<EpochDiagnostics>,
}

/// Mutable state carried by a checkpoint.
pub struct TrainerState<S> {
    pub epoch: usize,
    pub global_step: u64,
    pub view_digest: u64,
    pub nets: NetworkPair<S>,
    pub bank: QueueBank<S>,
    pub momentum: Vec<Vec<S>>,
    pub metrics: Vec<MetricsRow>,
    pub diagnostics: Vec<EpochDiagnostics>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let data = RunData::generate(&config)?;
        Self::with_data(config, data)
    }

    pub fn with_data(config: TrainConfig, data: RunData<S>) -> Result<Self> {
        let seed = config.train.seed;
        let nets = NetworkPair::build(&config.networks, mix(&[seed, STREAM_NETWORKS]))?;
        let mut bank = QueueBank::new(
            config.loss.num_large,
            config.queue_capacity(),
            config.networks.projector.output,
        );
        let classes: Vec<usize> = (0..config.dataset.num_classes).collect();
        bank.init_random(&classes, mix(&[seed, STREAM_QUEUES]))?;
        let lars = Lars::new(config.lars.clone(), nets.online_params());
        let schedule = LrSchedule::new(
            &config.lars,
            config.train.batch_size,
            steps_per_epoch(&config, data.train.len()),
            config.train.epochs,
        );
        Ok(Self {
            config,
            data,
            nets,
            bank,
            lars,
            schedule,
            epoch: 0,
            global_step: 0,
            view_digest: 0,
            metrics: Vec::new(),
            diagnostics: Vec::new(),
        })
    }

    /// Rebuilds a trainer at a saved point.
    pub fn restore(config: TrainConfig, state: TrainerState<S>) -> Result<Self> {
        let mut t = Self::new(config)?;
        if state.nets.online_params().count() != t.nets.online_params().count() {
            return Err(HarnessError::Malformed(
                "network layout differs from the config".into(),
            ));
        }
        t.nets = state.nets;
        t.bank = state.bank;
        t.lars.restore_buffers(state.momentum)?;
        t.epoch = state.epoch;
        t.global_step = state.global_step;
        t.view_digest = state.view_digest;
        t.metrics = state.metrics;
        t.diagnostics = state.diagnostics;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Replaces the epoch budget, e.g. to extend a resumed run.
    pub fn set_total_epochs(&mut self, epochs: usize) -> Result<()> {
        let mut config = self.config.clone();
        config.train.epochs = epochs;
        config.validate()?;
        self.schedule = LrSchedule::new(
            &config.lars,
            config.train.batch_size,
            steps_per_epoch(&config, self.data.train.len()),
            epochs,
        );
        self.config = config;
        Ok(())
    }

    pub fn data(&self) -> &RunData<S> {
        &self.data
    }

    pub fn nets(&self) -> &NetworkPair<S> {
        &self.nets
    }

    pub fn bank(&self) -> &QueueBank<S> {
        &self.bank
    }

    pub fn lars(&self) -> &Lars<S> {
        &self.lars
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn view_digest(&self) -> u64 {
        self.view_digest
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn diagnostics(&self) -> &[EpochDiagnostics] {
        &self.diagnostics
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.train.epochs
    }

    pub fn steps_per_epoch(&self) -> u64 {
        steps_per_epoch(&self.config, self.data.train.len())
    }

    pub fn probe(&self, mode: ProbeMode) -> Result<f64> {
        Ok(evaluate_probe(
            &self.nets,
            &self.data.train,
            &self.data.test,
            mode,
        )?)
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self) -> Result<&[MetricsRow]> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(&self.metrics)
    }

    /// One pass over the shuffled training set, dropping the ragged tail.
    pub fn run_epoch(&mut self) -> Result<&MetricsRow> {
        let epoch = self.epoch;
        let n = self.data.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[
            self.config.train.seed,
            STREAM_SHUFFLE,
            epoch as u64,
        ])));
        let b = self.config.train.batch_size;
        let mut acc = EpochAccumulator::default();
        for (batch, indices) in order.chunks_exact(b).enumerate() {
            let step = self.global_step;
            self.train_step(indices, epoch as u64, batch as u64, &mut acc)
                .map_err(|source| HarnessError::Step {
                    epoch,
                    step,
                    source,
                })?;
        }
        self.epoch += 1;
        let row = self.finish_epoch(acc)?;
        self.metrics.push(row);
        Ok(self.metrics.last().expect("just pushed"))
    }

    fn finish_epoch(&mut self, acc: EpochAccumulator) -> Result<MetricsRow> {
        let steps = acc.steps.max(1) as f64;
        let report = report_from_counts(acc.votes.iter().copied());
        let every = self.config.train.probe_every;
        let probe_now = self.epoch == self.config.train.epochs
            || (every > 0 && self.epoch.is_multiple_of(every));
        let (probe_linear, probe_knn) = if probe_now {
            (
                Some(self.probe(ProbeMode::Linear)?),
                Some(self.probe(ProbeMode::Knn)?),
            )
        } else {
            (None, None)
        };
        let mut diag = acc.diag;
        diag.epoch = self.epoch;
        diag.view_digest = self.view_digest;
        self.diagnostics.push(diag);
        Ok(MetricsRow {
            epoch: self.epoch,
            lr: acc.lr,
            loss_total: acc.loss_total / steps,
            loss_augm: acc.loss_augm / steps,
            loss_sempos: acc.loss_sempos / steps,
            inv_augm: acc.inv_augm / steps,
            inv_sempos: acc.inv_sempos / steps,
            pl_accuracy: report.accuracy(),
            precision: report.precision,
            recall: report.recall,
            fallbacks: acc.fallbacks,
            probe_linear,
            probe_knn,
        })
    }

    fn digest(&mut self, tensors: &[Tensor<S>]) {
        for t in tensors {
            for chunk in t.data().chunks(64) {
                let words: Vec<u64> = std::iter::once(self.view_digest)
                    .chain(chunk.iter().map(|v| v.as_f64().to_bits()))
                    .collect();
                self.view_digest = mix(&words);
            }
        }
    }

    fn train_step(
        &mut self,
        indices: &[usize],
        epoch: u64,
        batch: u64,
        acc: &mut EpochAccumulator,
    ) -> semppl_core::Result<()> {
        let cfg = &self.config;
        let seed = cfg.train.seed;
        let views = make_batch_views(
            &self.data.train,
            indices,
            &cfg.augmentation,
            mix(&[seed, STREAM_VIEWS]),
            epoch,
            batch,
        );
        let (k, voting, oracle) = (
            cfg.train.knn_k,
            if cfg.train.voting_enabled {
                Voting::AllPairs
            } else {
                Voting::Single
            },
            cfg.train.oracle_mode,
        );
        let loss_cfg = cfg.loss.clone();
        self.digest(&views.large);
        self.digest(&views.small);

        let tape = Tape::new();
        let leaves = self.nets.bind(&tape);
        let mut online_large = Vec::with_capacity(views.large.len());
        for x in &views.large {
            online_large.push(self.nets.forward_online(&tape, &leaves, x, Mode::Train)?);
        }
        let mut online_small = Vec::with_capacity(views.small.len());
        for x in &views.small {
            online_small.push(self.nets.forward_online(&tape, &leaves, x, Mode::Train)?);
        }
        let mut targets = Vec::with_capacity(views.large.len());
        for x in &views.large {
            targets.push(self.nets.forward_target(x, Mode::Train)?);
        }

        let truth: Vec<usize> = indices
            .iter()
            .map(|&i| {
                self.data
                    .train
                    .label(i)
                    .expect("synthetic data is labelled")
            })
            .collect();
        let known: Vec<Option<usize>> = indices
            .iter()
            .zip(&truth)
            .map(|(&i, &y)| self.data.labeled[i].then_some(y))
            .collect();

        for (m, y) in known.iter().enumerate() {
            if let Some(y) = *y {
                for (j, t) in targets.iter().enumerate() {
                    self.bank.enqueue_labeled(j, t.row(m), y)?;
                    acc.diag.enqueued += 1;
                }
                acc.diag.labeled_seen += 1;
            }
        }

        let queries: Vec<Tensor<S>> = online_large.iter().map(Tensor::detach).collect();
        let pl = self.bank.pseudo_label_batch(
            &queries,
            &known,
            k,
            voting,
            oracle.then_some(truth.as_slice()),
        )?;
        acc.votes.extend(
            pl.records
                .iter()
                .map(|r| (r.count, r.label == truth[r.datum])),
        );
        for (m, &y) in pl.labels.iter().enumerate() {
            acc.diag.semantic_label_total += 1;
            acc.diag.semantic_label_correct += u64::from(y == truth[m]);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, STREAM_LOSS, self.global_step]));
        let inputs = draw_loss_inputs(&self.bank, &pl.labels, &targets, &loss_cfg, &mut rng)?;
        let breakdown = aggregate_views(
            &tape,
            &online_large,
            &online_small,
            &targets,
            &inputs,
            &loss_cfg,
        )?;
        let grads = tape.backward(&breakdown.total)?;
        let grad_values: Vec<Tensor<S>> = leaves
            .iter()
            .map(|l| grads.get(l).cloned().ok_or(semppl_core::Error::StaleTape))
            .collect::<semppl_core::Result<_>>()?;
        let grad_slices: Vec<&[S]> = grad_values.iter().map(Tensor::data).collect();

        let lr = self.schedule.at(self.global_step);
        self.lars
            .step(&mut self.nets.online_params_mut(), &grad_slices, lr)?;
        self.nets.ema_update();
        self.global_step += 1;

        acc.steps += 1;
        acc.loss_total += breakdown.total.item().as_f64();
        acc.loss_augm += breakdown.l_augm.as_f64();
        acc.loss_sempos += breakdown.l_sempos.as_f64();
        acc.inv_augm += breakdown.i_augm.as_f64();
        acc.inv_sempos += breakdown.i_sempos.as_f64();
        acc.fallbacks += breakdown.fallback_count;
        acc.diag.negatives_clamped |= breakdown.negatives_clamped;
        acc.lr = lr;
        Ok(())
    }

    pub fn into_state(self) -> TrainerState<S> {
        TrainerState {
            epoch: self.epoch,
            global_step: self.global_step,
            view_digest: self.view_digest,
            momentum: self.lars.buffers().to_vec(),
            nets: self.nets,
            bank: self.bank,
            metrics: self.metrics,
            diagnostics: self.diagnostics,
        }
    }
}

pub fn steps_per_epoch(config: &TrainConfig, train_len: usize) -> u64 {
    (train_len / config.train.batch_size) as u64
}
