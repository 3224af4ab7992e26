//! Per-view FIFO queues of labelled target embeddings, k-NN pseudo-label
//! voting and semantic-positive sampling.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::scalar::{self, Scalar};
use crate::synthdata::mix;

/// Stored embeddings must be unit-norm to within this.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Fixed-capacity ring buffer of `(embedding, label)` pairs.
///
/// Every entry carries an insertion stamp; the entry with the smallest
/// stamp is the oldest and is evicted first.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledQueue<S> {
    capacity: usize,
    dim: usize,
    embeddings: Vec<S>,
    labels: Vec<usize>,
    stamps: Vec<u64>,
    len: usize,
    next_stamp: u64,
    // slots per label, oldest first
    by_label: BTreeMap<usize, VecDeque<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor<S> {
    pub label: usize,
    pub similarity: S,
    pub stamp: u64,
}

/// One stored entry, as seen from outside the ring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry<'a, S> {
    pub embedding: &'a [S],
    pub label: usize,
    pub stamp: u64,
}

impl<S: Scalar> LabeledQueue<S> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(
            capacity > 0 && dim > 0,
            "queue needs positive capacity and dim"
        );
        Self {
            capacity,
            dim,
            embeddings: vec![S::zero(); capacity * dim],
            labels: vec![0; capacity],
            stamps: vec![0; capacity],
            len: 0,
            next_stamp: 0,
            by_label: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Stamp the next enqueued entry will receive.
    pub fn next_stamp(&self) -> u64 {
        self.next_stamp
    }

    fn slot(&self, stamp: u64) -> usize {
        (stamp % self.capacity as u64) as usize
    }

    fn embedding_at(&self, slot: usize) -> &[S] {
        &self.embeddings[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Entries oldest first.
    pub fn entries(&self) -> impl Iterator<Item = Entry<'_, S>> + '_ {
        let first = self.next_stamp - self.len as u64;
        (first..self.next_stamp).map(move |stamp| {
            let slot = self.slot(stamp);
            Entry {
                embedding: self.embedding_at(slot),
                label: self.labels[slot],
                stamp,
            }
        })
    }

    /// Appends a unit-norm embedding, evicting the oldest entry when full.
    pub fn enqueue(&mut self, embedding: &[S], label: usize) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::Dimension {
                op: "enqueue",
                lhs: vec![self.dim],
                rhs: vec![embedding.len()],
            });
        }
        let n = scalar::norm(embedding).as_f64();
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::Contract(format!(
                "enqueued embedding has norm {n}, expected 1"
            )));
        }
        let stamp = self.next_stamp;
        let slot = self.slot(stamp);
        if self.len == self.capacity {
            let old = self.labels[slot];
            let list = self
                .by_label
                .get_mut(&old)
                .expect("evicted label is indexed");
            let front = list.pop_front();
            debug_assert_eq!(front, Some(slot));
            if list.is_empty() {
                self.by_label.remove(&old);
            }
        } else {
            self.len += 1;
        }
        self.embeddings[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(embedding);
        self.labels[slot] = label;
        self.stamps[slot] = stamp;
        self.by_label.entry(label).or_default().push_back(slot);
        self.next_stamp += 1;
        Ok(())
    }

    /// Number of stored entries carrying `label`.
    pub fn count_label(&self, label: usize) -> usize {
        self.by_label.get(&label).map_or(0, VecDeque::len)
    }

    /// Exact top-`k` by inner product, descending; equal similarities
    /// resolve to the older entry first.
    pub fn knn_query(&self, query: &[S], k: usize) -> Result<Vec<Neighbor<S>>> {
        if k == 0 || k > self.len {
            return Err(Error::Query { k, len: self.len });
        }
        if query.len() != self.dim {
            return Err(Error::Dimension {
                op: "knn_query",
                lhs: vec![self.dim],
                rhs: vec![query.len()],
            });
        }
        let mut best = TopK::new(k);
        for e in self.entries() {
            best.offer(Neighbor {
                label: e.label,
                similarity: scalar::dot(query, e.embedding),
                stamp: e.stamp,
            });
        }
        Ok(best.into_vec())
    }

    /// Uniform draw among entries labelled `label`, if any.
    pub fn sample_label<R: Rng>(&self, label: usize, rng: &mut R) -> Option<&[S]> {
        let slots = self.by_label.get(&label)?;
        let pick = rng.random_range(0..slots.len());
        Some(self.embedding_at(slots[pick]))
    }

    /// Raw state for persistence: `(capacity, dim, next_stamp, entries)`.
    pub fn snapshot(&self) -> (usize, usize, u64, Vec<(usize, u64, Vec<S>)>) {
        let entries = self
            .entries()
            .map(|e| (e.label, e.stamp, e.embedding.to_vec()))
            .collect();
        (self.capacity, self.dim, self.next_stamp, entries)
    }

    /// Rebuilds a queue from [`snapshot`](Self::snapshot) output.
    pub fn from_snapshot(
        capacity: usize,
        dim: usize,
        next_stamp: u64,
        entries: Vec<(usize, u64, Vec<S>)>,
    ) -> Result<Self> {
        if capacity == 0
            || dim == 0
            || entries.len() > capacity
            || (entries.len() as u64) > next_stamp
        {
            return Err(Error::Contract("queue snapshot is inconsistent".into()));
        }
        let mut q = Self::new(capacity, dim);
        let first = next_stamp - entries.len() as u64;
        for (offset, (label, stamp, emb)) in entries.into_iter().enumerate() {
            if stamp != first + offset as u64 || emb.len() != dim {
                return Err(Error::Contract(
                    "queue snapshot stamps are not contiguous".into(),
                ));
            }
            let slot = q.slot(stamp);
            q.embeddings[slot * dim..(slot + 1) * dim].copy_from_slice(&emb);
            q.labels[slot] = label;
            q.stamps[slot] = stamp;
            q.by_label.entry(label).or_default().push_back(slot);
            q.len += 1;
        }
        q.next_stamp = next_stamp;
        Ok(q)
    }
}

/// Bounded best-first list ordered by (similarity desc, stamp asc).
struct TopK<S> {
    k: usize,
    items: Vec<Neighbor<S>>,
}

impl<S: Scalar> TopK<S> {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn beats(a: &Neighbor<S>, b: &Neighbor<S>) -> bool {
        a.similarity > b.similarity || (a.similarity == b.similarity && a.stamp < b.stamp)
    }

    #[inline]
    fn offer(&mut self, n: Neighbor<S>) {
        if self.items.len() == self.k && !Self::beats(&n, &self.items[self.k - 1]) {
            return;
        }
        let pos = self
            .items
            .iter()
            .position(|b| Self::beats(&n, b))
            .unwrap_or(self.items.len());
        self.items.insert(pos, n);
        self.items.truncate(self.k);
    }

    fn into_vec(self) -> Vec<Neighbor<S>> {
        self.items
    }
}

/// Which (queue view, query view) pairs cast votes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Voting {
    /// Every ordered pair, including `i == j`.
    AllPairs,
    /// Only the first large view against its own queue.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vote<S> {
    pub queue_view: usize,
    pub query_view: usize,
    pub label: usize,
    pub similarity: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoteRecord<S> {
    pub datum: usize,
    pub votes: Vec<Vote<S>>,
    pub label: usize,
    pub count: usize,
}

/// Reduces one k-NN result to a single vote: the modal label, ties going to
/// the label whose nearest member ranks first. Returns the label and the
/// similarity of its nearest member.
pub fn reduce_neighbors<S: Scalar>(neighbors: &[Neighbor<S>]) -> (usize, S) {
    debug_assert!(!neighbors.is_empty());
    if neighbors.len() == 1 {
        return (neighbors[0].label, neighbors[0].similarity);
    }
    // (count, first rank, similarity of first)
    let mut tally: BTreeMap<usize, (usize, usize, S)> = BTreeMap::new();
    for (rank, n) in neighbors.iter().enumerate() {
        tally
            .entry(n.label)
            .and_modify(|t| t.0 += 1)
            .or_insert((1, rank, n.similarity));
    }
    let (label, (_, _, sim)) = tally
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .expect("non-empty");
    (label, sim)
}

/// Majority over votes. Ties go to the larger summed similarity, then to
/// the smaller label. Returns `(label, count)`.
pub fn tally_votes<S: Scalar>(votes: &[Vote<S>]) -> (usize, usize) {
    let mut groups: BTreeMap<usize, Vec<S>> = BTreeMap::new();
    for v in votes {
        groups.entry(v.label).or_default().push(v.similarity);
    }
    let mut best: Option<(usize, usize, S)> = None;
    for (label, mut sims) in groups {
        // canonical summation order keeps the tie-break order-independent
        sims.sort_by(|a, b| a.partial_cmp(b).expect("finite similarity"));
        let total = sims.iter().fold(S::zero(), |acc, &s| acc + s);
        let count = sims.len();
        let better = match best {
            None => true,
            Some((_, c, t)) => count > c || (count == c && total > t),
        };
        if better {
            best = Some((label, count, total));
        }
    }
    let (label, count, _) = best.expect("at least one vote");
    (label, count)
}

/// One queue per large view, all sharing capacity and embedding size.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueBank<S> {
    queues: Vec<LabeledQueue<S>>,
}

/// Semantic positive drawn for one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticDraw<S> {
    pub embedding: Vec<S>,
    /// Set when no queue entry carried the label and the caller's
    /// augmentation positive was returned instead.
    pub fallback: bool,
}

/// Labels for a batch plus the vote records of its unlabelled rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels<S> {
    pub labels: Vec<usize>,
    pub records: Vec<VoteRecord<S>>,
}

impl<S: Scalar> QueueBank<S> {
    pub fn new(views: usize, capacity: usize, dim: usize) -> Self {
        Self {
            queues: (0..views)
                .map(|_| LabeledQueue::new(capacity, dim))
                .collect(),
        }
    }

    pub fn from_queues(queues: Vec<LabeledQueue<S>>) -> Result<Self> {
        let first = queues
            .first()
            .ok_or_else(|| Error::Contract("bank needs a queue".into()))?;
        let (c, d) = (first.capacity(), first.dim());
        if queues.iter().any(|q| q.capacity() != c || q.dim() != d) {
            return Err(Error::Contract("queues disagree on capacity or dim".into()));
        }
        Ok(Self { queues })
    }

    pub fn views(&self) -> usize {
        self.queues.len()
    }

    pub fn queue(&self, view: usize) -> &LabeledQueue<S> {
        &self.queues[view]
    }

    pub fn queues(&self) -> &[LabeledQueue<S>] {
        &self.queues
    }

    pub fn capacity(&self) -> usize {
        self.queues[0].capacity()
    }

    /// Fills every queue with normalized Gaussian vectors whose labels cycle
    /// through `class_ids`.
    pub fn init_random(&mut self, class_ids: &[usize], seed: u64) -> Result<()> {
        let capacity = self.capacity();
        if class_ids.is_empty() || capacity < class_ids.len() {
            return Err(Error::QueueInit {
                capacity,
                classes: class_ids.len(),
            });
        }
        for (v, q) in self.queues.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0x5155_4555, v as u64]));
            let dim = q.dim();
            for i in 0..capacity {
                let mut z: Vec<S>;
                loop {
                    z = (0..dim)
                        .map(|_| S::lit(rng.sample(StandardNormal)))
                        .collect();
                    if scalar::norm(&z).as_f64() > 1e-6 {
                        break;
                    }
                }
                let n = scalar::norm(&z);
                for e in &mut z {
                    *e /= n;
                }
                q.enqueue(&z, class_ids[i % class_ids.len()])?;
            }
        }
        Ok(())
    }

    pub fn enqueue_labeled(&mut self, view: usize, embedding: &[S], label: usize) -> Result<()> {
        let views = self.views();
        self.queues
            .get_mut(view)
            .ok_or_else(|| Error::Contract(format!("view {view} out of range for {views} queues")))?
            .enqueue(embedding, label)
    }

    pub fn knn_query(&self, view: usize, query: &[S], k: usize) -> Result<Vec<Neighbor<S>>> {
        self.queues[view].knn_query(query, k)
    }

    fn pairs(&self, query_views: usize, voting: Voting) -> Vec<(usize, usize)> {
        match voting {
            Voting::Single => vec![(0, 0)],
            Voting::AllPairs => (0..self.views())
                .flat_map(|i| (0..query_views).map(move |j| (i, j)))
                .collect(),
        }
    }

    /// Pseudo-label for one datum from its online embeddings, one per large
    /// view.
    pub fn vote_pseudo_label(
        &self,
        datum: usize,
        online: &[&[S]],
        k: usize,
        voting: Voting,
    ) -> Result<VoteRecord<S>> {
        let mut votes = Vec::new();
        for (i, j) in self.pairs(online.len(), voting) {
            let neighbors = self.queues[i].knn_query(online[j], k)?;
            let (label, similarity) = reduce_neighbors(&neighbors);
            votes.push(Vote {
                queue_view: i,
                query_view: j,
                label,
                similarity,
            });
        }
        let (label, count) = tally_votes(&votes);
        Ok(VoteRecord {
            datum,
            votes,
            label,
            count,
        })
    }

    /// Batched voting: `online[j]` holds the `B x p` online embeddings of
    /// large view `j`; votes are cast for the listed rows. Similarities
    /// come from one GEMM per (queue, view) pair.
    pub fn vote_rows(
        &self,
        online: &[Tensor<S>],
        rows: &[usize],
        k: usize,
        voting: Voting,
    ) -> Result<Vec<VoteRecord<S>>> {
        let mut records: Vec<VoteRecord<S>> = rows
            .iter()
            .map(|&datum| VoteRecord {
                datum,
                votes: Vec::new(),
                label: 0,
                count: 0,
            })
            .collect();
        if rows.is_empty() {
            return Ok(records);
        }
        for (i, j) in self.pairs(online.len(), voting) {
            let q = &self.queues[i];
            if k == 0 || k > q.len() {
                return Err(Error::Query { k, len: q.len() });
            }
            let dim = q.dim();
            let view = &online[j];
            if view.cols() != dim {
                return Err(Error::Dimension {
                    op: "vote_rows",
                    lhs: vec![dim],
                    rhs: view.shape().to_vec(),
                });
            }
            let mut queries = Vec::with_capacity(rows.len() * dim);
            for &r in rows {
                queries.extend_from_slice(view.row(r));
            }
            let (u, c) = (rows.len(), q.len());
            let mut sims = vec![S::zero(); u * c];
            S::gemm(
                u,
                dim,
                c,
                S::one(),
                &queries,
                (dim as isize, 1),
                &q.embeddings[..c * dim],
                (1, dim as isize),
                S::zero(),
                &mut sims,
                (c as isize, 1),
            );
            let (labels, stamps) = (&q.labels[..c], &q.stamps[..c]);
            for (rec, row) in records.iter_mut().zip(sims.chunks(c)) {
                let mut best = TopK::new(k);
                let mut floor = S::neg_infinity();
                for ((&s, &label), &stamp) in row.iter().zip(labels).zip(stamps) {
                    if s < floor {
                        continue;
                    }
                    best.offer(Neighbor {
                        label,
                        similarity: s,
                        stamp,
                    });
                    if best.items.len() == k {
                        floor = best.items[k - 1].similarity;
                    }
                }
                let (label, similarity) = reduce_neighbors(&best.into_vec());
                rec.votes.push(Vote {
                    queue_view: i,
                    query_view: j,
                    label,
                    similarity,
                });
            }
        }
        for rec in &mut records {
            let (label, count) = tally_votes(&rec.votes);
            rec.label = label;
            rec.count = count;
        }
        Ok(records)
    }

    /// Uniform draw among queue-`view` entries labelled `label`, or the
    /// caller's `fallback` when none exist.
    pub fn sample_semantic_positive<R: Rng>(
        &self,
        view: usize,
        label: usize,
        fallback: &[S],
        rng: &mut R,
    ) -> SemanticDraw<S> {
        match self.queues[view].sample_label(label, rng) {
            Some(e) => SemanticDraw {
                embedding: e.to_vec(),
                fallback: false,
            },
            None => SemanticDraw {
                embedding: fallback.to_vec(),
                fallback: true,
            },
        }
    }

    /// Labels for a batch: ground truth where present, otherwise the vote
    /// winner. With `oracle` the unlabelled rows receive their true labels
    /// while the votes are still cast and returned.
    pub fn pseudo_label_batch(
        &self,
        online: &[Tensor<S>],
        known: &[Option<usize>],
        k: usize,
        voting: Voting,
        oracle: Option<&[usize]>,
    ) -> Result<PseudoLabels<S>> {
        let rows: Vec<usize> = (0..known.len()).filter(|&m| known[m].is_none()).collect();
        let records = self.vote_rows(online, &rows, k, voting)?;
        let mut labels: Vec<usize> = known.iter().map(|y| y.unwrap_or(0)).collect();
        for rec in &records {
            labels[rec.datum] = match oracle {
                Some(truth) => truth[rec.datum],
                None => rec.label,
            };
        }
        Ok(PseudoLabels { labels, records })
    }
}
