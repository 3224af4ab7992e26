use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::{NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rows whose norm is at or below this are rejected by `l2_normalize`.
pub const NORM_EPS: f64 = 1e-12;
/// Variance floor added inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Running-moment momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.9;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

fn fresh_graph() -> u64 {
    NEXT_GRAPH.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running first and second moments of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<S> {
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

impl<S: Scalar> BatchNormState<S> {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![S::zero(); features],
            running_var: vec![S::one(); features],
        }
    }

    /// Folds one batch's moments into the running estimate.
    pub fn absorb(&mut self, batch: &BatchMoments<S>) {
        let rho = S::lit(BN_MOMENTUM);
        let one = S::one();
        for (r, &m) in self.running_mean.iter_mut().zip(&batch.mean) {
            *r = rho * *r + (one - rho) * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(&batch.var) {
            *r = rho * *r + (one - rho) * v;
        }
    }
}

/// Per-feature mean and (biased) variance of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// An input slot of a recorded operation: its tape index when it is being
/// differentiated, plus the value when the backward rule needs it.
#[derive(Clone)]
struct Operand<S> {
    node: Option<usize>,
    value: Arc<[S]>,
}

enum Op<S> {
    Leaf,
    MatMul {
        a: Operand<S>,
        b: Operand<S>,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Option<usize>,
        b: Option<usize>,
    },
    Sub {
        a: Option<usize>,
        b: Option<usize>,
    },
    Mul {
        a: Operand<S>,
        b: Operand<S>,
    },
    AddRow {
        a: Option<usize>,
        row: Option<usize>,
        cols: usize,
    },
    MulScalar {
        a: usize,
        factor: S,
    },
    Relu {
        a: usize,
        input: Arc<[S]>,
    },
    Exp {
        a: usize,
        output: Arc<[S]>,
    },
    Log {
        a: usize,
        input: Arc<[S]>,
    },
    DotRows {
        a: Operand<S>,
        b: Operand<S>,
        cols: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    L2Normalize {
        a: usize,
        output: Arc<[S]>,
        norms: Vec<S>,
        cols: usize,
    },
    BatchNorm {
        x: Option<usize>,
        gamma: Operand<S>,
        beta: Option<usize>,
        normalized: Arc<[S]>,
        inv_std: Vec<S>,
        cols: usize,
        batch_stats: bool,
    },
    CandidateScores {
        anchors: Operand<S>,
        candidates: Operand<S>,
        per_row: usize,
        cols: usize,
    },
    LogSoftmax {
        a: usize,
        output: Arc<[S]>,
        cols: usize,
    },
    SelectColumn {
        a: usize,
        col: usize,
        cols: usize,
    },
}

struct Node<S> {
    len: usize,
    shape: Vec<usize>,
    op: Op<S>,
}

struct Inner<S> {
    graph: u64,
    nodes: Vec<Node<S>>,
}

/// Define-by-run gradient tape.
///
/// Operations on tensors that are not on the tape produce plain constants
/// and are not recorded, so detached computations cost nothing extra.
/// A tape is consumed by [`Tape::backward`]; tensors recorded before that
/// call become stale.
pub struct Tape<S> {
    inner: RefCell<Inner<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, keyed by node id.
#[derive(Clone)]
pub struct Gradients<S> {
    map: HashMap<NodeId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a tensor recorded on the consumed tape.
    pub fn get(&self, t: &Tensor<S>) -> Option<&Tensor<S>> {
        t.node_id().and_then(|id| self.map.get(&id))
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.map.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &NodeId> {
        self.map.keys()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize, f: impl FnOnce(&mut [S])) {
    let buf = slot.get_or_insert_with(|| vec![S::zero(); len]);
    f(buf);
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                graph: fresh_graph(),
                nodes: Vec::new(),
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn index_of(&self, t: &Tensor<S>) -> Result<Option<usize>> {
        match t.node_id() {
            None => Ok(None),
            Some(id) => {
                let inner = self.inner.borrow();
                if id.graph != inner.graph || id.index >= inner.nodes.len() {
                    Err(Error::StaleTape)
                } else {
                    Ok(Some(id.index))
                }
            }
        }
    }

    fn operand(&self, t: &Tensor<S>) -> Result<Operand<S>> {
        Ok(Operand {
            node: self.index_of(t)?,
            value: t.shared(),
        })
    }

    fn record(&self, shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Tensor<S> {
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len();
        let graph = inner.graph;
        inner.nodes.push(Node {
            len: data.len(),
            shape: shape.clone(),
            op,
        });
        Tensor::from_parts(shape, Arc::from(data), Some(NodeId { graph, index }))
    }

    fn constant(shape: Vec<usize>, data: Vec<S>) -> Tensor<S> {
        Tensor::from_parts(shape, Arc::from(data), None)
    }

    /// Registers `t` as a differentiable input.
    pub fn leaf(&self, t: &Tensor<S>) -> Tensor<S> {
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len();
        let graph = inner.graph;
        inner.nodes.push(Node {
            len: t.len(),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
        });
        Tensor::from_parts(
            t.shape().to_vec(),
            t.shared(),
            Some(NodeId { graph, index }),
        )
    }

    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.data(),
            (k as isize, 1),
            b.data(),
            (n as isize, 1),
            S::zero(),
            &mut out,
            (n as isize, 1),
        );
        let (oa, ob) = (self.operand(a)?, self.operand(b)?);
        if oa.node.is_none() && ob.node.is_none() {
            return Ok(Self::constant(vec![m, n], out));
        }
        Ok(self.record(
            vec![m, n],
            out,
            Op::MatMul {
                a: oa,
                b: ob,
                m,
                k,
                n,
            },
        ))
    }

    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("add", a.shape(), b.shape())?;
        let out: Vec<S> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let (ia, ib) = (self.index_of(a)?, self.index_of(b)?);
        if ia.is_none() && ib.is_none() {
            return Ok(Self::constant(a.shape().to_vec(), out));
        }
        Ok(self.record(a.shape().to_vec(), out, Op::Add { a: ia, b: ib }))
    }

    pub fn sub(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("sub", a.shape(), b.shape())?;
        let out: Vec<S> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let (ia, ib) = (self.index_of(a)?, self.index_of(b)?);
        if ia.is_none() && ib.is_none() {
            return Ok(Self::constant(a.shape().to_vec(), out));
        }
        Ok(self.record(a.shape().to_vec(), out, Op::Sub { a: ia, b: ib }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("mul", a.shape(), b.shape())?;
        let out: Vec<S> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let (oa, ob) = (self.operand(a)?, self.operand(b)?);
        if oa.node.is_none() && ob.node.is_none() {
            return Ok(Self::constant(a.shape().to_vec(), out));
        }
        Ok(self.record(a.shape().to_vec(), out, Op::Mul { a: oa, b: ob }))
    }

    /// Adds a length-`d` row to every row of a `B x d` matrix.
    pub fn add_row(&self, a: &Tensor<S>, row: &Tensor<S>) -> Result<Tensor<S>> {
        let cols = a.cols();
        if a.rank() != 2 || row.len() != cols || row.rank() != 1 {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: a.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let r = row.data();
        let out: Vec<S> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % cols])
            .collect();
        let (ia, ir) = (self.index_of(a)?, self.index_of(row)?);
        if ia.is_none() && ir.is_none() {
            return Ok(Self::constant(a.shape().to_vec(), out));
        }
        Ok(self.record(
            a.shape().to_vec(),
            out,
            Op::AddRow {
                a: ia,
                row: ir,
                cols,
            },
        ))
    }

    pub fn mul_scalar(&self, a: &Tensor<S>, factor: S) -> Result<Tensor<S>> {
        let out: Vec<S> = a.data().iter().map(|&x| x * factor).collect();
        match self.index_of(a)? {
            None => Ok(Self::constant(a.shape().to_vec(), out)),
            Some(ia) => Ok(self.record(a.shape().to_vec(), out, Op::MulScalar { a: ia, factor })),
        }
    }

    pub fn relu(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let out: Vec<S> = a.data().iter().map(|&x| x.max(S::zero())).collect();
        match self.index_of(a)? {
            None => Ok(Self::constant(a.shape().to_vec(), out)),
            Some(ia) => Ok(self.record(
                a.shape().to_vec(),
                out,
                Op::Relu {
                    a: ia,
                    input: a.shared(),
                },
            )),
        }
    }

    pub fn exp(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let out: Vec<S> = a.data().iter().map(|&x| x.exp()).collect();
        match self.index_of(a)? {
            None => Ok(Self::constant(a.shape().to_vec(), out)),
            Some(ia) => {
                let output: Arc<[S]> = Arc::from(out.clone());
                Ok(self.record(a.shape().to_vec(), out, Op::Exp { a: ia, output }))
            }
        }
    }

    pub fn log(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let out: Vec<S> = a.data().iter().map(|&x| x.ln()).collect();
        match self.index_of(a)? {
            None => Ok(Self::constant(a.shape().to_vec(), out)),
            Some(ia) => Ok(self.record(
                a.shape().to_vec(),
                out,
                Op::Log {
                    a: ia,
                    input: a.shared(),
                },
            )),
        }
    }

    /// Row-wise inner products over the trailing dimension.
    pub fn dot_rows(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("dot_rows", a.shape(), b.shape())?;
        let cols = a.cols();
        let out: Vec<S> = a
            .data()
            .chunks(cols)
            .zip(b.data().chunks(cols))
            .map(|(x, y)| crate::scalar::dot(x, y))
            .collect();
        let shape = a.shape()[..a.rank().saturating_sub(1)].to_vec();
        let (oa, ob) = (self.operand(a)?, self.operand(b)?);
        if oa.node.is_none() && ob.node.is_none() {
            return Ok(Self::constant(shape, out));
        }
        Ok(self.record(shape, out, Op::DotRows { a: oa, b: ob, cols }))
    }

    pub fn sum(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let mut acc = S::zero();
        for &x in a.data() {
            acc += x;
        }
        match self.index_of(a)? {
            None => Ok(Self::constant(Vec::new(), vec![acc])),
            Some(ia) => Ok(self.record(Vec::new(), vec![acc], Op::Sum { a: ia })),
        }
    }

    pub fn mean(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let mut acc = S::zero();
        for &x in a.data() {
            acc += x;
        }
        let value = acc / S::from_usize(a.len()).unwrap();
        match self.index_of(a)? {
            None => Ok(Self::constant(Vec::new(), vec![value])),
            Some(ia) => Ok(self.record(Vec::new(), vec![value], Op::Mean { a: ia })),
        }
    }

    /// Divides every trailing-dimension row by its Euclidean norm.
    pub fn l2_normalize(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let cols = a.cols();
        let floor = S::lit(NORM_EPS);
        let mut norms = Vec::with_capacity(a.rows());
        let mut out = Vec::with_capacity(a.len());
        for (r, row) in a.data().chunks(cols).enumerate() {
            let n = crate::scalar::norm(row);
            if !(n > floor) {
                return Err(Error::DegenerateVector {
                    row: r,
                    norm: n.as_f64(),
                });
            }
            out.extend(row.iter().map(|&x| x / n));
            norms.push(n);
        }
        match self.index_of(a)? {
            None => Ok(Self::constant(a.shape().to_vec(), out)),
            Some(ia) => {
                let output: Arc<[S]> = Arc::from(out.clone());
                Ok(self.record(
                    a.shape().to_vec(),
                    out,
                    Op::L2Normalize {
                        a: ia,
                        output,
                        norms,
                        cols,
                    },
                ))
            }
        }
    }

    /// Batch normalization over the rows of a `B x d` matrix followed by a
    /// learnable per-feature scale and shift.
    ///
    /// Train mode normalizes with the batch moments and returns them so the
    /// caller can fold them into `state`; eval mode uses `state` directly.
    pub fn batch_norm(
        &self,
        x: &Tensor<S>,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
        state: &BatchNormState<S>,
        mode: Mode,
    ) -> Result<(Tensor<S>, Option<BatchMoments<S>>)> {
        if x.rank() != 2 {
            return Err(Error::Dimension {
                op: "batch_norm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        for p in [gamma, beta] {
            if p.len() != cols {
                return Err(Error::Dimension {
                    op: "batch_norm",
                    lhs: x.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        if state.running_mean.len() != cols {
            return Err(Error::Dimension {
                op: "batch_norm",
                lhs: x.shape().to_vec(),
                rhs: vec![state.running_mean.len()],
            });
        }
        if mode == Mode::Train && rows < 2 {
            return Err(Error::BatchTooSmall(rows));
        }
        let eps = S::lit(BN_EPS);
        let xd = x.data();
        let (mean, var, moments) = match mode {
            Mode::Train => {
                let count = S::from_usize(rows).unwrap();
                let mut mean = vec![S::zero(); cols];
                for row in xd.chunks(cols) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= count;
                }
                let mut var = vec![S::zero(); cols];
                for row in xd.chunks(cols) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
                for s in &mut var {
                    *s /= count;
                }
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(moments))
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone(), None),
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut normalized = Vec::with_capacity(xd.len());
        for row in xd.chunks(cols) {
            for c in 0..cols {
                normalized.push((row[c] - mean[c]) * inv_std[c]);
            }
        }
        let (g, b) = (gamma.data(), beta.data());
        let out: Vec<S> = normalized
            .iter()
            .enumerate()
            .map(|(i, &h)| g[i % cols] * h + b[i % cols])
            .collect();
        let (ix, og, ib) = (
            self.index_of(x)?,
            self.operand(gamma)?,
            self.index_of(beta)?,
        );
        if ix.is_none() && og.node.is_none() && ib.is_none() {
            return Ok((Self::constant(x.shape().to_vec(), out), moments));
        }
        let t = self.record(
            x.shape().to_vec(),
            out,
            Op::BatchNorm {
                x: ix,
                gamma: og,
                beta: ib,
                normalized: Arc::from(normalized),
                inv_std,
                cols,
                batch_stats: mode == Mode::Train,
            },
        );
        Ok((t, moments))
    }

    /// Scores each anchor row against its own candidate rows.
    ///
    /// `anchors` is `B x p`, `candidates` is `B x K x p`; the result is the
    /// `B x K` matrix of inner products.
    pub fn candidate_scores(
        &self,
        anchors: &Tensor<S>,
        candidates: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        if anchors.rank() != 2
            || candidates.rank() != 3
            || candidates.shape()[0] != anchors.shape()[0]
            || candidates.shape()[2] != anchors.shape()[1]
        {
            return Err(Error::Dimension {
                op: "candidate_scores",
                lhs: anchors.shape().to_vec(),
                rhs: candidates.shape().to_vec(),
            });
        }
        let (rows, per_row, cols) = (
            anchors.shape()[0],
            candidates.shape()[1],
            anchors.shape()[1],
        );
        let (ad, cd) = (anchors.data(), candidates.data());
        let mut out = Vec::with_capacity(rows * per_row);
        for r in 0..rows {
            let a = &ad[r * cols..(r + 1) * cols];
            for k in 0..per_row {
                let off = (r * per_row + k) * cols;
                out.push(crate::scalar::dot(a, &cd[off..off + cols]));
            }
        }
        let (oa, oc) = (self.operand(anchors)?, self.operand(candidates)?);
        if oa.node.is_none() && oc.node.is_none() {
            return Ok(Self::constant(vec![rows, per_row], out));
        }
        Ok(self.record(
            vec![rows, per_row],
            out,
            Op::CandidateScores {
                anchors: oa,
                candidates: oc,
                per_row,
                cols,
            },
        ))
    }

    /// Log-softmax over the trailing dimension.
    pub fn log_softmax(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let cols = a.cols();
        let mut out = Vec::with_capacity(a.len());
        for row in a.data().chunks(cols) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut acc = S::zero();
            for &v in row {
                acc += (v - max).exp();
            }
            let lse = max + acc.ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        match self.index_of(a)? {
            None => Ok(Self::constant(a.shape().to_vec(), out)),
            Some(ia) => {
                let output: Arc<[S]> = Arc::from(out.clone());
                Ok(self.record(
                    a.shape().to_vec(),
                    out,
                    Op::LogSoftmax {
                        a: ia,
                        output,
                        cols,
                    },
                ))
            }
        }
    }

    /// Picks column `col` of every trailing-dimension row.
    pub fn select_column(&self, a: &Tensor<S>, col: usize) -> Result<Tensor<S>> {
        let cols = a.cols();
        if col >= cols {
            return Err(Error::Dimension {
                op: "select_column",
                lhs: a.shape().to_vec(),
                rhs: vec![col],
            });
        }
        let out: Vec<S> = a.data().chunks(cols).map(|row| row[col]).collect();
        let shape = a.shape()[..a.rank().saturating_sub(1)].to_vec();
        match self.index_of(a)? {
            None => Ok(Self::constant(shape, out)),
            Some(ia) => Ok(self.record(shape, out, Op::SelectColumn { a: ia, col, cols })),
        }
    }

    /// Reverse pass from a scalar loss. Consumes the tape: every node is
    /// cleared and tensors recorded so far become stale.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<Gradients<S>> {
        if loss.len() != 1 {
            return Err(Error::Rank(loss.shape().to_vec()));
        }
        let root = self.index_of(loss)?.ok_or(Error::StaleTape)?;
        let mut inner = self.inner.borrow_mut();
        let graph = inner.graph;
        let nodes = std::mem::take(&mut inner.nodes);
        inner.graph = fresh_graph();
        drop(inner);

        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![S::one()]);
        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            backprop(&nodes, &mut grads, idx, &g);
            grads[idx] = Some(g);
        }

        let map = nodes
            .iter()
            .enumerate()
            .map(|(index, node)| {
                let data = grads[index]
                    .take()
                    .unwrap_or_else(|| vec![S::zero(); node.len]);
                (
                    NodeId { graph, index },
                    Tensor::from_parts(node.shape.clone(), Arc::from(data), None),
                )
            })
            .collect();
        Ok(Gradients { map })
    }
}

fn backprop<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], idx: usize, g: &[S]) {
    let len_of = |i: usize| nodes[i].len;
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if let Some(ia) = a.node {
                // dA = G * B^T
                accumulate(&mut grads[ia], len_of(ia), |buf| {
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        g,
                        (n as isize, 1),
                        &b.value,
                        (1, n as isize),
                        S::one(),
                        buf,
                        (k as isize, 1),
                    )
                });
            }
            if let Some(ib) = b.node {
                // dB = A^T * G
                accumulate(&mut grads[ib], len_of(ib), |buf| {
                    S::gemm(
                        k,
                        m,
                        n,
                        S::one(),
                        &a.value,
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        S::one(),
                        buf,
                        (n as isize, 1),
                    )
                });
            }
        }
        Op::Add { a, b } => {
            for (i, sign) in [(*a, S::one()), (*b, S::one())] {
                if let Some(i) = i {
                    accumulate(&mut grads[i], len_of(i), |buf| {
                        for (d, &v) in buf.iter_mut().zip(g) {
                            *d += sign * v;
                        }
                    });
                }
            }
        }
        Op::Sub { a, b } => {
            for (i, sign) in [(*a, S::one()), (*b, -S::one())] {
                if let Some(i) = i {
                    accumulate(&mut grads[i], len_of(i), |buf| {
                        for (d, &v) in buf.iter_mut().zip(g) {
                            *d += sign * v;
                        }
                    });
                }
            }
        }
        Op::Mul { a, b } => {
            if let Some(ia) = a.node {
                accumulate(&mut grads[ia], len_of(ia), |buf| {
                    for ((d, &v), &y) in buf.iter_mut().zip(g).zip(b.value.iter()) {
                        *d += v * y;
                    }
                });
            }
            if let Some(ib) = b.node {
                accumulate(&mut grads[ib], len_of(ib), |buf| {
                    for ((d, &v), &x) in buf.iter_mut().zip(g).zip(a.value.iter()) {
                        *d += v * x;
                    }
                });
            }
        }
        Op::AddRow { a, row, cols } => {
            if let Some(ia) = *a {
                accumulate(&mut grads[ia], len_of(ia), |buf| {
                    for (d, &v) in buf.iter_mut().zip(g) {
                        *d += v;
                    }
                });
            }
            if let Some(ir) = *row {
                accumulate(&mut grads[ir], len_of(ir), |buf| {
                    for chunk in g.chunks(*cols) {
                        for (d, &v) in buf.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                });
            }
        }
        Op::MulScalar { a, factor } => {
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for (d, &v) in buf.iter_mut().zip(g) {
                    *d += v * *factor;
                }
            });
        }
        Op::Relu { a, input } => {
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for ((d, &v), &x) in buf.iter_mut().zip(g).zip(input.iter()) {
                    if x > S::zero() {
                        *d += v;
                    }
                }
            });
        }
        Op::Exp { a, output } => {
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for ((d, &v), &y) in buf.iter_mut().zip(g).zip(output.iter()) {
                    *d += v * y;
                }
            });
        }
        Op::Log { a, input } => {
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for ((d, &v), &x) in buf.iter_mut().zip(g).zip(input.iter()) {
                    *d += v / x;
                }
            });
        }
        Op::DotRows { a, b, cols } => {
            for (target, other) in [(a, b), (b, a)] {
                if let Some(i) = target.node {
                    accumulate(&mut grads[i], len_of(i), |buf| {
                        for ((dst, src), &v) in
                            buf.chunks_mut(*cols).zip(other.value.chunks(*cols)).zip(g)
                        {
                            for (d, &y) in dst.iter_mut().zip(src) {
                                *d += v * y;
                            }
                        }
                    });
                }
            }
        }
        Op::Sum { a } => {
            let v = g[0];
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for d in buf.iter_mut() {
                    *d += v;
                }
            });
        }
        Op::Mean { a } => {
            let v = g[0] / S::from_usize(len_of(*a)).unwrap();
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for d in buf.iter_mut() {
                    *d += v;
                }
            });
        }
        Op::L2Normalize {
            a,
            output,
            norms,
            cols,
        } => {
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for (((dst, gr), y), &n) in buf
                    .chunks_mut(*cols)
                    .zip(g.chunks(*cols))
                    .zip(output.chunks(*cols))
                    .zip(norms)
                {
                    let proj = crate::scalar::dot(gr, y);
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(y) {
                        *d += (gv - yv * proj) / n;
                    }
                }
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
            cols,
            batch_stats,
        } => {
            let cols = *cols;
            let rows = g.len() / cols;
            if let Some(ib) = *beta {
                accumulate(&mut grads[ib], len_of(ib), |buf| {
                    for chunk in g.chunks(cols) {
                        for (d, &v) in buf.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                });
            }
            if let Some(ig) = gamma.node {
                accumulate(&mut grads[ig], len_of(ig), |buf| {
                    for (chunk, h) in g.chunks(cols).zip(normalized.chunks(cols)) {
                        for ((d, &v), &hv) in buf.iter_mut().zip(chunk).zip(h) {
                            *d += v * hv;
                        }
                    }
                });
            }
            if let Some(ix) = *x {
                let gam = &gamma.value;
                if *batch_stats {
                    let count = S::from_usize(rows).unwrap();
                    let mut sum_dh = vec![S::zero(); cols];
                    let mut sum_dh_h = vec![S::zero(); cols];
                    for (chunk, h) in g.chunks(cols).zip(normalized.chunks(cols)) {
                        for c in 0..cols {
                            let dh = chunk[c] * gam[c];
                            sum_dh[c] += dh;
                            sum_dh_h[c] += dh * h[c];
                        }
                    }
                    accumulate(&mut grads[ix], len_of(ix), |buf| {
                        for ((dst, chunk), h) in buf
                            .chunks_mut(cols)
                            .zip(g.chunks(cols))
                            .zip(normalized.chunks(cols))
                        {
                            for c in 0..cols {
                                let dh = chunk[c] * gam[c];
                                dst[c] += inv_std[c] / count
                                    * (count * dh - sum_dh[c] - h[c] * sum_dh_h[c]);
                            }
                        }
                    });
                } else {
                    accumulate(&mut grads[ix], len_of(ix), |buf| {
                        for (dst, chunk) in buf.chunks_mut(cols).zip(g.chunks(cols)) {
                            for c in 0..cols {
                                dst[c] += chunk[c] * gam[c] * inv_std[c];
                            }
                        }
                    });
                }
            }
        }
        Op::CandidateScores {
            anchors,
            candidates,
            per_row,
            cols,
        } => {
            let (per_row, cols) = (*per_row, *cols);
            if let Some(ia) = anchors.node {
                accumulate(&mut grads[ia], len_of(ia), |buf| {
                    for (r, dst) in buf.chunks_mut(cols).enumerate() {
                        for k in 0..per_row {
                            let v = g[r * per_row + k];
                            let off = (r * per_row + k) * cols;
                            for (d, &c) in dst.iter_mut().zip(&candidates.value[off..off + cols]) {
                                *d += v * c;
                            }
                        }
                    }
                });
            }
            if let Some(ic) = candidates.node {
                accumulate(&mut grads[ic], len_of(ic), |buf| {
                    for (rk, dst) in buf.chunks_mut(cols).enumerate() {
                        let r = rk / per_row;
                        let v = g[rk];
                        for (d, &a) in dst.iter_mut().zip(&anchors.value[r * cols..(r + 1) * cols])
                        {
                            *d += v * a;
                        }
                    }
                });
            }
        }
        Op::LogSoftmax { a, output, cols } => {
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for ((dst, gr), y) in buf
                    .chunks_mut(*cols)
                    .zip(g.chunks(*cols))
                    .zip(output.chunks(*cols))
                {
                    let mut total = S::zero();
                    for &v in gr {
                        total += v;
                    }
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(y) {
                        *d += gv - yv.exp() * total;
                    }
                }
            });
        }
        Op::SelectColumn { a, col, cols } => {
            accumulate(&mut grads[*a], len_of(*a), |buf| {
                for (dst, &v) in buf.chunks_mut(*cols).zip(g) {
                    dst[*col] += v;
                }
            });
        }
    }
}
