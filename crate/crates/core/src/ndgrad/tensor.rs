use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Identifier of a recorded value on a [`Tape`](super::Tape).
///
/// `graph` changes every time a tape is consumed by `backward`, so ids from
/// an earlier pass can be detected as stale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub(crate) graph: u64,
    pub(crate) index: usize,
}

/// Dense row-major array. Cloning is cheap: the payload is shared.
#[derive(Clone)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<[S]>,
    node: Option<NodeId>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: impl Into<Arc<[S]>>) -> Result<Self> {
        let shape = shape.into();
        let data = data.into();
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            node: None,
        })
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::from(vec![value]),
            node: None,
        }
    }

    pub fn vector(values: &[S]) -> Self {
        Self::new(vec![values.len().max(1)], values.to_vec()).expect("non-empty vector")
    }

    /// Builds a `rows x cols` matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[S]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self::new(shape, vec![S::zero(); len]).expect("zeros with positive extents")
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self::new(shape, vec![value; len]).expect("filled with positive extents")
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<[S]>, node: Option<NodeId>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, node }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn shared(&self) -> Arc<[S]> {
        Arc::clone(&self.data)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the trailing dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of trailing-dimension rows.
    pub fn rows(&self) -> usize {
        self.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, cut off from the tape.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.len() || shape.contains(&0) {
            return Err(Error::Shape {
                shape,
                len: self.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
            node: self.node,
        })
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node)
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

impl<S: PartialEq> PartialEq for Tensor<S> {
    /// Value equality; tape membership is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data[..] == other.data[..]
    }
}
