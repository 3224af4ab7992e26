use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    Shape { shape: Vec<usize>, len: usize },

    #[error("degenerate vector at row {row}: norm {norm:e} is below the normalization floor")]
    DegenerateVector { row: usize, norm: f64 },

    #[error("batch norm needs at least 2 rows in train mode, got {0}")]
    BatchTooSmall(usize),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),

    #[error("tensor belongs to a tape generation that has already been consumed")]
    StaleTape,

    #[error("invalid settings: {0}")]
    Spec(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("label split infeasible: {0}")]
    Split(String),

    #[error("format error at row {row}: {msg}")]
    Format { row: usize, msg: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("queue init error: capacity {capacity} is smaller than {classes} classes")]
    QueueInit { capacity: usize, classes: usize },

    #[error("queue contract violated: {0}")]
    Contract(String),

    #[error("k-NN query asks for {k} neighbours but the queue holds {len}")]
    Query { k: usize, len: usize },

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
