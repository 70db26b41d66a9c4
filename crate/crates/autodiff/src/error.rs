use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {} elements, got {len}", shape.iter().product::<usize>())]
    ElementCount { shape: Vec<usize>, len: usize },

    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("conv2d: input has {input} channels but kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },

    #[error("conv2d: kernel must be square with odd size, got {0}x{1}")]
    KernelSize(usize, usize),

    #[error("instance_norm: plane of {0} pixels is too small (need at least 2)")]
    PlaneTooSmall(usize),

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: String },

    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("{op}: {msg}")]
    Invalid { op: String, msg: String },
}
