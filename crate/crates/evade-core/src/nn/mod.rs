//! Neural-network building blocks: a dense matrix type, a reverse-mode
//! autodiff tape, Adam, initializers, and layer/parameter containers.

pub mod adam;
pub mod container;
pub mod init;
pub mod layers;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use container::{ContainerError, ParamContainer};
pub use layers::{Linear, ParamSet};
pub use tape::{BnStats, Grads, Mode, Tape, Var};
pub use tensor::{gemm, matmul, Tensor2, Trans};

/// Errors raised by tensor and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}
