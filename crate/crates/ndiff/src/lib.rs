//! Numeric substrate: dense `f64` tensors, an eager computation graph with a
//! taped reverse pass, Cholesky-based linear algebra and Adam.

mod error;
pub mod graph;
pub mod linalg;
pub mod optim;
mod tensor;

pub use error::{NdiffError, Result};
pub use graph::{Graph, NodeId, Op};
pub use optim::{AdamConfig, ParamEntry, ParamStore};
pub use tensor::Tensor;
