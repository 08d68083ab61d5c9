//! Tape-based reverse-mode differentiation, gradient verification, and the
//! AdamW optimizer.

pub mod check;
pub mod optim;
pub mod tape;

pub use check::{check_gradients, FdReport};
pub use optim::{AdamW, AdamWConfig, ParamId, ParamStore};
pub use tape::{Graph, TensorId};
