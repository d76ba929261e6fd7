//! Minimal f64 tensor tape: reverse-mode autodiff, parameter storage,
//! momentum SGD, and finite-difference gradient checking.
//!
//! Everything runs sequentially on the CPU. This keeps training runs
//! bit-reproducible, which the trainer's deterministic mode relies on.

pub mod gradcheck;
mod graph;
mod init;
mod optim;
mod params;

pub use graph::{rowmax_offdiag, Arr, Gradients, Graph, Tx, L2_GUARD};
pub use init::{ones, trunc_normal, zeros};
pub use optim::SgdMomentum;
pub use params::{BoundParams, ParamStore};
