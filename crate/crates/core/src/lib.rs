//! Edge-oriented graph neural network runtime for multi-station PV power
//! forecasting.
//!
//! - [`tensor`]: dense row-major tensors.
//! - [`ir`]: the `.egir` model format, operator registry and executor.
//! - [`gnn`]: GCN / GraphSAGE kernels registered as custom operators.
//! - [`models`]: the two forecasting architectures and their lowering to IR.
//! - [`training`]: offline trainer with analytic gradients.
//! - [`pipeline`]: synthetic data, CSV ingestion, windowing, evaluation and benchmarking.

pub mod gnn;
pub mod ir;
pub mod models;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use tensor::{Tensor, TensorError};
