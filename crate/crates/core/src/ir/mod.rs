//! Serializable computation-graph model format, operator registry and executor.

pub mod exec;
pub mod format;
pub mod graph;
pub mod registry;

pub use exec::{execute, ExecError, ExecMode, Session, TensorMap};
pub use format::{deserialize, load, save, serialize, FormatError};
pub use graph::{AttrValue, Attributes, Dim, GraphNode, ModelGraph, ValueInfo, Violation};
pub use registry::{Arity, FrozenRegistry, KernelError, OpKernel, OperatorRegistry, RegistryError};
