//! Graph executor.
//!
//! Kernels are resolved when a [`Session`] is created, not when a model is
//! loaded: a model using an unregistered op loads fine but fails here with
//! [`ExecError::UnknownOperator`].
//!
//! Two execution modes:
//! - `Batched`: one pass over the node list with the whole batch.
//! - `Serialized`: every batch-carrying input is split into single-sample
//!   slices, the graph runs once per sample and the outputs are concatenated
//!   back along the batch dimension in input order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use super::graph::{Dim, ModelGraph, Violation};
use super::registry::{KernelError, OpKernel, OperatorRegistry};
use crate::par::{map_indexed, Parallelism};
use crate::tensor::Tensor;

pub type TensorMap = BTreeMap<String, Tensor<f32>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Batched,
    Serialized,
}

impl FromStr for ExecMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batched" => Ok(Self::Batched),
            "serialized" => Ok(Self::Serialized),
            other => Err(format!("unknown mode {other:?} (batched|serialized)")),
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Batched => "batched",
            Self::Serialized => "serialized",
        })
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("unknown operator(s): {}", .op_types.join(", "))]
    UnknownOperator { op_types: Vec<String> },
    #[error("model fails validation: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidModel(Vec<Violation>),
    #[error("node {node} ({op_type}) has {inputs} inputs / {outputs} outputs, kernel does not accept that")]
    Arity {
        node: usize,
        op_type: String,
        inputs: usize,
        outputs: usize,
    },
    #[error("missing feed for input {0:?}")]
    MissingFeed(String),
    #[error("feed {input:?} has shape {actual:?}, declared [{declared}]")]
    FeedShape {
        input: String,
        declared: String,
        actual: Vec<usize>,
    },
    #[error("feed {input:?} has batch size {actual}, other inputs have {expected}")]
    InconsistentBatch {
        input: String,
        expected: usize,
        actual: usize,
    },
    #[error("node {node} ({op_type}): value {name:?} not available")]
    MissingValue {
        node: usize,
        op_type: String,
        name: String,
    },
    #[error("node {node} ({op_type}) failed: {source}")]
    Node {
        node: usize,
        op_type: String,
        #[source]
        source: KernelError,
    },
    #[error("output {0:?} has no batch dimension to concatenate along")]
    UnbatchedOutput(String),
}

/// A model bound to resolved kernels. Immutable and re-entrant: one session
/// may serve concurrent `run` calls.
pub struct Session<'m> {
    graph: &'m ModelGraph,
    kernels: Vec<Arc<dyn OpKernel>>,
    parallelism: Parallelism,
}

impl<'m> Session<'m> {
    pub fn new(graph: &'m ModelGraph, registry: &OperatorRegistry) -> Result<Self, ExecError> {
        let missing: Vec<String> = graph
            .op_types()
            .into_iter()
            .filter(|op| !registry.contains(op))
            .map(str::to_owned)
            .collect();
        if !missing.is_empty() {
            return Err(ExecError::UnknownOperator { op_types: missing });
        }
        let violations = graph.validate();
        if !violations.is_empty() {
            return Err(ExecError::InvalidModel(violations));
        }
        let mut kernels = Vec::with_capacity(graph.nodes.len());
        for (idx, node) in graph.nodes.iter().enumerate() {
            let kernel = registry.lookup(&node.op_type).expect("checked above");
            if !kernel.arity().accepts(node.inputs.len(), node.outputs.len()) {
                return Err(ExecError::Arity {
                    node: idx,
                    op_type: node.op_type.clone(),
                    inputs: node.inputs.len(),
                    outputs: node.outputs.len(),
                });
            }
            kernels.push(kernel);
        }
        Ok(Self {
            graph,
            kernels,
            parallelism: Parallelism::Sequential,
        })
    }

    /// Parallelism used for the per-sample loop of `Serialized` mode.
    pub fn with_parallelism(mut self, parallelism: Parallelism) -> Self {
        self.parallelism = parallelism;
        self
    }

    pub fn graph(&self) -> &ModelGraph {
        self.graph
    }

    pub fn run(&self, feeds: &TensorMap, mode: ExecMode) -> Result<TensorMap, ExecError> {
        let batch = self.check_feeds(feeds)?;
        match (mode, batch) {
            (ExecMode::Batched, _) | (ExecMode::Serialized, None) => self.run_pass(feeds),
            (ExecMode::Serialized, Some(b)) => self.run_serialized(feeds, b),
        }
    }

    /// Validates feeds against declared inputs, returning the batch size if
    /// any input carries a batch dimension.
    fn check_feeds(&self, feeds: &TensorMap) -> Result<Option<usize>, ExecError> {
        let mut batch: Option<usize> = None;
        for info in &self.graph.inputs {
            let feed = feeds
                .get(&info.name)
                .ok_or_else(|| ExecError::MissingFeed(info.name.clone()))?;
            let shape_err = || ExecError::FeedShape {
                input: info.name.clone(),
                declared: info
                    .shape
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(", "),
                actual: feed.shape().to_vec(),
            };
            if feed.rank() != info.shape.len() {
                return Err(shape_err());
            }
            for (dim, &actual) in info.shape.iter().zip(feed.shape()) {
                match *dim {
                    Dim::Fixed(n) if n != actual => return Err(shape_err()),
                    Dim::Batch if actual == 0 => return Err(shape_err()),
                    Dim::Batch => match batch {
                        None => batch = Some(actual),
                        Some(b) if b != actual => {
                            return Err(ExecError::InconsistentBatch {
                                input: info.name.clone(),
                                expected: b,
                                actual,
                            })
                        }
                        Some(_) => {}
                    },
                    Dim::Fixed(_) => {}
                }
            }
        }
        Ok(batch)
    }

    fn run_pass(&self, feeds: &TensorMap) -> Result<TensorMap, ExecError> {
        let graph = self.graph;
        let mut produced: HashMap<&str, Tensor<f32>> = HashMap::with_capacity(graph.nodes.len());
        for (idx, (node, kernel)) in graph.nodes.iter().zip(&self.kernels).enumerate() {
            let outputs = {
                let mut args = Vec::with_capacity(node.inputs.len());
                for name in &node.inputs {
                    let value = produced
                        .get(name.as_str())
                        .or_else(|| feeds.get(name))
                        .or_else(|| graph.initializers.get(name))
                        .ok_or_else(|| ExecError::MissingValue {
                            node: idx,
                            op_type: node.op_type.clone(),
                            name: name.clone(),
                        })?;
                    args.push(value);
                }
                kernel
                    .evaluate(&args, &node.attributes)
                    .map_err(|source| ExecError::Node {
                        node: idx,
                        op_type: node.op_type.clone(),
                        source,
                    })?
            };
            if outputs.len() != node.outputs.len() {
                return Err(ExecError::Arity {
                    node: idx,
                    op_type: node.op_type.clone(),
                    inputs: node.inputs.len(),
                    outputs: outputs.len(),
                });
            }
            for (name, value) in node.outputs.iter().zip(outputs) {
                produced.insert(name, value);
            }
        }
        let mut result = TensorMap::new();
        for name in &graph.outputs {
            let value = match produced.remove(name.as_str()) {
                Some(v) => v,
                None => feeds
                    .get(name)
                    .or_else(|| graph.initializers.get(name))
                    .cloned()
                    .expect("validated graph defines every output"),
            };
            result.insert(name.clone(), value);
        }
        Ok(result)
    }

    fn run_serialized(&self, feeds: &TensorMap, batch: usize) -> Result<TensorMap, ExecError> {
        let batched: Vec<&str> = self
            .graph
            .inputs
            .iter()
            .filter(|i| i.is_batched())
            .map(|i| i.name.as_str())
            .collect();
        let per_sample = map_indexed(batch, self.parallelism, |i| {
            let mut sample = TensorMap::new();
            for (name, tensor) in feeds {
                let value = if batched.contains(&name.as_str()) {
                    tensor.slice_outer(i, i + 1).expect("batch dim checked")
                } else {
                    tensor.clone()
                };
                sample.insert(name.clone(), value);
            }
            self.run_pass(&sample)
        });
        let per_sample: Vec<TensorMap> = per_sample.into_iter().collect::<Result<_, _>>()?;

        let mut result = TensorMap::new();
        for name in &self.graph.outputs {
            let parts: Vec<&Tensor<f32>> = per_sample.iter().map(|m| &m[name]).collect();
            if parts[0].rank() == 0 {
                return Err(ExecError::UnbatchedOutput(name.clone()));
            }
            let joined = Tensor::concat(&parts, 0).map_err(|source| ExecError::Node {
                node: self.graph.nodes.len(),
                op_type: "concat-batch".into(),
                source: source.into(),
            })?;
            result.insert(name.clone(), joined);
        }
        Ok(result)
    }
}

/// One-shot convenience: resolve kernels, then run.
pub fn execute(
    graph: &ModelGraph,
    registry: &OperatorRegistry,
    feeds: &TensorMap,
    mode: ExecMode,
) -> Result<TensorMap, ExecError> {
    Session::new(graph, registry)?.run(feeds, mode)
}
