//! Operator registry: maps `op_type` strings to executable kernels.
//!
//! A custom operator becomes runnable in three steps: its schema (the
//! [`Arity`] plus the attribute keys it reads), the exporter that emits nodes
//! with that `op_type` (the model builders), and the backend kernel
//! registered here through [`OperatorRegistry::register_op`].

use std::collections::BTreeMap;
use std::ops::Deref;
use std::sync::Arc;

use thiserror::Error;

use super::graph::{AttrValue, Attributes};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arity {
    pub min_inputs: usize,
    pub max_inputs: usize,
    pub outputs: usize,
}

impl Arity {
    pub const fn exact(inputs: usize, outputs: usize) -> Self {
        Self {
            min_inputs: inputs,
            max_inputs: inputs,
            outputs,
        }
    }

    pub fn accepts(&self, inputs: usize, outputs: usize) -> bool {
        (self.min_inputs..=self.max_inputs).contains(&inputs) && outputs == self.outputs
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("attribute {name:?}: {reason}")]
    Attribute { name: String, reason: String },
    #[error("expected {expected} got {actual}")]
    Shape { expected: String, actual: String },
    #[error("node {node} has no neighbors to aggregate")]
    EmptyNeighborhood { node: usize },
}

/// Backend implementation of one operator type. Must be deterministic for
/// fixed inputs.
pub trait OpKernel: Send + Sync {
    fn op_type(&self) -> &str;

    fn arity(&self) -> Arity;

    fn evaluate(
        &self,
        inputs: &[&Tensor<f32>],
        attributes: &Attributes,
    ) -> Result<Vec<Tensor<f32>>, KernelError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("operator {0:?} is already registered")]
    Conflict(String),
}

#[derive(Clone, Default)]
pub struct OperatorRegistry {
    kernels: BTreeMap<String, Arc<dyn OpKernel>>,
}

impl std::fmt::Debug for OperatorRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.kernels.keys()).finish()
    }
}

impl OperatorRegistry {
    /// Registry with no operators at all.
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry holding the built-in primitive set: MatMul, Add, AddBias,
    /// Relu, Concat, Reshape, RowMean, Flatten.
    pub fn with_builtins() -> Self {
        let mut registry = Self::empty();
        for kernel in builtins() {
            registry
                .register_arc(kernel)
                .expect("built-in op types are distinct");
        }
        registry
    }

    pub fn register_op<K: OpKernel + 'static>(&mut self, kernel: K) -> Result<(), RegistryError> {
        self.register_arc(Arc::new(kernel))
    }

    pub fn register_arc(&mut self, kernel: Arc<dyn OpKernel>) -> Result<(), RegistryError> {
        let key = kernel.op_type().to_owned();
        if self.kernels.contains_key(&key) {
            return Err(RegistryError::Conflict(key));
        }
        self.kernels.insert(key, kernel);
        Ok(())
    }

    pub fn lookup(&self, op_type: &str) -> Option<Arc<dyn OpKernel>> {
        self.kernels.get(op_type).cloned()
    }

    pub fn contains(&self, op_type: &str) -> bool {
        self.kernels.contains_key(op_type)
    }

    pub fn op_types(&self) -> impl Iterator<Item = &str> {
        self.kernels.keys().map(String::as_str)
    }

    /// Ends the registration phase; the frozen registry is cheap to clone
    /// and share across concurrent sessions.
    pub fn freeze(self) -> FrozenRegistry {
        FrozenRegistry(Arc::new(self))
    }
}

#[derive(Clone, Debug)]
pub struct FrozenRegistry(Arc<OperatorRegistry>);

impl Deref for FrozenRegistry {
    type Target = OperatorRegistry;

    fn deref(&self) -> &OperatorRegistry {
        &self.0
    }
}

// Attribute helpers shared with the GNN kernels.

pub fn attr_str<'a>(attrs: &'a Attributes, name: &str) -> Result<&'a str, KernelError> {
    match attrs.get(name) {
        Some(AttrValue::String(s)) => Ok(s),
        Some(other) => Err(KernelError::Attribute {
            name: name.into(),
            reason: format!("expected string, got {other:?}"),
        }),
        None => Err(KernelError::Attribute {
            name: name.into(),
            reason: "missing".into(),
        }),
    }
}

pub fn attr_ints<'a>(attrs: &'a Attributes, name: &str) -> Result<&'a [i64], KernelError> {
    match attrs.get(name) {
        Some(AttrValue::Ints(v)) => Ok(v),
        Some(other) => Err(KernelError::Attribute {
            name: name.into(),
            reason: format!("expected int list, got {other:?}"),
        }),
        None => Err(KernelError::Attribute {
            name: name.into(),
            reason: "missing".into(),
        }),
    }
}

fn attr_int_or(attrs: &Attributes, name: &str, default: i64) -> Result<i64, KernelError> {
    match attrs.get(name) {
        Some(AttrValue::Int(v)) => Ok(*v),
        None => Ok(default),
        Some(other) => Err(KernelError::Attribute {
            name: name.into(),
            reason: format!("expected int, got {other:?}"),
        }),
    }
}

fn builtins() -> Vec<Arc<dyn OpKernel>> {
    vec![
        Arc::new(MatMul),
        Arc::new(Add),
        Arc::new(AddBias),
        Arc::new(Relu),
        Arc::new(Concat),
        Arc::new(Reshape),
        Arc::new(RowMean),
        Arc::new(Flatten),
    ]
}

/// `[.., m, p] x [p, q]`.
pub struct MatMul;

impl OpKernel for MatMul {
    fn op_type(&self) -> &str {
        "MatMul"
    }
    fn arity(&self) -> Arity {
        Arity::exact(2, 1)
    }
    fn evaluate(&self, inputs: &[&Tensor<f32>], _: &Attributes) -> Result<Vec<Tensor<f32>>, KernelError> {
        Ok(vec![inputs[0].matmul(inputs[1])?])
    }
}

pub struct Add;

impl OpKernel for Add {
    fn op_type(&self) -> &str {
        "Add"
    }
    fn arity(&self) -> Arity {
        Arity::exact(2, 1)
    }
    fn evaluate(&self, inputs: &[&Tensor<f32>], _: &Attributes) -> Result<Vec<Tensor<f32>>, KernelError> {
        Ok(vec![inputs[0].add(inputs[1])?])
    }
}

/// Adds a `[1, p]` bias row to every row.
pub struct AddBias;

impl OpKernel for AddBias {
    fn op_type(&self) -> &str {
        "AddBias"
    }
    fn arity(&self) -> Arity {
        Arity::exact(2, 1)
    }
    fn evaluate(&self, inputs: &[&Tensor<f32>], _: &Attributes) -> Result<Vec<Tensor<f32>>, KernelError> {
        Ok(vec![inputs[0].add_bias(inputs[1])?])
    }
}

pub struct Relu;

impl OpKernel for Relu {
    fn op_type(&self) -> &str {
        "Relu"
    }
    fn arity(&self) -> Arity {
        Arity::exact(1, 1)
    }
    fn evaluate(&self, inputs: &[&Tensor<f32>], _: &Attributes) -> Result<Vec<Tensor<f32>>, KernelError> {
        Ok(vec![inputs[0].relu()])
    }
}

/// Concatenation along `axis` (default: last axis; negative counts from the end).
pub struct Concat;

impl OpKernel for Concat {
    fn op_type(&self) -> &str {
        "Concat"
    }
    fn arity(&self) -> Arity {
        Arity {
            min_inputs: 1,
            max_inputs: usize::MAX,
            outputs: 1,
        }
    }
    fn evaluate(&self, inputs: &[&Tensor<f32>], attrs: &Attributes) -> Result<Vec<Tensor<f32>>, KernelError> {
        let rank = inputs[0].rank() as i64;
        let axis = attr_int_or(attrs, "axis", -1)?;
        let resolved = if axis < 0 { rank + axis } else { axis };
        if !(0..rank).contains(&resolved) {
            return Err(KernelError::Attribute {
                name: "axis".into(),
                reason: format!("{axis} out of range for rank {rank}"),
            });
        }
        Ok(vec![Tensor::concat(inputs, resolved as usize)?])
    }
}

/// Reshape to the `shape` attribute. `0` copies the input dimension at that
/// position; a single `-1` is inferred from the element count.
pub struct Reshape;

impl OpKernel for Reshape {
    fn op_type(&self) -> &str {
        "Reshape"
    }
    fn arity(&self) -> Arity {
        Arity::exact(1, 1)
    }
    fn evaluate(&self, inputs: &[&Tensor<f32>], attrs: &Attributes) -> Result<Vec<Tensor<f32>>, KernelError> {
        let spec = attr_ints(attrs, "shape")?;
        let input = inputs[0];
        let bad = |reason: String| KernelError::Attribute {
            name: "shape".into(),
            reason,
        };
        let mut shape = Vec::with_capacity(spec.len());
        let mut infer_at = None;
        for (i, &d) in spec.iter().enumerate() {
            match d {
                -1 if infer_at.is_none() => {
                    infer_at = Some(i);
                    shape.push(1);
                }
                0 => shape.push(
                    *input
                        .shape()
                        .get(i)
                        .ok_or_else(|| bad(format!("no input dimension {i} to copy")))?,
                ),
                d if d > 0 => shape.push(d as usize),
                d => return Err(bad(format!("invalid dimension {d}"))),
            }
        }
        if let Some(i) = infer_at {
            let known: usize = shape.iter().product();
            if known == 0 || input.len() % known != 0 {
                return Err(bad(format!("cannot infer -1 for {} elements", input.len())));
            }
            shape[i] = input.len() / known;
        }
        Ok(vec![input.reshape(&shape)?])
    }
}

/// Column means of a matrix: `[m, p] -> [1, p]`.
pub struct RowMean;

impl OpKernel for RowMean {
    fn op_type(&self) -> &str {
        "RowMean"
    }
    fn arity(&self) -> Arity {
        Arity::exact(1, 1)
    }
    fn evaluate(&self, inputs: &[&Tensor<f32>], _: &Attributes) -> Result<Vec<Tensor<f32>>, KernelError> {
        Ok(vec![inputs[0].row_mean()?])
    }
}

/// Keeps the leading dimension and flattens the rest: `[B, ...] -> [B, prod(...)]`.
pub struct Flatten;

impl OpKernel for Flatten {
    fn op_type(&self) -> &str {
        "Flatten"
    }
    fn arity(&self) -> Arity {
        Arity::exact(1, 1)
    }
    fn evaluate(&self, inputs: &[&Tensor<f32>], _: &Attributes) -> Result<Vec<Tensor<f32>>, KernelError> {
        let input = inputs[0];
        let lead = *input.shape().first().ok_or_else(|| KernelError::Shape {
            expected: "rank >= 1".into(),
            actual: format!("{:?}", input.shape()),
        })?;
        let rest: usize = input.shape()[1..].iter().product();
        Ok(vec![input.reshape(&[lead, rest])?])
    }
}
