//! In-memory model graph: named inputs, weight initializers and an ordered
//! node list forming a DAG.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::tensor::{DType, Tensor};

/// Current `.egir` format version.
pub const FORMAT_VERSION: u32 = 1;

/// One dimension of a declared input shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dim {
    /// Batch dimension, resolved from the feed at execution time. Only valid
    /// in leading position.
    Batch,
    Fixed(usize),
}

impl Serialize for Dim {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Dim::Batch => s.serialize_str("batch"),
            Dim::Fixed(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Dim {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Fixed(usize),
            Symbol(String),
        }
        match Raw::deserialize(d)? {
            Raw::Fixed(n) => Ok(Dim::Fixed(n)),
            Raw::Symbol(s) if s == "batch" => Ok(Dim::Batch),
            Raw::Symbol(s) => Err(serde::de::Error::custom(format!(
                "unknown symbolic dimension {s:?}"
            ))),
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Batch => f.write_str("B"),
            Dim::Fixed(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueInfo {
    pub name: String,
    pub shape: Vec<Dim>,
    pub dtype: DType,
}

impl ValueInfo {
    pub fn new(name: impl Into<String>, shape: Vec<Dim>) -> Self {
        Self {
            name: name.into(),
            shape,
            dtype: DType::F32,
        }
    }

    pub fn is_batched(&self) -> bool {
        self.shape.first() == Some(&Dim::Batch)
    }
}

/// Node attribute value. The set is closed on purpose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
    String(String),
}

pub type Attributes = BTreeMap<String, AttrValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphNode {
    pub op_type: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub attributes: Attributes,
}

impl GraphNode {
    pub fn new<I, O>(op_type: &str, inputs: I, outputs: O) -> Self
    where
        I: IntoIterator,
        I::Item: Into<String>,
        O: IntoIterator,
        O::Item: Into<String>,
    {
        Self {
            op_type: op_type.to_owned(),
            inputs: inputs.into_iter().map(Into::into).collect(),
            outputs: outputs.into_iter().map(Into::into).collect(),
            attributes: Attributes::new(),
        }
    }

    pub fn with_attr(mut self, key: &str, value: AttrValue) -> Self {
        self.attributes.insert(key.to_owned(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub version: u32,
    pub inputs: Vec<ValueInfo>,
    pub outputs: Vec<String>,
    pub initializers: BTreeMap<String, Tensor<f32>>,
    pub nodes: Vec<GraphNode>,
    pub metadata: BTreeMap<String, String>,
}

impl Default for ModelGraph {
    fn default() -> Self {
        Self {
            version: FORMAT_VERSION,
            inputs: Vec::new(),
            outputs: Vec::new(),
            initializers: BTreeMap::new(),
            nodes: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnsupportedVersion(u32),
    EmptyOpType { node: usize },
    /// Name consumed by a node but defined nowhere in the graph.
    UndefinedInput { node: usize, name: String },
    /// Name consumed by a node before the node producing it.
    NotTopologicallyOrdered { node: usize, name: String },
    /// A value name defined more than once (node outputs, inputs, initializers).
    DuplicateValue(String),
    UndefinedOutput(String),
    NonFiniteAttribute { node: usize, attribute: String },
    MisplacedBatchDim { input: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            Violation::EmptyOpType { node } => write!(f, "node {node} has an empty op_type"),
            Violation::UndefinedInput { node, name } => {
                write!(f, "node {node} consumes undefined value {name:?}")
            }
            Violation::NotTopologicallyOrdered { node, name } => {
                write!(f, "node {node} consumes {name:?} before it is produced")
            }
            Violation::DuplicateValue(name) => write!(f, "value {name:?} is defined more than once"),
            Violation::UndefinedOutput(name) => write!(f, "graph output {name:?} is never produced"),
            Violation::NonFiniteAttribute { node, attribute } => {
                write!(f, "node {node} attribute {attribute:?} is not finite")
            }
            Violation::MisplacedBatchDim { input } => {
                write!(f, "input {input:?} declares a batch dimension outside leading position")
            }
        }
    }
}

impl ModelGraph {
    /// Checks every structural invariant. An empty list means the graph is
    /// well formed; registry coverage is checked separately at execution.
    pub fn validate(&self) -> Vec<Violation> {
        let mut violations = Vec::new();
        if self.version != FORMAT_VERSION {
            violations.push(Violation::UnsupportedVersion(self.version));
        }

        let mut defined: HashSet<&str> = HashSet::new();
        for input in &self.inputs {
            if !defined.insert(&input.name) {
                violations.push(Violation::DuplicateValue(input.name.clone()));
            }
            if input.shape.iter().skip(1).any(|d| *d == Dim::Batch) {
                violations.push(Violation::MisplacedBatchDim {
                    input: input.name.clone(),
                });
            }
        }
        for name in self.initializers.keys() {
            if !defined.insert(name) {
                violations.push(Violation::DuplicateValue(name.clone()));
            }
        }

        // Position of the node producing each name, for ordering diagnostics.
        let mut producer: HashMap<&str, usize> = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            for out in &node.outputs {
                producer.entry(out).or_insert(idx);
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.op_type.is_empty() {
                violations.push(Violation::EmptyOpType { node: idx });
            }
            for (key, value) in &node.attributes {
                if matches!(value, AttrValue::Float(v) if !v.is_finite()) {
                    violations.push(Violation::NonFiniteAttribute {
                        node: idx,
                        attribute: key.clone(),
                    });
                }
            }
            for name in &node.inputs {
                if defined.contains(name.as_str()) {
                    continue;
                }
                if producer.contains_key(name.as_str()) {
                    violations.push(Violation::NotTopologicallyOrdered {
                        node: idx,
                        name: name.clone(),
                    });
                } else {
                    violations.push(Violation::UndefinedInput {
                        node: idx,
                        name: name.clone(),
                    });
                }
            }
            for out in &node.outputs {
                if !defined.insert(out) {
                    violations.push(Violation::DuplicateValue(out.clone()));
                }
            }
        }

        for out in &self.outputs {
            if !defined.contains(out.as_str()) {
                violations.push(Violation::UndefinedOutput(out.clone()));
            }
        }
        violations
    }

    pub fn input(&self, name: &str) -> Option<&ValueInfo> {
        self.inputs.iter().find(|i| i.name == name)
    }

    /// Distinct op types used by the graph, in first-use order.
    pub fn op_types(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.nodes
            .iter()
            .map(|n| n.op_type.as_str())
            .filter(|op| seen.insert(*op))
            .collect()
    }
}
