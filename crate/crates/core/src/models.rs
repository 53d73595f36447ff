//! The two forecasting architectures and their lowering to [`ModelGraph`].
//!
//! Both take the `[n, k]` matrix of lagged station powers and predict the
//! power of every station `h` steps ahead:
//!
//! - `gcn2`: `x → MyGcnOp(relu) → MyGcnOp(relu) → Flatten → MatMul → AddBias`
//! - `sage2`: `x → SageMeanOp(relu) → SageMeanOp(relu) → Flatten → MatMul → AddBias`
//!
//! The MLP head reads the flattened embeddings of all stations and emits
//! all `n` predictions jointly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnn::{gcn_attributes, sage_attributes, Activation, GraphTopology, GCN_OP, SAGE_OP};
use crate::ir::graph::{AttrValue, Dim, GraphNode, ModelGraph, ValueInfo};
use crate::tensor::Tensor;

pub const INPUT: &str = "x";
pub const OUTPUT: &str = "y_hat";
pub const A_HAT: &str = "a_hat";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Defaults: one day of 15-minute samples in, 24 h ahead out.
pub const DEFAULT_INPUT_WINDOW: usize = 96;
pub const DEFAULT_HORIZON: usize = 96;
pub const DEFAULT_HIDDEN_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Spec(String),
    #[error("parameter {name:?}: expected shape {expected:?}, got {actual:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Option<Vec<usize>>,
    },
    #[error("normalization scale for station {0} must be > 0")]
    NormScale(usize),
    #[error("metadata key {key:?}: {reason}")]
    Metadata { key: String, reason: String },
    #[error(transparent)]
    Gnn(#[from] crate::gnn::GnnError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Gcn2,
    Sage2,
}

impl ArchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::Gcn2 => "gcn2",
            ArchKind::Sage2 => "sage2",
        }
    }

    pub fn layer_names(self) -> [&'static str; 2] {
        match self {
            ArchKind::Gcn2 => ["gcn1.weight", "gcn2.weight"],
            ArchKind::Sage2 => ["sage1.weight", "sage2.weight"],
        }
    }
}

impl FromStr for ArchKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gcn2" => Ok(ArchKind::Gcn2),
            "sage2" => Ok(ArchKind::Sage2),
            other => Err(format!("unknown architecture {other:?} (gcn2|sage2)")),
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub n_stations: usize,
    pub input_window: usize,
    pub horizon: usize,
    pub hidden_dim: usize,
    pub topology: GraphTopology,
}

impl ArchSpec {
    pub fn new(
        kind: ArchKind,
        input_window: usize,
        horizon: usize,
        hidden_dim: usize,
        topology: GraphTopology,
    ) -> Result<Self, ModelError> {
        let spec = Self {
            kind,
            n_stations: topology.n_nodes(),
            input_window,
            horizon,
            hidden_dim,
            topology,
        };
        spec.check()?;
        Ok(spec)
    }

    /// Default sizes on a fully connected station graph.
    pub fn with_defaults(kind: ArchKind, n_stations: usize) -> Result<Self, ModelError> {
        Self::new(
            kind,
            DEFAULT_INPUT_WINDOW,
            DEFAULT_HORIZON,
            DEFAULT_HIDDEN_DIM,
            GraphTopology::fully_connected(n_stations),
        )
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_stations", self.n_stations),
            ("input_window", self.input_window),
            ("horizon", self.horizon),
            ("hidden_dim", self.hidden_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Spec(format!("{name} must be >= 1")));
        }
        if self.topology.n_nodes() != self.n_stations {
            return Err(ModelError::Spec(format!(
                "topology has {} nodes for {} stations",
                self.topology.n_nodes(),
                self.n_stations
            )));
        }
        if self.kind == ArchKind::Sage2 {
            if let Some(v) = self.topology.neighbors().first_isolated() {
                return Err(ModelError::Spec(format!(
                    "sage2 needs every station to have a neighbor; station {v} is isolated"
                )));
            }
        }
        Ok(())
    }

    /// `(name, shape)` of every trainable parameter, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (n, k, d) = (self.n_stations, self.input_window, self.hidden_dim);
        let [l1, l2] = self.kind.layer_names();
        let (in1, in2) = match self.kind {
            ArchKind::Gcn2 => (k, d),
            ArchKind::Sage2 => (2 * k, 2 * d),
        };
        vec![
            (l1, vec![in1, d]),
            (l2, vec![in2, d]),
            (HEAD_WEIGHT, vec![n * d, n]),
            (HEAD_BIAS, vec![1, n]),
        ]
    }
}

/// Named parameter tensors. The generation counter changes on every write,
/// which lets the trainer detect stale activation caches.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    tensors: BTreeMap<String, Tensor<f64>>,
    generation: u64,
}

impl Params {
    pub fn new(tensors: BTreeMap<String, Tensor<f64>>) -> Self {
        Self {
            tensors,
            generation: 0,
        }
    }

    pub fn get(&self, name: &str) -> &Tensor<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} missing"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor<f64>) {
        self.tensors.insert(name.to_owned(), value);
        self.generation += 1;
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn check(&self, spec: &ArchSpec) -> Result<(), ModelError> {
        for (name, shape) in spec.param_shapes() {
            let actual = self.tensors.get(name).map(|t| t.shape().to_vec());
            if actual.as_deref() != Some(shape.as_slice()) {
                return Err(ModelError::ParamShape {
                    name: name.into(),
                    expected: shape,
                    actual,
                });
            }
        }
        Ok(())
    }
}

/// Per-station z-score statistics applied to inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormStats {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Normalizes an `[n, k]` window row by row.
    pub fn normalize_window(&self, x: &Tensor<f64>) -> Tensor<f64> {
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let data = (0..n)
            .flat_map(|i| x.row(i).iter().map(move |&v| (v - self.mean[i]) / self.scale[i]))
            .collect();
        Tensor::from_parts(vec![n, k], data)
    }

    /// Normalizes a `[1, n]` target row.
    pub fn normalize_target(&self, y: &Tensor<f64>) -> Tensor<f64> {
        let data = y
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i]) / self.scale[i])
            .collect();
        Tensor::from_parts(y.shape().to_vec(), data)
    }

    pub fn denormalize(&self, station: usize, value: f64) -> f64 {
        value * self.scale[station] + self.mean[station]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ArchSpec,
    pub params: Params,
    pub norm: NormStats,
    pub capacities: Vec<f64>,
}

impl TrainedModel {
    pub fn new(
        spec: ArchSpec,
        params: Params,
        norm: NormStats,
        capacities: Vec<f64>,
    ) -> Result<Self, ModelError> {
        spec.check()?;
        params.check(&spec)?;
        let n = spec.n_stations;
        if norm.mean.len() != n || norm.scale.len() != n || capacities.len() != n {
            return Err(ModelError::Spec(format!(
                "normalization/capacity vectors must have {n} entries"
            )));
        }
        if let Some(i) = norm.scale.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(ModelError::NormScale(i));
        }
        Ok(Self {
            spec,
            params,
            norm,
            capacities,
        })
    }

    /// Lowers to IR with normalization statistics and capacities recorded in
    /// the metadata.
    pub fn to_graph(&self) -> Result<ModelGraph, ModelError> {
        let mut graph = match self.spec.kind {
            ArchKind::Gcn2 => build_gcn2(&self.spec, &self.params)?,
            ArchKind::Sage2 => build_sage2(&self.spec, &self.params)?,
        };
        for i in 0..self.spec.n_stations {
            graph
                .metadata
                .insert(format!("norm_mean_{i}"), self.norm.mean[i].to_string());
            graph
                .metadata
                .insert(format!("norm_scale_{i}"), self.norm.scale[i].to_string());
            graph
                .metadata
                .insert(format!("capacity_{i}"), self.capacities[i].to_string());
        }
        Ok(graph)
    }
}

fn common_graph(spec: &ArchSpec, params: &Params) -> Result<ModelGraph, ModelError> {
    spec.check()?;
    params.check(spec)?;
    let mut graph = ModelGraph {
        inputs: vec![ValueInfo::new(
            INPUT,
            vec![
                Dim::Batch,
                Dim::Fixed(spec.n_stations),
                Dim::Fixed(spec.input_window),
            ],
        )],
        outputs: vec![OUTPUT.into()],
        ..ModelGraph::default()
    };
    for (name, tensor) in params.iter() {
        graph.initializers.insert(name.to_owned(), tensor.cast());
    }
    let meta = [
        ("arch", spec.kind.as_str().to_owned()),
        ("n_stations", spec.n_stations.to_string()),
        ("k", spec.input_window.to_string()),
        ("h", spec.horizon.to_string()),
        ("hidden_dim", spec.hidden_dim.to_string()),
        ("activation", "relu".to_owned()),
        ("head", format!("flatten[{}]->affine[{}]", spec.n_stations * spec.hidden_dim, spec.n_stations)),
        (
            "edges",
            spec.topology
                .edges()
                .iter()
                .map(|(a, b)| format!("{a}-{b}"))
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("init", "glorot_uniform".to_owned()),
    ];
    for (k, v) in meta {
        graph.metadata.insert(k.to_owned(), v);
    }
    Ok(graph)
}

fn head_nodes(graph: &mut ModelGraph) {
    graph.nodes.extend([
        GraphNode::new("Flatten", ["h2"], ["flat"]),
        GraphNode::new("MatMul", ["flat", HEAD_WEIGHT], ["head"]),
        GraphNode::new("AddBias", ["head", HEAD_BIAS], [OUTPUT]),
    ]);
}

/// Two fused GCN nodes sharing the baked `a_hat` initializer, then the MLP head.
pub fn build_gcn2(spec: &ArchSpec, params: &Params) -> Result<ModelGraph, ModelError> {
    if spec.kind != ArchKind::Gcn2 {
        return Err(ModelError::Spec(format!("build_gcn2 called with {}", spec.kind)));
    }
    let mut graph = common_graph(spec, params)?;
    graph
        .initializers
        .insert(A_HAT.into(), spec.topology.normalized().cast());
    let [l1, l2] = spec.kind.layer_names();
    let mut node = |input: &str, weight: &str, output: &str| {
        let mut n = GraphNode::new(GCN_OP, [input, A_HAT, weight], [output]);
        n.attributes = gcn_attributes(Activation::Relu);
        graph.nodes.push(n);
    };
    node(INPUT, l1, "h1");
    node("h1", l2, "h2");
    head_nodes(&mut graph);
    Ok(graph)
}

/// Two SAGE rounds with the neighbor lists carried as node attributes, then
/// the MLP head.
pub fn build_sage2(spec: &ArchSpec, params: &Params) -> Result<ModelGraph, ModelError> {
    if spec.kind != ArchKind::Sage2 {
        return Err(ModelError::Spec(format!("build_sage2 called with {}", spec.kind)));
    }
    let mut graph = common_graph(spec, params)?;
    let neighbors = spec.topology.neighbors();
    let [l1, l2] = spec.kind.layer_names();
    for (input, weight, output) in [(INPUT, l1, "h1"), ("h1", l2, "h2")] {
        let mut n = GraphNode::new(SAGE_OP, [input, weight], [output]);
        n.attributes = sage_attributes(Activation::Relu, &neighbors);
        graph.nodes.push(n);
    }
    head_nodes(&mut graph);
    Ok(graph)
}

/// What the evaluation side needs to know about an exported model, recovered
/// from its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInfo {
    pub arch: ArchKind,
    pub n_stations: usize,
    pub input_window: usize,
    pub horizon: usize,
    pub hidden_dim: usize,
    pub norm: NormStats,
    pub capacities: Vec<f64>,
}

impl ModelInfo {
    pub fn from_graph(graph: &ModelGraph) -> Result<Self, ModelError> {
        fn get<T: FromStr>(graph: &ModelGraph, key: &str) -> Result<T, ModelError> {
            let raw = graph.metadata.get(key).ok_or_else(|| ModelError::Metadata {
                key: key.into(),
                reason: "missing".into(),
            })?;
            raw.parse().map_err(|_| ModelError::Metadata {
                key: key.into(),
                reason: format!("cannot parse {raw:?}"),
            })
        }
        let arch: String = get(graph, "arch")?;
        let arch = arch.parse().map_err(|reason| ModelError::Metadata {
            key: "arch".into(),
            reason,
        })?;
        let n_stations: usize = get(graph, "n_stations")?;
        let mut norm = NormStats::identity(n_stations);
        let mut capacities = vec![0.0; n_stations];
        for i in 0..n_stations {
            norm.mean[i] = get(graph, &format!("norm_mean_{i}"))?;
            norm.scale[i] = get(graph, &format!("norm_scale_{i}"))?;
            capacities[i] = get(graph, &format!("capacity_{i}"))?;
        }
        Ok(Self {
            arch,
            n_stations,
            input_window: get(graph, "k")?,
            horizon: get(graph, "h")?,
            hidden_dim: get(graph, "hidden_dim")?,
            norm,
            capacities,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// JSON checkpoint of a trained model (float64 parameters), the hand-off
/// between `train` and `export`.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    arch: ArchKind,
    n_stations: usize,
    input_window: usize,
    horizon: usize,
    hidden_dim: usize,
    edges: Vec<(usize, usize)>,
    params: BTreeMap<String, StoredTensor>,
    norm: NormStats,
    capacities: Vec<f64>,
}

impl TrainedModel {
    pub fn to_checkpoint_json(&self) -> Result<String, ModelError> {
        let ckpt = Checkpoint {
            arch: self.spec.kind,
            n_stations: self.spec.n_stations,
            input_window: self.spec.input_window,
            horizon: self.spec.horizon,
            hidden_dim: self.spec.hidden_dim,
            edges: self.spec.topology.edges(),
            params: self
                .params
                .iter()
                .map(|(k, t)| {
                    (
                        k.to_owned(),
                        StoredTensor {
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
            norm: self.norm.clone(),
            capacities: self.capacities.clone(),
        };
        serde_json::to_string(&ckpt).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_checkpoint_json(json: &str) -> Result<Self, ModelError> {
        let ckpt: Checkpoint =
            serde_json::from_str(json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let topology = GraphTopology::from_edges(ckpt.n_stations, &ckpt.edges)?;
        let spec = ArchSpec::new(
            ckpt.arch,
            ckpt.input_window,
            ckpt.horizon,
            ckpt.hidden_dim,
            topology,
        )?;
        let mut tensors = BTreeMap::new();
        for (name, stored) in ckpt.params {
            tensors.insert(name, Tensor::new(stored.shape, stored.data)?);
        }
        Self::new(spec, Params::new(tensors), ckpt.norm, ckpt.capacities)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}

/// Reads a node attribute string, for tooling that inspects exported graphs.
pub fn node_activation(node: &GraphNode) -> Option<&str> {
    match node.attributes.get("activation") {
        Some(AttrValue::String(s)) => Some(s),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::default_registry;
    use crate::ir::exec::{execute, ExecMode, TensorMap};

    fn zero_params(spec: &ArchSpec, bias: &[f64]) -> Params {
        let mut tensors = BTreeMap::new();
        for (name, shape) in spec.param_shapes() {
            tensors.insert(name.to_owned(), Tensor::zeros(&shape));
        }
        tensors.insert(HEAD_BIAS.into(), Tensor::new(vec![1, bias.len()], bias.to_vec()).unwrap());
        Params::new(tensors)
    }

    fn small(kind: ArchKind) -> ArchSpec {
        ArchSpec::new(kind, 4, 2, 5, GraphTopology::fully_connected(3)).unwrap()
    }

    fn run(graph: &ModelGraph, x: Tensor<f32>) -> Tensor<f32> {
        let feeds = TensorMap::from([(INPUT.to_owned(), x)]);
        execute(graph, &default_registry(), &feeds, ExecMode::Batched)
            .unwrap()
            .remove(OUTPUT)
            .unwrap()
    }

    #[test]
    fn builders_emit_valid_ir() {
        for kind in [ArchKind::Gcn2, ArchKind::Sage2] {
            let spec = small(kind);
            let graph = TrainedModel::new(
                spec.clone(),
                zero_params(&spec, &[0.0; 3]),
                NormStats::identity(3),
                vec![5.0, 8.0, 10.0],
            )
            .unwrap()
            .to_graph()
            .unwrap();
            assert_eq!(graph.validate(), vec![]);
            let info = ModelInfo::from_graph(&graph).unwrap();
            assert_eq!(info.arch, kind);
            assert_eq!(info.capacities, vec![5.0, 8.0, 10.0]);
            assert_eq!(info.input_window, 4);
        }
    }

    #[test]
    fn zero_weights_output_bias() {
        for kind in [ArchKind::Gcn2, ArchKind::Sage2] {
            let spec = small(kind);
            let bias = [0.25, -1.5, 3.0];
            let graph = match kind {
                ArchKind::Gcn2 => build_gcn2(&spec, &zero_params(&spec, &bias)).unwrap(),
                ArchKind::Sage2 => build_sage2(&spec, &zero_params(&spec, &bias)).unwrap(),
            };
            let x = Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f32).collect()).unwrap();
            let out = run(&graph, x);
            assert_eq!(out.shape(), &[2, 3]);
            for s in 0..2 {
                assert_eq!(out.row(s), &[0.25f32, -1.5, 3.0]);
            }
        }
    }

    #[test]
    fn sage_self_projection_then_zero_head() {
        let spec = small(ArchKind::Sage2);
        let mut params = zero_params(&spec, &[1.0, 2.0, 3.0]);
        // [I; 0] maps only the node's own half; k=4 > d=5 is not square, so
        // embed the identity in the first rows.
        let proj = |rows: usize, cols: usize| {
            let mut t = vec![0.0; rows * cols];
            for i in 0..cols.min(rows / 2) {
                t[i * cols + i] = 1.0;
            }
            Tensor::new(vec![rows, cols], t).unwrap()
        };
        params.set("sage1.weight", proj(8, 5));
        params.set("sage2.weight", proj(10, 5));
        let graph = build_sage2(&spec, &params).unwrap();
        let x = Tensor::new(vec![1, 3, 4], (0..12).map(|i| i as f32 - 4.0).collect()).unwrap();
        assert_eq!(run(&graph, x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn param_shape_mismatch_rejected() {
        let spec = small(ArchKind::Gcn2);
        let mut params = zero_params(&spec, &[0.0; 3]);
        params.set("gcn1.weight", Tensor::zeros(&[3, 5]));
        assert!(matches!(
            build_gcn2(&spec, &params),
            Err(ModelError::ParamShape { .. })
        ));
        assert!(build_sage2(&spec, &zero_params(&spec, &[0.0; 3])).is_err());
    }

    #[test]
    fn sage_rejects_isolated_station() {
        let topo = GraphTopology::from_edges(3, &[(0, 1)]).unwrap();
        assert!(ArchSpec::new(ArchKind::Sage2, 4, 1, 2, topo.clone()).is_err());
        assert!(ArchSpec::new(ArchKind::Gcn2, 4, 1, 2, topo).is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = small(ArchKind::Gcn2);
        let mut params = zero_params(&spec, &[0.1, 0.2, 0.3]);
        params.set("gcn1.weight", Tensor::new(vec![4, 5], (0..20).map(|i| (i as f64).sin()).collect()).unwrap());
        let model = TrainedModel::new(
            spec,
            params,
            NormStats { mean: vec![1.0, 2.0, 3.0], scale: vec![0.5, 1.0 / 3.0, 2.0] },
            vec![5.0, 8.0, 10.0],
        )
        .unwrap();
        let back = TrainedModel::from_checkpoint_json(&model.to_checkpoint_json().unwrap()).unwrap();
        assert_eq!(back.params.get("gcn1.weight"), model.params.get("gcn1.weight"));
        assert_eq!(back.norm, model.norm);
        assert_eq!(back.to_graph().unwrap(), model.to_graph().unwrap());
    }
}
