//! GCN and GraphSAGE kernels plus adjacency preprocessing.
//!
//! GCN propagation is `act(A_hat · H · W)` with the symmetric-normalized
//! adjacency `A_hat = D̃^-1/2 (A + I) D̃^-1/2` precomputed once per topology.
//! GraphSAGE uses mean aggregation over the neighbor set followed by
//! `act(concat(h_v, mean_{u in N(v)} h_u) · W)`.
//!
//! Both kernels accept node features either as `[N, D]` or as a batch
//! `[B, N, D]`; every sample is processed with the same per-row arithmetic,
//! so batched and per-sample evaluation agree bit for bit.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::ir::graph::{AttrValue, Attributes};
use crate::ir::registry::{
    attr_ints, attr_str, Arity, KernelError, OpKernel, OperatorRegistry, RegistryError,
};
use crate::tensor::{Element, Tensor, TensorError};

pub const GCN_OP: &str = "MyGcnOp";
pub const SAGE_OP: &str = "SageMeanOp";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GnnError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("node {node} has an empty neighbor set")]
    EmptyNeighborhood { node: usize },
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<GnnError> for KernelError {
    fn from(err: GnnError) -> Self {
        match err {
            GnnError::Tensor(t) => KernelError::Tensor(t),
            GnnError::EmptyNeighborhood { node } => KernelError::EmptyNeighborhood { node },
            other => KernelError::Shape {
                expected: "conforming GNN operands".into(),
                actual: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    None,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::None => "none",
        }
    }

    pub fn apply<T: Element>(self, t: Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => t.relu(),
            Activation::None => t,
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "none" => Ok(Activation::None),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Undirected station graph: symmetric binary adjacency with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTopology {
    adjacency: Tensor<f64>,
}

impl GraphTopology {
    pub fn new(adjacency: Tensor<f64>) -> Result<Self, GnnError> {
        check_adjacency(&adjacency)?;
        Ok(Self { adjacency })
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, GnnError> {
        let mut data = vec![0.0; n * n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(GnnError::Topology(format!("edge ({a}, {b}) outside {n} nodes")));
            }
            if a == b {
                return Err(GnnError::Topology(format!("self-loop on node {a}")));
            }
            data[a * n + b] = 1.0;
            data[b * n + a] = 1.0;
        }
        Self::new(Tensor::new(vec![n, n], data)?)
    }

    pub fn fully_connected(n: usize) -> Self {
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .collect();
        Self::from_edges(n, &edges).expect("complete graph is valid")
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<(usize, usize)> = (1..n).map(|b| (b - 1, b)).collect();
        Self::from_edges(n, &edges).expect("path graph is valid")
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.shape()[0]
    }

    pub fn adjacency(&self) -> &Tensor<f64> {
        &self.adjacency
    }

    pub fn normalized(&self) -> Tensor<f64> {
        gcn_normalize(&self.adjacency).expect("adjacency validated at construction")
    }

    pub fn neighbors(&self) -> NeighborSet {
        let n = self.n_nodes();
        let lists = (0..n)
            .map(|v| (0..n).filter(|&u| self.adjacency.get2(v, u) != 0.0).collect())
            .collect();
        NeighborSet::from_lists(lists).expect("adjacency validated at construction")
    }

    /// Edge list `(a, b)` with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_nodes();
        (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| self.adjacency.get2(a, b) != 0.0)
            .collect()
    }
}

fn check_adjacency(a: &Tensor<f64>) -> Result<usize, GnnError> {
    let (n, m) = a
        .dims2("adjacency")
        .map_err(|_| GnnError::Topology(format!("adjacency must be a matrix, got {:?}", a.shape())))?;
    if n != m {
        return Err(GnnError::Topology(format!("adjacency is {n}x{m}, not square")));
    }
    for i in 0..n {
        if a.get2(i, i) != 0.0 {
            return Err(GnnError::Topology(format!("nonzero diagonal at node {i}")));
        }
        for j in 0..n {
            let v = a.get2(i, j);
            if v != 0.0 && v != 1.0 {
                return Err(GnnError::Topology(format!("entry ({i}, {j}) = {v} is not binary")));
            }
            if v != a.get2(j, i) {
                return Err(GnnError::Topology(format!("asymmetric at ({i}, {j})")));
            }
        }
    }
    Ok(n)
}

/// `D̃^-1/2 (A + I) D̃^-1/2` for a symmetric binary adjacency with zero diagonal.
pub fn gcn_normalize(adjacency: &Tensor<f64>) -> Result<Tensor<f64>, GnnError> {
    let n = check_adjacency(adjacency)?;
    let with_loops = adjacency.add(&Tensor::eye(n))?;
    // every degree is >= 1 thanks to the self-loop
    let degree: Vec<f64> = (0..n).map(|i| with_loops.row(i).iter().sum()).collect();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let a = with_loops.get2(i, j);
            if a != 0.0 {
                data[i * n + j] = a / (degree[i] * degree[j]).sqrt();
            }
        }
    }
    Ok(Tensor::new(vec![n, n], data)?)
}

/// `A_hat · H` for `H` of shape `[N, D]` or `[B, N, D]`.
pub fn propagate<T: Element>(a_hat: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>, GnnError> {
    let (n, n2) = a_hat.dims2("propagate")?;
    let shape_err = || GnnError::Shape {
        op: "propagate",
        detail: format!("A_hat {:?} against features {:?}", a_hat.shape(), h.shape()),
    };
    if n != n2 {
        return Err(shape_err());
    }
    match h.shape() {
        [rows, _] if *rows == n => Ok(a_hat.matmul(h)?),
        [b, rows, d] if *rows == n => {
            let mut parts = Vec::with_capacity(*b);
            for s in 0..*b {
                let sample = h.slice_outer(s, s + 1)?.into_reshaped(&[n, *d])?;
                parts.push(a_hat.matmul(&sample)?);
            }
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            Ok(Tensor::concat(&refs, 0)?.into_reshaped(&[*b, n, *d])?)
        }
        _ => Err(shape_err()),
    }
}

/// One GCN layer: `act(A_hat · H · W)`.
pub fn gcn_layer<T: Element>(
    a_hat: &Tensor<T>,
    h: &Tensor<T>,
    w: &Tensor<T>,
    activation: Activation,
) -> Result<Tensor<T>, GnnError> {
    let (d_in, _) = w.dims2("gcn_layer")?;
    if h.shape().last() != Some(&d_in) {
        return Err(GnnError::Shape {
            op: "gcn_layer",
            detail: format!("features {:?} against weight {:?}", h.shape(), w.shape()),
        });
    }
    let pre = propagate(a_hat, h)?.matmul(w)?;
    Ok(activation.apply(pre))
}

/// Neighbor lists in CSR form, each list sorted ascending. A node is never
/// its own neighbor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSet {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl NeighborSet {
    pub fn from_lists(mut lists: Vec<Vec<usize>>) -> Result<Self, GnnError> {
        let n = lists.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for (v, list) in lists.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if let Some(&u) = list.iter().find(|&&u| u >= n || u == v) {
                return Err(GnnError::Topology(format!(
                    "node {v} lists invalid neighbor {u}"
                )));
            }
            indices.extend_from_slice(list);
            offsets.push(indices.len());
        }
        Ok(Self { offsets, indices })
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn of(&self, v: usize) -> &[usize] {
        &self.indices[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn first_isolated(&self) -> Option<usize> {
        (0..self.n_nodes()).find(|&v| self.of(v).is_empty())
    }

    /// Attribute encoding: `[N, offsets[0..=N], indices..]`.
    pub fn to_attr(&self) -> Vec<i64> {
        std::iter::once(self.n_nodes())
            .chain(self.offsets.iter().copied())
            .chain(self.indices.iter().copied())
            .map(|v| v as i64)
            .collect()
    }

    pub fn from_attr(raw: &[i64]) -> Result<Self, GnnError> {
        let bad = |why: &str| GnnError::Topology(format!("neighbor_lists encoding: {why}"));
        let &n = raw.first().ok_or_else(|| bad("empty"))?;
        if n < 0 || raw.iter().any(|&v| v < 0) {
            return Err(bad("negative entry"));
        }
        let n = n as usize;
        if raw.len() < n + 2 {
            return Err(bad("too short for offsets"));
        }
        let offsets: Vec<usize> = raw[1..n + 2].iter().map(|&v| v as usize).collect();
        let indices: Vec<usize> = raw[n + 2..].iter().map(|&v| v as usize).collect();
        if offsets[0] != 0
            || offsets.windows(2).any(|w| w[0] > w[1])
            || offsets[n] != indices.len()
        {
            return Err(bad("offsets inconsistent with indices"));
        }
        let lists = (0..n).map(|v| indices[offsets[v]..offsets[v + 1]].to_vec()).collect();
        let set = Self::from_lists(lists)?;
        if set.indices != indices {
            return Err(bad("lists not sorted and unique"));
        }
        Ok(set)
    }
}

/// Mean of neighbor rows for every node: `h_N(v) = 1/|N(v)| Σ_{u∈N(v)} h_u`.
/// Accepts `[N, D]` or `[B, N, D]`.
pub fn mean_aggregate<T: Element>(h: &Tensor<T>, neighbors: &NeighborSet) -> Result<Tensor<T>, GnnError> {
    let n = neighbors.n_nodes();
    let (batch, d) = match h.shape() {
        [rows, d] if *rows == n => (1, *d),
        [b, rows, d] if *rows == n => (*b, *d),
        _ => {
            return Err(GnnError::Shape {
                op: "mean_aggregate",
                detail: format!("features {:?} for {n} nodes", h.shape()),
            })
        }
    };
    if let Some(node) = neighbors.first_isolated() {
        return Err(GnnError::EmptyNeighborhood { node });
    }
    let src = h.data();
    let mut out = vec![T::zero(); src.len()];
    for s in 0..batch {
        let base = s * n * d;
        for v in 0..n {
            let list = neighbors.of(v);
            let row = &mut out[base + v * d..base + (v + 1) * d];
            for &u in list {
                for (o, &x) in row.iter_mut().zip(&src[base + u * d..base + (u + 1) * d]) {
                    *o = *o + x;
                }
            }
            let count = T::from(list.len()).unwrap();
            for o in row.iter_mut() {
                *o = *o / count;
            }
        }
    }
    Ok(Tensor::new(h.shape().to_vec(), out)?)
}

/// Adjoint of [`mean_aggregate`] on `[N, D]`: scatters each node's gradient
/// back to its neighbors, scaled by `1/|N(v)|`.
pub fn mean_aggregate_adjoint<T: Element>(
    grad: &Tensor<T>,
    neighbors: &NeighborSet,
) -> Result<Tensor<T>, GnnError> {
    let (n, d) = grad.dims2("mean_aggregate_adjoint")?;
    if n != neighbors.n_nodes() {
        return Err(GnnError::Shape {
            op: "mean_aggregate_adjoint",
            detail: format!("gradient {:?} for {} nodes", grad.shape(), neighbors.n_nodes()),
        });
    }
    let g = grad.data();
    let mut out = vec![T::zero(); n * d];
    for v in 0..n {
        let list = neighbors.of(v);
        if list.is_empty() {
            return Err(GnnError::EmptyNeighborhood { node: v });
        }
        let inv = T::one() / T::from(list.len()).unwrap();
        for &u in list {
            for j in 0..d {
                out[u * d + j] = out[u * d + j] + g[v * d + j] * inv;
            }
        }
    }
    Ok(Tensor::new(vec![n, d], out)?)
}

/// One GraphSAGE round: `act(concat(h_v, h_N(v)) · W)` with `W` of shape `[2D, D']`.
pub fn sage_round<T: Element>(
    h: &Tensor<T>,
    w: &Tensor<T>,
    neighbors: &NeighborSet,
    activation: Activation,
) -> Result<Tensor<T>, GnnError> {
    let (two_d, _) = w.dims2("sage_round")?;
    let d = *h.shape().last().unwrap_or(&0);
    if two_d != 2 * d {
        return Err(GnnError::Shape {
            op: "sage_round",
            detail: format!("features {:?} need a [{}, _] weight, got {:?}", h.shape(), 2 * d, w.shape()),
        });
    }
    let aggregated = mean_aggregate(h, neighbors)?;
    let joined = Tensor::concat(&[h, &aggregated], h.rank() - 1)?;
    Ok(activation.apply(joined.matmul(w)?))
}

fn activation_attr(attrs: &Attributes) -> Result<Activation, KernelError> {
    attr_str(attrs, "activation")?
        .parse()
        .map_err(|reason| KernelError::Attribute {
            name: "activation".into(),
            reason,
        })
}

/// Backend kernel for `MyGcnOp`: inputs `[H, A_hat, W]`, attribute
/// `activation` (`"relu"` | `"none"`).
pub struct GcnKernel;

impl OpKernel for GcnKernel {
    fn op_type(&self) -> &str {
        GCN_OP
    }
    fn arity(&self) -> Arity {
        Arity::exact(3, 1)
    }
    fn evaluate(&self, inputs: &[&Tensor<f32>], attrs: &Attributes) -> Result<Vec<Tensor<f32>>, KernelError> {
        let act = activation_attr(attrs)?;
        Ok(vec![gcn_layer(inputs[1], inputs[0], inputs[2], act)?])
    }
}

/// Backend kernel for `SageMeanOp`: inputs `[H, W]`, attributes `activation`
/// and `neighbor_lists` (see [`NeighborSet::to_attr`]).
pub struct SageMeanKernel;

impl OpKernel for SageMeanKernel {
    fn op_type(&self) -> &str {
        SAGE_OP
    }
    fn arity(&self) -> Arity {
        Arity::exact(2, 1)
    }
    fn evaluate(&self, inputs: &[&Tensor<f32>], attrs: &Attributes) -> Result<Vec<Tensor<f32>>, KernelError> {
        let act = activation_attr(attrs)?;
        let neighbors = NeighborSet::from_attr(attr_ints(attrs, "neighbor_lists")?).map_err(|e| {
            KernelError::Attribute {
                name: "neighbor_lists".into(),
                reason: e.to_string(),
            }
        })?;
        Ok(vec![sage_round(inputs[0], inputs[1], &neighbors, act)?])
    }
}

pub fn gcn_attributes(activation: Activation) -> Attributes {
    Attributes::from([("activation".into(), AttrValue::String(activation.as_str().into()))])
}

pub fn sage_attributes(activation: Activation, neighbors: &NeighborSet) -> Attributes {
    Attributes::from([
        ("activation".into(), AttrValue::String(activation.as_str().into())),
        ("neighbor_lists".into(), AttrValue::Ints(neighbors.to_attr())),
    ])
}

pub fn register_gnn_ops(registry: &mut OperatorRegistry) -> Result<(), RegistryError> {
    registry.register_op(GcnKernel)?;
    registry.register_op(SageMeanKernel)
}

/// Built-ins plus both GNN kernels.
pub fn default_registry() -> OperatorRegistry {
    let mut registry = OperatorRegistry::with_builtins();
    register_gnn_ops(&mut registry).expect("GNN op types are not built in");
    registry
}

/// Permutes rows of a `[N, D]` matrix: `out[i] = m[perm[i]]`.
pub fn permute_rows<T: Element>(m: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let d = m.shape()[1];
    let data = perm.iter().flat_map(|&p| m.row(p).iter().copied()).collect();
    Tensor::from_parts(vec![perm.len(), d], data)
}

/// `P · A · Pᵀ` for the permutation `out[i][j] = a[perm[i]][perm[j]]`.
pub fn permute_square<T: Element>(a: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let n = perm.len();
    let data = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| a.get2(perm[i], perm[j]))
        .collect();
    Tensor::from_parts(vec![n, n], data)
}

/// Largest absolute entry; used in diagnostics.
pub fn max_abs<T: Element>(t: &Tensor<T>) -> T {
    t.data().iter().fold(T::zero(), |m, &v| m.max(v.abs()))
}
