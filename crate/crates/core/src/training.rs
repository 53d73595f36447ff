//! Offline trainer: float64 forward/backward for both architectures with
//! analytic gradients, MSE loss on normalized power and mini-batch descent
//! (SGD or Adam).
//!
//! The loop is single-threaded and sums per-sample gradients in batch order,
//! so a fixed seed reproduces parameters bit for bit.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnn::{mean_aggregate, mean_aggregate_adjoint, propagate, GnnError, NeighborSet};
use crate::models::{ArchKind, ArchSpec, ModelError, NormStats, Params, TrainedModel, HEAD_BIAS, HEAD_WEIGHT};
use crate::pipeline::ForecastDataset;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{layer}: {source}")]
    Layer {
        layer: &'static str,
        #[source]
        source: TensorError,
    },
    #[error("{layer}: {source}")]
    Graph {
        layer: &'static str,
        #[source]
        source: GnnError,
    },
    #[error("stale activation cache: computed at parameter generation {cached}, parameters now at {current}")]
    StaleCache { cached: u64, current: u64 },
    #[error("batch shape mismatch: {0}")]
    Batch(String),
    #[error("training diverged at epoch {epoch}; last finite epoch: {last_finite:?}")]
    Diverged {
        epoch: usize,
        last_finite: Option<EpochReport>,
    },
    #[error("training split is empty")]
    EmptyTrainingSet,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::adam(),
            patience: Some(20),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform weights, zero bias.
pub fn init_params(spec: &ArchSpec, rng: &mut impl Rng) -> Params {
    let mut tensors = BTreeMap::new();
    for (name, shape) in spec.param_shapes() {
        let tensor = if name == HEAD_BIAS {
            Tensor::zeros(&shape)
        } else {
            let bound = glorot_bound(shape[0], shape[1]);
            let data = (0..shape[0] * shape[1])
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Tensor::new(shape, data).expect("finite init")
        };
        tensors.insert(name.to_owned(), tensor);
    }
    Params::new(tensors)
}

/// Gradient of the loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub BTreeMap<String, Tensor<f64>>);

impl GradientSet {
    pub fn get(&self, name: &str) -> &Tensor<f64> {
        &self.0[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f64>)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }
}

struct SampleCache {
    /// Input to the first weight product: `A_hat·X` (GCN) or `[X | mean(X)]` (SAGE).
    in1: Tensor<f64>,
    z1: Tensor<f64>,
    in2: Tensor<f64>,
    z2: Tensor<f64>,
    flat: Tensor<f64>,
    residual: Tensor<f64>,
}

/// Activations retained by [`forward_loss`] for [`backward`].
pub struct ForwardCache {
    generation: u64,
    samples: Vec<SampleCache>,
}

/// Precomputed graph operators for one architecture.
struct Structure {
    kind: ArchKind,
    a_hat: Tensor<f64>,
    neighbors: NeighborSet,
}

impl Structure {
    fn new(spec: &ArchSpec) -> Self {
        Self {
            kind: spec.kind,
            a_hat: spec.topology.normalized(),
            neighbors: spec.topology.neighbors(),
        }
    }

    /// Input to a layer's weight product.
    fn layer_input(&self, h: &Tensor<f64>, layer: &'static str) -> Result<Tensor<f64>> {
        let graph_err = |source| TrainError::Graph { layer, source };
        match self.kind {
            ArchKind::Gcn2 => propagate(&self.a_hat, h).map_err(graph_err),
            ArchKind::Sage2 => {
                let agg = mean_aggregate(h, &self.neighbors).map_err(graph_err)?;
                h.concat_cols(&agg).map_err(|source| TrainError::Layer { layer, source })
            }
        }
    }

    /// Gradient w.r.t. `h` given the gradient w.r.t. `layer_input(h)`.
    fn layer_input_adjoint(&self, grad: &Tensor<f64>, layer: &'static str) -> Result<Tensor<f64>> {
        let graph_err = |source| TrainError::Graph { layer, source };
        let tensor_err = |source| TrainError::Layer { layer, source };
        match self.kind {
            // A_hat is symmetric, so A_hatᵀ·g = A_hat·g
            ArchKind::Gcn2 => propagate(&self.a_hat, grad).map_err(graph_err),
            ArchKind::Sage2 => {
                let d = grad.shape()[1] / 2;
                let own = grad.slice_cols(0, d).map_err(tensor_err)?;
                let agg = grad.slice_cols(d, 2 * d).map_err(tensor_err)?;
                let scattered = mean_aggregate_adjoint(&agg, &self.neighbors).map_err(graph_err)?;
                own.add(&scattered).map_err(tensor_err)
            }
        }
    }
}

fn layer<T>(layer: &'static str, r: std::result::Result<T, TensorError>) -> Result<T> {
    r.map_err(|source| TrainError::Layer { layer, source })
}

fn forward_sample(
    spec: &ArchSpec,
    structure: &Structure,
    params: &Params,
    x: &Tensor<f64>,
) -> Result<(Tensor<f64>, SampleCache)> {
    let [l1, l2] = spec.kind.layer_names();
    let in1 = structure.layer_input(x, "layer1")?;
    let z1 = layer("layer1", in1.matmul(params.get(l1)))?;
    let h1 = z1.relu();
    let in2 = structure.layer_input(&h1, "layer2")?;
    let z2 = layer("layer2", in2.matmul(params.get(l2)))?;
    let flat = layer("flatten", z2.relu().into_reshaped(&[1, spec.n_stations * spec.hidden_dim]))?;
    let y_hat = layer(
        "head",
        flat.matmul(params.get(HEAD_WEIGHT))
            .and_then(|t| t.add_bias(params.get(HEAD_BIAS))),
    )?;
    let cache = SampleCache {
        in1,
        z1,
        in2,
        z2,
        flat,
        residual: Tensor::zeros(&[1, spec.n_stations]),
    };
    Ok((y_hat, cache))
}

fn check_sample(spec: &ArchSpec, x: &Tensor<f64>, y: Option<&Tensor<f64>>) -> Result<()> {
    let n = spec.n_stations;
    if x.shape() != [n, spec.input_window] {
        return Err(TrainError::Batch(format!(
            "input {:?}, expected [{n}, {}]",
            x.shape(),
            spec.input_window
        )));
    }
    if let Some(y) = y {
        if y.shape() != [1, n] {
            return Err(TrainError::Batch(format!("target {:?}, expected [1, {n}]", y.shape())));
        }
    }
    Ok(())
}

/// Native float64 forward pass for one `[n, k]` window, returning `[1, n]`.
pub fn predict(model_spec: &ArchSpec, params: &Params, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    check_sample(model_spec, x, None)?;
    let structure = Structure::new(model_spec);
    Ok(forward_sample(model_spec, &structure, params, x)?.0)
}

/// MSE over the `B·n` predictions of a batch, plus the activations needed
/// by [`backward`].
pub fn forward_loss(
    spec: &ArchSpec,
    params: &Params,
    xs: &[Tensor<f64>],
    ys: &[Tensor<f64>],
) -> Result<(f64, ForwardCache)> {
    let structure = Structure::new(spec);
    forward_loss_with(spec, &structure, params, xs.iter().zip(ys))
}

fn forward_loss_with<'a>(
    spec: &ArchSpec,
    structure: &Structure,
    params: &Params,
    batch: impl Iterator<Item = (&'a Tensor<f64>, &'a Tensor<f64>)>,
) -> Result<(f64, ForwardCache)> {
    let mut samples = Vec::new();
    let mut sum_sq = 0.0;
    for (x, y) in batch {
        check_sample(spec, x, Some(y))?;
        let (y_hat, mut cache) = forward_sample(spec, structure, params, x)?;
        let residual = layer("loss", y_hat.sub(y))?;
        sum_sq += residual.data().iter().map(|r| r * r).sum::<f64>();
        cache.residual = residual;
        samples.push(cache);
    }
    if samples.is_empty() {
        return Err(TrainError::Batch("empty batch".into()));
    }
    let loss = sum_sq / (samples.len() * spec.n_stations) as f64;
    if !loss.is_finite() {
        return Err(TrainError::Layer {
            layer: "loss",
            source: TensorError::NonFinite { op: "mse" },
        });
    }
    Ok((
        loss,
        ForwardCache {
            generation: params.generation(),
            samples,
        },
    ))
}

/// Exact gradients of the batch MSE with respect to every parameter.
pub fn backward(spec: &ArchSpec, params: &Params, cache: &ForwardCache) -> Result<GradientSet> {
    backward_with(spec, &Structure::new(spec), params, cache)
}

fn backward_with(
    spec: &ArchSpec,
    structure: &Structure,
    params: &Params,
    cache: &ForwardCache,
) -> Result<GradientSet> {
    if cache.generation != params.generation() {
        return Err(TrainError::StaleCache {
            cached: cache.generation,
            current: params.generation(),
        });
    }
    let (n, d) = (spec.n_stations, spec.hidden_dim);
    let [l1, l2] = spec.kind.layer_names();
    let mut grads: BTreeMap<String, Tensor<f64>> = spec
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| (name.to_owned(), Tensor::zeros(&shape)))
        .collect();
    let scale = 2.0 / (cache.samples.len() * n) as f64;
    let relu_mask = |grad: Tensor<f64>, z: &Tensor<f64>| {
        let data = grad
            .data()
            .iter()
            .zip(z.data())
            .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
            .collect();
        Tensor::from_parts(z.shape().to_vec(), data)
    };
    let accumulate = |grads: &mut BTreeMap<String, Tensor<f64>>, name: &str, delta: Tensor<f64>| -> Result<()> {
        let sum = layer("backward", grads[name].add(&delta))?;
        grads.insert(name.to_owned(), sum);
        Ok(())
    };

    for s in &cache.samples {
        let d_out = layer("head", s.residual.scale(scale))?;
        accumulate(&mut grads, HEAD_WEIGHT, layer("head", s.flat.t_matmul(&d_out))?)?;
        accumulate(&mut grads, HEAD_BIAS, d_out.clone())?;
        let d_flat = layer("head", d_out.matmul_t(params.get(HEAD_WEIGHT)))?;
        let d_h2 = layer("flatten", d_flat.into_reshaped(&[n, d]))?;
        let d_z2 = relu_mask(d_h2, &s.z2);
        accumulate(&mut grads, l2, layer("layer2", s.in2.t_matmul(&d_z2))?)?;
        let d_in2 = layer("layer2", d_z2.matmul_t(params.get(l2)))?;
        let d_h1 = structure.layer_input_adjoint(&d_in2, "layer2")?;
        let d_z1 = relu_mask(d_h1, &s.z1);
        accumulate(&mut grads, l1, layer("layer1", s.in1.t_matmul(&d_z1))?)?;
    }
    Ok(GradientSet(grads))
}

/// Optimizer state across steps.
pub struct OptimizerState {
    optimizer: Optimizer,
    learning_rate: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, learning_rate: f64) -> Self {
        Self {
            optimizer,
            learning_rate,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, params: &mut Params, grads: &GradientSet) -> Result<()> {
        self.step += 1;
        let lr = self.learning_rate;
        for (name, grad) in grads.iter() {
            let current = params.get(name);
            let updated: Vec<f64> = match self.optimizer {
                Optimizer::Sgd => current
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&w, &g)| w - lr * g)
                    .collect(),
                Optimizer::Adam { beta1, beta2, eps } => {
                    let len = grad.len();
                    let m = self.first.entry(name.to_owned()).or_insert_with(|| vec![0.0; len]);
                    let v = self.second.entry(name.to_owned()).or_insert_with(|| vec![0.0; len]);
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    current
                        .data()
                        .iter()
                        .zip(grad.data())
                        .zip(m.iter_mut().zip(v.iter_mut()))
                        .map(|((&w, &g), (m, v))| {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            w - lr * (*m / c1) / ((*v / c2).sqrt() + eps)
                        })
                        .collect()
                }
            };
            let tensor = layer("update", Tensor::new(current.shape().to_vec(), updated))?;
            params.set(name, tensor);
        }
        Ok(())
    }
}

/// One line of the training report (emitted as JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub struct FitOutcome {
    pub model: TrainedModel,
    pub history: Vec<EpochReport>,
    pub best_epoch: usize,
}

/// Per-station z-score statistics from the anchor-time values of the
/// training windows.
pub fn norm_stats(train: &ForecastDataset) -> NormStats {
    let n = train.n_stations;
    let count = train.len().max(1) as f64;
    let mut mean = vec![0.0; n];
    for s in &train.samples {
        for (i, m) in mean.iter_mut().enumerate() {
            *m += s.x.get2(i, 0);
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; n];
    for s in &train.samples {
        for (i, v) in var.iter_mut().enumerate() {
            let dev = s.x.get2(i, 0) - mean[i];
            *v += dev * dev;
        }
    }
    let scale = var
        .into_iter()
        .map(|v| {
            let sd = (v / count).sqrt();
            if sd > 1e-12 { sd } else { 1.0 }
        })
        .collect();
    NormStats { mean, scale }
}

struct NormalizedSet {
    xs: Vec<Tensor<f64>>,
    ys: Vec<Tensor<f64>>,
}

impl NormalizedSet {
    fn new(data: &ForecastDataset, norm: &NormStats) -> Self {
        Self {
            xs: data.samples.iter().map(|s| norm.normalize_window(&s.x)).collect(),
            ys: data.samples.iter().map(|s| norm.normalize_target(&s.y)).collect(),
        }
    }

    fn len(&self) -> usize {
        self.xs.len()
    }
}

fn mean_loss(spec: &ArchSpec, structure: &Structure, params: &Params, set: &NormalizedSet) -> Result<f64> {
    let mut total = 0.0;
    for start in (0..set.len()).step_by(256) {
        let end = (start + 256).min(set.len());
        let (loss, _) = forward_loss_with(
            spec,
            structure,
            params,
            set.xs[start..end].iter().zip(&set.ys[start..end]),
        )?;
        total += loss * (end - start) as f64;
    }
    Ok(total / set.len() as f64)
}

/// Trains on a chronological 70/15/15 split of `dataset` and returns the
/// parameters with the best validation loss.
pub fn fit(dataset: &ForecastDataset, spec: ArchSpec, config: &TrainConfig) -> Result<FitOutcome> {
    fit_with(dataset, spec, config, |_| {})
}

pub fn fit_with(
    dataset: &ForecastDataset,
    spec: ArchSpec,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<FitOutcome> {
    config.check()?;
    spec.check()?;
    if dataset.n_stations != spec.n_stations || dataset.input_window != spec.input_window {
        return Err(TrainError::Batch(format!(
            "dataset is {} stations x {} lags, architecture expects {} x {}",
            dataset.n_stations, dataset.input_window, spec.n_stations, spec.input_window
        )));
    }
    let split = dataset.split_chronological();
    if split.train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let norm = norm_stats(&split.train);
    let train = NormalizedSet::new(&split.train, &norm);
    let val = NormalizedSet::new(&split.val, &norm);
    let structure = Structure::new(&spec);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init_params(&spec, &mut rng);
    let mut optimizer = OptimizerState::new(config.optimizer, config.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Params, usize)> = None;
    let mut history: Vec<EpochReport> = Vec::new();
    let mut since_best = 0usize;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let step = forward_loss_with(
                &spec,
                &structure,
                &params,
                chunk.iter().map(|&i| (&train.xs[i], &train.ys[i])),
            )
            .and_then(|(loss, cache)| {
                let grads = backward_with(&spec, &structure, &params, &cache)?;
                optimizer.apply(&mut params, &grads)?;
                Ok(loss)
            });
            match step {
                Ok(loss) => weighted += loss * chunk.len() as f64,
                Err(err) => {
                    log::error!("epoch {epoch}: {err}");
                    return Err(TrainError::Diverged {
                        epoch,
                        last_finite: history.last().cloned(),
                    });
                }
            }
        }
        let train_loss = weighted / train.len() as f64;
        let val_loss = if val.len() > 0 {
            mean_loss(&spec, &structure, &params, &val)
        } else {
            Ok(train_loss)
        };
        let val_loss = match val_loss {
            Ok(v) if v.is_finite() && train_loss.is_finite() => v,
            _ => {
                return Err(TrainError::Diverged {
                    epoch,
                    last_finite: history.last().cloned(),
                })
            }
        };
        let report = EpochReport {
            epoch,
            train_loss,
            val_loss,
            lr: config.learning_rate,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        on_epoch(&report);
        history.push(report);

        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, params.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                log::info!("early stop at epoch {epoch}");
                break;
            }
        }
    }

    let (best_params, best_epoch) = match best {
        Some((_, p, e)) => (p, e),
        None => (params, 0),
    };
    let model = TrainedModel::new(spec, best_params, norm, dataset.capacities.clone())?;
    Ok(FitOutcome {
        model,
        history,
        best_epoch,
    })
}
