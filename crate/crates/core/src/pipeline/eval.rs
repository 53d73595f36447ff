use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dataset::ForecastDataset;
use super::metric::{capacity_score, MetricError};
use crate::ir::{ExecError, ExecMode, ModelGraph, OperatorRegistry, Session, TensorMap};
use crate::models::{ModelError, ModelInfo, INPUT, OUTPUT};
use crate::par::{map_indexed, with_threads, Parallelism};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("dataset does not fit the model: {0}")]
    Mismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    pub mode: ExecMode,
    /// Concurrent inference sessions over contiguous chunks of the dataset.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: ExecMode::Batched,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationReport {
    pub station_id: String,
    pub capacity_kw: f64,
    pub n: usize,
    pub accuracy_pct: f64,
    pub error_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arch: String,
    pub mode: String,
    pub threads: usize,
    pub n_samples: usize,
    /// Wall-clock inference time for all stations jointly.
    pub inference_seconds: f64,
    pub samples_per_sec: f64,
    /// Approximate peak resident set during inference (Linux only).
    pub peak_rss_bytes: Option<u64>,
    pub stations: Vec<StationReport>,
}

impl EvalReport {
    pub fn mean_error_pct(&self) -> f64 {
        self.stations.iter().map(|s| s.error_pct).sum::<f64>() / self.stations.len().max(1) as f64
    }

    /// Aligned text table with the result-table columns. `Time (sec)` is the
    /// joint inference time, since one model serves every station.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>12} {:>11} {:>8} {:>10}\n",
            "PV ID", "Data Length", "Time (sec)", "MAPE", "Accuracy"
        );
        for s in &self.stations {
            let _ = writeln!(
                out,
                "{:<12} {:>12} {:>11.3} {:>7.2}% {:>9.2}%",
                s.station_id, s.n, self.inference_seconds, s.error_pct, s.accuracy_pct
            );
        }
        let _ = writeln!(
            out,
            "{} / {} mode / {} thread(s): {:.0} samples/sec, peak RSS {}",
            self.arch,
            self.mode,
            self.threads,
            self.samples_per_sec,
            format_bytes(self.peak_rss_bytes)
        );
        out
    }
}

fn format_bytes(bytes: Option<u64>) -> String {
    bytes.map_or("n/a".to_owned(), |b| format!("{:.1} MB", b as f64 / 1e6))
}

/// Samples `/proc/self/status` VmRSS every 10 ms on a background thread.
pub struct PeakRss {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<Option<u64>>,
}

fn current_rss() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

impl PeakRss {
    pub fn start() -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            let mut peak = current_rss();
            loop {
                let done = flag.load(Ordering::Relaxed);
                peak = peak.max(current_rss());
                if done {
                    return peak;
                }
                std::thread::park_timeout(Duration::from_millis(10));
            }
        });
        Self { stop, handle }
    }

    pub fn finish(self) -> Option<u64> {
        self.stop.store(true, Ordering::Relaxed);
        self.handle.thread().unpark();
        self.handle.join().ok().flatten()
    }
}

fn check_fit(info: &ModelInfo, dataset: &ForecastDataset) -> Result<(), EvalError> {
    if info.n_stations != dataset.n_stations || info.input_window != dataset.input_window {
        return Err(EvalError::Mismatch(format!(
            "model expects {} stations x {} lags, dataset has {} x {}",
            info.n_stations, info.input_window, dataset.n_stations, dataset.input_window
        )));
    }
    if info.horizon != dataset.horizon {
        return Err(EvalError::Mismatch(format!(
            "model horizon {} but dataset windowed with {}",
            info.horizon, dataset.horizon
        )));
    }
    Ok(())
}

/// Normalized `[B, n, k]` float32 inputs for `samples`.
fn model_inputs(info: &ModelInfo, dataset: &ForecastDataset, start: usize, end: usize) -> Tensor<f32> {
    let (n, k) = (dataset.n_stations, dataset.input_window);
    let mut data = Vec::with_capacity((end - start) * n * k);
    for s in &dataset.samples[start..end] {
        for i in 0..n {
            data.extend(s.x.row(i).iter().map(|&v| ((v - info.norm.mean[i]) / info.norm.scale[i]) as f32));
        }
    }
    Tensor::from_parts(vec![end - start, n, k], data)
}

fn run_chunk(
    session: &Session<'_>,
    info: &ModelInfo,
    dataset: &ForecastDataset,
    start: usize,
    end: usize,
    mode: ExecMode,
) -> Result<Tensor<f32>, ExecError> {
    let feeds = TensorMap::from([(INPUT.to_owned(), model_inputs(info, dataset, start, end))]);
    let mut out = session.run(&feeds, mode)?;
    Ok(out.remove(OUTPUT).expect("graph declares its output"))
}

fn chunk_bounds(len: usize, chunks: usize) -> Vec<(usize, usize)> {
    let chunks = chunks.clamp(1, len.max(1));
    (0..chunks).map(|c| (c * len / chunks, (c + 1) * len / chunks)).collect()
}

/// Runs the model over every sample and returns denormalized predictions,
/// row-major `[B, n]` in sample order.
fn infer(
    session: &Session<'_>,
    info: &ModelInfo,
    dataset: &ForecastDataset,
    config: EvalConfig,
) -> Result<Vec<f64>, EvalError> {
    let bounds = chunk_bounds(dataset.len(), config.threads);
    let parallelism = if config.threads > 1 {
        Parallelism::Parallel
    } else {
        Parallelism::Sequential
    };
    let outputs = with_threads(config.threads, || {
        map_indexed(bounds.len(), parallelism, |c| {
            let (start, end) = bounds[c];
            run_chunk(session, info, dataset, start, end, config.mode)
        })
    });
    let n = info.n_stations;
    let mut predictions = Vec::with_capacity(dataset.len() * n);
    for out in outputs {
        let out = out?;
        predictions.extend(
            out.data()
                .iter()
                .enumerate()
                .map(|(j, &v)| info.norm.denormalize(j % n, f64::from(v))),
        );
    }
    Ok(predictions)
}

fn prepare<'m>(
    graph: &'m ModelGraph,
    registry: &OperatorRegistry,
    dataset: &ForecastDataset,
    config: EvalConfig,
) -> Result<(Session<'m>, ModelInfo), EvalError> {
    if config.threads == 0 {
        return Err(EvalError::Config("threads must be >= 1".into()));
    }
    let session = Session::new(graph, registry)?;
    let info = ModelInfo::from_graph(graph)?;
    check_fit(&info, dataset)?;
    Ok((session, info))
}

/// Denormalized predictions in kW, row-major `[B, n]`.
pub fn predict_dataset(
    graph: &ModelGraph,
    registry: &OperatorRegistry,
    dataset: &ForecastDataset,
    config: EvalConfig,
) -> Result<Vec<f64>, EvalError> {
    let (session, info) = prepare(graph, registry, dataset, config)?;
    infer(&session, &info, dataset, config)
}

/// Capacity-normalized error per station; metrics accumulate in sample
/// order regardless of thread count.
pub fn evaluate(
    graph: &ModelGraph,
    registry: &OperatorRegistry,
    dataset: &ForecastDataset,
    config: EvalConfig,
) -> Result<EvalReport, EvalError> {
    let (session, info) = prepare(graph, registry, dataset, config)?;
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let rss = PeakRss::start();
    let started = Instant::now();
    let predictions = infer(&session, &info, dataset, config)?;
    let seconds = started.elapsed().as_secs_f64();
    let peak_rss_bytes = rss.finish();

    let n = info.n_stations;
    let mut stations = Vec::with_capacity(n);
    for i in 0..n {
        let y: Vec<f64> = dataset.samples.iter().map(|s| s.y.data()[i]).collect();
        let y_hat: Vec<f64> = predictions.iter().skip(i).step_by(n).copied().collect();
        let m = capacity_score(&y, &y_hat, dataset.capacities[i])?;
        stations.push(StationReport {
            station_id: dataset.station_ids[i].clone(),
            capacity_kw: dataset.capacities[i],
            n: y.len(),
            accuracy_pct: m.accuracy_pct,
            error_pct: m.error_pct,
        });
    }
    Ok(EvalReport {
        arch: info.arch.to_string(),
        mode: config.mode.to_string(),
        threads: config.threads,
        n_samples: dataset.len(),
        inference_seconds: seconds,
        samples_per_sec: dataset.len() as f64 / seconds.max(f64::MIN_POSITIVE),
        peak_rss_bytes,
        stations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub eval: EvalConfig,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            eval: EvalConfig::default(),
            repetitions: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyPercentiles {
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl LatencyPercentiles {
    /// Nearest-rank percentiles of `samples_us`.
    pub fn from_samples(mut samples_us: Vec<f64>) -> Option<Self> {
        if samples_us.is_empty() {
            return None;
        }
        samples_us.sort_by(f64::total_cmp);
        let rank = |p: f64| {
            let idx = ((p / 100.0) * samples_us.len() as f64).ceil() as usize;
            samples_us[idx.clamp(1, samples_us.len()) - 1]
        };
        Some(Self {
            p50_us: rank(50.0),
            p90_us: rank(90.0),
            p99_us: rank(99.0),
            max_us: *samples_us.last().expect("non-empty"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub arch: String,
    pub mode: String,
    pub threads: usize,
    pub n_samples: usize,
    pub repetitions: usize,
    /// Median total inference time over the repetitions.
    pub seconds: f64,
    pub run_seconds: Vec<f64>,
    pub samples_per_sec: f64,
    pub peak_rss_bytes: Option<u64>,
    /// Latency of single-sample inference calls.
    pub latency: LatencyPercentiles,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        format!(
            "{:<10} {:>11} {:>6} {:>8} {:>12} {:>14} {:>12} {:>10} {:>10}\n\
             {:<10} {:>11} {:>6} {:>8} {:>12.4} {:>14.0} {:>12} {:>10.1} {:>10.1}\n",
            "arch",
            "mode",
            "thr",
            "samples",
            "median (s)",
            "samples/sec",
            "peak RSS",
            "p50 (us)",
            "p99 (us)",
            self.arch,
            self.mode,
            self.threads,
            self.n_samples,
            self.seconds,
            self.samples_per_sec,
            format_bytes(self.peak_rss_bytes),
            self.latency.p50_us,
            self.latency.p99_us,
        )
    }
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    }
}

/// Times full-dataset inference `repetitions` times (model loading and data
/// parsing are excluded), then times each sample on its own for latency
/// percentiles.
pub fn bench(
    graph: &ModelGraph,
    registry: &OperatorRegistry,
    dataset: &ForecastDataset,
    config: BenchConfig,
) -> Result<BenchReport, EvalError> {
    let (session, info) = prepare(graph, registry, dataset, config.eval)?;
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if config.repetitions == 0 {
        return Err(EvalError::Config("repetitions must be >= 1".into()));
    }
    let rss = PeakRss::start();
    let mut run_seconds = Vec::with_capacity(config.repetitions);
    for _ in 0..config.repetitions {
        let started = Instant::now();
        std::hint::black_box(infer(&session, &info, dataset, config.eval)?);
        run_seconds.push(started.elapsed().as_secs_f64());
    }
    let mut latencies = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let started = Instant::now();
        std::hint::black_box(run_chunk(&session, &info, dataset, i, i + 1, config.eval.mode)?);
        latencies.push(started.elapsed().as_secs_f64() * 1e6);
    }
    let peak_rss_bytes = rss.finish();
    let seconds = median(&run_seconds);
    Ok(BenchReport {
        arch: info.arch.to_string(),
        mode: config.eval.mode.to_string(),
        threads: config.eval.threads,
        n_samples: dataset.len(),
        repetitions: config.repetitions,
        seconds,
        run_seconds,
        samples_per_sec: dataset.len() as f64 / seconds.max(f64::MIN_POSITIVE),
        peak_rss_bytes,
        latency: LatencyPercentiles::from_samples(latencies).expect("dataset is non-empty"),
    })
}
