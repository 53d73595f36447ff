//! Station time series, windowing into forecasting samples, the
//! capacity-normalized metric, synthetic data and evaluation reports.

mod dataset;
mod eval;
mod metric;
mod series;
mod synth;

use thiserror::Error;

pub use dataset::{window, DatasetSplit, ForecastDataset, Sample};
pub use eval::{
    bench, evaluate, predict_dataset, BenchConfig, BenchReport, EvalConfig, EvalError, EvalReport, LatencyPercentiles,
    PeakRss, StationReport,
};
pub use metric::{capacity_rmse, capacity_score, CapacityScore, MetricError};
pub use series::{ingest_csv, write_csv, CsvOptions, GapPolicy, StationMeta, StationSeries, STEP_MINUTES};
pub use synth::{generate_synthetic, SynthConfig};

/// Fractional tolerance above capacity accepted on ingestion.
pub const CAPACITY_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("metadata: {0}")]
    Metadata(String),
    #[error("header: {0}")]
    Header(String),
    #[error("row {row}: cannot parse timestamp {value:?} (expected ISO-8601)")]
    Timestamp { row: usize, value: String },
    #[error("row {row}: cannot parse value {value:?} for station {station}")]
    Value { row: usize, station: String, value: String },
    #[error("row {row}: timestamp {timestamp} is not after the previous row")]
    NonMonotonic { row: usize, timestamp: String },
    #[error("row {row}: spacing of {minutes} min is not a multiple of {STEP_MINUTES} min")]
    Spacing { row: usize, minutes: i64 },
    #[error("row {row}: gap of {missing} missing steps before {timestamp}")]
    Gap { row: usize, missing: i64, timestamp: String },
    #[error("station {station} at {timestamp}: negative power {value}")]
    Negative { station: String, timestamp: String, value: f64 },
    #[error("station {station} at {timestamp}: power {value} exceeds capacity {capacity} by more than 5%")]
    ExceedsCapacity {
        station: String,
        timestamp: String,
        value: f64,
        capacity: f64,
    },
    #[error("misaligned series: {0}")]
    Alignment(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
