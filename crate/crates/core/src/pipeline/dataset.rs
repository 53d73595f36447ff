use chrono::{NaiveDateTime, TimeDelta};

use super::series::{format_timestamp, StationSeries, STEP_MINUTES};
use super::DataError;
use crate::tensor::Tensor;

/// One forecasting sample anchored at grid index `anchor`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[n, k]` lagged powers: `x[i][j]` is station `i` at `anchor - j`.
    pub x: Tensor<f64>,
    /// `[1, n]` powers at `anchor + h`.
    pub y: Tensor<f64>,
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDataset {
    pub samples: Vec<Sample>,
    /// The shared timestamp grid the anchors index into.
    pub timestamps: Vec<NaiveDateTime>,
    pub station_ids: Vec<String>,
    pub capacities: Vec<f64>,
    pub n_stations: usize,
    pub input_window: usize,
    pub horizon: usize,
}

/// Chronological partition of a dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: ForecastDataset,
    pub val: ForecastDataset,
    pub test: ForecastDataset,
}

impl ForecastDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            samples,
            timestamps: self.timestamps.clone(),
            station_ids: self.station_ids.clone(),
            capacities: self.capacities.clone(),
            n_stations: self.n_stations,
            input_window: self.input_window,
            horizon: self.horizon,
        }
    }

    /// Samples `start..end` (clamped).
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.len());
        let start = start.min(end);
        self.with_samples(self.samples[start..end].to_vec())
    }

    /// The last `count` samples (all of them if fewer exist).
    pub fn tail(&self, count: usize) -> Self {
        self.slice(self.len().saturating_sub(count), self.len())
    }

    /// First 70% train, next 15% validation, remainder test, in time order.
    pub fn split_chronological(&self) -> DatasetSplit {
        let n = self.len();
        let n_train = n * 70 / 100;
        let n_val = n * 15 / 100;
        DatasetSplit {
            train: self.slice(0, n_train),
            val: self.slice(n_train, n_train + n_val),
            test: self.slice(n_train + n_val, n),
        }
    }

    /// Inputs stacked as `[B, n, k]`.
    pub fn stacked_inputs(&self) -> Tensor<f64> {
        let (n, k) = (self.n_stations, self.input_window);
        let mut data = Vec::with_capacity(self.len() * n * k);
        for s in &self.samples {
            data.extend_from_slice(s.x.data());
        }
        Tensor::from_parts(vec![self.len(), n, k], data)
    }
}

/// Builds one sample per anchor `t` in `k-1 ..= T-1-h`, i.e.
/// `T - (k-1) - h` samples on a gap-free grid. Anchors whose window or
/// target touches an imputed point or an irregular step are skipped.
pub fn window(series: &[StationSeries], k: usize, h: usize) -> Result<ForecastDataset, DataError> {
    if k == 0 || h == 0 {
        return Err(DataError::Config("window k and horizon h must be >= 1".into()));
    }
    let first = series.first().ok_or_else(|| DataError::Config("no station series".into()))?;
    for s in series {
        if s.power.len() != s.timestamps.len() || s.imputed.len() != s.timestamps.len() {
            return Err(DataError::Alignment(format!(
                "station {}: {} timestamps, {} values, {} flags",
                s.station_id,
                s.timestamps.len(),
                s.power.len(),
                s.imputed.len()
            )));
        }
        if let Some(i) = (0..s.len().max(first.len())).find(|&i| s.timestamps.get(i) != first.timestamps.get(i)) {
            let show = |t: Option<&NaiveDateTime>| t.map_or("<end>".to_owned(), format_timestamp);
            return Err(DataError::Alignment(format!(
                "index {i}: station {} has {}, station {} has {}",
                first.station_id,
                show(first.timestamps.get(i)),
                s.station_id,
                show(s.timestamps.get(i))
            )));
        }
    }

    let n = series.len();
    let len = first.len();
    // Prefix counts of imputed points and of irregular steps into point t.
    let step = TimeDelta::minutes(STEP_MINUTES);
    let mut imputed = vec![0usize; len + 1];
    let mut irregular = vec![0usize; len + 1];
    for t in 0..len {
        imputed[t + 1] = imputed[t] + series.iter().any(|s| s.imputed[t]) as usize;
        let jump = t > 0 && first.timestamps[t] - first.timestamps[t - 1] != step;
        irregular[t + 1] = irregular[t] + jump as usize;
    }

    let mut samples = Vec::new();
    if len >= k + h {
        for anchor in (k - 1)..(len - h) {
            let lo = anchor + 1 - k;
            let hi = anchor + h;
            if imputed[hi + 1] != imputed[lo] || irregular[hi + 1] != irregular[lo + 1] {
                continue;
            }
            let mut x = Vec::with_capacity(n * k);
            for s in series {
                x.extend((0..k).map(|j| s.power[anchor - j]));
            }
            let y = series.iter().map(|s| s.power[anchor + h]).collect();
            samples.push(Sample {
                x: Tensor::from_parts(vec![n, k], x),
                y: Tensor::from_parts(vec![1, n], y),
                anchor,
            });
        }
    }
    Ok(ForecastDataset {
        samples,
        timestamps: first.timestamps.clone(),
        station_ids: series.iter().map(|s| s.station_id.clone()).collect(),
        capacities: series.iter().map(|s| s.capacity_kw).collect(),
        n_stations: n,
        input_window: k,
        horizon: h,
    })
}
