use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric is undefined for zero samples")]
    Empty,
    #[error("length mismatch: {actual} targets, {predicted} predictions")]
    Length { actual: usize, predicted: usize },
    #[error("capacity must be positive and finite, got {0}")]
    Capacity(f64),
}

/// Capacity-normalized accuracy and its complement, both in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityScore {
    /// `(1 - sqrt(mean(((y - y_hat) / cap)^2))) * 100`.
    pub accuracy_pct: f64,
    /// `100 - accuracy_pct`, the figure the result tables print as "MAPE".
    pub error_pct: f64,
}

/// `sqrt(mean(((y - y_hat) / cap)^2))`.
pub fn capacity_rmse(y: &[f64], y_hat: &[f64], cap: f64) -> Result<f64, MetricError> {
    if y.len() != y_hat.len() {
        return Err(MetricError::Length {
            actual: y.len(),
            predicted: y_hat.len(),
        });
    }
    if y.is_empty() {
        return Err(MetricError::Empty);
    }
    if !(cap > 0.0 && cap.is_finite()) {
        return Err(MetricError::Capacity(cap));
    }
    let sum: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(a, p)| {
            let r = (a - p) / cap;
            r * r
        })
        .sum();
    Ok((sum / y.len() as f64).sqrt())
}

pub fn capacity_score(y: &[f64], y_hat: &[f64], cap: f64) -> Result<CapacityScore, MetricError> {
    let accuracy_pct = (1.0 - capacity_rmse(y, y_hat, cap)?) * 100.0;
    Ok(CapacityScore {
        accuracy_pct,
        error_pct: 100.0 - accuracy_pct,
    })
}
