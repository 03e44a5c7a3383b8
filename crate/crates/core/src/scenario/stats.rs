use serde::{Deserialize, Serialize};

use crate::error::ScenarioError;

/// Boxplot statistics of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Percentile `p` in `[0, 1]` of sorted data, interpolating linearly
/// between order statistics at rank `p (n - 1)`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Result<Summary, ScenarioError> {
    if values.is_empty() {
        return Err(ScenarioError::EmptySample);
    }
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    Ok(Summary {
        count: xs.len(),
        mean: xs.iter().sum::<f64>() / xs.len() as f64,
        median: percentile_sorted(&xs, 0.5),
        q25: percentile_sorted(&xs, 0.25),
        q75: percentile_sorted(&xs, 0.75),
    })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}
