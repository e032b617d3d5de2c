use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative error, in percent, at or below which a prediction is credible.
pub const PCL_TOLERANCE_PERCENT: f64 = 5.0;

// Absorbs rounding in the relative error so that e.g. 2.1 against 2.0 lands
// on the boundary instead of just past it.
const PCL_SLACK: f64 = 1e-9;

fn check(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::InvalidInput("metric over an empty set".into()));
    }
    if y.len() != yhat.len() {
        return Err(Error::InvalidInput(format!(
            "metric length mismatch: {} targets, {} predictions",
            y.len(),
            yhat.len()
        )));
    }
    Ok(())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Percentage of predictions within 5 % relative error (boundary included).
pub fn pcl5(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    if let Some(bad) = y.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::InvalidInput(format!("ground-truth range must be positive, got {bad}")));
    }
    let hits = y
        .iter()
        .zip(yhat)
        .filter(|(a, b)| (*a - *b).abs() / *a * 100.0 <= PCL_TOLERANCE_PERCENT + PCL_SLACK)
        .count();
    Ok(100.0 * hits as f64 / y.len() as f64)
}

/// Scores of one evaluation together with the predictions they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae_km: f64,
    pub mse_km2: f64,
    pub pcl5_percent: f64,
    /// `(segment index, y_km, yhat_km)`
    pub predictions: Vec<(usize, f64, f64)>,
}

impl MetricsReport {
    pub fn from_predictions(predictions: Vec<(usize, f64, f64)>) -> Result<Self> {
        let y: Vec<f64> = predictions.iter().map(|p| p.1).collect();
        let yhat: Vec<f64> = predictions.iter().map(|p| p.2).collect();
        if yhat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prediction".into()));
        }
        Ok(Self {
            mae_km: mae(&y, &yhat)?,
            mse_km2: mse(&y, &yhat)?,
            pcl5_percent: pcl5(&y, &yhat)?,
            predictions,
        })
    }

    /// True when the stored metrics are exactly what the predictions give.
    pub fn is_consistent(&self) -> bool {
        Self::from_predictions(self.predictions.clone()).is_ok_and(|r| r == *self)
    }
}
