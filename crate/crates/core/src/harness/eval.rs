//! Forecast metrics on the dataset-standardized scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::series::WindowSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub values: usize,
    pub trainable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scheme: String,
    pub horizons: Vec<HorizonMetrics>,
    pub avg_mse: f64,
    pub avg_mae: f64,
    pub trainable: usize,
    pub total: usize,
    pub seconds_per_iter: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    /// Trainable count is the largest over the horizons.
    pub fn new(scheme: &str, horizons: Vec<HorizonMetrics>, total: usize, seed: u64, config_hash: &str) -> Self {
        let n = horizons.len().max(1) as f64;
        EvalReport {
            trainable: horizons.iter().map(|h| h.trainable).max().unwrap_or(0),
            scheme: scheme.into(),
            avg_mse: horizons.iter().map(|h| h.mse).sum::<f64>() / n,
            avg_mae: horizons.iter().map(|h| h.mae).sum::<f64>() / n,
            horizons,
            total,
            seconds_per_iter: None,
            seed,
            config_hash: config_hash.into(),
        }
    }
}

/// MSE and MAE over every value of aligned prediction/target rows.
pub fn metrics(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, f64, usize)> {
    if predictions.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} forecasts for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (p, t) in predictions.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::Contract("forecast and target lengths differ".into()));
        }
        for (a, b) in p.iter().zip(t) {
            se += (a - b) * (a - b);
            ae += (a - b).abs();
        }
        n += p.len();
    }
    if n == 0 {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    Ok((se / n as f64, ae / n as f64, n))
}

/// Forecasts every test window and scores it against its future.
pub fn evaluate(model: &Model, test: &[WindowSample], horizon: usize, use_head: bool) -> Result<(HorizonMetrics, Vec<Vec<f64>>)> {
    if test.is_empty() {
        return Err(Error::Dataset("empty test split".into()));
    }
    let predictions = model.forecast(test, horizon, use_head)?;
    let targets: Vec<Vec<f64>> = test.iter().map(|w| w.future.clone()).collect();
    let (mse, mae, values) = metrics(&predictions, &targets)?;
    let trainable = model.store.trainable_count();
    Ok((HorizonMetrics { horizon, mse, mae, values, trainable }, predictions))
}
