//! Accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `1 − Σ(x−y)² / Σ(x−ȳ)²` with ȳ the mean prediction.
    pub r2: Option<f64>,
    /// Conventional coefficient of determination (observed mean in the denominator).
    pub r2_conventional: Option<f64>,
    pub rmse: f64,
    /// `rmse / ȳ · 100`.
    pub rrmse_pct: Option<f64>,
    pub n: usize,
    /// Least-squares line of predicted on observed.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

/// Ordinary least squares `y = slope·x + intercept`; `None` when x has no spread.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= f64::EPSILON * xs.iter().map(|x| x * x).sum::<f64>() {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Metrics of predictions `predicted` against reference `observed`.
pub fn metrics(observed: &[f64], predicted: &[f64]) -> Result<MetricsReport> {
    let n = observed.len();
    if n == 0 {
        return Err(Error::Insufficient("metrics need at least one pair".into()));
    }
    if predicted.len() != n {
        return Err(Error::Shape(format!("{n} observed vs {} predicted values", predicted.len())));
    }
    let y_bar = predicted.iter().sum::<f64>() / n as f64;
    let x_bar = observed.iter().sum::<f64>() / n as f64;
    let sse: f64 = observed.iter().zip(predicted).map(|(x, y)| (x - y).powi(2)).sum();
    let ratio = |den: f64| (n >= 2 && den > 0.0).then(|| 1.0 - sse / den);
    let rmse = (sse / n as f64).sqrt();
    let line = fit_line(observed, predicted);
    Ok(MetricsReport {
        r2: ratio(observed.iter().map(|x| (x - y_bar).powi(2)).sum()),
        r2_conventional: ratio(observed.iter().map(|x| (x - x_bar).powi(2)).sum()),
        rmse,
        rrmse_pct: (y_bar != 0.0).then(|| rmse / y_bar * 100.0),
        n,
        slope: line.map(|l| l.0),
        intercept: line.map(|l| l.1),
    })
}
