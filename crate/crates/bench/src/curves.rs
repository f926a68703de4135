//! Sliding-window error curves against CPU time.

use mcis::estimators::EstimateSeries;

use crate::error::{config_error, Result};

/// Absolute errors below this are clamped before taking logs.
pub const ERROR_FLOOR: f64 = 1e-300;

/// One point of a windowed error curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    /// 1-based step at the window centre.
    pub step: usize,
    pub cpu_ns: u64,
    pub mean_log10_abs_error: f64,
}

pub fn log10_abs_errors(estimates: &[f64], truth: f64) -> Vec<f64> {
    estimates
        .iter()
        .map(|e| (e - truth).abs().max(ERROR_FLOOR).log10())
        .collect()
}

/// Centred sliding mean of `log10 |estimate - truth|`, evaluated only where
/// the window fits entirely, so the curve has `n - window + 1` points. Each
/// point is paired with the step and cumulative time at the window centre.
pub fn error_curve(series: &EstimateSeries, truth: f64, window: usize) -> Result<Vec<CurvePoint>> {
    if !truth.is_finite() {
        return Err(config_error(format!("truth must be finite, got {truth}")));
    }
    if window == 0 {
        return Err(config_error("window must be at least 1"));
    }
    let logs = log10_abs_errors(&series.estimates, truth);
    let n = logs.len();
    if window > n {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(n - window + 1);
    // A fresh sum per window avoids drift from a running add/subtract.
    for start in 0..=n - window {
        let mean = logs[start..start + window].iter().sum::<f64>() / window as f64;
        let centre = start + (window - 1) / 2;
        out.push(CurvePoint {
            step: centre + 1,
            cpu_ns: series.cpu_ns[centre],
            mean_log10_abs_error: mean,
        });
    }
    Ok(out)
}

/// Pointwise mean of curves of equal length, with the time axis averaged too.
pub fn average_curves(curves: &[Vec<CurvePoint>]) -> Vec<CurvePoint> {
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    let r = curves.len() as f64;
    (0..first.len())
        .map(|i| {
            let cpu = curves.iter().map(|c| c[i].cpu_ns as f64).sum::<f64>() / r;
            let err = curves
                .iter()
                .map(|c| c[i].mean_log10_abs_error)
                .sum::<f64>()
                / r;
            CurvePoint {
                step: first[i].step,
                cpu_ns: cpu.round() as u64,
                mean_log10_abs_error: err,
            }
        })
        .collect()
}
