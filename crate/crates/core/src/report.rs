//! Merge scenario runs into the comparison table and emit density-curve
//! data for plotting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvintError};
use crate::linalg::quantile_sorted;
use crate::prediction::Summary;

/// One comparison row as written by `predict`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub model: char,
    pub summary: Summary,
    /// Posterior mean and HPD of the discount factor, when the scenario has
    /// one.
    pub a_mean: Option<f64>,
    pub a_hpd: Option<(f64, f64)>,
}

/// Gaussian kernel density estimate on an even grid.
#[derive(Debug, Clone, Serialize)]
pub struct DensityCurve {
    pub model: char,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

/// Silverman's rule bandwidth.
pub fn silverman_bandwidth(draws: &[f64]) -> f64 {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread.max(1e-12) * n.powf(-0.2)
}

/// KDE over `points` grid cells covering the draws plus four bandwidths of
/// margin; the trapezoid integral of the result is 1 up to truncation error.
pub fn kernel_density(model: char, draws: &[f64], points: usize) -> Result<DensityCurve> {
    if draws.len() < 2 {
        return Err(SurvintError::data("too_few_draws", "density needs draws"));
    }
    let h = silverman_bandwidth(draws);
    let min = draws.iter().cloned().fold(f64::INFINITY, f64::min) - 4.0 * h;
    let max = draws.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;
    let k = points.max(16);
    let step = (max - min) / (k - 1) as f64;
    let norm = 1.0 / (draws.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..k).map(|i| min + step * i as f64).collect();
    let density: Vec<f64> = grid
        .iter()
        .map(|&g| {
            draws
                .iter()
                .map(|&d| {
                    let z = (g - d) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(DensityCurve {
        model,
        grid,
        density,
        bandwidth: h,
    })
}

pub fn trapezoid_integral(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(g, v)| 0.5 * (v[0] + v[1]) * (g[1] - g[0]))
        .sum()
}

/// Ordered comparison table: B, C, D, E, G first, anything else after.
pub fn order_runs(mut runs: Vec<ScenarioRun>) -> Vec<ScenarioRun> {
    let rank = |c: char| "BCDEG".find(c).unwrap_or(usize::MAX);
    runs.sort_by_key(|r| rank(r.model));
    runs
}

/// Collect `predict_*.json` run files from a directory.
pub fn collect_runs(dir: &Path) -> Result<Vec<ScenarioRun>> {
    let mut runs = Vec::new();
    let entries =
        std::fs::read_dir(dir).map_err(|e| SurvintError::io(dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| SurvintError::io(dir.display().to_string(), e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("predict_") && name.ends_with(".json") {
            let text = std::fs::read_to_string(entry.path())
                .map_err(|e| SurvintError::io(name.clone(), e))?;
            let run: ScenarioRun = serde_json::from_str(&text)
                .map_err(|e| SurvintError::data("bad_run_file", format!("{name}: {e}")))?;
            runs.push(run);
        }
    }
    if runs.is_empty() {
        return Err(SurvintError::data(
            "no_runs_found",
            format!("no predict_*.json files in {}", dir.display()),
        ));
    }
    Ok(order_runs(runs))
}
