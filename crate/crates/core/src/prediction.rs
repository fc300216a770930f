//! Posterior inference for the finite population mean.
//!
//! Given parameter draws and estimated population facts, each draw of the
//! mean comes from the population model aggregate
//! `Ybar | beta, sigma^2 ~ Normal(xbar' beta, sigma^2 / N)` — surrogate
//! composition: no survey weights enter this step. The closed-form t-pivot
//! offers a robustness check at fixed discount factor.

use serde::{Deserialize, Serialize};

use crate::dataset::PopulationFacts;
use crate::error::{Result, SurvintError};
use crate::posterior::{GridPoint, PosteriorDraws};
use crate::rngstat::{draw_normal, RngStream};

/// Summary statistics of a scalar posterior sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub pm: f64,
    pub psd: f64,
    pub pcv: f64,
    pub nse: f64,
    pub hpd_lower: f64,
    pub hpd_upper: f64,
    pub hpd_level: f64,
}

impl Summary {
    pub fn width(&self) -> f64 {
        self.hpd_upper - self.hpd_lower
    }

    pub fn covers(&self, value: f64) -> bool {
        value >= self.hpd_lower && value <= self.hpd_upper
    }
}

/// Draws of the finite population mean plus their summary.
#[derive(Debug, Clone)]
pub struct MeanPosterior {
    pub draws: Vec<f64>,
    pub summary: Summary,
}

/// Monte Carlo composition of the population-mean posterior: one normal draw
/// per parameter draw.
pub fn surrogate_mean_draws(post: &PosteriorDraws, facts: &PopulationFacts) -> Result<MeanPosterior> {
    if !(facts.n_hat > 0.0) {
        return Err(SurvintError::data(
            "nonpositive_population_size",
            format!("N_hat = {}", facts.n_hat),
        ));
    }
    let p = post.p();
    if facts.xbar_hat.len() != p {
        return Err(SurvintError::data(
            "dimension_mismatch",
            format!(
                "facts carry {} covariate means, posterior has p={p}",
                facts.xbar_hat.len()
            ),
        ));
    }
    let stream = RngStream::new(post.scenario.seed, 0x59_4241_52);
    let m = post.m();
    let mut draws = Vec::with_capacity(m);
    for k in 0..m {
        let mut rng = stream.substream(k as u64);
        let mut mean = 0.0;
        for j in 0..p {
            mean += facts.xbar_hat[j] * post.beta[(k, j)];
        }
        let sd = (post.sigma2[k] / facts.n_hat).sqrt();
        draws.push(draw_normal(mean, sd, &mut rng));
    }
    let summary = summarize(&draws, 0.95)?;
    Ok(MeanPosterior { draws, summary })
}

/// Which scale expression the t-pivot uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PivotScaleForm {
    /// `sqrt((1/N + d xbar' A^{-1} xbar) / dof)` — the display as printed.
    AsPrinted,
    /// `sqrt(d (1/N + xbar' A^{-1} xbar) / dof)` — the dimensionally
    /// consistent form, which the composition sampler actually follows.
    DimensionallyConsistent,
}

#[derive(Debug, Clone, Copy)]
pub struct PivotParams {
    pub center: f64,
    pub scale: f64,
    pub dof: usize,
}

/// Closed-form t-pivot of the mean at a fixed discount factor. `point` is
/// the cached grid point at that factor and `dof = n1 + n2 - p`.
pub fn t_pivot_params(
    point: &GridPoint,
    dof: usize,
    facts: &PopulationFacts,
    form: PivotScaleForm,
) -> Result<PivotParams> {
    if !(point.d > 0.0) {
        return Err(SurvintError::numeric("pivot_requires_positive_residual"));
    }
    let xbar = facts.xbar();
    let center = xbar.dot(&point.beta_hat);
    // xbar' A^{-1} xbar = || L^{-1} xbar ||^2
    let li = point
        .l
        .solve_lower_triangular(&xbar)
        .ok_or_else(|| SurvintError::numeric("triangular_solve_failed"))?;
    let quad = li.dot(&li);
    let scale2 = match form {
        PivotScaleForm::AsPrinted => (1.0 / facts.n_hat + point.d * quad) / dof as f64,
        PivotScaleForm::DimensionallyConsistent => {
            point.d * (1.0 / facts.n_hat + quad) / dof as f64
        }
    };
    if !(scale2 > 0.0) {
        return Err(SurvintError::numeric(format!("pivot_scale_nonpositive {scale2}")));
    }
    Ok(PivotParams {
        center,
        scale: scale2.sqrt(),
        dof,
    })
}

/// PM, PSD, PCV, NSE and the shortest `level`-interval of sorted draws.
/// Draws are independent here (the samplers are not Markov chains), so the
/// numerical standard error is simply `PSD / sqrt(M)`.
pub fn summarize(draws: &[f64], hpd_level: f64) -> Result<Summary> {
    let m = draws.len();
    if m < 100 {
        return Err(SurvintError::data(
            "too_few_draws",
            format!("{m} draws; at least 100 are required for interval reporting"),
        ));
    }
    if !(hpd_level > 0.0 && hpd_level < 1.0) {
        return Err(SurvintError::usage(format!(
            "hpd level {hpd_level} must lie strictly inside (0,1)"
        )));
    }
    // All statistics are computed on the sorted draws, which makes the
    // summary exactly invariant to the input ordering.
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pm = sorted.iter().sum::<f64>() / m as f64;
    let var = sorted.iter().map(|v| (v - pm).powi(2)).sum::<f64>() / (m - 1) as f64;
    let psd = var.sqrt();
    let (hpd_lower, hpd_upper) = hpd_interval(&sorted, hpd_level);
    Ok(Summary {
        pm,
        psd,
        pcv: if pm != 0.0 { psd / pm.abs() } else { f64::INFINITY },
        nse: psd / (m as f64).sqrt(),
        hpd_lower,
        hpd_upper,
        hpd_level,
    })
}

/// Shortest window containing `ceil(level * M)` sorted draws; ties break
/// toward the lower start index.
pub fn hpd_interval(draws: &[f64], level: f64) -> (f64, f64) {
    let m = draws.len();
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((level * m as f64).ceil() as usize).clamp(1, m);
    let mut best = 0usize;
    let mut best_width = f64::INFINITY;
    for start in 0..=(m - k) {
        let width = sorted[start + k - 1] - sorted[start];
        if width < best_width {
            best_width = width;
            best = start;
        }
    }
    (sorted[best], sorted[best + k - 1])
}

/// Equal-tailed interval, used as a cross-check against the HPD.
pub fn equal_tailed_interval(draws: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    (
        crate::linalg::quantile_sorted(&sorted, alpha),
        crate::linalg::quantile_sorted(&sorted, 1.0 - alpha),
    )
}
