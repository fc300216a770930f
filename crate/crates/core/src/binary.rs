//! Binary study variable: weighted logistic sample model, griddy Gibbs over
//! the discount factor and coefficients, constrained resampling of the
//! population covariates, and surrogate sampling of the finite population
//! proportion.
//!
//! The sample model raises each unit's success log-odds by its discounted
//! adjusted weight: `P(y_si = 1 | a, beta) = logistic(a_s w_si x_si' beta)`
//! with `a_1 = a`, `a_2 = 1`. Under the flat prior on `(a, beta)` the joint
//! log posterior is
//!
//! ```text
//! sum_s sum_i [ a_s w_si x_si' beta y_si - log(1 + exp(a_s w_si x_si' beta)) ]
//! ```
//!
//! which is concave in `beta` for fixed `a`, so every full conditional is
//! unimodal and a griddy Gibbs sweep (conditional evaluated on a moving grid,
//! inverse CDF with linear interpolation) mixes well.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Result, SurvintError};
use crate::linalg::{logistic, softplus, spd_cholesky, weighted_cross};
use crate::prediction::{summarize, MeanPosterior};
use crate::rngstat::{draw_uniform, RngStream};

/// The two weighted samples entering the binary model.
#[derive(Debug, Clone)]
pub struct BinarySamples<'a> {
    pub nps_x: &'a DMatrix<f64>,
    pub nps_y: &'a DVector<f64>,
    /// Adjusted nps weights.
    pub w1: &'a DVector<f64>,
    pub ps_x: &'a DMatrix<f64>,
    pub ps_y: &'a DVector<f64>,
    /// Adjusted ps weights.
    pub w2: &'a DVector<f64>,
}

impl<'a> BinarySamples<'a> {
    pub fn p(&self) -> usize {
        self.nps_x.ncols()
    }

    fn validate(&self) -> Result<()> {
        let p = self.p();
        if self.ps_x.ncols() != p {
            return Err(SurvintError::data(
                "dimension_mismatch",
                format!("nps p={p} vs ps p={}", self.ps_x.ncols()),
            ));
        }
        for (y, n) in [
            (self.nps_y, self.nps_x.nrows()),
            (self.ps_y, self.ps_x.nrows()),
        ] {
            if y.len() != n {
                return Err(SurvintError::data(
                    "dimension_mismatch",
                    format!("responses {} vs rows {n}", y.len()),
                ));
            }
            if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(SurvintError::data(
                    "non_binary_response",
                    "binary model requires responses in {0, 1}",
                ));
            }
        }
        if self.w1.len() != self.nps_x.nrows() || self.w2.len() != self.ps_x.nrows() {
            return Err(SurvintError::data("dimension_mismatch", "weight lengths"));
        }
        Ok(())
    }
}

/// Joint log posterior at `(a, beta)` under the flat prior.
pub fn binary_log_posterior(a: f64, beta: &DVector<f64>, samples: &BinarySamples) -> Result<f64> {
    samples.validate()?;
    if beta.len() != samples.p() {
        return Err(SurvintError::data(
            "dimension_mismatch",
            format!("beta {} vs p {}", beta.len(), samples.p()),
        ));
    }
    let mut ll = 0.0;
    let g1 = samples.nps_x * beta;
    for i in 0..g1.len() {
        let c = a * samples.w1[i];
        ll += samples.nps_y[i] * c * g1[i] - softplus(c * g1[i]);
    }
    let g2 = samples.ps_x * beta;
    for i in 0..g2.len() {
        let c = samples.w2[i];
        ll += samples.ps_y[i] * c * g2[i] - softplus(c * g2[i]);
    }
    Ok(ll)
}

/// Gradient in `beta` of the joint log posterior at fixed `a`.
pub fn binary_beta_gradient(a: f64, beta: &DVector<f64>, samples: &BinarySamples) -> Result<DVector<f64>> {
    samples.validate()?;
    let p = samples.p();
    let mut g = DVector::zeros(p);
    let g1 = samples.nps_x * beta;
    for i in 0..g1.len() {
        let c = a * samples.w1[i];
        let r = c * (samples.nps_y[i] - logistic(c * g1[i]));
        for j in 0..p {
            g[j] += r * samples.nps_x[(i, j)];
        }
    }
    let g2 = samples.ps_x * beta;
    for i in 0..g2.len() {
        let c = samples.w2[i];
        let r = c * (samples.ps_y[i] - logistic(c * g2[i]));
        for j in 0..p {
            g[j] += r * samples.ps_x[(i, j)];
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy)]
pub struct GibbsSpec {
    pub grid_points: usize,
    pub burnin: usize,
    pub thin: usize,
    pub draws: usize,
    pub a_min: f64,
    pub a_max: f64,
    pub seed: u64,
}

impl Default for GibbsSpec {
    fn default() -> Self {
        Self {
            grid_points: 201,
            burnin: 1000,
            thin: 5,
            draws: 5000,
            a_min: 0.0,
            a_max: 1.0,
            seed: 1,
        }
    }
}

/// Per-coordinate mixing diagnostics.
#[derive(Debug, Clone)]
pub struct CoordinateDiagnostics {
    pub mean_abs_move: f64,
    /// Largest single-sweep conditional mass observed in an edge cell.
    pub max_edge_mass: f64,
}

#[derive(Debug, Clone)]
pub struct BinaryPosteriorDraws {
    pub beta: DMatrix<f64>,
    pub a: Vec<f64>,
    pub diagnostics: Vec<CoordinateDiagnostics>,
}

/// Draw from a log-density tabulated on `grid` by piecewise-linear inverse
/// CDF (trapezoid masses, linear interpolation inside the chosen cell).
/// Returns the draw and the index of the heaviest cell.
fn griddy_draw(grid: &[f64], logd: &[f64], u: f64) -> (f64, usize) {
    let k = grid.len();
    let max = logd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logd.iter().map(|&l| (l - max).exp()).collect();
    let mut cell = vec![0.0; k - 1];
    let mut total = 0.0;
    for i in 0..k - 1 {
        cell[i] = 0.5 * (w[i] + w[i + 1]) * (grid[i + 1] - grid[i]);
        total += cell[i];
    }
    let argmax = w
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    if total <= 0.0 {
        return (grid[argmax], argmax);
    }
    let target = u * total;
    let mut acc = 0.0;
    for i in 0..k - 1 {
        if acc + cell[i] >= target {
            let frac = ((target - acc) / cell[i]).clamp(0.0, 1.0);
            return (grid[i] + frac * (grid[i + 1] - grid[i]), argmax);
        }
        acc += cell[i];
    }
    (grid[k - 1], argmax)
}

/// Pilot mode and curvature for the coordinate grids: Newton on `beta` at
/// the midpoint discount factor.
fn pilot_fit(samples: &BinarySamples, a: f64) -> Result<(DVector<f64>, Vec<f64>)> {
    let p = samples.p();
    let mut beta = DVector::zeros(p);
    for _ in 0..50 {
        let grad = binary_beta_gradient(a, &beta, samples)?;
        // Negative Hessian: sum c^2 pi (1-pi) x x'.
        let mut curv1: Vec<f64> = Vec::with_capacity(samples.nps_x.nrows());
        let g1 = samples.nps_x * &beta;
        for i in 0..g1.len() {
            let c = a * samples.w1[i];
            let pi = logistic(c * g1[i]);
            curv1.push(c * c * pi * (1.0 - pi));
        }
        let mut neg_h = weighted_cross(samples.nps_x, &curv1);
        let g2 = samples.ps_x * &beta;
        let mut curv2: Vec<f64> = Vec::with_capacity(samples.ps_x.nrows());
        for i in 0..g2.len() {
            let c = samples.w2[i];
            let pi = logistic(c * g2[i]);
            curv2.push(c * c * pi * (1.0 - pi));
        }
        neg_h += weighted_cross(samples.ps_x, &curv2);
        let chol = spd_cholesky(neg_h.clone(), "binary_pilot_hessian")?;
        let step = chol.solve(&grad);
        beta += &step;
        if step.norm() < 1e-8 {
            let inv_diag: Vec<f64> = (0..p)
                .map(|j| {
                    let mut e = DVector::zeros(p);
                    e[j] = 1.0;
                    chol.solve(&e)[j].max(1e-12).sqrt()
                })
                .collect();
            return Ok((beta, inv_diag));
        }
    }
    Err(SurvintError::numeric("binary_pilot_nonconvergence"))
}

/// Cyclic griddy Gibbs over `(beta_1, ..., beta_p, a)`.
///
/// Each `beta_j` conditional is evaluated on a grid of `grid_points` values
/// centered at the current state with half-width six pilot standard
/// deviations; `a` uses a fixed grid on `[a_min, a_max]`. Setting
/// `a_min == a_max` pins the discount factor. Apparent separation (all
/// conditional mass in an edge cell for three consecutive sweeps) aborts.
pub fn griddy_gibbs_binary(samples: &BinarySamples, spec: &GibbsSpec) -> Result<BinaryPosteriorDraws> {
    samples.validate()?;
    if !(spec.a_min >= 0.0 && spec.a_max <= 1.0 && spec.a_min <= spec.a_max) {
        return Err(SurvintError::usage(format!(
            "discount range [{}, {}] must sit inside [0, 1]",
            spec.a_min, spec.a_max
        )));
    }
    let p = samples.p();
    let k = spec.grid_points.max(11);
    let a_fixed = spec.a_min == spec.a_max;
    let a_mid = 0.5 * (spec.a_min + spec.a_max);
    let (pilot_beta, pilot_sd) = pilot_fit(samples, a_mid.max(1e-3))?;

    // Running linear predictors (without weights): g = x beta.
    let mut beta = pilot_beta.clone();
    let mut g1 = samples.nps_x * &beta;
    let mut g2 = samples.ps_x * &beta;
    let mut a = a_mid;

    let n1 = samples.nps_x.nrows();
    let n2 = samples.ps_x.nrows();
    let stream = RngStream::new(spec.seed, 0x42_494e);
    let total_sweeps = spec.burnin + spec.thin.max(1) * spec.draws;

    let mut out_beta = DMatrix::zeros(spec.draws, p);
    let mut out_a = Vec::with_capacity(spec.draws);
    let mut kept = 0usize;
    let mut moves = vec![0.0f64; p + 1];
    let mut edge_mass = vec![0.0f64; p + 1];
    let mut edge_streak = vec![0usize; p + 1];

    let a_grid: Vec<f64> = if a_fixed {
        vec![a_mid]
    } else {
        (0..k)
            .map(|i| spec.a_min + (spec.a_max - spec.a_min) * i as f64 / (k - 1) as f64)
            .collect()
    };

    for sweep in 0..total_sweeps {
        let mut rng = stream.substream(sweep as u64);
        for j in 0..p {
            let center = beta[j];
            let half = 6.0 * pilot_sd[j];
            let grid: Vec<f64> = (0..k)
                .map(|i| center - half + 2.0 * half * i as f64 / (k - 1) as f64)
                .collect();
            // Conditional log density at each grid value, using the running
            // linear predictors: moving beta_j to t shifts g_i by
            // x_ij (t - beta_j).
            let logd: Vec<f64> = grid
                .par_iter()
                .map(|&t| {
                    let dt = t - center;
                    let mut ll = 0.0;
                    for i in 0..n1 {
                        let c = a * samples.w1[i];
                        let g = g1[i] + samples.nps_x[(i, j)] * dt;
                        ll += samples.nps_y[i] * c * g - softplus(c * g);
                    }
                    for i in 0..n2 {
                        let c = samples.w2[i];
                        let g = g2[i] + samples.ps_x[(i, j)] * dt;
                        ll += samples.ps_y[i] * c * g - softplus(c * g);
                    }
                    ll
                })
                .collect();
            let (draw, argmax) = griddy_draw(&grid, &logd, draw_uniform(&mut rng));
            if argmax == 0 || argmax == k - 1 {
                edge_streak[j] += 1;
                if edge_streak[j] >= 3 {
                    return Err(SurvintError::numeric(format!(
                        "binary_separation conditional mass stuck at the grid edge for beta_{j}"
                    )));
                }
            } else {
                edge_streak[j] = 0;
            }
            let max = logd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w0 = (logd[0] - max).exp();
            let wk = (logd[k - 1] - max).exp();
            let wsum: f64 = logd.iter().map(|&l| (l - max).exp()).sum();
            edge_mass[j] = edge_mass[j].max((w0 + wk) / wsum);
            moves[j] += (draw - center).abs();
            let dt = draw - center;
            if dt != 0.0 {
                for i in 0..n1 {
                    g1[i] += samples.nps_x[(i, j)] * dt;
                }
                for i in 0..n2 {
                    g2[i] += samples.ps_x[(i, j)] * dt;
                }
            }
            beta[j] = draw;
        }

        if !a_fixed {
            // Only the nps terms involve a.
            let logd: Vec<f64> = a_grid
                .par_iter()
                .map(|&t| {
                    let mut ll = 0.0;
                    for i in 0..n1 {
                        let c = t * samples.w1[i];
                        ll += samples.nps_y[i] * c * g1[i] - softplus(c * g1[i]);
                    }
                    ll
                })
                .collect();
            let (draw, argmax) = griddy_draw(&a_grid, &logd, draw_uniform(&mut rng));
            if argmax == 0 || argmax == k - 1 {
                edge_streak[p] += 1;
            } else {
                edge_streak[p] = 0;
            }
            moves[p] += (draw - a).abs();
            a = draw.clamp(spec.a_min, spec.a_max);
        }

        if sweep >= spec.burnin && (sweep - spec.burnin) % spec.thin.max(1) == 0 && kept < spec.draws
        {
            out_beta.row_mut(kept).copy_from(&beta.transpose());
            out_a.push(a);
            kept += 1;
        }
    }
    if kept < spec.draws {
        return Err(SurvintError::numeric(format!(
            "gibbs_underrun kept {kept} of {} draws",
            spec.draws
        )));
    }

    let sweeps = total_sweeps as f64;
    let diagnostics = (0..=p)
        .map(|j| CoordinateDiagnostics {
            mean_abs_move: moves[j] / sweeps,
            max_edge_mass: edge_mass[j],
        })
        .collect();
    Ok(BinaryPosteriorDraws {
        beta: out_beta,
        a: out_a,
        diagnostics,
    })
}

/// A resampled covariate matrix for the whole population.
#[derive(Debug, Clone)]
pub struct SurrogatePopulation {
    pub x_pop: DMatrix<f64>,
    /// Componentwise `sum x - target` relative to the target scale.
    pub residual: DVector<f64>,
    pub tries: usize,
}

/// Replace a continuous column by the midpoints of fixed-width classes.
pub fn discretize_column(x: &mut DMatrix<f64>, col: usize, width: f64) {
    for i in 0..x.nrows() {
        let v = x[(i, col)];
        x[(i, col)] = (v / width).floor() * width + width / 2.0;
    }
}

/// Draw `n_pop` rows with replacement from `pool` until the column totals
/// match `target` within `tolerance` (relative, componentwise), as required
/// for surrogate sampling when the nonsampled covariates are unknown.
pub fn resample_population_covariates(
    pool: &DMatrix<f64>,
    n_pop: usize,
    target: &DVector<f64>,
    tolerance: f64,
    max_tries: usize,
    stream: &RngStream,
) -> Result<SurrogatePopulation> {
    let p = pool.ncols();
    if target.len() != p {
        return Err(SurvintError::data(
            "dimension_mismatch",
            format!("target {} vs p {p}", target.len()),
        ));
    }
    let rows = pool.nrows();
    if rows == 0 {
        return Err(SurvintError::data("empty_pool", "no rows to resample"));
    }
    let mut best: Option<(f64, DMatrix<f64>, DVector<f64>)> = None;
    for t in 0..max_tries.max(1) {
        let mut rng = stream.substream(t as u64);
        let mut x = DMatrix::<f64>::zeros(n_pop, p);
        let mut totals = DVector::<f64>::zeros(p);
        for i in 0..n_pop {
            let r = (draw_uniform(&mut rng) * rows as f64) as usize;
            let r = r.min(rows - 1);
            for j in 0..p {
                let v = pool[(r, j)];
                x[(i, j)] = v;
                totals[j] += v;
            }
        }
        let rel = DVector::from_fn(p, |j, _| {
            (totals[j] - target[j]) / target[j].abs().max(1.0)
        });
        let worst = rel.amax();
        if worst <= tolerance {
            return Ok(SurrogatePopulation {
                x_pop: x,
                residual: rel,
                tries: t + 1,
            });
        }
        if best.as_ref().map_or(true, |(b, _, _)| worst < *b) {
            best = Some((worst, x, rel));
        }
    }
    let (worst, _, _) = best.expect("at least one try");
    Err(SurvintError::numeric(format!(
        "resampling_exhausted best relative residual {worst:.4} after {max_tries} tries (tolerance {tolerance})"
    )))
}

#[derive(Debug, Clone, Copy)]
pub struct SurrogateProportionSpec {
    /// Resample a fresh population every this many retained draws.
    pub refresh_every: usize,
    pub tolerance: f64,
    pub max_tries: usize,
    pub seed: u64,
}

impl Default for SurrogateProportionSpec {
    fn default() -> Self {
        Self {
            refresh_every: 10,
            tolerance: 0.01,
            max_tries: 1000,
            seed: 1,
        }
    }
}

/// Score each retained posterior draw on a surrogate population: unit `i`
/// succeeds when `u_i <= logistic(x_i' beta)`, and the finite population
/// proportion is the mean.
pub fn surrogate_proportion(
    draws: &BinaryPosteriorDraws,
    pool: &DMatrix<f64>,
    n_pop: usize,
    target: &DVector<f64>,
    spec: &SurrogateProportionSpec,
) -> Result<MeanPosterior> {
    let m = draws.beta.nrows();
    let p = draws.beta.ncols();
    if pool.ncols() != p {
        return Err(SurvintError::data(
            "dimension_mismatch",
            format!("pool p={} vs draws p={p}", pool.ncols()),
        ));
    }
    let stream = RngStream::new(spec.seed, 0x53_5552);
    let refresh = spec.refresh_every.max(1);
    let n_pops = m.div_ceil(refresh);
    let pops: Vec<SurrogatePopulation> = (0..n_pops)
        .into_par_iter()
        .map(|b| {
            resample_population_covariates(
                pool,
                n_pop,
                target,
                spec.tolerance,
                spec.max_tries,
                &stream.derive(1 + b as u64),
            )
        })
        .collect::<Result<_>>()?;

    let score_stream = stream.derive(0);
    let ybar: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|h| {
            let mut rng = score_stream.substream(h as u64);
            let pop = &pops[h / refresh];
            let mut count = 0usize;
            for i in 0..n_pop {
                let mut g = 0.0;
                for j in 0..p {
                    g += pop.x_pop[(i, j)] * draws.beta[(h, j)];
                }
                if draw_uniform(&mut rng) <= logistic(g) {
                    count += 1;
                }
            }
            count as f64 / n_pop as f64
        })
        .collect();

    let summary = summarize(&ybar, 0.95)?;
    Ok(MeanPosterior {
        draws: ybar,
        summary,
    })
}
