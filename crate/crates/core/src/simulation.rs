//! Monte Carlo study engine.
//!
//! One finite population is generated per (correlation, seed) pair; every
//! replication then draws a fresh nps by Poisson sampling and a fresh ps by
//! randomized systematic PPS sampling from that same population, estimates
//! nps weights from scratch, fits the requested scenarios and scores the
//! population-mean prediction against the known truth.
//!
//! The error variance is solved analytically instead of by trial and error:
//! requiring `Cor(m, y) = rho` over the realized population gives
//! `sigma^2 = Var(m) (1 - rho^2) / rho^2`; the noise is drawn, projected
//! orthogonal to the mean function, and rescaled so the realized correlation
//! lands on the target exactly (verified post hoc). The intercepts of the
//! two inclusion models are likewise solved (bisection for the participation
//! model, closed form for the size-variable ratio).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FactsSource, PopulationFacts};
use crate::error::{Result, SurvintError};
use crate::linalg::{compensated_sum, logistic};
use crate::posterior::{
    fit_integrated, fit_nps_only, fit_ps_only, FitData, ScenarioKind, ScenarioSpec,
};
use crate::prediction::{surrogate_mean_draws, Summary};
use crate::rngstat::{draw_bernoulli, draw_uniform, RngStream};
use crate::weights::{
    adjust_weights, estimate_propensity, normalize_to_total, winsorize_weights, PropensityOptions,
};

/// Which covariate is dropped where, following the misspecification study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Misspecification {
    None,
    /// x3 still generates y and still drives participation, but is omitted
    /// from the fitted population model.
    DropX3Popmodel,
    /// x3 neither generates y nor enters the fitted model; participation
    /// still uses it.
    DropX3Both,
}

impl std::str::FromStr for Misspecification {
    type Err = SurvintError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Misspecification::None),
            "drop-x3-popmodel" => Ok(Misspecification::DropX3Popmodel),
            "drop-x3-both" => Ok(Misspecification::DropX3Both),
            other => Err(SurvintError::usage(format!(
                "unknown misspecification '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n_population: usize,
    pub n1: usize,
    pub n2: usize,
    pub rho: f64,
    /// Study-variable coefficients (intercept, x1, x2, x3).
    pub regression_coefficients: [f64; 4],
    /// Participation slopes for (x1, x2, x3); the intercept is calibrated.
    pub participation_slopes: [f64; 3],
    /// Size-variable slopes for (x1, x2, x3); the intercept is calibrated
    /// to the max/min ratio below.
    pub size_slopes: [f64; 3],
    pub size_ratio: f64,
    /// Standardize the covariates inside the participation linear predictor.
    /// With raw covariates the printed slopes swing the participation
    /// log-odds across dozens of units, which produces degenerate nps
    /// weights; the reported comparisons correspond to the standardized
    /// reading, so it is the default.
    pub standardize_participation: bool,
    /// Drop x3 from the study-variable generation (misspecification case 2).
    pub drop_x3_in_y: bool,
    pub seed: u64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            n_population: 20_000,
            n1: 1500,
            n2: 300,
            rho: 0.5,
            regression_coefficients: [23.8449, 0.0559, 2.2656, 0.2525],
            participation_slopes: [0.1, 0.2, 0.1],
            size_slopes: [1.0, 0.2, 0.1],
            size_ratio: 50.0,
            standardize_participation: true,
            drop_x3_in_y: false,
            seed: 1,
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(SurvintError::usage(format!(
                "rho {} must lie in (0, 1]",
                self.rho
            )));
        }
        if self.n1 + self.n2 > self.n_population {
            return Err(SurvintError::usage(format!(
                "n1 + n2 = {} exceeds N = {}",
                self.n1 + self.n2,
                self.n_population
            )));
        }
        Ok(())
    }
}

/// A realized finite population with its two sets of inclusion probabilities.
#[derive(Debug, Clone)]
pub struct FinitePopulation {
    /// N x 4 matrix of (intercept, x1, x2, x3).
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub true_mean: f64,
    pub pi1: Vec<f64>,
    pub pi2: Vec<f64>,
    pub sigma2: f64,
    pub realized_correlation: f64,
    pub theta0: f64,
    pub theta1: f64,
}

/// Bisection solve of `sum logistic(theta0 + base_i) = target` over
/// theta0 in [-100, 100]; the left side is strictly increasing.
pub fn calibrate_theta0(base: &[f64], target: f64) -> Result<f64> {
    let total = |t: f64| -> f64 { base.iter().map(|&b| logistic(t + b)).sum::<f64>() };
    let (mut lo, mut hi) = (-100.0_f64, 100.0_f64);
    if total(lo) > target || total(hi) < target {
        return Err(SurvintError::numeric(format!(
            "theta0_bracket_failed target {target} not bracketed in [-100, 100]"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    if (total(t) - target).abs() > 1e-6 {
        return Err(SurvintError::numeric(format!(
            "theta0_tolerance sum pi = {} vs target {target}",
            total(t)
        )));
    }
    Ok(t)
}

/// Closed-form intercept making `max z / min z = ratio` for
/// `z_i = theta1 + base_i`: `theta1 = (max b - ratio min b)/(ratio - 1)`.
pub fn calibrate_theta1(base: &[f64], ratio: f64) -> Result<f64> {
    if !(ratio > 1.0) {
        return Err(SurvintError::usage(format!(
            "size ratio {ratio} must exceed 1 (constant size variable is impossible)"
        )));
    }
    let max = base.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = base.iter().cloned().fold(f64::INFINITY, f64::min);
    let theta1 = (max - ratio * min) / (ratio - 1.0);
    if theta1 + min <= 0.0 {
        return Err(SurvintError::numeric(format!(
            "theta1_nonpositive min z = {} after solve",
            theta1 + min
        )));
    }
    Ok(theta1)
}

/// Generate one finite population under the spec.
pub fn generate_population(spec: &PopulationSpec) -> Result<FinitePopulation> {
    spec.validate()?;
    let n = spec.n_population;
    let c = &spec.regression_coefficients;
    let stream = RngStream::new(spec.seed, 0x50_4f50);
    let mut rng = stream.substream(0);

    let mut x = DMatrix::zeros(n, 4);
    for i in 0..n {
        let x1 = 20.0 + 70.0 * draw_uniform(&mut rng);
        let b = (c[0] + c[1] * x1).powf(0.1);
        let x2 = f64::from(draw_bernoulli(logistic(b), &mut rng));
        let b = (c[0] + c[1] * x1 + c[2] * x2).powf(0.1);
        let x3 = f64::from(draw_bernoulli(logistic(b), &mut rng));
        x[(i, 0)] = 1.0;
        x[(i, 1)] = x1;
        x[(i, 2)] = x2;
        x[(i, 3)] = x3;
    }

    let m: Vec<f64> = (0..n)
        .map(|i| {
            let x3_term = if spec.drop_x3_in_y { 0.0 } else { c[3] * x[(i, 3)] };
            c[0] + c[1] * x[(i, 1)] + c[2] * x[(i, 2)] + x3_term
        })
        .collect();
    let m_mean = m.iter().sum::<f64>() / n as f64;
    let m_var = m.iter().map(|v| (v - m_mean).powi(2)).sum::<f64>() / n as f64;

    // Draw raw noise, project out its realized correlation with the mean
    // function, then scale so the realized Cor(m, y) lands on rho exactly:
    // with orthogonal noise, sigma^2 = Var(m) (1 - rho^2) / rho^2.
    let mut rng_e = stream.substream(1);
    let e_raw: Vec<f64> = (0..n)
        .map(|_| crate::rngstat::draw_standard_normal(&mut rng_e))
        .collect();
    let e_mean = e_raw.iter().sum::<f64>() / n as f64;
    let cov_em = (0..n)
        .map(|i| (e_raw[i] - e_mean) * (m[i] - m_mean))
        .sum::<f64>()
        / n as f64;
    let slope = if m_var > 0.0 { cov_em / m_var } else { 0.0 };
    let e_perp: Vec<f64> = (0..n)
        .map(|i| e_raw[i] - e_mean - slope * (m[i] - m_mean))
        .collect();
    let e_var = e_perp.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let sigma2 = if spec.rho >= 1.0 {
        0.0
    } else {
        m_var * (1.0 - spec.rho * spec.rho) / (spec.rho * spec.rho)
    };
    let scale = if sigma2 > 0.0 && e_var > 0.0 {
        (sigma2 / e_var).sqrt()
    } else {
        0.0
    };
    let mut y = DVector::zeros(n);
    for i in 0..n {
        y[i] = m[i] + scale * e_perp[i];
    }

    // Post-hoc correlation check.
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let y_var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
    let cov = (0..n)
        .map(|i| (m[i] - m_mean) * (y[i] - y_mean))
        .sum::<f64>()
        / n as f64;
    let realized = if y_var > 0.0 && m_var > 0.0 {
        cov / (m_var * y_var).sqrt()
    } else {
        1.0
    };
    if (realized - spec.rho).abs() > 0.005 {
        return Err(SurvintError::numeric(format!(
            "correlation_verification realized {realized:.4} vs target {}",
            spec.rho
        )));
    }

    // Participation probabilities.
    let part_base: Vec<f64> = {
        let cols: Vec<Vec<f64>> = (1..4)
            .map(|j| x.column(j).iter().copied().collect())
            .collect();
        let transformed: Vec<Vec<f64>> = cols
            .iter()
            .map(|col| {
                if spec.standardize_participation {
                    let mean = col.iter().sum::<f64>() / n as f64;
                    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let sd = var.sqrt().max(1e-12);
                    col.iter().map(|v| (v - mean) / sd).collect()
                } else {
                    col.clone()
                }
            })
            .collect();
        (0..n)
            .map(|i| {
                spec.participation_slopes[0] * transformed[0][i]
                    + spec.participation_slopes[1] * transformed[1][i]
                    + spec.participation_slopes[2] * transformed[2][i]
            })
            .collect()
    };
    let theta0 = calibrate_theta0(&part_base, spec.n1 as f64)?;
    let pi1: Vec<f64> = part_base.iter().map(|&b| logistic(theta0 + b)).collect();

    // PS size variable and fixed-size inclusion probabilities.
    let size_base: Vec<f64> = (0..n)
        .map(|i| {
            spec.size_slopes[0] * x[(i, 1)]
                + spec.size_slopes[1] * x[(i, 2)]
                + spec.size_slopes[2] * x[(i, 3)]
        })
        .collect();
    let theta1 = calibrate_theta1(&size_base, spec.size_ratio)?;
    let z: Vec<f64> = size_base.iter().map(|&b| theta1 + b).collect();
    let z_total: f64 = z.iter().sum();
    let pi2: Vec<f64> = z.iter().map(|&zi| spec.n2 as f64 * zi / z_total).collect();
    if pi2.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(SurvintError::numeric(
            "pps_probability_out_of_range some pi_2i is outside (0,1)",
        ));
    }

    let true_mean = y.iter().sum::<f64>() / n as f64;
    Ok(FinitePopulation {
        x,
        y,
        true_mean,
        pi1,
        pi2,
        sigma2,
        realized_correlation: realized,
        theta0,
        theta1,
    })
}

/// Independent Bernoulli inclusion with unit-specific probabilities.
pub fn poisson_sample(pi: &[f64], stream: &RngStream) -> Vec<usize> {
    let mut rng = stream.substream(0);
    pi.iter()
        .enumerate()
        .filter_map(|(i, &p)| draw_bernoulli(p, &mut rng).then_some(i))
        .collect()
}

/// Randomized systematic PPS: random unit order, then systematic selection
/// on the cumulated probabilities with a single uniform start. Exactly
/// `n_draw` units; unit `i` is included with probability `pi_i`.
pub fn systematic_pps(pi: &[f64], n_draw: usize, stream: &RngStream) -> Result<Vec<usize>> {
    let n = pi.len();
    if pi.iter().any(|&p| p >= 1.0) {
        return Err(SurvintError::data(
            "pps_probability_at_least_one",
            "some inclusion probability is >= 1; cap upstream",
        ));
    }
    let total: f64 = pi.iter().sum();
    if (total - n_draw as f64).abs() > 1e-6 * n_draw as f64 {
        return Err(SurvintError::data(
            "pps_probabilities_do_not_sum",
            format!("sum pi = {total} vs fixed size {n_draw}"),
        ));
    }
    let mut rng = stream.substream(0);
    // Fisher-Yates permutation.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (draw_uniform(&mut rng) * (i + 1) as f64) as usize;
        order.swap(i, j.min(i));
    }
    // Cumulative probabilities in permuted order, rescaled so the total is
    // exactly the target size.
    let scale = n_draw as f64 / total;
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &idx in &order {
        acc += pi[idx] * scale;
        cum.push(acc);
    }
    let u = draw_uniform(&mut rng);
    let mut selected = Vec::with_capacity(n_draw);
    let mut lo = 0usize;
    for k in 0..n_draw {
        let pos = u + k as f64;
        // cum is nondecreasing; first entry strictly above pos. Since every
        // pi < 1, consecutive positions land in distinct units.
        let mut hi = n;
        let mut l = lo;
        while l < hi {
            let mid = (l + hi) / 2;
            if cum[mid] > pos {
                hi = mid;
            } else {
                l = mid + 1;
            }
        }
        let idx = l.min(n - 1);
        selected.push(order[idx]);
        lo = idx;
    }
    selected.sort_unstable();
    selected.dedup();
    if selected.len() != n_draw {
        return Err(SurvintError::numeric(format!(
            "pps_size_mismatch selected {} of {n_draw}",
            selected.len()
        )));
    }
    Ok(selected)
}

/// How nps weights are post-processed in each replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightProcessing {
    pub winsorize: bool,
    pub lower_clamp: f64,
    pub upper_quantile: f64,
    /// Rescale the processed weights to sum to the estimated population size.
    pub normalize_to_population: bool,
}

impl Default for WeightProcessing {
    fn default() -> Self {
        Self {
            winsorize: true,
            lower_clamp: 1.0,
            upper_quantile: 0.99,
            normalize_to_population: true,
        }
    }
}

/// Where the prediction step gets `(N, xbar)` from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyFactsSource {
    /// True population size and covariate means of the generated population.
    TruePopulation,
    /// Inverse-probability-weighted estimates from each replication's ps.
    PsIpw,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySpec {
    pub population: PopulationSpec,
    pub rho_list: Vec<f64>,
    pub replications: usize,
    pub scenarios: Vec<ScenarioKind>,
    pub misspec: Misspecification,
    pub draws_per_fit: usize,
    pub grid_size: usize,
    pub weight_processing: WeightProcessing,
    pub facts_source: StudyFactsSource,
    pub seed: u64,
}

impl Default for StudySpec {
    fn default() -> Self {
        Self {
            population: PopulationSpec::default(),
            rho_list: vec![0.2, 0.3, 0.5, 0.8],
            replications: 200,
            scenarios: vec![
                ScenarioKind::NpsOnly,
                ScenarioKind::NpsPrior,
                ScenarioKind::PsPrior,
                ScenarioKind::PsOnly,
                ScenarioKind::PsUnweighted,
            ],
            misspec: Misspecification::None,
            draws_per_fit: 4000,
            grid_size: 1000,
            weight_processing: WeightProcessing::default(),
            facts_source: StudyFactsSource::TruePopulation,
            seed: 1,
        }
    }
}

/// Aggregated comparison metrics for one (scenario, rho) cell.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub scenario: char,
    pub rho: f64,
    pub arb: f64,
    pub prmse: f64,
    pub cov: f64,
    pub wid: f64,
    /// Mean over replications of the posterior mean of the discount factor;
    /// NaN for the undiscounted scenarios.
    pub a_mean: f64,
    /// Mean over replications of the posterior SD of the discount factor.
    pub a_psd: f64,
    pub replications: usize,
}

/// One scenario fit inside one replication.
#[derive(Debug, Clone, Serialize)]
pub struct LongRow {
    pub rho: f64,
    pub replication: usize,
    pub scenario: char,
    pub pm: f64,
    pub psd: f64,
    pub c025: f64,
    pub c975: f64,
    pub covered: bool,
    pub a_mean: f64,
    pub a_psd: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyResult {
    pub metrics: Vec<MetricsRow>,
    pub long: Vec<LongRow>,
    /// True finite population mean per rho.
    pub true_means: Vec<(f64, f64)>,
    pub failed_replications: usize,
}

struct ScenarioOutcome {
    scenario: char,
    summary: Summary,
    a_mean: f64,
    a_psd: f64,
}

/// Design matrices and weights for one drawn sample.
struct DrawnSample {
    x_fit: DMatrix<f64>,
    z_all: DMatrix<f64>,
    y: DVector<f64>,
    w_design: Option<DVector<f64>>,
}

fn extract_sample(
    pop: &FinitePopulation,
    idx: &[usize],
    fit_cols: &[usize],
    weights: Option<Vec<f64>>,
) -> DrawnSample {
    let n = idx.len();
    let x_fit = DMatrix::from_fn(n, fit_cols.len(), |i, j| pop.x[(idx[i], fit_cols[j])]);
    let z_all = DMatrix::from_fn(n, 4, |i, j| pop.x[(idx[i], j)]);
    let y = DVector::from_fn(n, |i, _| pop.y[idx[i]]);
    DrawnSample {
        x_fit,
        z_all,
        y,
        w_design: weights.map(DVector::from_vec),
    }
}

/// Run every scenario for one replication.
fn run_replication(
    pop: &FinitePopulation,
    spec: &StudySpec,
    fit_cols: &[usize],
    facts_true: &PopulationFacts,
    rep_stream: &RngStream,
    rep_seed: u64,
) -> Result<Vec<ScenarioOutcome>> {
    let nps_idx = poisson_sample(&pop.pi1, &rep_stream.derive(1));
    if nps_idx.len() <= fit_cols.len() + 1 {
        return Err(SurvintError::numeric("replication_nps_too_small"));
    }
    let ps_idx = systematic_pps(&pop.pi2, spec.population.n2, &rep_stream.derive(2))?;

    let ps_w: Vec<f64> = ps_idx.iter().map(|&i| 1.0 / pop.pi2[i]).collect();
    let nps = extract_sample(pop, &nps_idx, fit_cols, None);
    let ps = extract_sample(pop, &ps_idx, fit_cols, Some(ps_w));

    // CLW propensity weights for the nps, then the configured processing.
    let w2 = ps.w_design.as_ref().expect("ps carries design weights");
    let fit = estimate_propensity(&nps.z_all, &ps.z_all, w2, PropensityOptions::default())?;
    let n_hat_ps: f64 = w2.iter().sum();
    let mut w1_raw = fit.w1;
    if spec.weight_processing.winsorize {
        w1_raw = winsorize_weights(
            &w1_raw,
            spec.weight_processing.lower_clamp,
            spec.weight_processing.upper_quantile,
        )?;
    }
    if spec.weight_processing.normalize_to_population {
        w1_raw = normalize_to_total(&w1_raw, n_hat_ps);
    }
    let w1 = adjust_weights(&w1_raw)?.adjusted;
    let w2_adj = adjust_weights(w2.as_slice())?.adjusted;

    let facts = match spec.facts_source {
        StudyFactsSource::TruePopulation => facts_true.clone(),
        StudyFactsSource::PsIpw => {
            let mut xbar = vec![0.0; fit_cols.len()];
            for (row, &i) in ps_idx.iter().enumerate() {
                let wt = w2[row];
                for (j, &c) in fit_cols.iter().enumerate() {
                    xbar[j] += wt * pop.x[(i, c)];
                }
            }
            for v in &mut xbar {
                *v /= n_hat_ps;
            }
            PopulationFacts {
                n_hat: n_hat_ps,
                xbar_hat: xbar,
                source: FactsSource::PsIpw,
            }
        }
    };

    let mut out = Vec::with_capacity(spec.scenarios.len());
    for (s_idx, &kind) in spec.scenarios.iter().enumerate() {
        let seed = rep_seed.wrapping_mul(31).wrapping_add(1000 + s_idx as u64);
        let (draws, a_stats) = match kind {
            ScenarioKind::NpsOnly => (
                fit_nps_only(
                    FitData::new(&nps.x_fit, &nps.y, &w1),
                    spec.draws_per_fit,
                    seed,
                )?,
                None,
            ),
            ScenarioKind::PsOnly => (
                fit_ps_only(
                    FitData::new(&ps.x_fit, &ps.y, &w2_adj),
                    true,
                    spec.draws_per_fit,
                    seed,
                )?,
                None,
            ),
            ScenarioKind::PsUnweighted => (
                fit_ps_only(
                    FitData::new(&ps.x_fit, &ps.y, &w2_adj),
                    false,
                    spec.draws_per_fit,
                    seed,
                )?,
                None,
            ),
            ScenarioKind::NpsPrior | ScenarioKind::PsPrior => {
                let mut sspec = ScenarioSpec::new(kind, seed);
                sspec.grid_size = spec.grid_size;
                sspec.draws = spec.draws_per_fit;
                let (draws, suff) = fit_integrated(
                    FitData::new(&nps.x_fit, &nps.y, &w1),
                    FitData::new(&ps.x_fit, &ps.y, &w2_adj),
                    sspec,
                )?;
                let masses = suff.density();
                let mean: f64 = masses
                    .iter()
                    .zip(&suff.points)
                    .map(|(&m, gp)| m * gp.a)
                    .sum();
                let var: f64 = masses
                    .iter()
                    .zip(&suff.points)
                    .map(|(&m, gp)| m * (gp.a - mean).powi(2))
                    .sum();
                (draws, Some((mean, var.sqrt())))
            }
        };
        let mp = surrogate_mean_draws(&draws, &facts)?;
        let (a_mean, a_psd) = a_stats.unwrap_or((f64::NAN, f64::NAN));
        out.push(ScenarioOutcome {
            scenario: kind.letter(),
            summary: mp.summary,
            a_mean,
            a_psd,
        });
    }
    Ok(out)
}

/// Run the full study: every rho, every replication, every scenario.
pub fn run_study(spec: &StudySpec) -> Result<StudyResult> {
    if spec.replications == 0 || spec.rho_list.is_empty() || spec.scenarios.is_empty() {
        return Err(SurvintError::usage(
            "study needs at least one rho, one replication and one scenario",
        ));
    }
    let fit_cols: Vec<usize> = match spec.misspec {
        Misspecification::None => vec![0, 1, 2, 3],
        Misspecification::DropX3Popmodel | Misspecification::DropX3Both => vec![0, 1, 2],
    };

    let mut metrics = Vec::new();
    let mut long = Vec::new();
    let mut true_means = Vec::new();
    let mut failed = 0usize;
    let root = RngStream::new(spec.seed, 0x53_494d);

    for (rho_idx, &rho) in spec.rho_list.iter().enumerate() {
        let mut pspec = spec.population.clone();
        pspec.rho = rho;
        pspec.drop_x3_in_y = spec.misspec == Misspecification::DropX3Both;
        pspec.seed = spec.seed.wrapping_add(rho_idx as u64);
        let pop = generate_population(&pspec)?;
        true_means.push((rho, pop.true_mean));

        let facts_true = {
            let n = pop.x.nrows() as f64;
            let xbar: Vec<f64> = fit_cols
                .iter()
                .map(|&c| pop.x.column(c).iter().sum::<f64>() / n)
                .collect();
            PopulationFacts::external(n, xbar)?
        };

        let rho_stream = root.derive(rho_idx as u64);
        let results: Vec<Result<Vec<ScenarioOutcome>>> = (0..spec.replications)
            .into_par_iter()
            .map(|rep| {
                let rep_stream = rho_stream.derive(rep as u64);
                let rep_seed = spec
                    .seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add((rho_idx * 1_000_000 + rep) as u64);
                run_replication(&pop, spec, &fit_cols, &facts_true, &rep_stream, rep_seed)
            })
            .collect();

        let mut ok_rows: Vec<(usize, Vec<ScenarioOutcome>)> = Vec::new();
        for (rep, res) in results.into_iter().enumerate() {
            match res {
                Ok(rows) => ok_rows.push((rep, rows)),
                Err(_) => failed += 1,
            }
        }
        if failed * 50 > spec.replications * spec.rho_list.len() {
            return Err(SurvintError::numeric(format!(
                "study_failure_rate {failed} failed replications exceed 2%"
            )));
        }

        for (s_idx, &kind) in spec.scenarios.iter().enumerate() {
            let t = pop.true_mean;
            let rows: Vec<&ScenarioOutcome> = ok_rows.iter().map(|(_, v)| &v[s_idx]).collect();
            let r = rows.len() as f64;
            let arb = compensated_sum(rows.iter().map(|o| ((o.summary.pm - t) / t).abs())) / r;
            let prmse = compensated_sum(
                rows.iter()
                    .map(|o| ((o.summary.pm - t).powi(2) + o.summary.psd.powi(2)).sqrt()),
            ) / r;
            let cov = rows.iter().filter(|o| o.summary.covers(t)).count() as f64 / r;
            let wid = compensated_sum(rows.iter().map(|o| o.summary.width())) / r;
            let (a_mean, a_psd) = if kind.is_integrated() {
                (
                    compensated_sum(rows.iter().map(|o| o.a_mean)) / r,
                    compensated_sum(rows.iter().map(|o| o.a_psd)) / r,
                )
            } else {
                (f64::NAN, f64::NAN)
            };
            metrics.push(MetricsRow {
                scenario: kind.letter(),
                rho,
                arb,
                prmse,
                cov,
                wid,
                a_mean,
                a_psd,
                replications: rows.len(),
            });
        }
        for (rep, rows) in &ok_rows {
            for o in rows {
                long.push(LongRow {
                    rho,
                    replication: *rep,
                    scenario: o.scenario,
                    pm: o.summary.pm,
                    psd: o.summary.psd,
                    c025: o.summary.hpd_lower,
                    c975: o.summary.hpd_upper,
                    covered: o.summary.covers(pop.true_mean),
                    a_mean: o.a_mean,
                    a_psd: o.a_psd,
                });
            }
        }
    }

    Ok(StudyResult {
        metrics,
        long,
        true_means,
        failed_replications: failed,
    })
}
