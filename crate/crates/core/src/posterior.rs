//! Exact posterior samplers for the five Gaussian scenarios.
//!
//! Scenario letters follow the comparison design: B fits the nps alone with
//! its propensity weights, C integrates both samples with the nps as the
//! discounted prior sample, D integrates with the ps discounted, E fits the
//! ps alone with its weights, and G fits the ps unweighted.
//!
//! For the integrated fits, with discount pair `(a_1, a_2)` (one of them
//! fixed at 1), and writing the adjusted-weighted sufficient statistics
//!
//! ```text
//! A(a) = sum_s sum_i a_s w_si x_si x_si'
//! b(a) = sum_s sum_i a_s w_si x_si y_si
//! d(a) = sum_s sum_i a_s w_si (y_si - x_si' beta_hat)^2,  beta_hat = A^{-1} b
//! ```
//!
//! the posterior factorizes into exact conditionals
//!
//! ```text
//! beta   | sigma^2, a ~ Normal(beta_hat, sigma^2 A^{-1})
//! sigma^2| a          ~ InvGam((n1+n2-p)/2, d/2)
//! pi(a | y) propto a^{n_disc/2} |A(a)|^{-1/2} d(a)^{-(n1+n2-p)/2}
//! ```
//!
//! where `n_disc` is the size of the discounted sample. Draws use the
//! multiplication rule: `a` from a discrete grid by inverse CDF, then
//! `sigma^2`, then `beta`. No Markov chain is involved, so draws are
//! independent and per-draw substreams make the sampler order- and
//! thread-independent.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvintError};
use crate::linalg::{log_det, spd_cholesky, weighted_cross, weighted_xty};
use crate::rngstat::{
    draw_from_grid, draw_inverse_gamma, draw_normal, draw_standard_normal, RngStream,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// B: nps only, propensity weights, no discounting.
    NpsOnly,
    /// C: nps discounted as the prior sample, ps undiscounted.
    NpsPrior,
    /// D: ps discounted as the prior sample, nps undiscounted.
    PsPrior,
    /// E: ps only with its design weights.
    PsOnly,
    /// G: ps only, weights omitted.
    PsUnweighted,
}

impl ScenarioKind {
    pub fn letter(&self) -> char {
        match self {
            ScenarioKind::NpsOnly => 'B',
            ScenarioKind::NpsPrior => 'C',
            ScenarioKind::PsPrior => 'D',
            ScenarioKind::PsOnly => 'E',
            ScenarioKind::PsUnweighted => 'G',
        }
    }

    pub fn from_letter(c: char) -> Result<Self> {
        match c.to_ascii_uppercase() {
            'B' => Ok(ScenarioKind::NpsOnly),
            'C' => Ok(ScenarioKind::NpsPrior),
            'D' => Ok(ScenarioKind::PsPrior),
            'E' => Ok(ScenarioKind::PsOnly),
            'G' => Ok(ScenarioKind::PsUnweighted),
            other => Err(SurvintError::usage(format!(
                "unknown scenario '{other}', expected one of B, C, D, E, G"
            ))),
        }
    }

    pub fn is_integrated(&self) -> bool {
        matches!(self, ScenarioKind::NpsPrior | ScenarioKind::PsPrior)
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = SurvintError;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => ScenarioKind::from_letter(c),
            _ => Err(SurvintError::usage(format!(
                "unknown scenario '{s}', expected one of B, C, D, E, G"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub a_min: f64,
    pub a_max: f64,
    pub grid_size: usize,
    pub draws: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        Self {
            kind,
            a_min: 0.0,
            a_max: 1.0,
            grid_size: 1000,
            draws: 10_000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_min >= 0.0 && self.a_max <= 1.0 && self.a_min < self.a_max) {
            return Err(SurvintError::usage(format!(
                "discount range ({}, {}] must be a nonempty subinterval of [0,1]",
                self.a_min, self.a_max
            )));
        }
        if self.grid_size == 0 || self.draws == 0 {
            return Err(SurvintError::usage("grid_size and draws must be positive"));
        }
        Ok(())
    }

    /// Midpoints of `grid_size` equal cells over `(a_min, a_max]`.
    pub fn grid(&self) -> Vec<f64> {
        let k = self.grid_size;
        let width = (self.a_max - self.a_min) / k as f64;
        (0..k)
            .map(|i| self.a_min + (i as f64 + 0.5) * width)
            .collect()
    }
}

/// One weighted sample ready for fitting: design matrix, responses and
/// adjusted weights.
#[derive(Debug, Clone)]
pub struct FitData<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a DVector<f64>,
    pub w: &'a DVector<f64>,
}

impl<'a> FitData<'a> {
    pub fn new(x: &'a DMatrix<f64>, y: &'a DVector<f64>, w: &'a DVector<f64>) -> Self {
        Self { x, y, w }
    }
}

/// Joint draws of `(beta, sigma^2, a)`.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    /// M x p matrix of regression coefficient draws.
    pub beta: DMatrix<f64>,
    pub sigma2: Vec<f64>,
    pub a: Vec<f64>,
    pub scenario: ScenarioSpec,
}

impl PosteriorDraws {
    pub fn m(&self) -> usize {
        self.beta.nrows()
    }

    pub fn p(&self) -> usize {
        self.beta.ncols()
    }
}

/// Cached per-grid-point quantities for an integrated fit.
pub struct GridPoint {
    pub a: f64,
    pub beta_hat: DVector<f64>,
    pub d: f64,
    pub log_det_a: f64,
    /// Lower Cholesky factor of A(a).
    pub l: DMatrix<f64>,
}

/// Precomputed grid for the integrated posterior, reusable across draws and
/// by the t-pivot.
pub struct IntegratedSufficients {
    pub points: Vec<GridPoint>,
    pub log_density: Vec<f64>,
    pub n1: usize,
    pub n2: usize,
    pub p: usize,
    /// Size of the discounted sample (exponent of `a` is n_disc/2).
    pub n_disc: usize,
}

impl IntegratedSufficients {
    /// Normalized discrete posterior masses of `a` over the grid.
    pub fn density(&self) -> Vec<f64> {
        let max = self
            .log_density
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = self.log_density.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        for v in &mut w {
            *v /= total;
        }
        w
    }

    pub fn posterior_mean_a(&self) -> f64 {
        self.density()
            .iter()
            .zip(&self.points)
            .map(|(&m, gp)| m * gp.a)
            .sum()
    }

    /// Overlap coefficient between the posterior masses of `a` and the flat
    /// prior over the same grid; near 1 means the data say nothing about `a`.
    pub fn prior_overlap(&self) -> f64 {
        let k = self.points.len() as f64;
        self.density().iter().map(|&m| m.min(1.0 / k)).sum()
    }

    pub fn dof(&self) -> usize {
        self.n1 + self.n2 - self.p
    }
}

fn degrees_check(n: usize, p: usize, label: &str) -> Result<()> {
    if n <= p {
        return Err(SurvintError::data(
            "insufficient_rows",
            format!("{label}: n={n} rows must exceed p={p} coefficients"),
        ));
    }
    Ok(())
}

/// Scenario B: weighted conjugate fit of the nps alone (discount fixed at 1).
pub fn fit_nps_only(nps: FitData, draws: usize, seed: u64) -> Result<PosteriorDraws> {
    let mut spec = ScenarioSpec::new(ScenarioKind::NpsOnly, seed);
    spec.draws = draws;
    fit_single_sample(nps, spec)
}

/// Scenarios E and G: the same conjugate fit applied to the ps; `weighted`
/// false replaces all weights by one.
pub fn fit_ps_only(ps: FitData, weighted: bool, draws: usize, seed: u64) -> Result<PosteriorDraws> {
    let kind = if weighted {
        ScenarioKind::PsOnly
    } else {
        ScenarioKind::PsUnweighted
    };
    let mut spec = ScenarioSpec::new(kind, seed);
    spec.draws = draws;
    if weighted {
        fit_single_sample(ps, spec)
    } else {
        let ones = DVector::from_element(ps.y.len(), 1.0);
        fit_single_sample(FitData::new(ps.x, ps.y, &ones), spec)
    }
}

fn fit_single_sample(data: FitData, spec: ScenarioSpec) -> Result<PosteriorDraws> {
    let n = data.y.len();
    let p = data.x.ncols();
    degrees_check(n, p, "single_sample_fit")?;

    let w: Vec<f64> = data.w.iter().copied().collect();
    let a = weighted_cross(data.x, &w);
    let b = weighted_xty(data.x, data.y, &w);
    let chol = spd_cholesky(a, "weighted_design")?;
    let beta_hat = chol.solve(&b);
    let mut d = 0.0;
    let mut yscale = 0.0;
    for i in 0..n {
        let mut r = data.y[i];
        for j in 0..p {
            r -= data.x[(i, j)] * beta_hat[j];
        }
        d += w[i] * r * r;
        yscale += w[i] * data.y[i] * data.y[i];
    }
    // A perfect fit leaves only rounding noise in d; the scale posterior has
    // no usable mass there.
    if !(d > 1e-20 * yscale.max(1.0)) {
        return Err(SurvintError::numeric(
            "model_saturated residual sum of squares is zero; sigma^2 has no mass",
        ));
    }
    let shape = (n - p) as f64 / 2.0;
    let l = chol.l();
    let stream = RngStream::new(spec.seed, 0x51_4e47_4c45); // module tag

    let m = spec.draws;
    let rows: Vec<(f64, DVector<f64>)> = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream.substream(k as u64);
            let sigma2 = draw_inverse_gamma(shape, d / 2.0, &mut rng)?;
            let z = DVector::from_fn(p, |_, _| draw_standard_normal(&mut rng));
            let v = l
                .tr_solve_lower_triangular(&z)
                .ok_or_else(|| SurvintError::numeric("triangular_solve_failed"))?;
            Ok((sigma2, &beta_hat + v * sigma2.sqrt()))
        })
        .collect::<Result<_>>()?;

    let mut beta = DMatrix::zeros(m, p);
    let mut sigma2 = Vec::with_capacity(m);
    for (k, (s2, bv)) in rows.into_iter().enumerate() {
        sigma2.push(s2);
        beta.row_mut(k).copy_from(&bv.transpose());
    }
    Ok(PosteriorDraws {
        beta,
        sigma2,
        a: vec![1.0; m],
        scenario: spec,
    })
}

/// Precompute the integrated-posterior grid for scenarios C and D.
pub fn integrated_sufficients(
    nps: &FitData,
    ps: &FitData,
    spec: &ScenarioSpec,
) -> Result<IntegratedSufficients> {
    spec.validate()?;
    if !spec.kind.is_integrated() {
        return Err(SurvintError::usage(format!(
            "scenario {} is not an integrated fit",
            spec.kind
        )));
    }
    let p = nps.x.ncols();
    if ps.x.ncols() != p {
        return Err(SurvintError::data(
            "dimension_mismatch",
            format!("nps has p={p} study covariates, ps has {}", ps.x.ncols()),
        ));
    }
    let n1 = nps.y.len();
    let n2 = ps.y.len();
    degrees_check(n1 + n2, p, "integrated_fit")?;

    let w1: Vec<f64> = nps.w.iter().copied().collect();
    let w2: Vec<f64> = ps.w.iter().copied().collect();
    let s1 = weighted_cross(nps.x, &w1);
    let s2 = weighted_cross(ps.x, &w2);
    let t1 = weighted_xty(nps.x, nps.y, &w1);
    let t2 = weighted_xty(ps.x, ps.y, &w2);
    let q1: f64 = (0..n1).map(|i| w1[i] * nps.y[i] * nps.y[i]).sum();
    let q2: f64 = (0..n2).map(|i| w2[i] * ps.y[i] * ps.y[i]).sum();

    // Which sample carries the discount factor.
    let (sd, su, td, tu, qd, qu, n_disc) = match spec.kind {
        ScenarioKind::NpsPrior => (&s1, &s2, &t1, &t2, q1, q2, n1),
        ScenarioKind::PsPrior => (&s2, &s1, &t2, &t1, q2, q1, n2),
        _ => unreachable!(),
    };

    let dof = (n1 + n2 - p) as f64;
    let grid = spec.grid();
    let points: Vec<GridPoint> = grid
        .par_iter()
        .map(|&a| {
            let mat = sd * a + su;
            let chol = spd_cholesky(mat, "integrated_design")?;
            let b = td * a + tu;
            let beta_hat = chol.solve(&b);
            let yscale = a * qd + qu;
            let d = yscale - beta_hat.dot(&b);
            if !(d > 1e-20 * yscale.max(1.0)) {
                return Err(SurvintError::numeric(format!(
                    "model_saturated at a={a}: weighted residual sum of squares {d} <= 0"
                )));
            }
            Ok(GridPoint {
                a,
                beta_hat,
                d,
                log_det_a: log_det(&chol),
                l: chol.l(),
            })
        })
        .collect::<Result<_>>()?;

    let log_density: Vec<f64> = points
        .iter()
        .map(|gp| 0.5 * n_disc as f64 * gp.a.ln() - 0.5 * gp.log_det_a - 0.5 * dof * gp.d.ln())
        .collect();
    debug_assert!(
        log_density.iter().any(|v| v.is_finite()),
        "max subtraction leaves at least one unit mass"
    );

    Ok(IntegratedSufficients {
        points,
        log_density,
        n1,
        n2,
        p,
        n_disc,
    })
}

/// Scenarios C and D: grid-integrated posterior over `(beta, sigma^2, a)`.
pub fn fit_integrated(
    nps: FitData,
    ps: FitData,
    spec: ScenarioSpec,
) -> Result<(PosteriorDraws, IntegratedSufficients)> {
    let suff = integrated_sufficients(&nps, &ps, &spec)?;
    let draws = draw_integrated(&suff, &spec)?;
    Ok((draws, suff))
}

/// Draw from a precomputed integrated grid.
pub fn draw_integrated(suff: &IntegratedSufficients, spec: &ScenarioSpec) -> Result<PosteriorDraws> {
    let p = suff.p;
    let shape = suff.dof() as f64 / 2.0;
    let stream = RngStream::new(spec.seed, 0x49_4e54); // module tag
    let m = spec.draws;

    let rows: Vec<(f64, f64, DVector<f64>)> = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream.substream(k as u64);
            let idx = draw_from_grid(&suff.log_density, &mut rng)?;
            let gp = &suff.points[idx];
            let sigma2 = draw_inverse_gamma(shape, gp.d / 2.0, &mut rng)?;
            let z = DVector::from_fn(p, |_, _| draw_standard_normal(&mut rng));
            let v = gp
                .l
                .tr_solve_lower_triangular(&z)
                .ok_or_else(|| SurvintError::numeric("triangular_solve_failed"))?;
            Ok((gp.a, sigma2, &gp.beta_hat + v * sigma2.sqrt()))
        })
        .collect::<Result<_>>()?;

    let mut beta = DMatrix::zeros(m, p);
    let mut sigma2 = Vec::with_capacity(m);
    let mut a = Vec::with_capacity(m);
    for (k, (ak, s2, bv)) in rows.into_iter().enumerate() {
        a.push(ak);
        sigma2.push(s2);
        beta.row_mut(k).copy_from(&bv.transpose());
    }
    Ok(PosteriorDraws {
        beta,
        sigma2,
        a,
        scenario: *spec,
    })
}

/// Closed-form location model: historical sample `y1` discounted by `a`,
/// current sample `y2` undiscounted, flat prior on the location and
/// `1/sigma^2` on the variance.
#[derive(Debug, Clone)]
pub struct LocationModelPosterior {
    pub n1: usize,
    pub n2: usize,
    pub ybar1: f64,
    pub ybar2: f64,
    pub s1sq: f64,
    pub s2sq: f64,
    pub grid: Vec<f64>,
    /// Normalized discrete masses of `a` over `grid`.
    pub density: Vec<f64>,
    log_density: Vec<f64>,
}

impl LocationModelPosterior {
    pub fn new(y1: &[f64], y2: &[f64], grid_size: usize) -> Result<Self> {
        if y1.len() < 2 || y2.len() < 2 {
            return Err(SurvintError::data(
                "insufficient_rows",
                "location model needs at least two observations per sample",
            ));
        }
        let n1 = y1.len();
        let n2 = y2.len();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64], m: f64| {
            v.iter().map(|&x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let ybar1 = mean(y1);
        let ybar2 = mean(y2);
        let s1sq = var(y1, ybar1);
        let s2sq = var(y2, ybar2);
        if s1sq == 0.0 && s2sq == 0.0 && (ybar1 - ybar2).abs() == 0.0 {
            return Err(SurvintError::data(
                "degenerate_data",
                "all observations identical; the scale posterior is improper",
            ));
        }

        let mut lm = Self {
            n1,
            n2,
            ybar1,
            ybar2,
            s1sq,
            s2sq,
            grid: Vec::new(),
            density: Vec::new(),
            log_density: Vec::new(),
        };
        let k = grid_size.max(2);
        lm.grid = (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect();
        lm.log_density = lm.grid.iter().map(|&a| lm.log_density_at(a)).collect();
        let max = lm
            .log_density
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = lm.log_density.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        for v in &mut w {
            *v /= total;
        }
        lm.density = w;
        Ok(lm)
    }

    /// Shrinkage factor `lambda = a n1 / (a n1 + n2)`.
    pub fn lambda(&self, a: f64) -> f64 {
        a * self.n1 as f64 / (a * self.n1 as f64 + self.n2 as f64)
    }

    /// Scale parameter of the inverse-gamma conditional at `a`.
    pub fn d(&self, a: f64) -> f64 {
        let l = self.lambda(a);
        self.n2 as f64 * l * (self.ybar1 - self.ybar2).powi(2)
            + a * (self.n1 - 1) as f64 * self.s1sq
            + (self.n2 - 1) as f64 * self.s2sq
    }

    /// Unnormalized log posterior of `a`, well defined on all of [0, 1].
    pub fn log_density_at(&self, a: f64) -> f64 {
        if a == 0.0 {
            return f64::NEG_INFINITY;
        }
        let n1 = self.n1 as f64;
        let n2 = self.n2 as f64;
        let l = self.lambda(a);
        0.5 * n1 * a.ln() + 0.5 * ((1.0 - l) / n2).ln() - 0.5 * (n1 + n2 - 1.0) * self.d(a).ln()
    }

    pub fn posterior_mean_a(&self) -> f64 {
        self.grid
            .iter()
            .zip(&self.density)
            .map(|(&a, &m)| a * m)
            .sum()
    }

    pub fn posterior_mean_theta_at(&self, a: f64) -> f64 {
        let l = self.lambda(a);
        l * self.ybar1 + (1.0 - l) * self.ybar2
    }

    /// Three-stage sampler: `a` from the grid, then `sigma^2 | a`, then
    /// `theta | sigma^2, a`.
    pub fn sample(&self, m: usize, seed: u64) -> Result<Vec<(f64, f64, f64)>> {
        let stream = RngStream::new(seed, 0x4c_4f43);
        let shape = (self.n1 + self.n2 - 1) as f64 / 2.0;
        (0..m)
            .into_par_iter()
            .map(|k| {
                let mut rng = stream.substream(k as u64);
                let idx = draw_from_grid(&self.log_density, &mut rng)?;
                let a = self.grid[idx];
                let sigma2 = draw_inverse_gamma(shape, self.d(a) / 2.0, &mut rng)?;
                let l = self.lambda(a);
                let mean = l * self.ybar1 + (1.0 - l) * self.ybar2;
                let sd = ((1.0 - l) * sigma2 / self.n2 as f64).sqrt();
                let theta = draw_normal(mean, sd, &mut rng);
                Ok((a, sigma2, theta))
            })
            .collect()
    }
}
