//! Survey-weight machinery: effective sample sizes, weight adjustment,
//! propensity-score estimation for the non-probability sample, winsorization
//! and calibration.
//!
//! The propensity model follows the pseudo-likelihood approach of combining
//! the nps rows with a Horvitz-Thompson estimate of the population term built
//! from the ps design weights. With a logistic link,
//!
//! ```text
//! l(theta) = sum_nps log{pi/(1-pi)}(z_1i) + sum_ps W_2i log{1 - pi(z_2i)}
//!          = sum_nps z_1i' theta          - sum_ps W_2i softplus(z_2i' theta)
//! ```
//!
//! whose gradient is `sum_nps z_1i - sum_ps W_2i pi(z_2i) z_2i`. The
//! estimating equation is solved by damped Newton iteration starting from
//! zero, with a gradient-ascent fallback when Newton stalls.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Result, SurvintError};
use crate::linalg::{logistic, quantile_sorted, softplus, spd_cholesky, weighted_cross};

/// Original and adjusted weights, with the effective sample size.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub original: DVector<f64>,
    pub adjusted: DVector<f64>,
    pub n_o: f64,
}

/// `(sum W)^2 / sum W^2`; scale-invariant, equals n for equal weights.
pub fn effective_sample_size(w: &[f64]) -> Result<f64> {
    if w.is_empty() {
        return Err(SurvintError::data("empty_weights", "no weights supplied"));
    }
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        if !(wi > 0.0) || !wi.is_finite() {
            return Err(SurvintError::data(
                "nonpositive_weight",
                format!("weight {} in row {} must be positive", wi, i + 1),
            ));
        }
        sum += wi;
        sumsq += wi * wi;
    }
    Ok(sum * sum / sumsq)
}

/// Rescale weights to sum to the effective sample size:
/// `w_i = n_o W_i / sum W_j`. Ratios are preserved.
pub fn adjust_weights(w: &[f64]) -> Result<WeightSet> {
    let n_o = effective_sample_size(w)?;
    let total: f64 = w.iter().sum();
    let adjusted = DVector::from_iterator(w.len(), w.iter().map(|&wi| n_o * wi / total));
    Ok(WeightSet {
        original: DVector::from_column_slice(w),
        adjusted,
        n_o,
    })
}

/// Pseudo-log-likelihood of the participation model at `theta`.
pub fn clw_pseudo_loglik(
    theta: &DVector<f64>,
    z1: &DMatrix<f64>,
    z2: &DMatrix<f64>,
    w2: &DVector<f64>,
) -> Result<f64> {
    clw_pseudo_loglik_weighted(theta, z1, None, z2, w2)
}

/// Pseudo-log-likelihood with optional per-row nps multiplicities (used by
/// the Dirichlet-weight bootstrap). `m1 = None` means unit multiplicities.
pub fn clw_pseudo_loglik_weighted(
    theta: &DVector<f64>,
    z1: &DMatrix<f64>,
    m1: Option<&[f64]>,
    z2: &DMatrix<f64>,
    w2: &DVector<f64>,
) -> Result<f64> {
    check_dims(theta, z1, z2, w2, m1)?;
    let eta1 = z1 * theta;
    let eta2 = z2 * theta;
    let mut ll = 0.0;
    for i in 0..z1.nrows() {
        let m = m1.map_or(1.0, |m| m[i]);
        ll += m * eta1[i];
    }
    for i in 0..z2.nrows() {
        ll -= w2[i] * softplus(eta2[i]);
    }
    Ok(ll)
}

/// Gradient of the pseudo-log-likelihood:
/// `sum_nps m_i z_1i - sum_ps W_2i pi(z_2i) z_2i`.
pub fn clw_gradient(
    theta: &DVector<f64>,
    z1: &DMatrix<f64>,
    z2: &DMatrix<f64>,
    w2: &DVector<f64>,
) -> Result<DVector<f64>> {
    clw_gradient_weighted(theta, z1, None, z2, w2)
}

pub fn clw_gradient_weighted(
    theta: &DVector<f64>,
    z1: &DMatrix<f64>,
    m1: Option<&[f64]>,
    z2: &DMatrix<f64>,
    w2: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dims(theta, z1, z2, w2, m1)?;
    let q = theta.len();
    let mut g = DVector::zeros(q);
    for i in 0..z1.nrows() {
        let m = m1.map_or(1.0, |m| m[i]);
        for j in 0..q {
            g[j] += m * z1[(i, j)];
        }
    }
    let eta2 = z2 * theta;
    for i in 0..z2.nrows() {
        let c = w2[i] * logistic(eta2[i]);
        for j in 0..q {
            g[j] -= c * z2[(i, j)];
        }
    }
    Ok(g)
}

fn check_dims(
    theta: &DVector<f64>,
    z1: &DMatrix<f64>,
    z2: &DMatrix<f64>,
    w2: &DVector<f64>,
    m1: Option<&[f64]>,
) -> Result<()> {
    let q = theta.len();
    if z1.ncols() != q || z2.ncols() != q || w2.len() != z2.nrows() {
        return Err(SurvintError::data(
            "dimension_mismatch",
            format!(
                "theta {q}, z1 {}x{}, z2 {}x{}, w2 {}",
                z1.nrows(),
                z1.ncols(),
                z2.nrows(),
                z2.ncols(),
                w2.len()
            ),
        ));
    }
    if let Some(m) = m1 {
        if m.len() != z1.nrows() {
            return Err(SurvintError::data(
                "dimension_mismatch",
                format!("nps multiplicities {} vs rows {}", m.len(), z1.nrows()),
            ));
        }
    }
    Ok(())
}

/// Fitted participation model for the nps.
#[derive(Debug, Clone, Serialize)]
pub struct PropensityFit {
    pub theta: Vec<f64>,
    /// Fitted participation probabilities for the nps rows.
    pub pi: Vec<f64>,
    /// Raw nps weights `1 / pi_i` before post-processing.
    pub w1: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PropensityOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Maximum number of step-halvings per Newton iteration.
    pub damping: usize,
}

impl Default for PropensityOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            damping: 40,
        }
    }
}

/// Maximize the pseudo-log-likelihood by damped Newton iteration from
/// `theta = 0`. The objective is concave, so step-halving on the likelihood
/// guarantees ascent; if Newton still stalls the solver falls back to
/// gradient ascent with a backtracking line search.
pub fn estimate_propensity(
    z1: &DMatrix<f64>,
    z2: &DMatrix<f64>,
    w2: &DVector<f64>,
    opts: PropensityOptions,
) -> Result<PropensityFit> {
    estimate_propensity_weighted(z1, None, z2, w2, opts)
}

pub fn estimate_propensity_weighted(
    z1: &DMatrix<f64>,
    m1: Option<&[f64]>,
    z2: &DMatrix<f64>,
    w2: &DVector<f64>,
    opts: PropensityOptions,
) -> Result<PropensityFit> {
    let q = z1.ncols();
    let mut theta = DVector::zeros(q);
    let mut ll = clw_pseudo_loglik_weighted(&theta, z1, m1, z2, w2)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut grad = clw_gradient_weighted(&theta, z1, m1, z2, w2)?;

    for _ in 0..opts.max_iter {
        iterations += 1;
        if grad.norm() <= opts.tol {
            converged = true;
            break;
        }
        // Negative Hessian: sum_ps W_2i pi(1-pi) z z'. The nps term is linear
        // in theta and contributes nothing.
        let eta2 = z2 * &theta;
        let curv: Vec<f64> = (0..z2.nrows())
            .map(|i| {
                let p = logistic(eta2[i]);
                w2[i] * p * (1.0 - p)
            })
            .collect();
        let neg_hess = weighted_cross(z2, &curv);
        let step = match spd_cholesky(neg_hess, "propensity_hessian") {
            Ok(chol) => chol.solve(&grad),
            Err(e) => {
                if iterations == 1 {
                    // Rank deficiency at the start means the ps design matrix
                    // itself is deficient; surface it.
                    return Err(e);
                }
                grad.clone() * (1.0 / grad.norm().max(1.0))
            }
        };
        // Step halving on the likelihood, with a tiny slack so rounding
        // noise on a flat plateau cannot block the quadratic tail.
        let slack = 1e-12 * (1.0 + ll.abs());
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.damping {
            let cand = &theta + &step * alpha;
            let cand_ll = clw_pseudo_loglik_weighted(&cand, z1, m1, z2, w2)?;
            if cand_ll.is_finite() && cand_ll >= ll - slack {
                theta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        grad = clw_gradient_weighted(&theta, z1, m1, z2, w2)?;
    }

    if !converged && grad.norm() > opts.tol {
        // Gradient ascent fallback with backtracking.
        let scale: f64 = 1.0 / (1.0 + grad.norm());
        let mut alpha = scale;
        for _ in 0..(4 * opts.max_iter) {
            iterations += 1;
            if grad.norm() <= opts.tol {
                converged = true;
                break;
            }
            let slack = 1e-12 * (1.0 + ll.abs());
            let mut local = alpha;
            let mut accepted = false;
            for _ in 0..opts.damping {
                let cand = &theta + &grad * local;
                let cand_ll = clw_pseudo_loglik_weighted(&cand, z1, m1, z2, w2)?;
                if cand_ll.is_finite() && cand_ll > ll - slack {
                    theta = cand;
                    ll = cand_ll;
                    alpha = local * 2.0;
                    accepted = true;
                    break;
                }
                local *= 0.5;
            }
            if !accepted {
                break;
            }
            grad = clw_gradient_weighted(&theta, z1, m1, z2, w2)?;
        }
    } else if grad.norm() <= opts.tol {
        converged = true;
    }

    let final_gradient_norm = grad.norm();
    if !converged {
        return Err(SurvintError::numeric(format!(
            "propensity_nonconvergence after {iterations} iterations, gradient norm {final_gradient_norm:.3e}"
        )));
    }

    let eta1 = z1 * &theta;
    let pi: Vec<f64> = eta1.iter().map(|&e| logistic(e)).collect();
    for (i, &p) in pi.iter().enumerate() {
        if !(p > 0.0 && p < 1.0) {
            return Err(SurvintError::numeric(format!(
                "propensity_degenerate fitted probability {p} in nps row {}",
                i + 1
            )));
        }
    }
    let w1: Vec<f64> = pi.iter().map(|&p| 1.0 / p).collect();
    Ok(PropensityFit {
        theta: theta.iter().copied().collect(),
        pi,
        w1,
        converged,
        iterations,
        final_gradient_norm,
    })
}

/// Clamp weights below `lower` up to `lower` and weights above the empirical
/// `upper_quantile` down to that quantile (linear-interpolation order
/// statistics).
pub fn winsorize_weights(w1: &[f64], lower: f64, upper_quantile: f64) -> Result<Vec<f64>> {
    if w1.is_empty() {
        return Err(SurvintError::data("empty_weights", "no weights supplied"));
    }
    if !(0.0..=1.0).contains(&upper_quantile) {
        return Err(SurvintError::usage(format!(
            "upper_quantile {upper_quantile} must lie in [0,1]"
        )));
    }
    let mut sorted = w1.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cap = quantile_sorted(&sorted, upper_quantile);
    if lower > cap {
        return Err(SurvintError::numeric(format!(
            "winsorize_bounds_crossed lower {lower} exceeds upper cap {cap}"
        )));
    }
    Ok(w1.iter().map(|&w| w.clamp(lower, cap)).collect())
}

/// Rescale weights so they sum to `target` (e.g. the estimated population
/// size).
pub fn normalize_to_total(w: &[f64], target: f64) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.iter().map(|&wi| wi * target / total).collect()
}

/// Calibration result under the Euclidean distance.
#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub lambda: DVector<f64>,
    pub w_tilde: DVector<f64>,
    /// `sum w~_j z_j - t` after any negative-weight clamping.
    pub residual: DVector<f64>,
    /// Indices of weights that went negative and were clamped.
    pub clamped: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    /// Importance factors q_j; defaults to 1.
    pub importance: Option<Vec<f64>>,
    /// Replace negative calibrated weights by one and rescale the rest so the
    /// first (intercept) total is restored.
    pub clamp_negative: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            importance: None,
            clamp_negative: true,
        }
    }
}

/// Euclidean-distance calibration: solve `A lambda = 2(t - sum w z)` with
/// `A = sum w_j q_j z_j z_j'`, then `w~_j = w_j (1 + q_j lambda' z_j / 2)`.
pub fn calibrate_weights(
    w: &[f64],
    z: &DMatrix<f64>,
    t: &DVector<f64>,
    opts: &CalibrationOptions,
) -> Result<CalibrationResult> {
    let n = w.len();
    let p = z.ncols();
    if z.nrows() != n || t.len() != p {
        return Err(SurvintError::data(
            "dimension_mismatch",
            format!("weights {n}, z {}x{}, totals {}", z.nrows(), p, t.len()),
        ));
    }
    let q = match &opts.importance {
        Some(q) => {
            if q.len() != n {
                return Err(SurvintError::data(
                    "dimension_mismatch",
                    format!("importance {} vs weights {n}", q.len()),
                ));
            }
            q.clone()
        }
        None => vec![1.0; n],
    };

    let wq: Vec<f64> = w.iter().zip(&q).map(|(&wi, &qi)| wi * qi).collect();
    let a = weighted_cross(z, &wq);
    let mut b = t.clone();
    for i in 0..n {
        for j in 0..p {
            b[j] -= w[i] * z[(i, j)];
        }
    }
    b *= 2.0;
    let chol = spd_cholesky(a, "calibration_system")?;
    let lambda = chol.solve(&b);

    let mut w_tilde = DVector::zeros(n);
    let mut clamped = Vec::new();
    for i in 0..n {
        let zl: f64 = (0..p).map(|j| lambda[j] * z[(i, j)]).sum();
        let wt = w[i] * (1.0 + q[i] * zl / 2.0);
        if wt < 0.0 {
            clamped.push(i);
        }
        w_tilde[i] = wt;
    }

    if !clamped.is_empty() && opts.clamp_negative {
        // Negative weights become one; the remaining weights are rescaled so
        // the intercept total still matches t_1.
        let clamp_total: f64 = clamped.iter().map(|&i| z[(i, 0)]).sum();
        let rest_total: f64 = (0..n)
            .filter(|i| !clamped.contains(i))
            .map(|i| w_tilde[i] * z[(i, 0)])
            .sum();
        let c = (t[0] - clamp_total) / rest_total;
        if !(c > 0.0) || !c.is_finite() {
            return Err(SurvintError::numeric(format!(
                "calibration_clamp_infeasible cannot restore intercept total {} after clamping {} weights",
                t[0],
                clamped.len()
            )));
        }
        for i in 0..n {
            if clamped.contains(&i) {
                w_tilde[i] = 1.0;
            } else {
                w_tilde[i] *= c;
            }
        }
    }

    let mut residual = -t.clone();
    for i in 0..n {
        for j in 0..p {
            residual[j] += w_tilde[i] * z[(i, j)];
        }
    }
    Ok(CalibrationResult {
        lambda,
        w_tilde,
        residual,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngstat::RngStream;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn ess_equal_weights_is_n() {
        let w = vec![3.7; 12];
        assert!((effective_sample_size(&w).unwrap() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn ess_hand_computed() {
        // (1+1+1+3)^2 / (1+1+1+9) = 36/12 = 3
        let w = vec![1.0, 1.0, 1.0, 3.0];
        assert!((effective_sample_size(&w).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ess_rejects_bad_input() {
        assert!(effective_sample_size(&[]).is_err());
        assert!(effective_sample_size(&[1.0, 0.0]).is_err());
        assert!(effective_sample_size(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn adjust_weights_hand_computed() {
        // W = (1,3): n_o = 16/10 = 1.6, w = (0.4, 1.2)
        let ws = adjust_weights(&[1.0, 3.0]).unwrap();
        assert!((ws.n_o - 1.6).abs() < 1e-12);
        assert!((ws.adjusted[0] - 0.4).abs() < 1e-12);
        assert!((ws.adjusted[1] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn adjust_weights_equal_pair() {
        let ws = adjust_weights(&[1.0, 1.0]).unwrap();
        assert_eq!(ws.n_o, 2.0);
        assert_eq!(ws.adjusted[0], 1.0);
        assert_eq!(ws.adjusted[1], 1.0);
    }

    proptest! {
        #[test]
        fn ess_is_scale_invariant(scale in 1e-6f64..1e6, n in 1usize..40, seed in 0u64..1000) {
            let mut rng = RngStream::new(seed, 0).substream(0);
            let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 10.0 + 0.01).collect();
            let scaled: Vec<f64> = w.iter().map(|&v| v * scale).collect();
            let a = effective_sample_size(&w).unwrap();
            let b = effective_sample_size(&scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn adjusted_weights_sum_to_ess_and_preserve_ratios(n in 2usize..40, seed in 0u64..1000) {
            let mut rng = RngStream::new(seed, 1).substream(0);
            let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 10.0 + 0.01).collect();
            let ws = adjust_weights(&w).unwrap();
            let sum: f64 = ws.adjusted.iter().sum();
            let sumsq: f64 = ws.adjusted.iter().map(|v| v * v).sum();
            prop_assert!((sum - ws.n_o).abs() < 1e-9 * ws.n_o);
            // sum w^2 = n_o holds by construction for these adjusted weights
            prop_assert!((sumsq - ws.n_o).abs() < 1e-9 * ws.n_o);
            prop_assert!(sumsq <= sum * sum + 1e-9);
            let r0 = ws.adjusted[1] / ws.adjusted[0];
            let r1 = w[1] / w[0];
            prop_assert!((r0 - r1).abs() < 1e-9 * r1.abs().max(1.0));
        }
    }

    fn toy_problem(seed: u64, n1: usize, n2: usize, q: usize) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let mut rng = RngStream::new(seed, 2).substream(0);
        let gen_mat = |n: usize, rng: &mut rand_chacha::ChaCha12Rng| {
            DMatrix::from_fn(n, q, |_, j| {
                if j == 0 {
                    1.0
                } else {
                    rng.gen::<f64>() * 2.0 - 1.0
                }
            })
        };
        let z1 = gen_mat(n1, &mut rng);
        let z2 = gen_mat(n2, &mut rng);
        let w2 = DVector::from_fn(n2, |_, _| rng.gen::<f64>() * 20.0 + 1.0);
        (z1, z2, w2)
    }

    #[test]
    fn loglik_at_zero_intercept_only() {
        // theta = 0 => nps term 0, ps term -log(2) * sum W
        let z1 = DMatrix::from_element(5, 1, 1.0);
        let z2 = DMatrix::from_element(4, 1, 1.0);
        let w2 = DVector::from_vec(vec![2.0, 3.0, 4.0, 1.0]);
        let theta = DVector::zeros(1);
        let ll = clw_pseudo_loglik(&theta, &z1, &z2, &w2).unwrap();
        assert!((ll + 10.0 * 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loglik_handles_huge_linear_predictors() {
        let z1 = DMatrix::from_element(3, 1, 1.0);
        let z2 = DMatrix::from_element(3, 1, 1.0);
        let w2 = DVector::from_element(3, 2.0);
        for t in [-700.0, 700.0] {
            let theta = DVector::from_vec(vec![t]);
            let ll = clw_pseudo_loglik(&theta, &z1, &z2, &w2).unwrap();
            assert!(ll.is_finite(), "ll at {t} = {ll}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (z1, z2, w2) = toy_problem(11, 40, 30, 3);
        let mut rng = RngStream::new(99, 3).substream(0);
        let h = 1e-5;
        for _ in 0..20 {
            let theta = DVector::from_fn(3, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
            let g = clw_gradient(&theta, &z1, &z2, &w2).unwrap();
            for j in 0..3 {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[j] += h;
                tm[j] -= h;
                let fd = (clw_pseudo_loglik(&tp, &z1, &z2, &w2).unwrap()
                    - clw_pseudo_loglik(&tm, &z1, &z2, &w2).unwrap())
                    / (2.0 * h);
                let denom = g[j].abs().max(1.0);
                assert!(
                    (g[j] - fd).abs() / denom < 1e-6,
                    "component {j}: analytic {} fd {}",
                    g[j],
                    fd
                );
            }
        }
    }

    #[test]
    fn loglik_decreases_opposite_the_gradient() {
        let (z1, z2, w2) = toy_problem(5, 30, 20, 2);
        let theta = DVector::from_vec(vec![0.3, -0.2]);
        let g = clw_gradient(&theta, &z1, &z2, &w2).unwrap();
        let ll = clw_pseudo_loglik(&theta, &z1, &z2, &w2).unwrap();
        let step = &g * (1e-4 / g.norm());
        let ll_down = clw_pseudo_loglik(&(&theta - &step), &z1, &z2, &w2).unwrap();
        assert!(ll_down < ll);
    }

    #[test]
    fn intercept_only_root_is_analytic() {
        // First-order condition with intercept only: n_1 = pi * sum W_2i,
        // so pi_hat = n_1 / sum W_2i.
        let n1 = 40;
        let z1 = DMatrix::from_element(n1, 1, 1.0);
        let z2 = DMatrix::from_element(25, 1, 1.0);
        let w2 = DVector::from_fn(25, |i, _| 3.0 + (i % 5) as f64);
        let sum_w: f64 = w2.iter().sum();
        let fit = estimate_propensity(&z1, &z2, &w2, PropensityOptions::default()).unwrap();
        let expected = n1 as f64 / sum_w;
        assert!(
            (fit.pi[0] - expected).abs() < 1e-8,
            "pi {} expected {}",
            fit.pi[0],
            expected
        );
        assert!(fit.final_gradient_norm <= 1e-8);
    }

    #[test]
    fn solution_gradient_norm_is_small() {
        let (z1, z2, w2) = toy_problem(21, 200, 80, 3);
        let fit = estimate_propensity(&z1, &z2, &w2, PropensityOptions::default()).unwrap();
        let theta = DVector::from_vec(fit.theta.clone());
        let g = clw_gradient(&theta, &z1, &z2, &w2).unwrap();
        assert!(g.norm() <= 1e-8, "gradient norm {}", g.norm());
        assert!(fit.pi.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(fit
            .w1
            .iter()
            .zip(&fit.pi)
            .all(|(&w, &p)| (w - 1.0 / p).abs() < 1e-12));
    }

    #[test]
    fn tightening_tolerance_barely_moves_the_solution() {
        let (z1, z2, w2) = toy_problem(31, 150, 60, 3);
        let loose = estimate_propensity(
            &z1,
            &z2,
            &w2,
            PropensityOptions {
                tol: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        let tight = estimate_propensity(
            &z1,
            &z2,
            &w2,
            PropensityOptions {
                tol: 1e-10,
                ..Default::default()
            },
        )
        .unwrap();
        for j in 0..3 {
            assert!((loose.theta[j] - tight.theta[j]).abs() < 1e-5);
        }
    }

    #[test]
    fn propensity_is_row_permutation_invariant() {
        let (z1, z2, w2) = toy_problem(41, 60, 40, 3);
        let fit = estimate_propensity(&z1, &z2, &w2, PropensityOptions::default()).unwrap();
        let rev1 = DMatrix::from_fn(z1.nrows(), 3, |i, j| z1[(z1.nrows() - 1 - i, j)]);
        let rev2 = DMatrix::from_fn(z2.nrows(), 3, |i, j| z2[(z2.nrows() - 1 - i, j)]);
        let revw = DVector::from_fn(w2.len(), |i, _| w2[w2.len() - 1 - i]);
        let fit2 = estimate_propensity(&rev1, &rev2, &revw, PropensityOptions::default()).unwrap();
        for j in 0..3 {
            assert!((fit.theta[j] - fit2.theta[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn rank_deficient_design_is_reported() {
        // Two identical columns in the ps design.
        let z1 = DMatrix::from_fn(10, 2, |_, _| 1.0);
        let z2 = DMatrix::from_fn(8, 2, |_, _| 1.0);
        let w2 = DVector::from_element(8, 2.0);
        let err = estimate_propensity(&z1, &z2, &w2, PropensityOptions::default()).unwrap_err();
        assert!(err.to_string().contains("rank_deficient"), "{err}");
    }

    #[test]
    fn winsorize_noop_when_in_range() {
        let w = vec![1.5, 2.0, 2.5];
        let out = winsorize_weights(&w, 1.0, 1.0).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn winsorize_lower_clamp_only() {
        let out = winsorize_weights(&[0.5, 2.0, 3.0], 1.0, 1.0).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn winsorize_caps_at_upper_quantile() {
        let mut rng = RngStream::new(3, 4).substream(0);
        let mut w: Vec<f64> = (0..999).map(|_| 1.0 + rng.gen::<f64>() * 4.0).collect();
        w.push(1e6);
        let mut sorted = w.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cap = quantile_sorted(&sorted, 0.99);
        let out = winsorize_weights(&w, 1.0, 0.99).unwrap();
        let max = out.iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - cap).abs() < 1e-9, "max {max} cap {cap}");
    }

    #[test]
    fn winsorize_crossed_bounds_is_an_error() {
        assert!(winsorize_weights(&[0.1, 0.2, 0.3], 1.0, 0.5).is_err());
    }

    #[test]
    fn calibration_matched_totals_means_lambda_zero() {
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 3.0, 1.0, 5.0]);
        let w = [2.0, 1.0, 0.5];
        let mut t = DVector::zeros(2);
        for i in 0..3 {
            for j in 0..2 {
                t[j] += w[i] * z[(i, j)];
            }
        }
        let res = calibrate_weights(&w, &z, &t, &CalibrationOptions::default()).unwrap();
        assert!(res.lambda.norm() < 1e-10);
        for i in 0..3 {
            assert!((res.w_tilde[i] - w[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn calibration_intercept_only_hand_solved() {
        // w = (1,1), t = 4: A = 2, b = 2(4-2) = 4, lambda = 2, w~ = 1+1 = 2.
        let z = DMatrix::from_element(2, 1, 1.0);
        let res = calibrate_weights(
            &[1.0, 1.0],
            &z,
            &DVector::from_vec(vec![4.0]),
            &CalibrationOptions::default(),
        )
        .unwrap();
        assert!((res.w_tilde[0] - 2.0).abs() < 1e-12);
        assert!((res.w_tilde[1] - 2.0).abs() < 1e-12);
        assert!(res.residual[0].abs() < 1e-12);
    }

    #[test]
    fn calibration_equations_hold_on_random_instances() {
        let mut rng = RngStream::new(17, 5).substream(0);
        for _ in 0..20 {
            let n = 30;
            let z = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.gen::<f64>() * 4.0 });
            let w: Vec<f64> = (0..n).map(|_| 0.5 + rng.gen::<f64>() * 3.0).collect();
            // Perturb the achieved totals a little to force a real solve.
            let mut t = DVector::zeros(3);
            for i in 0..n {
                for j in 0..3 {
                    t[j] += w[i] * z[(i, j)];
                }
            }
            for j in 0..3 {
                t[j] *= 1.0 + 0.05 * (rng.gen::<f64>() - 0.5);
            }
            let res = calibrate_weights(
                &w,
                &z,
                &t,
                &CalibrationOptions {
                    clamp_negative: false,
                    ..Default::default()
                },
            )
            .unwrap();
            let tol = 1e-8 * (1.0 + t.norm());
            assert!(
                res.residual.amax() <= tol,
                "residual {} tol {tol}",
                res.residual.amax()
            );
        }
    }

    #[test]
    fn negative_weights_are_clamped_and_intercept_total_restored() {
        // An x-total beyond what positive weights can reach forces the
        // calibrated weights on the x=0 rows negative.
        let z = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 10.0, 1.0, 10.0]);
        let w = [1.0, 1.0, 1.0, 1.0];
        let t = DVector::from_vec(vec![4.0, 41.0]);
        let res = calibrate_weights(&w, &z, &t, &CalibrationOptions::default()).unwrap();
        assert!(!res.clamped.is_empty());
        assert!(res.w_tilde.iter().all(|&v| v > 0.0));
        let intercept_total: f64 = res.w_tilde.iter().sum();
        assert!((intercept_total - 4.0).abs() < 1e-9);
    }

    #[test]
    fn singular_calibration_system_is_an_error() {
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = calibrate_weights(
            &[1.0, 1.0],
            &z,
            &DVector::from_vec(vec![3.0, 3.0]),
            &CalibrationOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("rank_deficient"));
    }
}
