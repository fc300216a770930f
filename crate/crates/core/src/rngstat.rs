//! Deterministic random-number and distribution layer.
//!
//! Every consumer works with a [`RngStream`], a value identified by a master
//! seed and a stream id. A stream never hands out raw random values directly;
//! instead each logical draw opens its own *substream* keyed by a counter, so
//! the sequence a draw consumes is independent of how many values any other
//! draw consumed. Parallel schedules therefore cannot change results: draw
//! `k` of stream `s` under master seed `m` is the same on one thread or many.
//!
//! Distribution conventions:
//! - `draw_inverse_gamma(shape, scale)` has density proportional to
//!   `x^{-shape-1} exp(-scale/x)`, so the mean is `scale/(shape-1)` for
//!   `shape > 1`. Note that some libraries call `scale` the "rate" of the
//!   reciprocal gamma; here a draw is exactly `1/Gamma(shape, rate=scale)`.
//! - `draw_mvn` factorizes the covariance with a Cholesky decomposition and
//!   returns `mean + L z`.
//! - `draw_from_grid` normalizes log-weights by max subtraction before
//!   exponentiating, then inverts the cumulative sum with a single uniform.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Result, SurvintError};

const STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A splittable, value-like handle on a deterministic random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    master: u64,
    stream: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master: master_seed,
            stream: stream_id,
        }
    }

    /// Child stream with an id mixed from this stream's id and `child`.
    /// Distinct `(stream, child)` pairs map to distinct children with
    /// overwhelming probability.
    pub fn derive(&self, child: u64) -> Self {
        Self {
            master: self.master,
            stream: splitmix64(self.stream ^ splitmix64(child ^ STREAM_SALT)),
        }
    }

    /// Dedicated generator for one logical draw. The `(master, stream,
    /// counter)` triple fully determines the byte sequence, independently of
    /// any other substream.
    pub fn substream(&self, counter: u64) -> ChaCha12Rng {
        let mut seed = [0u8; 32];
        seed[0..8].copy_from_slice(&self.master.to_le_bytes());
        seed[8..16].copy_from_slice(&self.stream.to_le_bytes());
        seed[16..24].copy_from_slice(&counter.to_le_bytes());
        seed[24..32].copy_from_slice(&STREAM_SALT.to_le_bytes());
        ChaCha12Rng::from_seed(seed)
    }
}

/// Standard normal draw.
pub fn draw_standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Normal(mean, sd^2) draw.
pub fn draw_normal(mean: f64, sd: f64, rng: &mut ChaCha12Rng) -> f64 {
    mean + sd * draw_standard_normal(rng)
}

/// Uniform(0,1) draw.
pub fn draw_uniform(rng: &mut ChaCha12Rng) -> f64 {
    rng.gen::<f64>()
}

/// Inverse-gamma draw with density proportional to `x^{-shape-1} e^{-scale/x}`.
pub fn draw_inverse_gamma(shape: f64, scale: f64, rng: &mut ChaCha12Rng) -> Result<f64> {
    if !(shape > 0.0) || !(scale > 0.0) {
        return Err(SurvintError::numeric(format!(
            "inverse_gamma_parameters shape={shape} scale={scale} must be positive"
        )));
    }
    // 1/Gamma(shape, rate = scale); rand_distr's Gamma is shape/scale form,
    // so the gamma scale parameter is 1/scale.
    let gamma = Gamma::new(shape, 1.0 / scale)
        .map_err(|e| SurvintError::numeric(format!("gamma_construction {e}")))?;
    let mut g = gamma.sample(rng);
    // Guard against a zero from underflow for very small shapes.
    while g <= 0.0 {
        g = gamma.sample(rng);
    }
    Ok(1.0 / g)
}

/// Gamma(shape, scale) draw, shape-scale parameterization.
pub fn draw_gamma(shape: f64, scale: f64, rng: &mut ChaCha12Rng) -> Result<f64> {
    if !(shape > 0.0) || !(scale > 0.0) {
        return Err(SurvintError::numeric(format!(
            "gamma_parameters shape={shape} scale={scale} must be positive"
        )));
    }
    let gamma = Gamma::new(shape, scale)
        .map_err(|e| SurvintError::numeric(format!("gamma_construction {e}")))?;
    Ok(gamma.sample(rng))
}

/// Bernoulli(p) draw.
pub fn draw_bernoulli(p: f64, rng: &mut ChaCha12Rng) -> bool {
    rng.gen::<f64>() < p
}

/// Dirichlet(1,...,1) draw of dimension `k` via normalized exponentials.
pub fn draw_flat_dirichlet(k: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut g: Vec<f64> = (0..k)
        .map(|_| {
            let u: f64 = rng.gen::<f64>();
            -(1.0 - u).ln()
        })
        .collect();
    let total: f64 = g.iter().sum();
    for v in &mut g {
        *v /= total;
    }
    g
}

/// Multivariate normal draw `mean + L z` with `cov = L L'`.
pub fn draw_mvn(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut ChaCha12Rng) -> Result<DVector<f64>> {
    let chol = Cholesky::new(cov.clone())
        .ok_or_else(|| SurvintError::numeric("mvn_covariance_not_spd"))?;
    Ok(draw_mvn_factored(mean, &chol, 1.0, rng))
}

/// Multivariate normal draw from a precomputed Cholesky factor of the
/// covariance, scaled by `sd` (i.e., covariance `sd^2 L L'`).
pub fn draw_mvn_factored(
    mean: &DVector<f64>,
    cov_chol: &Cholesky<f64, Dyn>,
    sd: f64,
    rng: &mut ChaCha12Rng,
) -> DVector<f64> {
    let p = mean.len();
    let z = DVector::from_fn(p, |_, _| draw_standard_normal(rng));
    mean + cov_chol.l() * z * sd
}

/// Index draw from a discrete distribution given on the log scale.
pub fn draw_from_grid(log_weights: &[f64], rng: &mut ChaCha12Rng) -> Result<usize> {
    let u = rng.gen::<f64>();
    grid_inverse_cdf(log_weights, u)
}

/// Deterministic inverse-CDF lookup used by [`draw_from_grid`].
pub fn grid_inverse_cdf(log_weights: &[f64], u: f64) -> Result<usize> {
    let max = log_weights
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(SurvintError::numeric("grid_all_weights_zero"));
    }
    let mut total = 0.0;
    let weights: Vec<f64> = log_weights
        .iter()
        .map(|&lw| {
            let w = if lw.is_finite() { (lw - max).exp() } else { 0.0 };
            total += w;
            w
        })
        .collect();
    debug_assert!(total > 0.0, "max subtraction guarantees at least one unit weight");
    let target = u * total;
    let mut cum = 0.0;
    for (idx, w) in weights.iter().enumerate() {
        cum += w;
        if target < cum {
            return Ok(idx);
        }
    }
    // Fell off the end through rounding; return the last positive-weight cell.
    Ok(weights
        .iter()
        .rposition(|&w| w > 0.0)
        .expect("at least one positive weight"))
}
