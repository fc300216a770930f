//! Small shared linear-algebra helpers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, SurvintError};

/// Relative pivot tolerance for declaring a symmetric system singular.
pub const SPD_PIVOT_RTOL: f64 = 1e-12;

/// Cholesky factorization with singularity detection. `context` names the
/// matrix in the error message.
pub fn spd_cholesky(mat: DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(mat).ok_or_else(|| {
        SurvintError::numeric(format!("rank_deficient {context}: matrix is not positive definite"))
    })?;
    let diag: Vec<f64> = (0..chol.l_dirty().nrows())
        .map(|i| chol.l_dirty()[(i, i)].abs())
        .collect();
    let max = diag.iter().cloned().fold(0.0_f64, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if min * min <= SPD_PIVOT_RTOL * max * max {
        return Err(SurvintError::numeric(format!(
            "rank_deficient {context}: pivot ratio {:.3e} below tolerance",
            (min * min) / (max * max)
        )));
    }
    Ok(chol)
}

/// Log-determinant from a Cholesky factor.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    (0..chol.l_dirty().nrows())
        .map(|i| chol.l_dirty()[(i, i)].ln())
        .sum::<f64>()
        * 2.0
}

/// Accumulate `sum_i c_i x_i x_i'` over the rows of `x`.
pub fn weighted_cross(x: &DMatrix<f64>, c: &[f64]) -> DMatrix<f64> {
    let p = x.ncols();
    let mut out = DMatrix::zeros(p, p);
    for i in 0..x.nrows() {
        let ci = c[i];
        for j in 0..p {
            let xij = x[(i, j)];
            for k in j..p {
                out[(j, k)] += ci * xij * x[(i, k)];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            out[(j, k)] = out[(k, j)];
        }
    }
    out
}

/// Accumulate `sum_i c_i x_i y_i` over the rows of `x`.
pub fn weighted_xty(x: &DMatrix<f64>, y: &DVector<f64>, c: &[f64]) -> DVector<f64> {
    let p = x.ncols();
    let mut out = DVector::zeros(p);
    for i in 0..x.nrows() {
        let cy = c[i] * y[i];
        for j in 0..p {
            out[j] += cy * x[(i, j)];
        }
    }
    out
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, stable in both tails.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Linear-interpolation quantile of `values` at probability `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&sorted, q)
}

/// Quantile on already-sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Neumaier compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
