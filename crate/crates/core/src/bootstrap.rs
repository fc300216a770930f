//! Two-stage bootstrap propagating the uncertainty of estimated nps weights
//! and of the population facts into the population-mean posterior.
//!
//! Per replicate: resample the nps rows and the ps rows independently
//! (design weights travel with their ps rows and are never re-estimated),
//! re-run the propensity estimation from scratch, recompute `(N, xbar)` from
//! the ps replicate, fit the requested scenario and pool its mean draws
//! across replicates.
//!
//! Rows are canonicalized by a content hash before anything else, so
//! permuting the input rows leaves every replicate — and the pooled
//! summaries — bit-identical.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SurvintError};
use crate::linalg::quantile_sorted;
use crate::pipeline::{fit_scenario_weighted, PipelineOptions, SamplePair};
use crate::posterior::ScenarioKind;
use crate::prediction::{summarize, surrogate_mean_draws, Summary};
use crate::rngstat::{draw_flat_dirichlet, draw_uniform, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    WithReplacement,
    DirichletWeights,
}

impl std::str::FromStr for ResampleMode {
    type Err = SurvintError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_replacement" => Ok(ResampleMode::WithReplacement),
            "dirichlet_weights" => Ok(ResampleMode::DirichletWeights),
            other => Err(SurvintError::usage(format!(
                "unknown resample mode '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapSpec {
    pub replicates: usize,
    pub mode: ResampleMode,
    pub inner_draws: usize,
    pub seed: u64,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        Self {
            replicates: 1000,
            mode: ResampleMode::WithReplacement,
            inner_draws: 100,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapPosterior {
    /// All mean draws pooled across replicates.
    pub pooled: Vec<f64>,
    pub pooled_summary: Summary,
    pub per_replicate: Vec<Summary>,
    /// The same scenario fitted once on the original samples.
    pub baseline: Summary,
    pub dropped_replicates: usize,
}

/// Canonical row order: sort by a content hash so the procedure cannot see
/// the input ordering.
fn canonical_order(rows: &[Vec<f64>]) -> Vec<usize> {
    let mut keyed: Vec<(u64, usize)> = rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut hasher = Sha256::new();
            for v in row {
                hasher.update(v.to_le_bytes());
            }
            let digest = hasher.finalize();
            let mut key = [0u8; 8];
            key.copy_from_slice(&digest[..8]);
            (u64::from_le_bytes(key), i)
        })
        .collect();
    keyed.sort_by_key(|&(k, _)| k);
    keyed.into_iter().map(|(_, i)| i).collect()
}

struct OwnedSamples {
    nps_x: DMatrix<f64>,
    nps_z: DMatrix<f64>,
    nps_y: DVector<f64>,
    ps_x: DMatrix<f64>,
    ps_z: DMatrix<f64>,
    ps_y: DVector<f64>,
    ps_w: DVector<f64>,
}

impl OwnedSamples {
    fn pair(&self) -> SamplePair<'_> {
        SamplePair {
            nps_x: &self.nps_x,
            nps_z: &self.nps_z,
            nps_y: &self.nps_y,
            ps_x: &self.ps_x,
            ps_z: &self.ps_z,
            ps_y: &self.ps_y,
            ps_w: &self.ps_w,
        }
    }
}

fn row_of(pair: &SamplePair, nps: bool, i: usize) -> Vec<f64> {
    let mut row = Vec::new();
    if nps {
        row.extend(pair.nps_z.row(i).iter());
        row.extend(pair.nps_x.row(i).iter());
        row.push(pair.nps_y[i]);
    } else {
        row.extend(pair.ps_z.row(i).iter());
        row.extend(pair.ps_x.row(i).iter());
        row.push(pair.ps_y[i]);
        row.push(pair.ps_w[i]);
    }
    row
}

fn reorder(pair: &SamplePair) -> OwnedSamples {
    let n1 = pair.nps_y.len();
    let n2 = pair.ps_y.len();
    let nps_rows: Vec<Vec<f64>> = (0..n1).map(|i| row_of(pair, true, i)).collect();
    let ps_rows: Vec<Vec<f64>> = (0..n2).map(|i| row_of(pair, false, i)).collect();
    let o1 = canonical_order(&nps_rows);
    let o2 = canonical_order(&ps_rows);
    OwnedSamples {
        nps_x: DMatrix::from_fn(n1, pair.nps_x.ncols(), |i, j| pair.nps_x[(o1[i], j)]),
        nps_z: DMatrix::from_fn(n1, pair.nps_z.ncols(), |i, j| pair.nps_z[(o1[i], j)]),
        nps_y: DVector::from_fn(n1, |i, _| pair.nps_y[o1[i]]),
        ps_x: DMatrix::from_fn(n2, pair.ps_x.ncols(), |i, j| pair.ps_x[(o2[i], j)]),
        ps_z: DMatrix::from_fn(n2, pair.ps_z.ncols(), |i, j| pair.ps_z[(o2[i], j)]),
        ps_y: DVector::from_fn(n2, |i, _| pair.ps_y[o2[i]]),
        ps_w: DVector::from_fn(n2, |i, _| pair.ps_w[o2[i]]),
    }
}

fn resample_indices(n: usize, rng: &mut rand_chacha::ChaCha12Rng) -> Vec<usize> {
    (0..n)
        .map(|_| ((draw_uniform(rng) * n as f64) as usize).min(n - 1))
        .collect()
}

fn take_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

fn take_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

/// Run the full two-stage procedure for one scenario.
pub fn bootstrap_pipeline(
    pair: &SamplePair,
    scenario: ScenarioKind,
    opts: &PipelineOptions,
    spec: &BootstrapSpec,
) -> Result<BootstrapPosterior> {
    if spec.replicates == 0 {
        return Err(SurvintError::usage("at least one bootstrap replicate"));
    }
    let canon = reorder(pair);
    let base = canon.pair();
    let n1 = base.nps_y.len();
    let n2 = base.ps_y.len();

    // Baseline fit without any bootstrap, on the canonical samples.
    let mut base_opts = opts.clone();
    base_opts.draws = (spec.inner_draws * spec.replicates).max(1000);
    let baseline_fit = fit_scenario_weighted(&base, scenario, &base_opts, spec.seed, None, None)?;
    let baseline = surrogate_mean_draws(&baseline_fit.draws, &baseline_fit.facts)?.summary;

    let stream = RngStream::new(spec.seed, 0x42_4f4f54);
    let mut inner_opts = opts.clone();
    inner_opts.draws = spec.inner_draws;
    inner_opts.external_facts = None; // recomputed from each ps replicate

    let results: Vec<Result<Vec<f64>>> = (0..spec.replicates)
        .into_par_iter()
        .map(|b| {
            let rep_stream = stream.derive(b as u64);
            let seed = spec.seed.wrapping_mul(0x9e37).wrapping_add(b as u64);
            match spec.mode {
                ResampleMode::WithReplacement => {
                    let mut rng = rep_stream.substream(0);
                    let i1 = resample_indices(n1, &mut rng);
                    let i2 = resample_indices(n2, &mut rng);
                    let rs = OwnedSamples {
                        nps_x: take_rows(&canon.nps_x, &i1),
                        nps_z: take_rows(&canon.nps_z, &i1),
                        nps_y: take_vec(&canon.nps_y, &i1),
                        ps_x: take_rows(&canon.ps_x, &i2),
                        ps_z: take_rows(&canon.ps_z, &i2),
                        ps_y: take_vec(&canon.ps_y, &i2),
                        ps_w: take_vec(&canon.ps_w, &i2),
                    };
                    let fit = fit_scenario_weighted(&rs.pair(), scenario, &inner_opts, seed, None, None)?;
                    Ok(surrogate_mean_draws(&fit.draws, &fit.facts)?.draws)
                }
                ResampleMode::DirichletWeights => {
                    let mut rng = rep_stream.substream(0);
                    let g1: Vec<f64> = draw_flat_dirichlet(n1, &mut rng)
                        .into_iter()
                        .map(|g| g * n1 as f64)
                        .collect();
                    let g2: Vec<f64> = draw_flat_dirichlet(n2, &mut rng)
                        .into_iter()
                        .map(|g| g * n2 as f64)
                        .collect();
                    let fit = fit_scenario_weighted(
                        &base,
                        scenario,
                        &inner_opts,
                        seed,
                        Some(&g1),
                        Some(&g2),
                    )?;
                    Ok(surrogate_mean_draws(&fit.draws, &fit.facts)?.draws)
                }
            }
        })
        .collect();

    let mut pooled = Vec::with_capacity(spec.replicates * spec.inner_draws);
    let mut per_replicate = Vec::with_capacity(spec.replicates);
    let mut dropped = 0usize;
    for res in results {
        match res {
            Ok(draws) => {
                if draws.len() >= 100 {
                    per_replicate.push(summarize(&draws, 0.95)?);
                } else {
                    let pm = draws.iter().sum::<f64>() / draws.len() as f64;
                    let var = draws.iter().map(|v| (v - pm).powi(2)).sum::<f64>()
                        / (draws.len().max(2) - 1) as f64;
                    per_replicate.push(Summary {
                        pm,
                        psd: var.sqrt(),
                        pcv: if pm != 0.0 { var.sqrt() / pm.abs() } else { f64::NAN },
                        nse: var.sqrt() / (draws.len() as f64).sqrt(),
                        hpd_lower: f64::NAN,
                        hpd_upper: f64::NAN,
                        hpd_level: 0.95,
                    });
                }
                pooled.extend(draws);
            }
            Err(_) => dropped += 1,
        }
    }
    if dropped * 20 > spec.replicates {
        return Err(SurvintError::numeric(format!(
            "bootstrap_failure_rate {dropped} of {} replicates failed",
            spec.replicates
        )));
    }
    let pooled_summary = summarize(&pooled, 0.95)?;
    Ok(BootstrapPosterior {
        pooled,
        pooled_summary,
        per_replicate,
        baseline,
        dropped_replicates: dropped,
    })
}

/// Summary of one bootstrapped quantity with order-statistic interval.
#[derive(Debug, Clone, Serialize)]
pub struct BootQuantity {
    pub pm: f64,
    pub psd: f64,
    pub lower: f64,
    pub upper: f64,
}

fn boot_quantity(values: &mut [f64]) -> BootQuantity {
    let b = values.len() as f64;
    let pm = values.iter().sum::<f64>() / b;
    let psd = (values.iter().map(|v| (v - pm).powi(2)).sum::<f64>() / (b - 1.0)).sqrt();
    values.sort_by(|a, c| a.partial_cmp(c).unwrap());
    BootQuantity {
        pm,
        psd,
        lower: quantile_sorted(values, 0.025),
        upper: quantile_sorted(values, 0.975),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PreliminaryBootstrap {
    pub n_hat: BootQuantity,
    pub ybar: BootQuantity,
    pub xbar: Vec<BootQuantity>,
    pub replicates: usize,
}

/// Bayesian-bootstrap distributions of `(N, xbar, ybar)` from the ps alone:
/// per replicate `N_b = sum W*`, `xbar_b = sum W* x / N_b`,
/// `ybar_b = sum W* y / N_b`, with 95% intervals from order statistics.
pub fn preliminary_ps_bootstrap(
    ps_x: &DMatrix<f64>,
    ps_y: &DVector<f64>,
    ps_w: &DVector<f64>,
    replicates: usize,
    seed: u64,
) -> Result<PreliminaryBootstrap> {
    let n = ps_y.len();
    let p = ps_x.ncols();
    if replicates < 100 {
        return Err(SurvintError::usage(
            "at least 100 replicates for interval reporting",
        ));
    }
    let stream = RngStream::new(seed, 0x50_5342);
    let rows: Vec<(f64, Vec<f64>, f64)> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream.substream(b as u64);
            let idx = resample_indices(n, &mut rng);
            let n_b: f64 = idx.iter().map(|&i| ps_w[i]).sum();
            let mut xb = vec![0.0; p];
            let mut yb = 0.0;
            for &i in &idx {
                for j in 0..p {
                    xb[j] += ps_w[i] * ps_x[(i, j)];
                }
                yb += ps_w[i] * ps_y[i];
            }
            for v in &mut xb {
                *v /= n_b;
            }
            (n_b, xb, yb / n_b)
        })
        .collect();

    let mut n_vals: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let mut y_vals: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let xbar = (0..p)
        .map(|j| {
            let mut v: Vec<f64> = rows.iter().map(|r| r.1[j]).collect();
            boot_quantity(&mut v)
        })
        .collect();
    Ok(PreliminaryBootstrap {
        n_hat: boot_quantity(&mut n_vals),
        ybar: boot_quantity(&mut y_vals),
        xbar,
        replicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngstat::draw_standard_normal;
    use rand::Rng;

    struct Data {
        nps_x: DMatrix<f64>,
        nps_z: DMatrix<f64>,
        nps_y: DVector<f64>,
        ps_x: DMatrix<f64>,
        ps_z: DMatrix<f64>,
        ps_y: DVector<f64>,
        ps_w: DVector<f64>,
    }

    impl Data {
        fn pair(&self) -> SamplePair<'_> {
            SamplePair {
                nps_x: &self.nps_x,
                nps_z: &self.nps_z,
                nps_y: &self.nps_y,
                ps_x: &self.ps_x,
                ps_z: &self.ps_z,
                ps_y: &self.ps_y,
                ps_w: &self.ps_w,
            }
        }

        fn permuted(&self, seed: u64) -> Data {
            let mut rng = RngStream::new(seed, 99).substream(0);
            let perm = |n: usize, rng: &mut rand_chacha::ChaCha12Rng| {
                let mut v: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    let j = ((rng.gen::<f64>()) * (i + 1) as f64) as usize;
                    v.swap(i, j.min(i));
                }
                v
            };
            let p1 = perm(self.nps_y.len(), &mut rng);
            let p2 = perm(self.ps_y.len(), &mut rng);
            Data {
                nps_x: take_rows(&self.nps_x, &p1),
                nps_z: take_rows(&self.nps_z, &p1),
                nps_y: take_vec(&self.nps_y, &p1),
                ps_x: take_rows(&self.ps_x, &p2),
                ps_z: take_rows(&self.ps_z, &p2),
                ps_y: take_vec(&self.ps_y, &p2),
                ps_w: take_vec(&self.ps_w, &p2),
            }
        }
    }

    fn synth(seed: u64, n1: usize, n2: usize) -> Data {
        let stream = RngStream::new(seed, 20);
        let mut rng = stream.substream(0);
        let p = 2;
        let gen_x = |n: usize, rng: &mut rand_chacha::ChaCha12Rng| {
            DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.gen::<f64>() * 2.0 })
        };
        let nps_x = gen_x(n1, &mut rng);
        let ps_x = gen_x(n2, &mut rng);
        let f = |x: &DMatrix<f64>, i: usize| 10.0 + 1.5 * x[(i, 1)];
        let nps_y = DVector::from_fn(n1, |i, _| f(&nps_x, i) + draw_standard_normal(&mut rng));
        let ps_y = DVector::from_fn(n2, |i, _| f(&ps_x, i) + draw_standard_normal(&mut rng));
        let ps_w = DVector::from_fn(n2, |_, _| 5.0 + 20.0 * rng.gen::<f64>());
        Data {
            nps_z: nps_x.clone(),
            nps_x,
            nps_y,
            ps_z: ps_x.clone(),
            ps_x,
            ps_y,
            ps_w,
        }
    }

    fn quick_opts() -> PipelineOptions {
        PipelineOptions {
            grid_size: 100,
            draws: 200,
            ..Default::default()
        }
    }

    #[test]
    fn single_replicate_pool_equals_that_replicate() {
        let data = synth(1, 120, 50);
        let spec = BootstrapSpec {
            replicates: 1,
            inner_draws: 400,
            seed: 5,
            ..Default::default()
        };
        let bp = bootstrap_pipeline(&data.pair(), ScenarioKind::PsOnly, &quick_opts(), &spec).unwrap();
        assert_eq!(bp.pooled.len(), 400);
        assert_eq!(bp.per_replicate.len(), 1);
        assert!((bp.pooled_summary.pm - bp.per_replicate[0].pm).abs() < 1e-12);
    }

    #[test]
    fn pooled_count_is_replicates_times_inner_draws() {
        let data = synth(2, 100, 40);
        let spec = BootstrapSpec {
            replicates: 20,
            inner_draws: 150,
            seed: 2,
            ..Default::default()
        };
        let bp =
            bootstrap_pipeline(&data.pair(), ScenarioKind::NpsPrior, &quick_opts(), &spec).unwrap();
        assert_eq!(bp.pooled.len(), 20 * 150);
        assert_eq!(bp.dropped_replicates, 0);
    }

    #[test]
    fn row_permutation_leaves_pooled_results_identical() {
        let data = synth(3, 90, 40);
        let spec = BootstrapSpec {
            replicates: 8,
            inner_draws: 120,
            seed: 9,
            ..Default::default()
        };
        let a = bootstrap_pipeline(&data.pair(), ScenarioKind::NpsOnly, &quick_opts(), &spec).unwrap();
        let permuted = data.permuted(1234);
        let b =
            bootstrap_pipeline(&permuted.pair(), ScenarioKind::NpsOnly, &quick_opts(), &spec).unwrap();
        assert_eq!(a.pooled_summary.pm.to_bits(), b.pooled_summary.pm.to_bits());
        assert_eq!(a.pooled_summary.psd.to_bits(), b.pooled_summary.psd.to_bits());
    }

    #[test]
    fn dirichlet_mode_runs_and_inflates_spread() {
        let data = synth(4, 150, 60);
        let spec = BootstrapSpec {
            replicates: 30,
            inner_draws: 120,
            mode: ResampleMode::DirichletWeights,
            seed: 11,
        };
        let bp = bootstrap_pipeline(&data.pair(), ScenarioKind::PsOnly, &quick_opts(), &spec).unwrap();
        assert!(bp.pooled_summary.psd >= bp.baseline.psd - 2.0 * bp.baseline.nse);
    }

    #[test]
    fn preliminary_bootstrap_constant_response_is_degenerate() {
        let n = 40;
        let x = DMatrix::from_element(n, 1, 1.0);
        let y = DVector::from_element(n, 7.5);
        let w = DVector::from_element(n, 3.0);
        let pb = preliminary_ps_bootstrap(&x, &y, &w, 500, 3).unwrap();
        assert!(pb.ybar.psd < 1e-12);
        assert_eq!(pb.ybar.pm, 7.5);
        assert_eq!(pb.ybar.lower, 7.5);
        assert_eq!(pb.ybar.upper, 7.5);
    }

    #[test]
    fn preliminary_bootstrap_interval_is_order_statistics() {
        let data = synth(5, 50, 200);
        let pb = preliminary_ps_bootstrap(&data.ps_x, &data.ps_y, &data.ps_w, 1000, 7).unwrap();
        assert!(pb.ybar.lower <= pb.ybar.pm && pb.ybar.pm <= pb.ybar.upper);
        assert!(pb.n_hat.lower < pb.n_hat.upper);
        // Intercept column mean is identically one.
        assert!((pb.xbar[0].pm - 1.0).abs() < 1e-12);
        assert!(pb.xbar[0].psd < 1e-12);
    }

    #[test]
    fn preliminary_bootstrap_covers_truth_at_nominal_rate() {
        // Nested Monte Carlo at reduced scale: the 95% interval for ybar
        // should cover the population mean in roughly 95% of outer draws.
        let stream = RngStream::new(42, 21);
        let n_pop = 4000;
        let mut rng = stream.substream(0);
        let pop_y: Vec<f64> = (0..n_pop)
            .map(|_| 20.0 + 2.0 * draw_standard_normal(&mut rng))
            .collect();
        let truth = pop_y.iter().sum::<f64>() / n_pop as f64;

        let outer = 120;
        let n2 = 150;
        let mut covered = 0usize;
        for r in 0..outer {
            let mut rs = stream.derive(100 + r as u64).substream(0);
            // Simple random sample with replacement as the surrogate design.
            let idx: Vec<usize> = (0..n2)
                .map(|_| ((rs.gen::<f64>()) * n_pop as f64) as usize)
                .collect();
            let x = DMatrix::from_element(n2, 1, 1.0);
            let y = DVector::from_fn(n2, |i, _| pop_y[idx[i].min(n_pop - 1)]);
            let w = DVector::from_element(n2, n_pop as f64 / n2 as f64);
            let pb = preliminary_ps_bootstrap(&x, &y, &w, 400, 1000 + r as u64).unwrap();
            if truth >= pb.ybar.lower && truth <= pb.ybar.upper {
                covered += 1;
            }
        }
        let rate = covered as f64 / outer as f64;
        // 3 binomial SEs around 0.95 at 120 outer draws is about +-0.06.
        assert!((rate - 0.95).abs() < 0.06, "coverage {rate}");
    }
}
