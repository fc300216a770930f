//! End-to-end scenario fitting from a pair of raw samples: propensity
//! weights for the nps, weight post-processing, adjustment, scenario fit and
//! population facts. Shared by the CLI and the bootstrap.

use nalgebra::{DMatrix, DVector};

use crate::dataset::{FactsSource, PopulationFacts, SurveySample};
use crate::error::{Result, SurvintError};
use crate::posterior::{
    fit_integrated, fit_nps_only, fit_ps_only, FitData, IntegratedSufficients, PosteriorDraws,
    ScenarioKind, ScenarioSpec,
};
use crate::simulation::WeightProcessing;
use crate::weights::{
    adjust_weights, estimate_propensity_weighted, normalize_to_total, winsorize_weights,
    PropensityOptions,
};

/// Borrowed views of the two samples' model matrices.
#[derive(Debug, Clone)]
pub struct SamplePair<'a> {
    pub nps_x: &'a DMatrix<f64>,
    pub nps_z: &'a DMatrix<f64>,
    pub nps_y: &'a DVector<f64>,
    pub ps_x: &'a DMatrix<f64>,
    pub ps_z: &'a DMatrix<f64>,
    pub ps_y: &'a DVector<f64>,
    pub ps_w: &'a DVector<f64>,
}

impl<'a> SamplePair<'a> {
    pub fn from_samples(nps: &'a SurveySample, ps: &'a SurveySample) -> Result<Self> {
        Ok(Self {
            nps_x: &nps.x,
            nps_z: &nps.z,
            nps_y: &nps.y,
            ps_x: &ps.x,
            ps_z: &ps.z,
            ps_y: &ps.y,
            ps_w: ps.weights()?,
        })
    }
}

/// Per-row weight trace for reporting.
#[derive(Debug, Clone)]
pub struct WeightReport {
    pub pi: Vec<f64>,
    pub w1_raw: Vec<f64>,
    pub w1_winsorized: Vec<f64>,
    pub w1_final: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub weight_processing: WeightProcessing,
    pub propensity: PropensityOptions,
    pub grid_size: usize,
    pub draws: usize,
    pub a_min: f64,
    pub a_max: f64,
    /// Facts override; the default estimates them from the ps by IPW.
    pub external_facts: Option<PopulationFacts>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            weight_processing: WeightProcessing::default(),
            propensity: PropensityOptions::default(),
            grid_size: 1000,
            draws: 10_000,
            a_min: 0.0,
            a_max: 1.0,
            external_facts: None,
        }
    }
}

pub struct PipelineFit {
    pub draws: PosteriorDraws,
    pub facts: PopulationFacts,
    pub sufficients: Option<IntegratedSufficients>,
    pub weights: Option<WeightReport>,
}

/// Estimate and post-process nps weights. `nps_mult`/`ps_mult` are optional
/// bootstrap multiplicities applied on top (Dirichlet mode).
pub fn nps_weight_chain(
    pair: &SamplePair,
    opts: &PipelineOptions,
    nps_mult: Option<&[f64]>,
    ps_mult: Option<&[f64]>,
) -> Result<WeightReport> {
    let w2_eff = effective_ps_weights(pair, ps_mult);
    let fit = estimate_propensity_weighted(
        pair.nps_z,
        nps_mult,
        pair.ps_z,
        &w2_eff,
        opts.propensity,
    )?;
    let wp = &opts.weight_processing;
    let w1_winsorized = if wp.winsorize {
        winsorize_weights(&fit.w1, wp.lower_clamp, wp.upper_quantile)?
    } else {
        fit.w1.clone()
    };
    let mut w1_final = w1_winsorized.clone();
    if wp.normalize_to_population {
        let n_hat: f64 = w2_eff.iter().sum();
        w1_final = normalize_to_total(&w1_final, n_hat);
    }
    if let Some(m) = nps_mult {
        for (w, &mi) in w1_final.iter_mut().zip(m) {
            *w *= mi;
        }
    }
    Ok(WeightReport {
        pi: fit.pi,
        w1_raw: fit.w1,
        w1_winsorized,
        w1_final,
    })
}

fn effective_ps_weights(pair: &SamplePair, ps_mult: Option<&[f64]>) -> DVector<f64> {
    match ps_mult {
        Some(m) => DVector::from_fn(pair.ps_w.len(), |i, _| pair.ps_w[i] * m[i]),
        None => pair.ps_w.clone(),
    }
}

/// Fit one scenario end to end.
pub fn fit_scenario(
    pair: &SamplePair,
    kind: ScenarioKind,
    opts: &PipelineOptions,
    seed: u64,
) -> Result<PipelineFit> {
    fit_scenario_weighted(pair, kind, opts, seed, None, None)
}

pub fn fit_scenario_weighted(
    pair: &SamplePair,
    kind: ScenarioKind,
    opts: &PipelineOptions,
    seed: u64,
    nps_mult: Option<&[f64]>,
    ps_mult: Option<&[f64]>,
) -> Result<PipelineFit> {
    let w2_eff = effective_ps_weights(pair, ps_mult);
    let facts = match &opts.external_facts {
        Some(f) => f.clone(),
        None => {
            let n_hat: f64 = w2_eff.iter().sum();
            let p = pair.ps_x.ncols();
            let mut xbar = vec![0.0; p];
            for i in 0..pair.ps_x.nrows() {
                for j in 0..p {
                    xbar[j] += w2_eff[i] * pair.ps_x[(i, j)];
                }
            }
            for v in &mut xbar {
                *v /= n_hat;
            }
            PopulationFacts {
                n_hat,
                xbar_hat: xbar,
                source: FactsSource::PsIpw,
            }
        }
    };

    // Only the scenarios that use the nps need its estimated weights.
    let needs_nps = !matches!(kind, ScenarioKind::PsOnly | ScenarioKind::PsUnweighted);
    let weights = if needs_nps {
        Some(nps_weight_chain(pair, opts, nps_mult, ps_mult)?)
    } else {
        None
    };

    let w2_adj = adjust_weights(w2_eff.as_slice())?.adjusted;
    let (draws, sufficients) = match kind {
        ScenarioKind::NpsOnly => {
            let w1 = adjust_weights(&weights.as_ref().unwrap().w1_final)?.adjusted;
            (
                fit_nps_only(FitData::new(pair.nps_x, pair.nps_y, &w1), opts.draws, seed)?,
                None,
            )
        }
        ScenarioKind::PsOnly => (
            fit_ps_only(
                FitData::new(pair.ps_x, pair.ps_y, &w2_adj),
                true,
                opts.draws,
                seed,
            )?,
            None,
        ),
        ScenarioKind::PsUnweighted => (
            fit_ps_only(
                FitData::new(pair.ps_x, pair.ps_y, &w2_adj),
                false,
                opts.draws,
                seed,
            )?,
            None,
        ),
        ScenarioKind::NpsPrior | ScenarioKind::PsPrior => {
            let w1 = adjust_weights(&weights.as_ref().unwrap().w1_final)?.adjusted;
            let mut spec = ScenarioSpec::new(kind, seed);
            spec.grid_size = opts.grid_size;
            spec.draws = opts.draws;
            spec.a_min = opts.a_min;
            spec.a_max = opts.a_max;
            let (d, s) = fit_integrated(
                FitData::new(pair.nps_x, pair.nps_y, &w1),
                FitData::new(pair.ps_x, pair.ps_y, &w2_adj),
                spec,
            )?;
            (d, Some(s))
        }
    };

    if facts.xbar_hat.len() != draws.p() {
        return Err(SurvintError::data(
            "dimension_mismatch",
            "population facts do not match the study covariates",
        ));
    }
    Ok(PipelineFit {
        draws,
        facts,
        sufficients,
        weights,
    })
}
