//! Sample ingestion and validation.
//!
//! A [`SurveySample`] holds one sample's responses, covariates and (for the
//! probability sample) design weights. Covariates come in two named sets: the
//! study covariates `x` that enter the population model, and the
//! participation covariates `z` that enter the propensity model. The study
//! set must be a subset of the participation set, and the response column may
//! appear in neither.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvintError};

pub const INTERCEPT_NAME: &str = "(intercept)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleRole {
    Nps,
    Ps,
}

impl std::fmt::Display for SampleRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SampleRole::Nps => write!(f, "nps"),
            SampleRole::Ps => write!(f, "ps"),
        }
    }
}

/// Column bindings for [`load_sample`]. Names refer to CSV header fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSchema {
    pub response: String,
    /// Design-weight column. Required when the role is `ps`; optional
    /// pre-estimated weights for an `nps`.
    #[serde(default)]
    pub weight: Option<String>,
    /// Study covariates (population model), excluding the intercept.
    pub study: Vec<String>,
    /// Participation covariates (propensity model). Defaults to `study`.
    #[serde(default)]
    pub participation: Vec<String>,
    /// Prepend a constant-one column to both covariate sets.
    #[serde(default = "default_true")]
    pub intercept: bool,
    /// Standardize non-intercept covariate columns to zero mean, unit
    /// variance. Off by default; the regressions use covariates as-is.
    #[serde(default)]
    pub standardize: bool,
}

fn default_true() -> bool {
    true
}

impl SampleSchema {
    pub fn new(response: &str, weight: Option<&str>, study: &[&str]) -> Self {
        Self {
            response: response.to_string(),
            weight: weight.map(|s| s.to_string()),
            study: study.iter().map(|s| s.to_string()).collect(),
            participation: Vec::new(),
            intercept: true,
            standardize: false,
        }
    }

    fn participation_or_study(&self) -> Vec<String> {
        if self.participation.is_empty() {
            self.study.clone()
        } else {
            self.participation.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        let part = self.participation_or_study();
        let part_set: HashSet<&String> = part.iter().collect();
        for s in &self.study {
            if !part_set.contains(s) {
                return Err(SurvintError::data(
                    "study_not_in_participation",
                    format!("study covariate '{s}' is not in the participation set"),
                ));
            }
        }
        if part.iter().any(|c| c == &self.response) {
            return Err(SurvintError::data(
                "response_in_covariates",
                format!(
                    "response column '{}' must not enter the participation model",
                    self.response
                ),
            ));
        }
        if let Some(w) = &self.weight {
            if part.iter().any(|c| c == w) || &self.response == w {
                return Err(SurvintError::data(
                    "weight_in_model",
                    format!("weight column '{w}' cannot also be a model column"),
                ));
            }
        }
        Ok(())
    }
}

/// One sample's validated rows.
#[derive(Debug, Clone)]
pub struct SurveySample {
    pub role: SampleRole,
    /// n x p study design matrix (intercept first when declared).
    pub x: DMatrix<f64>,
    /// n x q participation design matrix (intercept first when declared).
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Design weights; present for ps, optional for nps.
    pub w: Option<DVector<f64>>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
}

impl SurveySample {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Direct constructor for synthetic data. The participation matrix is
    /// reused as the study matrix when `z` is `None`.
    pub fn from_parts(
        role: SampleRole,
        x: DMatrix<f64>,
        z: Option<DMatrix<f64>>,
        y: DVector<f64>,
        w: Option<DVector<f64>>,
    ) -> Result<Self> {
        let z = z.unwrap_or_else(|| x.clone());
        let x_names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        let z_names = (0..z.ncols()).map(|j| format!("z{j}")).collect();
        let s = Self {
            role,
            x,
            z,
            y,
            w,
            x_names,
            z_names,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn weights(&self) -> Result<&DVector<f64>> {
        self.w.as_ref().ok_or_else(|| {
            SurvintError::data(
                "missing_design_weights",
                format!("{} sample carries no design weights", self.role),
            )
        })
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.y.len() != n || self.z.nrows() != n {
            return Err(SurvintError::data(
                "dimension_mismatch",
                format!(
                    "rows disagree: x {} y {} z {}",
                    n,
                    self.y.len(),
                    self.z.nrows()
                ),
            ));
        }
        if n < self.p() {
            return Err(SurvintError::data(
                "insufficient_rows",
                format!("n={} rows is less than p={} columns", n, self.p()),
            ));
        }
        if let Some(w) = &self.w {
            if w.len() != n {
                return Err(SurvintError::data(
                    "dimension_mismatch",
                    format!("weights {} vs rows {}", w.len(), n),
                ));
            }
            for (i, &wi) in w.iter().enumerate() {
                if !(wi > 0.0) || !wi.is_finite() {
                    return Err(SurvintError::data(
                        "nonpositive_weight",
                        format!("weight {} in row {} must be positive", wi, i + 1),
                    ));
                }
            }
        }
        for m in [&self.x, &self.z] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(SurvintError::data("non_finite_cell", "covariate matrix"));
            }
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(SurvintError::data("non_finite_cell", "response vector"));
        }
        Ok(())
    }
}

/// Estimated population size and mean covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationFacts {
    pub n_hat: f64,
    pub xbar_hat: Vec<f64>,
    pub source: FactsSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactsSource {
    PsIpw,
    External,
}

impl PopulationFacts {
    pub fn external(n_hat: f64, xbar_hat: Vec<f64>) -> Result<Self> {
        if !(n_hat > 0.0) {
            return Err(SurvintError::data(
                "nonpositive_population_size",
                format!("N_hat = {n_hat}"),
            ));
        }
        Ok(Self {
            n_hat,
            xbar_hat,
            source: FactsSource::External,
        })
    }

    pub fn xbar(&self) -> DVector<f64> {
        DVector::from_vec(self.xbar_hat.clone())
    }
}

/// Inverse-probability-weighted population facts from the ps:
/// `N_hat = sum W_2i`, `xbar_hat = sum W_2i x_2i / sum W_2i`.
pub fn population_facts_from_ps(ps: &SurveySample) -> Result<PopulationFacts> {
    let w = ps.weights()?;
    let n_hat: f64 = w.iter().sum();
    let mut xbar = DVector::zeros(ps.p());
    for i in 0..ps.n() {
        for j in 0..ps.p() {
            xbar[j] += w[i] * ps.x[(i, j)];
        }
    }
    xbar /= n_hat;
    Ok(PopulationFacts {
        n_hat,
        xbar_hat: xbar.iter().copied().collect(),
        source: FactsSource::PsIpw,
    })
}

/// Load and validate one sample from an RFC-4180 style CSV with a header row.
pub fn load_sample(path: &Path, schema: &SampleSchema, role: SampleRole) -> Result<SurveySample> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| SurvintError::data("unreadable_file", format!("{}: {e}", path.display())))?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| SurvintError::data("bad_header", e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();

    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            SurvintError::data("missing_column", format!("column '{name}' not found"))
        })
    };

    let participation = schema.participation_or_study();
    let y_idx = find(&schema.response)?;
    let part_idx: Vec<usize> = participation
        .iter()
        .map(|c| find(c))
        .collect::<Result<_>>()?;
    let study_idx: Vec<usize> = schema.study.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let w_idx = match (&schema.weight, role) {
        (Some(w), _) => Some(find(w)?),
        (None, SampleRole::Ps) => {
            return Err(SurvintError::data(
                "missing_design_weights",
                "missing design weights for ps",
            ))
        }
        (None, SampleRole::Nps) => None,
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            SurvintError::data("bad_record", format!("row {}: {e}", r + 1))
        })?;
        let mut parsed = Vec::with_capacity(record.len());
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                SurvintError::data(
                    "non_numeric_cell",
                    format!(
                        "row {} column '{}' value '{}'",
                        r + 1,
                        headers.get(c).map(String::as_str).unwrap_or("?"),
                        field
                    ),
                )
            })?;
            parsed.push(v);
        }
        if parsed.len() != headers.len() {
            return Err(SurvintError::data(
                "bad_record",
                format!("row {}: {} fields, expected {}", r + 1, parsed.len(), headers.len()),
            ));
        }
        rows.push(parsed);
    }
    let n = rows.len();
    if n == 0 {
        return Err(SurvintError::data("empty_file", path.display().to_string()));
    }

    let w = match w_idx {
        Some(idx) => {
            let mut w = DVector::zeros(n);
            for (i, row) in rows.iter().enumerate() {
                let wi = row[idx];
                if !(wi > 0.0) {
                    return Err(SurvintError::data(
                        "nonpositive_weight",
                        format!("weight {} in row {} must be positive", wi, i + 1),
                    ));
                }
                w[i] = wi;
            }
            Some(w)
        }
        None => None,
    };

    let build = |idx: &[usize], names: &[String]| -> (DMatrix<f64>, Vec<String>) {
        let offset = usize::from(schema.intercept);
        let p = idx.len() + offset;
        let mut m = DMatrix::zeros(n, p);
        let mut out_names = Vec::with_capacity(p);
        if schema.intercept {
            for i in 0..n {
                m[(i, 0)] = 1.0;
            }
            out_names.push(INTERCEPT_NAME.to_string());
        }
        for (j, &col) in idx.iter().enumerate() {
            for (i, row) in rows.iter().enumerate() {
                m[(i, j + offset)] = row[col];
            }
            out_names.push(names[j].clone());
        }
        if schema.standardize {
            for j in offset..p {
                let mut col = m.column_mut(j);
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let sd = var.sqrt();
                if sd > 0.0 {
                    for v in col.iter_mut() {
                        *v = (*v - mean) / sd;
                    }
                }
            }
        }
        (m, out_names)
    };

    let (x, x_names) = build(&study_idx, &schema.study);
    let (z, z_names) = build(&part_idx, &participation);
    let y = DVector::from_iterator(n, rows.iter().map(|row| row[y_idx]));

    let sample = SurveySample {
        role,
        x,
        z,
        y,
        w,
        x_names,
        z_names,
    };
    sample.validate()?;
    Ok(sample)
}

/// Write a sample back to CSV: weight column (if any), the participation
/// covariates (without the synthesized intercept), then the response.
/// Values print in shortest round-trip form, so a reload reproduces the
/// numeric content exactly.
pub fn write_sample(sample: &SurveySample, path: &Path) -> Result<()> {
    let mut out = std::fs::File::create(path)
        .map_err(|e| SurvintError::io(path.display().to_string(), e))?;
    let offset = sample.z_names.first().map(String::as_str) == Some(INTERCEPT_NAME);
    let covar_names: Vec<&str> = sample
        .z_names
        .iter()
        .skip(usize::from(offset))
        .map(String::as_str)
        .collect();
    let mut header: Vec<&str> = Vec::new();
    if sample.w.is_some() {
        header.push("weight");
    }
    header.extend(&covar_names);
    header.push("y");
    writeln!(out, "{}", header.join(","))
        .map_err(|e| SurvintError::io(path.display().to_string(), e))?;
    for i in 0..sample.n() {
        let mut fields: Vec<String> = Vec::with_capacity(header.len());
        if let Some(w) = &sample.w {
            fields.push(format!("{}", w[i]));
        }
        for j in usize::from(offset)..sample.z.ncols() {
            fields.push(format!("{}", sample.z[(i, j)]));
        }
        fields.push(format!("{}", sample.y[i]));
        writeln!(out, "{}", fields.join(","))
            .map_err(|e| SurvintError::io(path.display().to_string(), e))?;
    }
    Ok(())
}
