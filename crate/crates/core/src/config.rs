//! Run configuration: a TOML file binds columns and default settings;
//! command-line flags override file values. Every run writes a manifest
//! (merged config echo, artifact hashes, version) next to its outputs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::SampleSchema;
use crate::error::{Result, SurvintError};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FileConfig {
    pub columns: Option<SampleSchema>,
    #[serde(default)]
    pub weights: WeightsConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub binary: BinaryConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightsConfig {
    pub winsorize: bool,
    pub lower_clamp: f64,
    pub upper_quantile: f64,
    pub normalize_to_population: bool,
    pub clamp_negative: bool,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        Self {
            winsorize: true,
            lower_clamp: 1.0,
            upper_quantile: 0.99,
            normalize_to_population: true,
            clamp_negative: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub scenario: Option<String>,
    pub grid_size: usize,
    pub draws: usize,
    pub seed: u64,
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            grid_size: 1000,
            draws: 10_000,
            seed: 1,
            a_min: 0.0,
            a_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BinaryConfig {
    pub grid_points: usize,
    pub burnin: usize,
    pub thin: usize,
    pub draws: usize,
    /// Continuous columns to replace by fixed-width class midpoints before
    /// the constrained population resampling.
    pub discretize: Vec<String>,
    pub bin_width: f64,
    pub constraint_tol: f64,
    pub max_tries: usize,
    pub refresh_every: usize,
}

impl Default for BinaryConfig {
    fn default() -> Self {
        Self {
            grid_points: 201,
            burnin: 1000,
            thin: 5,
            draws: 5000,
            discretize: Vec::new(),
            bin_width: 5.0,
            constraint_tol: 0.01,
            max_tries: 1000,
            refresh_every: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub mode: String,
    pub inner_draws: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 1000,
            mode: "with_replacement".to_string(),
            inner_draws: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub n_population: usize,
    pub n1: usize,
    pub n2: usize,
    pub rho_list: Vec<f64>,
    pub replications: usize,
    pub scenarios: Vec<String>,
    pub misspec: String,
    pub draws_per_fit: usize,
    pub grid_size: usize,
    pub standardize_participation: bool,
    pub facts_source: String,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_population: 20_000,
            n1: 1500,
            n2: 300,
            rho_list: vec![0.2, 0.3, 0.5, 0.8],
            replications: 200,
            scenarios: vec!["B".into(), "C".into(), "D".into(), "E".into(), "G".into()],
            misspec: "none".into(),
            draws_per_fit: 4000,
            grid_size: 1000,
            standardize_participation: true,
            facts_source: "true_population".into(),
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| SurvintError::io(p.display().to_string(), e))?;
            toml::from_str(&text)
                .map_err(|e| SurvintError::usage(format!("config {}: {e}", p.display())))
        }
    }
}

/// Write `manifest.json`: the merged configuration, a sha256 per artifact,
/// and the crate version. Deliberately no timestamps, so a rerun with the
/// same seed reproduces the manifest byte for byte.
pub fn write_manifest(
    out_dir: &Path,
    subcommand: &str,
    merged_config: serde_json::Value,
    artifacts: &[PathBuf],
) -> Result<PathBuf> {
    let mut hashes = BTreeMap::new();
    for a in artifacts {
        let bytes = std::fs::read(a).map_err(|e| SurvintError::io(a.display().to_string(), e))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let name = a
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| a.display().to_string());
        hashes.insert(name, format!("{:x}", hasher.finalize()));
    }
    let manifest = serde_json::json!({
        "tool": "survint",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "config": merged_config,
        "artifacts": hashes,
    });
    let path = out_dir.join("manifest.json");
    let mut f =
        std::fs::File::create(&path).map_err(|e| SurvintError::io(path.display().to_string(), e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)
        .map_err(|e| SurvintError::usage(format!("manifest serialization: {e}")))?;
    f.write_all(b"\n")
        .map_err(|e| SurvintError::io(path.display().to_string(), e))?;
    Ok(path)
}
