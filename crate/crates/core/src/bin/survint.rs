//! Command-line front end: weight estimation, scenario fits, prediction,
//! bootstrap, simulation study and report assembly.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use survint::binary::{
    discretize_column, griddy_gibbs_binary, surrogate_proportion, BinarySamples, GibbsSpec,
    SurrogateProportionSpec,
};
use survint::bootstrap::{
    bootstrap_pipeline, preliminary_ps_bootstrap, BootstrapSpec, ResampleMode,
};
use survint::config::{load_config, write_manifest, FileConfig};
use survint::dataset::{load_sample, PopulationFacts, SampleRole, SampleSchema, SurveySample};
use survint::error::{Result, SurvintError};
use survint::pipeline::{fit_scenario, PipelineOptions, SamplePair};
use survint::posterior::{PosteriorDraws, ScenarioKind, ScenarioSpec};
use survint::prediction::{hpd_interval, surrogate_mean_draws};
use survint::report::{collect_runs, kernel_density, ScenarioRun};
use survint::simulation::{
    run_study, Misspecification, PopulationSpec, StudyFactsSource, StudySpec, WeightProcessing,
};
use survint::weights::{adjust_weights, calibrate_weights, CalibrationOptions};

#[derive(Parser)]
#[command(
    name = "survint",
    version,
    about = "Integrates a probability and a non-probability survey sample for finite-population inference"
)]
struct Cli {
    /// Cap the worker-thread count (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory (falls back to $SURVINT_OUT, then ./survint_out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SampleArgs {
    /// Non-probability sample CSV.
    #[arg(long)]
    nps: PathBuf,
    /// Probability sample CSV (with design weights).
    #[arg(long)]
    ps: PathBuf,
    /// TOML config binding columns and defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate, winsorize and calibrate nps propensity weights.
    Weights {
        #[command(flatten)]
        samples: SampleArgs,
        #[arg(long)]
        lower_clamp: Option<f64>,
        #[arg(long)]
        upper_quantile: Option<f64>,
        /// CSV of (name,total) pairs for full calibration to known totals.
        #[arg(long)]
        calibrate_totals: Option<PathBuf>,
        /// Leave negative calibrated weights in place instead of clamping.
        #[arg(long)]
        no_clamp_negative: bool,
    },
    /// Fit one scenario and write parameter draws.
    Fit {
        #[command(flatten)]
        samples: SampleArgs,
        /// Scenario letter: B, C, D, E or G.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        grid_size: Option<usize>,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        a_min: Option<f64>,
        #[arg(long)]
        a_max: Option<f64>,
    },
    /// Binary study variable: griddy Gibbs plus surrogate proportions.
    FitBinary {
        #[command(flatten)]
        samples: SampleArgs,
        #[arg(long)]
        grid_points: Option<usize>,
        #[arg(long)]
        burnin: Option<usize>,
        #[arg(long)]
        thin: Option<usize>,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        a_min: Option<f64>,
        #[arg(long)]
        a_max: Option<f64>,
        #[arg(long)]
        constraint_tol: Option<f64>,
        #[arg(long)]
        refresh_every: Option<usize>,
    },
    /// Turn parameter draws plus population facts into mean inference.
    Predict {
        /// Draws CSV from `fit` (header a,sigma2,beta_1..beta_p).
        #[arg(long)]
        draws: PathBuf,
        /// Population facts JSON from `fit`.
        #[arg(long)]
        facts: PathBuf,
        /// Model letter for labeling the outputs.
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Two-stage bootstrap over weight estimation and population facts.
    Bootstrap {
        #[command(flatten)]
        samples: SampleArgs,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        replicates: Option<usize>,
        /// with_replacement or dirichlet_weights.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        inner_draws: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also report the preliminary ps-only bootstrap of (N, xbar, ybar).
        #[arg(long)]
        preliminary: bool,
    },
    /// Monte Carlo comparison of the five scenarios.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated list of model-to-data correlations.
        #[arg(long, value_delimiter = ',')]
        rho_list: Option<Vec<f64>>,
        #[arg(long)]
        replications: Option<usize>,
        /// Comma-separated scenario letters.
        #[arg(long, value_delimiter = ',')]
        scenarios: Option<Vec<String>>,
        /// none, drop-x3-popmodel or drop-x3-both.
        #[arg(long)]
        misspec: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_population: Option<usize>,
        #[arg(long)]
        n1: Option<usize>,
        #[arg(long)]
        n2: Option<usize>,
        #[arg(long)]
        draws_per_fit: Option<usize>,
        #[arg(long)]
        grid_size: Option<usize>,
        /// Use the raw covariates in the participation linear predictor.
        #[arg(long)]
        raw_participation: bool,
        /// true_population or ps_ipw.
        #[arg(long)]
        facts_source: Option<String>,
    },
    /// Merge scenario runs into the comparison table plus density curves.
    Report {
        /// Directory containing predict_*.json / ybar_draws_*.csv outputs.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let is_usage_error = e.use_stderr();
            let _ = e.print();
            // Usage problems exit 1; --help/--version exit 0.
            std::process::exit(i32::from(is_usage_error));
        }
    };
    if let Some(t) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: exit={} {e}", e.exit_code());
            std::process::exit(e.exit_code());
        }
    }
}

fn out_dir(cli_out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = cli_out.clone().unwrap_or_else(|| {
        std::env::var_os("SURVINT_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("survint_out"))
    });
    std::fs::create_dir_all(&dir).map_err(|e| SurvintError::io(dir.display().to_string(), e))?;
    Ok(dir)
}

fn schema_of(cfg: &FileConfig) -> Result<SampleSchema> {
    cfg.columns.clone().ok_or_else(|| {
        SurvintError::usage("the config file must carry a [columns] table binding the CSV columns")
    })
}

fn load_pair(args: &SampleArgs, cfg: &FileConfig) -> Result<(SurveySample, SurveySample)> {
    let schema = schema_of(cfg)?;
    let nps = load_sample(&args.nps, &schema, SampleRole::Nps)?;
    let ps = load_sample(&args.ps, &schema, SampleRole::Ps)?;
    Ok((nps, ps))
}

fn weight_processing(cfg: &FileConfig) -> WeightProcessing {
    WeightProcessing {
        winsorize: cfg.weights.winsorize,
        lower_clamp: cfg.weights.lower_clamp,
        upper_quantile: cfg.weights.upper_quantile,
        normalize_to_population: cfg.weights.normalize_to_population,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| SurvintError::io(path.display().to_string(), e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| SurvintError::usage(format!("json serialization: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn run(cli: Cli) -> Result<()> {
    let dir = out_dir(&cli.out)?;
    match cli.command {
        Command::Weights {
            samples,
            lower_clamp,
            upper_quantile,
            calibrate_totals,
            no_clamp_negative,
        } => {
            let cfg = load_config(samples.config.as_deref())?;
            let (nps, ps) = load_pair(&samples, &cfg)?;
            let pair = SamplePair::from_samples(&nps, &ps)?;
            let mut opts = PipelineOptions {
                weight_processing: weight_processing(&cfg),
                ..Default::default()
            };
            if let Some(l) = lower_clamp {
                opts.weight_processing.lower_clamp = l;
            }
            if let Some(q) = upper_quantile {
                opts.weight_processing.upper_quantile = q;
            }
            let report = survint::pipeline::nps_weight_chain(&pair, &opts, None, None)?;

            // Full calibration to provided totals, or the population-size
            // normalization already applied by the chain.
            let calibrated: Vec<f64> = match &calibrate_totals {
                Some(path) => {
                    let totals = read_totals(path, &nps.z_names)?;
                    let res = calibrate_weights(
                        &report.w1_final,
                        &nps.z,
                        &totals,
                        &CalibrationOptions {
                            importance: None,
                            clamp_negative: !no_clamp_negative && cfg.weights.clamp_negative,
                        },
                    )?;
                    res.w_tilde.iter().copied().collect()
                }
                None => report.w1_final.clone(),
            };

            let csv_path = dir.join("weights.csv");
            let mut text = String::from("row_id,pi,W1_raw,W1_winsorized,W1_calibrated\n");
            for i in 0..report.pi.len() {
                text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    i + 1,
                    report.pi[i],
                    report.w1_raw[i],
                    report.w1_winsorized[i],
                    calibrated[i]
                ));
            }
            write_text(&csv_path, &text)?;
            let merged = serde_json::json!({
                "nps": samples.nps,
                "ps": samples.ps,
                "weights": {
                    "lower_clamp": opts.weight_processing.lower_clamp,
                    "upper_quantile": opts.weight_processing.upper_quantile,
                    "calibrate_totals": calibrate_totals,
                    "clamp_negative": !no_clamp_negative,
                },
            });
            write_manifest(&dir, "weights", merged, &[csv_path])?;
            Ok(())
        }

        Command::Fit {
            samples,
            scenario,
            grid_size,
            draws,
            seed,
            a_min,
            a_max,
        } => {
            let cfg = load_config(samples.config.as_deref())?;
            let letter = scenario
                .or(cfg.fit.scenario.clone())
                .ok_or_else(|| SurvintError::usage("missing --scenario (one of B, C, D, E, G)"))?;
            let kind: ScenarioKind = letter.parse()?;
            let (nps, ps) = load_pair(&samples, &cfg)?;
            let pair = SamplePair::from_samples(&nps, &ps)?;
            let opts = PipelineOptions {
                weight_processing: weight_processing(&cfg),
                grid_size: grid_size.unwrap_or(cfg.fit.grid_size),
                draws: draws.unwrap_or(cfg.fit.draws),
                a_min: a_min.unwrap_or(cfg.fit.a_min),
                a_max: a_max.unwrap_or(cfg.fit.a_max),
                ..Default::default()
            };
            let seed = seed.unwrap_or(cfg.fit.seed);
            let fit = fit_scenario(&pair, kind, &opts, seed)?;

            let draws_path = dir.join(format!("draws_{}.csv", kind.letter()));
            write_draws_csv(&draws_path, &fit.draws)?;
            let facts_path = dir.join("facts.json");
            write_json(&facts_path, &serde_json::to_value(&fit.facts).unwrap())?;

            let a_diag = fit.sufficients.as_ref().map(|s| {
                let masses = s.density();
                let mean = s.posterior_mean_a();
                let grid: Vec<f64> = s.points.iter().map(|g| g.a).collect();
                let hpd = discrete_hpd(&grid, &masses);
                serde_json::json!({
                    "a_mean": mean,
                    "a_hpd": hpd,
                    "prior_overlap": s.prior_overlap(),
                })
            });
            let fit_path = dir.join(format!("fit_{}.json", kind.letter()));
            write_json(
                &fit_path,
                &serde_json::json!({
                    "model": kind.letter(),
                    "n1": nps.n(),
                    "n2": ps.n(),
                    "p": nps.p(),
                    "draws": fit.draws.m(),
                    "seed": seed,
                    "discount": a_diag,
                }),
            )?;
            let merged = serde_json::json!({
                "scenario": kind.letter().to_string(),
                "grid_size": opts.grid_size,
                "draws": opts.draws,
                "seed": seed,
                "a_min": opts.a_min,
                "a_max": opts.a_max,
            });
            write_manifest(&dir, "fit", merged, &[draws_path, facts_path, fit_path])?;
            Ok(())
        }

        Command::FitBinary {
            samples,
            grid_points,
            burnin,
            thin,
            draws,
            seed,
            a_min,
            a_max,
            constraint_tol,
            refresh_every,
        } => {
            let cfg = load_config(samples.config.as_deref())?;
            let (nps, ps) = load_pair(&samples, &cfg)?;
            let pair = SamplePair::from_samples(&nps, &ps)?;
            let opts = PipelineOptions {
                weight_processing: weight_processing(&cfg),
                ..Default::default()
            };
            let wrep = survint::pipeline::nps_weight_chain(&pair, &opts, None, None)?;
            let w1 = adjust_weights(&wrep.w1_final)?.adjusted;
            let w2 = adjust_weights(pair.ps_w.as_slice())?.adjusted;
            let bs = BinarySamples {
                nps_x: &nps.x,
                nps_y: &nps.y,
                w1: &w1,
                ps_x: &ps.x,
                ps_y: &ps.y,
                w2: &w2,
            };
            let seed = seed.unwrap_or(cfg.fit.seed);
            let gspec = GibbsSpec {
                grid_points: grid_points.unwrap_or(cfg.binary.grid_points),
                burnin: burnin.unwrap_or(cfg.binary.burnin),
                thin: thin.unwrap_or(cfg.binary.thin),
                draws: draws.unwrap_or(cfg.binary.draws),
                a_min: a_min.unwrap_or(cfg.fit.a_min),
                a_max: a_max.unwrap_or(cfg.fit.a_max),
                seed,
            };
            let post = griddy_gibbs_binary(&bs, &gspec)?;

            // Pool covariates (optionally discretized) and the ps-estimated
            // totals for the constrained population resampling.
            let facts = survint::dataset::population_facts_from_ps(&ps)?;
            let n_pop = facts.n_hat.round() as usize;
            let target = DVector::from_fn(nps.p(), |j, _| facts.xbar_hat[j] * facts.n_hat);
            let mut pool = DMatrix::zeros(nps.n() + ps.n(), nps.p());
            for i in 0..nps.n() {
                for j in 0..nps.p() {
                    pool[(i, j)] = nps.x[(i, j)];
                }
            }
            for i in 0..ps.n() {
                for j in 0..ps.p() {
                    pool[(nps.n() + i, j)] = ps.x[(i, j)];
                }
            }
            for name in &cfg.binary.discretize {
                if let Some(col) = nps.x_names.iter().position(|n| n == name) {
                    discretize_column(&mut pool, col, cfg.binary.bin_width);
                }
            }
            let sspec = SurrogateProportionSpec {
                refresh_every: refresh_every.unwrap_or(cfg.binary.refresh_every),
                tolerance: constraint_tol.unwrap_or(cfg.binary.constraint_tol),
                max_tries: cfg.binary.max_tries,
                seed: seed.wrapping_add(1),
            };
            let prop = surrogate_proportion(&post, &pool, n_pop, &target, &sspec)?;

            let draws_path = dir.join("binary_draws.csv");
            let mut text = String::from("a");
            for j in 0..post.beta.ncols() {
                text.push_str(&format!(",beta_{}", j + 1));
            }
            text.push('\n');
            for k in 0..post.beta.nrows() {
                text.push_str(&format!("{}", post.a[k]));
                for j in 0..post.beta.ncols() {
                    text.push_str(&format!(",{}", post.beta[(k, j)]));
                }
                text.push('\n');
            }
            write_text(&draws_path, &text)?;

            let prop_path = dir.join("ybar_draws_binary.csv");
            let mut text = String::from("ybar\n");
            for v in &prop.draws {
                text.push_str(&format!("{v}\n"));
            }
            write_text(&prop_path, &text)?;

            let summary_path = dir.join("fit_binary.json");
            write_json(
                &summary_path,
                &serde_json::json!({
                    "model": "binary",
                    "proportion": prop.summary,
                    "seed": seed,
                    "n_pop": n_pop,
                }),
            )?;
            let merged = serde_json::json!({
                "grid_points": gspec.grid_points,
                "burnin": gspec.burnin,
                "thin": gspec.thin,
                "draws": gspec.draws,
                "constraint_tol": sspec.tolerance,
                "refresh_every": sspec.refresh_every,
                "seed": seed,
            });
            write_manifest(
                &dir,
                "fit-binary",
                merged,
                &[draws_path, prop_path, summary_path],
            )?;
            Ok(())
        }

        Command::Predict {
            draws,
            facts,
            model,
            seed,
        } => {
            let kind: ScenarioKind = model.parse()?;
            let post = read_draws_csv(&draws, kind, seed)?;
            let facts_text = std::fs::read_to_string(&facts)
                .map_err(|e| SurvintError::io(facts.display().to_string(), e))?;
            let facts: PopulationFacts = serde_json::from_str(&facts_text)
                .map_err(|e| SurvintError::data("bad_facts_file", e.to_string()))?;
            let mp = surrogate_mean_draws(&post, &facts)?;

            let (a_mean, a_hpd) = if kind.is_integrated() {
                let mean = post.a.iter().sum::<f64>() / post.m() as f64;
                (Some(mean), Some(hpd_interval(&post.a, 0.95)))
            } else {
                (None, None)
            };
            let run = ScenarioRun {
                model: kind.letter(),
                summary: mp.summary.clone(),
                a_mean,
                a_hpd,
            };
            let draws_path = dir.join(format!("ybar_draws_{}.csv", kind.letter()));
            let mut text = String::from("ybar\n");
            for v in &mp.draws {
                text.push_str(&format!("{v}\n"));
            }
            write_text(&draws_path, &text)?;
            let json_path = dir.join(format!("predict_{}.json", kind.letter()));
            write_json(&json_path, &serde_json::to_value(&run).unwrap())?;
            let merged = serde_json::json!({"model": kind.letter().to_string(), "seed": seed});
            write_manifest(&dir, "predict", merged, &[draws_path, json_path])?;
            Ok(())
        }

        Command::Bootstrap {
            samples,
            scenario,
            replicates,
            mode,
            inner_draws,
            seed,
            preliminary,
        } => {
            let cfg = load_config(samples.config.as_deref())?;
            let letter = scenario
                .or(cfg.fit.scenario.clone())
                .ok_or_else(|| SurvintError::usage("missing --scenario (one of B, C, D, E, G)"))?;
            let kind: ScenarioKind = letter.parse()?;
            let (nps, ps) = load_pair(&samples, &cfg)?;
            let pair = SamplePair::from_samples(&nps, &ps)?;
            let opts = PipelineOptions {
                weight_processing: weight_processing(&cfg),
                grid_size: cfg.fit.grid_size,
                a_min: cfg.fit.a_min,
                a_max: cfg.fit.a_max,
                ..Default::default()
            };
            let mode: ResampleMode = mode.unwrap_or(cfg.bootstrap.mode.clone()).parse()?;
            let bspec = BootstrapSpec {
                replicates: replicates.unwrap_or(cfg.bootstrap.replicates),
                mode,
                inner_draws: inner_draws.unwrap_or(cfg.bootstrap.inner_draws),
                seed: seed.unwrap_or(cfg.fit.seed),
            };
            let bp = bootstrap_pipeline(&pair, kind, &opts, &bspec)?;

            let rep_path = dir.join(format!("bootstrap_replicates_{}.csv", kind.letter()));
            let mut text = String::from("replicate,pm,psd\n");
            for (b, s) in bp.per_replicate.iter().enumerate() {
                text.push_str(&format!("{},{},{}\n", b + 1, s.pm, s.psd));
            }
            write_text(&rep_path, &text)?;

            let prelim = if preliminary {
                let pb = preliminary_ps_bootstrap(&ps.x, &ps.y, ps.weights()?, 10_000, bspec.seed)?;
                Some(serde_json::to_value(&pb).unwrap())
            } else {
                None
            };
            let json_path = dir.join(format!("bootstrap_{}.json", kind.letter()));
            write_json(
                &json_path,
                &serde_json::json!({
                    "model": kind.letter(),
                    "mode": bspec.mode,
                    "replicates": bspec.replicates,
                    "inner_draws": bspec.inner_draws,
                    "dropped": bp.dropped_replicates,
                    "without_bootstrap": bp.baseline,
                    "with_bootstrap": bp.pooled_summary,
                    "preliminary": prelim,
                }),
            )?;
            let merged = serde_json::json!({
                "scenario": kind.letter().to_string(),
                "replicates": bspec.replicates,
                "inner_draws": bspec.inner_draws,
                "seed": bspec.seed,
            });
            write_manifest(&dir, "bootstrap", merged, &[rep_path, json_path])?;
            Ok(())
        }

        Command::Simulate {
            config,
            rho_list,
            replications,
            scenarios,
            misspec,
            seed,
            n_population,
            n1,
            n2,
            draws_per_fit,
            grid_size,
            raw_participation,
            facts_source,
        } => {
            let cfg = load_config(config.as_deref())?;
            let sc = &cfg.simulate;
            let scenario_kinds: Vec<ScenarioKind> = scenarios
                .unwrap_or_else(|| sc.scenarios.clone())
                .iter()
                .map(|s| s.parse())
                .collect::<Result<_>>()?;
            let misspec: Misspecification = misspec.unwrap_or_else(|| sc.misspec.clone()).parse()?;
            let facts_source = match facts_source
                .unwrap_or_else(|| sc.facts_source.clone())
                .as_str()
            {
                "true_population" => StudyFactsSource::TruePopulation,
                "ps_ipw" => StudyFactsSource::PsIpw,
                other => {
                    return Err(SurvintError::usage(format!(
                        "unknown facts source '{other}'"
                    )))
                }
            };
            let spec = StudySpec {
                population: PopulationSpec {
                    n_population: n_population.unwrap_or(sc.n_population),
                    n1: n1.unwrap_or(sc.n1),
                    n2: n2.unwrap_or(sc.n2),
                    standardize_participation: !raw_participation && sc.standardize_participation,
                    ..Default::default()
                },
                rho_list: rho_list.unwrap_or_else(|| sc.rho_list.clone()),
                replications: replications.unwrap_or(sc.replications),
                scenarios: scenario_kinds,
                misspec,
                draws_per_fit: draws_per_fit.unwrap_or(sc.draws_per_fit),
                grid_size: grid_size.unwrap_or(sc.grid_size),
                weight_processing: weight_processing(&cfg),
                facts_source,
                seed: seed.unwrap_or(cfg.fit.seed),
            };
            let result = run_study(&spec)?;

            let metrics_path = dir.join("metrics.csv");
            let mut text =
                String::from("scenario,rho,arb,prmse,cov,wid,a_mean,a_psd,replications\n");
            for m in &result.metrics {
                text.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    m.scenario,
                    m.rho,
                    m.arb,
                    m.prmse,
                    m.cov,
                    m.wid,
                    fmt_opt(m.a_mean),
                    fmt_opt(m.a_psd),
                    m.replications
                ));
            }
            write_text(&metrics_path, &text)?;

            let long_path = dir.join("replications.csv");
            let mut text =
                String::from("rho,replication,scenario,pm,psd,c025,c975,covered,a_mean,a_psd\n");
            for r in &result.long {
                text.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    r.rho,
                    r.replication,
                    r.scenario,
                    r.pm,
                    r.psd,
                    r.c025,
                    r.c975,
                    u8::from(r.covered),
                    fmt_opt(r.a_mean),
                    fmt_opt(r.a_psd)
                ));
            }
            write_text(&long_path, &text)?;

            let merged = serde_json::to_value(&spec).unwrap();
            write_manifest(&dir, "simulate", merged, &[metrics_path, long_path])?;
            Ok(())
        }

        Command::Report { dir: run_dir } => {
            let runs = collect_runs(&run_dir)?;
            let table_path = dir.join("report_table.csv");
            let mut text =
                String::from("model,pm,psd,pcv,ci_lower,ci_upper,a_mean,a_hpd_lower,a_hpd_upper\n");
            for r in &runs {
                text.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.model,
                    r.summary.pm,
                    r.summary.psd,
                    r.summary.pcv,
                    r.summary.hpd_lower,
                    r.summary.hpd_upper,
                    r.a_mean.map(|v| v.to_string()).unwrap_or_default(),
                    r.a_hpd.map(|h| h.0.to_string()).unwrap_or_default(),
                    r.a_hpd.map(|h| h.1.to_string()).unwrap_or_default(),
                ));
            }
            write_text(&table_path, &text)?;

            // Density curves from each run's mean draws, when present.
            let density_path = dir.join("report_density.csv");
            let mut text = String::from("model,grid,density\n");
            for r in &runs {
                let draws_file = run_dir.join(format!("ybar_draws_{}.csv", r.model));
                if !draws_file.exists() {
                    continue;
                }
                let draws = read_scalar_csv(&draws_file)?;
                let curve = kernel_density(r.model, &draws, 512)?;
                for (g, d) in curve.grid.iter().zip(&curve.density) {
                    text.push_str(&format!("{},{},{}\n", r.model, g, d));
                }
            }
            write_text(&density_path, &text)?;
            let merged = serde_json::json!({"dir": run_dir});
            write_manifest(&dir, "report", merged, &[table_path, density_path])?;
            Ok(())
        }
    }
}

/// 95% HPD over a discrete grid: shortest contiguous run of cells holding at
/// least 95% of the mass.
fn discrete_hpd(grid: &[f64], masses: &[f64]) -> (f64, f64) {
    let k = grid.len();
    let mut best = (0usize, k - 1);
    let mut best_len = f64::INFINITY;
    let mut lo = 0usize;
    let mut acc = 0.0;
    for hi in 0..k {
        acc += masses[hi];
        while lo < hi && acc - masses[lo] >= 0.95 {
            acc -= masses[lo];
            lo += 1;
        }
        if acc >= 0.95 {
            let len = grid[hi] - grid[lo];
            if len < best_len {
                best_len = len;
                best = (lo, hi);
            }
        }
    }
    (grid[best.0], grid[best.1])
}

fn write_draws_csv(path: &Path, draws: &PosteriorDraws) -> Result<()> {
    let mut f =
        std::fs::File::create(path).map_err(|e| SurvintError::io(path.display().to_string(), e))?;
    let mut header = String::from("a,sigma2");
    for j in 0..draws.p() {
        header.push_str(&format!(",beta_{}", j + 1));
    }
    writeln!(f, "{header}").map_err(|e| SurvintError::io(path.display().to_string(), e))?;
    for k in 0..draws.m() {
        let mut line = format!("{},{}", draws.a[k], draws.sigma2[k]);
        for j in 0..draws.p() {
            line.push_str(&format!(",{}", draws.beta[(k, j)]));
        }
        writeln!(f, "{line}").map_err(|e| SurvintError::io(path.display().to_string(), e))?;
    }
    Ok(())
}

fn read_draws_csv(path: &Path, kind: ScenarioKind, seed: u64) -> Result<PosteriorDraws> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| SurvintError::data("unreadable_file", format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| SurvintError::data("bad_header", e.to_string()))?
        .clone();
    if headers.len() < 3 || &headers[0] != "a" || &headers[1] != "sigma2" {
        return Err(SurvintError::data(
            "bad_header",
            "expected header a,sigma2,beta_1..beta_p",
        ));
    }
    let p = headers.len() - 2;
    let mut a = Vec::new();
    let mut sigma2 = Vec::new();
    let mut beta_rows: Vec<f64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| SurvintError::data("bad_record", format!("row {}: {e}", r + 1)))?;
        let parse = |c: usize| -> Result<f64> {
            record[c].parse().map_err(|_| {
                SurvintError::data("non_numeric_cell", format!("row {} column {}", r + 1, c + 1))
            })
        };
        a.push(parse(0)?);
        sigma2.push(parse(1)?);
        for j in 0..p {
            beta_rows.push(parse(2 + j)?);
        }
    }
    let m = a.len();
    if m == 0 {
        return Err(SurvintError::data("empty_file", path.display().to_string()));
    }
    let beta = DMatrix::from_row_slice(m, p, &beta_rows);
    let mut spec = ScenarioSpec::new(kind, seed);
    spec.draws = m;
    Ok(PosteriorDraws {
        beta,
        sigma2,
        a,
        scenario: spec,
    })
}

fn read_scalar_csv(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| SurvintError::data("unreadable_file", format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| SurvintError::data("bad_record", format!("row {}: {e}", r + 1)))?;
        out.push(
            record[0]
                .parse()
                .map_err(|_| SurvintError::data("non_numeric_cell", format!("row {}", r + 1)))?,
        );
    }
    Ok(out)
}

/// Read a (name,total) CSV, ordered to match the participation columns.
fn read_totals(path: &Path, z_names: &[String]) -> Result<DVector<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| SurvintError::data("unreadable_file", format!("{}: {e}", path.display())))?;
    let mut map = std::collections::HashMap::new();
    for (r, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| SurvintError::data("bad_record", format!("row {}: {e}", r + 1)))?;
        let name = record[0].to_string();
        let total: f64 = record[1]
            .parse()
            .map_err(|_| SurvintError::data("non_numeric_cell", format!("totals row {}", r + 1)))?;
        map.insert(name, total);
    }
    let mut t = DVector::zeros(z_names.len());
    for (j, name) in z_names.iter().enumerate() {
        t[j] = *map.get(name).ok_or_else(|| {
            SurvintError::data(
                "missing_column",
                format!("totals file lacks entry for '{name}'"),
            )
        })?;
    }
    Ok(t)
}
