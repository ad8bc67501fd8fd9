//! Command implementations behind the `selective-ridge` binary.
//!
//! Every command takes a fully resolved config, writes its outputs plus a
//! [`RunManifest`] into an output directory, and can be replayed from that
//! manifest. Argument parsing lives in [`args`].

pub mod args;
pub mod io;
pub mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_dataset, ColumnRoles, Dataset, Provenance, ResidualizedDesign};
use crate::reconstruct::reconstruct_effects;
use crate::residualize::{residualize, NuisanceSpec};
use crate::ridge::{CovarianceKind, RidgeProblem};
use crate::simulation::{
    default_simulation_grid, run_study, shrinkage_path, Execution, SimulationConfig,
};
use crate::tuning::{default_grid, log_spaced, tune_lambda, validate_grid, TuningConfig, TuningResult};

pub use manifest::RunManifest;
use io::{fmt_f64, fmt_opt};

/// Data source and everything needed to turn it into a residualized design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub input: PathBuf,
    pub roles: ColumnRoles,
    pub nuisance: NuisanceSpec,
    pub covariance: CovarianceKind,
    pub standardize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LambdaChoice {
    Fixed {
        lambda: f64,
    },
    Tuned {
        grid: String,
        holdout_fraction: f64,
        folds: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub data: DataConfig,
    pub lambda: LambdaChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub data: DataConfig,
    pub grid: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub simulation: SimulationConfig,
    /// Does not affect any output.
    pub execution: Execution,
}

/// Parses a penalty grid: `default`, a comma list such as `0,0.1,10`, or
/// `log:LO:HI:N` (N log-spaced points), optionally prefixed with `0+`.
pub fn parse_grid(spec: &str, default: impl FnOnce() -> Vec<f64>) -> Result<Vec<f64>> {
    let spec = spec.trim();
    let bad = |why: &str| Error::Usage(format!("invalid grid `{spec}`: {why}"));
    let grid = if spec.eq_ignore_ascii_case("default") {
        default()
    } else if let Some(body) = spec.strip_prefix("0+").or(Some(spec)).and_then(|b| b.strip_prefix("log:")) {
        let zero = spec.starts_with("0+");
        let parts: Vec<&str> = body.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected log:LO:HI:N"));
        }
        let lo: f64 = parts[0].parse().map_err(|_| bad("LO is not a number"))?;
        let hi: f64 = parts[1].parse().map_err(|_| bad("HI is not a number"))?;
        let count: usize = parts[2].parse().map_err(|_| bad("N is not a count"))?;
        if !(lo > 0.0 && hi > lo && count >= 2) {
            return Err(bad("need 0 < LO < HI and N >= 2"));
        }
        let mut g = if zero { vec![0.0] } else { Vec::new() };
        g.extend(log_spaced(lo, hi, count));
        g
    } else {
        spec.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad(&format!("`{s}` is not a number"))))
            .collect::<Result<Vec<f64>>>()?
    };
    validate_grid(&grid)?;
    Ok(grid)
}

/// Reads, validates and residualizes the input data.
pub fn load_design(cfg: &DataConfig) -> Result<(Dataset, ResidualizedDesign)> {
    let table = io::read_table(&cfg.input)?;
    let data = validate_dataset(&table, &cfg.roles)?;
    let design = residualize(&data, cfg.roles.focal, &cfg.nuisance)?;
    Ok((data, design))
}

fn problem(design: &ResidualizedDesign, standardize: bool) -> RidgeProblem<'_> {
    if standardize {
        RidgeProblem::standardized(design)
    } else {
        RidgeProblem::new(design)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

/// JSON report of one fit. Coefficients list the focal term first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub focal: String,
    pub lambda: f64,
    pub lambda_source: String,
    pub tuning: Option<TuningResult>,
    pub standardized_penalty: bool,
    pub covariance_kind: CovarianceKind,
    pub coefficients: Vec<Coefficient>,
    pub sigma2_hat: Option<f64>,
    pub tau0: f64,
    pub tau: Vec<NamedValue>,
    pub tau_unconfounded_mode: bool,
    pub moment_ratios: Vec<NamedValue>,
    pub prevalences: Vec<NamedValue>,
    pub nuisance: Provenance,
}

fn named(names: &[String], values: impl IntoIterator<Item = f64>) -> Vec<NamedValue> {
    names
        .iter()
        .zip(values)
        .map(|(name, value)| NamedValue {
            name: name.clone(),
            value,
        })
        .collect()
}

pub fn run_fit(cfg: &FitConfig) -> Result<FitReport> {
    let (data, design) = load_design(&cfg.data)?;
    let (lambda, tuning) = match &cfg.lambda {
        LambdaChoice::Fixed { lambda } => (*lambda, None),
        LambdaChoice::Tuned {
            grid,
            holdout_fraction,
            folds,
            seed,
        } => {
            let tuned = tune_lambda(
                &design,
                &TuningConfig {
                    grid: Some(parse_grid(grid, || default_grid(&design))?),
                    holdout_fraction: *holdout_fraction,
                    folds: *folds,
                    seed: *seed,
                    ..TuningConfig::default()
                },
            )?;
            (tuned.best_lambda, Some(tuned))
        }
    };
    let fit = problem(&design, cfg.data.standardize).fit(lambda, cfg.data.covariance)?;
    let effects = reconstruct_effects(&fit, &design, &data)?;
    let names = data.treatment_names();
    let se = fit.standard_errors();
    let coefficients = std::iter::once("focal".to_string())
        .chain(names.iter().cloned())
        .zip(fit.coefficients().iter())
        .enumerate()
        .map(|(i, (name, &estimate))| Coefficient {
            name,
            estimate,
            se: se.as_ref().map(|s| s[i]),
        })
        .collect();
    Ok(FitReport {
        n: data.unit_count(),
        k: data.sub_treatment_count(),
        d: data.covariate_count(),
        focal: cfg.data.roles.focal.name().into(),
        lambda,
        lambda_source: if tuning.is_some() { "tuned" } else { "fixed" }.into(),
        tuning,
        standardized_penalty: cfg.data.standardize,
        covariance_kind: fit.covariance_kind,
        coefficients,
        sigma2_hat: fit.sigma2_hat,
        tau0: effects.tau0,
        tau: named(names, effects.tau.iter().copied()),
        tau_unconfounded_mode: effects.tau_unconfounded_mode,
        moment_ratios: named(names, effects.moment_ratios.iter().copied()),
        prevalences: named(names, data.prevalences()),
        nuisance: design.provenance().clone(),
    })
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<String> {
    fs::write(dir.join(name), contents)
        .map_err(|e| Error::Io(format!("{}: {e}", dir.join(name).display())))?;
    Ok(name.to_string())
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

fn input_digests(input: &Path) -> Result<BTreeMap<String, String>> {
    Ok(BTreeMap::from([(
        input.display().to_string(),
        io::sha256_file(input)?,
    )]))
}

/// Writes `fit.json` and `manifest.json`; returns the report.
pub fn cmd_fit(cfg: &FitConfig, out: &Path) -> Result<FitReport> {
    let report = run_fit(cfg)?;
    let seed = match cfg.lambda {
        LambdaChoice::Tuned { seed, .. } => seed,
        LambdaChoice::Fixed { .. } => cfg.data.nuisance.seed,
    };
    prepare_dir(out)?;
    let outputs = vec![write_file(out, "fit.json", &to_json(&report)?)?];
    RunManifest::new("fit", cfg, input_digests(&cfg.data.input)?, seed, outputs)?.write(out)?;
    Ok(report)
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(e.to_string()))
}

/// Shrinkage-path table on real data.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<u8>> {
    let (data, design) = load_design(&cfg.data)?;
    let grid = parse_grid(&cfg.grid, || default_grid(&design))?;
    let rows = shrinkage_path(&design, &data, &grid, cfg.data.covariance, cfg.data.standardize)?;
    csv_bytes(
        &["lambda", "coefficient_name", "beta_hat", "tau_hat", "tau0_hat", "se"],
        rows.into_iter().map(|r| {
            vec![
                fmt_f64(r.lambda),
                r.coefficient_name,
                fmt_f64(r.beta_hat),
                fmt_f64(r.tau_hat),
                fmt_f64(r.tau0_hat),
                fmt_opt(r.se),
            ]
        }),
    )
}

/// Writes `sweep.csv` and `manifest.json`.
pub fn cmd_sweep(cfg: &SweepConfig, out: &Path) -> Result<()> {
    let table = run_sweep(cfg)?;
    prepare_dir(out)?;
    let outputs = vec![write_file(out, "sweep.csv", &table)?];
    RunManifest::new(
        "sweep",
        cfg,
        input_digests(&cfg.data.input)?,
        cfg.data.nuisance.seed,
        outputs,
    )?
    .write(out)
}

/// Output file names and contents of one simulation.
pub fn run_simulate(cfg: &SimulateConfig) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let sim = &cfg.simulation;
    if sim.reps < 2 {
        return Err(Error::InvalidSimulation(
            "the MSE decomposition needs reps >= 2".into(),
        ));
    }
    let study = run_study(sim, cfg.execution)?;
    let paths = csv_bytes(
        &[
            "lambda",
            "coefficient_name",
            "beta_hat",
            "tau_hat",
            "tau0_hat",
            "tau_hat_mc_se",
            "tau_target",
        ],
        study.path.iter().map(|r| {
            vec![
                fmt_f64(r.lambda),
                r.coefficient_name.clone(),
                fmt_f64(r.beta_hat),
                fmt_f64(r.tau_hat),
                fmt_f64(r.tau0_hat),
                fmt_f64(r.tau_hat_mc_se),
                fmt_f64(r.tau_target),
            ]
        }),
    )?;
    let mse = csv_bytes(
        &[
            "lambda",
            "sub_treatment",
            "target",
            "mean_estimate",
            "bias_sq",
            "variance",
            "sample_variance",
            "mse",
        ],
        study.decomposition.cells.iter().map(|c| {
            vec![
                fmt_f64(c.lambda),
                c.name.clone(),
                fmt_f64(c.target),
                fmt_f64(c.mean_estimate),
                fmt_f64(c.bias_sq),
                fmt_f64(c.variance),
                fmt_f64(c.sample_variance),
                fmt_f64(c.mse),
            ]
        }),
    )?;
    let d = &study.decomposition;
    let best: BTreeMap<String, f64> = (0..d.targets.tau.len())
        .map(|j| (d.cell(j, 0).name.clone(), d.lambda_grid[d.argmin_mse(j)]))
        .collect();
    let summary = serde_json::json!({
        "reps": d.reps,
        "redraws": d.redraws,
        "targets": d.targets,
        "lambda_grid": d.lambda_grid,
        "mse_minimizing_lambda": best,
    });
    Ok(vec![
        ("paths.csv", paths),
        ("mse.csv", mse),
        ("summary.json", to_json(&summary)?),
    ])
}

/// Writes `paths.csv`, `mse.csv`, `summary.json` and `manifest.json`.
pub fn cmd_simulate(cfg: &SimulateConfig, out: &Path) -> Result<()> {
    let files = run_simulate(cfg)?;
    prepare_dir(out)?;
    let outputs = files
        .iter()
        .map(|(name, bytes)| write_file(out, name, bytes))
        .collect::<Result<Vec<_>>>()?;
    RunManifest::new("simulate", cfg, BTreeMap::new(), cfg.simulation.seed, outputs)?.write(out)
}

/// Re-runs the command recorded in a manifest, writing into `out`. Inputs
/// must still match their recorded digests.
pub fn cmd_replay(manifest_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::Io(format!("{}: {e}", manifest_path.display())))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    for (path, digest) in &manifest.input_digests {
        let now = io::sha256_file(Path::new(path))?;
        if &now != digest {
            return Err(Error::Io(format!(
                "{path}: contents changed since the run (sha256 {now}, recorded {digest})"
            )));
        }
    }
    let config = manifest.config.clone();
    match manifest.command.as_str() {
        "fit" => cmd_fit(&serde_json::from_value(config)?, out).map(|_| ()),
        "sweep" => cmd_sweep(&serde_json::from_value(config)?, out),
        "simulate" => cmd_simulate(&serde_json::from_value(config)?, out),
        other => Err(Error::Usage(format!("manifest names unknown command `{other}`"))),
    }
}

/// Grid for a simulation: explicit spec or the simulation default for `n`.
pub fn simulation_grid(spec: &str, n: usize) -> Result<Vec<f64>> {
    parse_grid(spec, || default_simulation_grid(n))
}
