//! Command-line flags and their resolution into configs.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::{
    simulation_grid, DataConfig, FitConfig, LambdaChoice, SimulateConfig, SweepConfig,
};
use crate::error::{Error, Result};
use crate::model::{ColumnRoles, FocalSpec};
use crate::residualize::{NuisanceLearner, NuisanceSpec};
use crate::ridge::CovarianceKind;
use crate::simulation::{Execution, SimulationConfig};

#[derive(Debug, Parser)]
#[command(name = "selective-ridge", version, about = "Selective-shrinkage estimation of overlapping sub-treatment effects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit at one penalty (fixed or tuned) and write a JSON report.
    Fit(FitArgs),
    /// Fit across a penalty grid and write the shrinkage-path table.
    Sweep(SweepArgs),
    /// Run the Monte Carlo study and write path and MSE tables.
    Simulate(SimulateArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub outcome: String,
    /// Ordered, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub treatments: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    #[arg(long, default_value = "max")]
    pub focal: FocalSpec,
    /// mean, linear or knn:K
    #[arg(long, default_value = "mean")]
    pub nuisance: NuisanceLearner,
    #[arg(long = "cross-fit", default_value_t = 1)]
    pub cross_fit: usize,
    #[arg(long, default_value = "homoscedastic")]
    pub covariance: CovarianceKind,
    /// Seeds cross-fitting folds and the tuning split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Penalize each sub-treatment as if its column had unit mean square.
    #[arg(long)]
    pub standardize: bool,
}

impl DataArgs {
    fn resolve(&self) -> Result<DataConfig> {
        Ok(DataConfig {
            input: std::path::absolute(&self.input)?,
            roles: ColumnRoles {
                outcome: self.outcome.clone(),
                treatments: self.treatments.clone(),
                covariates: self.covariates.clone(),
                focal: self.focal,
            },
            nuisance: NuisanceSpec {
                learner: self.nuisance,
                cross_fit_folds: self.cross_fit,
                seed: self.seed,
            },
            covariance: self.covariance,
            standardize: self.standardize,
        })
    }
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("penalty").required(true).args(["lambda", "tune"])))]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, conflicts_with = "tune")]
    pub lambda: Option<f64>,
    /// Choose the penalty by hold-out prediction error.
    #[arg(long, alias = "lambda-tune")]
    pub tune: bool,
    /// Tuning grid: default, a comma list, or [0+]log:LO:HI:N.
    #[arg(long, default_value = "default", requires = "tune")]
    pub grid: String,
    #[arg(long, default_value_t = 0.25)]
    pub holdout: f64,
    /// Hold-out folds for tuning; 1 uses a single split.
    #[arg(long = "tune-folds", default_value_t = 1)]
    pub tune_folds: usize,
    #[arg(long)]
    pub out: PathBuf,
}

impl FitArgs {
    pub fn resolve(&self) -> Result<FitConfig> {
        let lambda = match self.lambda {
            Some(lambda) => LambdaChoice::Fixed { lambda },
            None => LambdaChoice::Tuned {
                grid: self.grid.clone(),
                holdout_fraction: self.holdout,
                folds: self.tune_folds,
                seed: self.data.seed,
            },
        };
        Ok(FitConfig {
            data: self.data.resolve()?,
            lambda,
        })
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// default, a comma list, or [0+]log:LO:HI:N.
    #[arg(long, default_value = "default")]
    pub grid: String,
    #[arg(long)]
    pub out: PathBuf,
}

impl SweepArgs {
    pub fn resolve(&self) -> Result<SweepConfig> {
        Ok(SweepConfig {
            data: self.data.resolve()?,
            grid: self.grid.clone(),
        })
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Start from the six-sub-treatment design of the reference study.
    #[arg(long)]
    pub paper_defaults: bool,
    #[arg(long, value_delimiter = ',')]
    pub prevalences: Option<Vec<f64>>,
    #[arg(long)]
    pub beta0: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub beta: Option<Vec<f64>>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub focal: Option<FocalSpec>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single penalty; shorthand for a one-point grid.
    #[arg(long, conflicts_with = "grid")]
    pub lambda: Option<f64>,
    /// default, a comma list, or [0+]log:LO:HI:N.
    #[arg(long)]
    pub grid: Option<String>,
    /// Run reps on one thread. Outputs are identical either way.
    #[arg(long)]
    pub serial: bool,
    #[arg(long)]
    pub out: PathBuf,
}

impl SimulateArgs {
    pub fn resolve(&self) -> Result<SimulateConfig> {
        let mut sim = if self.paper_defaults {
            SimulationConfig::paper_defaults()
        } else {
            let missing = |flag: &str| {
                Error::Usage(format!("--{flag} is required without --paper-defaults"))
            };
            SimulationConfig {
                prevalences: self.prevalences.clone().ok_or_else(|| missing("prevalences"))?,
                beta0: self.beta0.ok_or_else(|| missing("beta0"))?,
                beta: self.beta.clone().ok_or_else(|| missing("beta"))?,
                ..SimulationConfig::paper_defaults()
            }
        };
        if let Some(p) = &self.prevalences {
            sim.prevalences = p.clone();
        }
        if let Some(b) = self.beta0 {
            sim.beta0 = b;
        }
        if let Some(b) = &self.beta {
            sim.beta = b.clone();
        }
        if let Some(n) = self.n {
            sim.n = n;
        }
        if let Some(r) = self.reps {
            sim.reps = r;
        }
        if let Some(s) = self.noise_sd {
            sim.noise_sd = s;
        }
        if let Some(f) = self.focal {
            sim.focal = f;
        }
        if let Some(s) = self.seed {
            sim.seed = s;
        }
        sim.lambda_grid = match (self.lambda, &self.grid) {
            (Some(l), _) => simulation_grid(&l.to_string(), sim.n)?,
            (None, Some(spec)) => simulation_grid(spec, sim.n)?,
            (None, None) => simulation_grid("default", sim.n)?,
        };
        sim.validate()?;
        Ok(SimulateConfig {
            simulation: sim,
            execution: if self.serial {
                Execution::Serial
            } else {
                Execution::Parallel
            },
        })
    }
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs one parsed command. Fit prints its report to stdout as well.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => {
            let report = super::cmd_fit(&a.resolve()?, &a.out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Sweep(a) => super::cmd_sweep(&a.resolve()?, &a.out),
        Command::Simulate(a) => super::cmd_simulate(&a.resolve()?, &a.out),
        Command::Replay(a) => super::cmd_replay(&a.manifest, &a.out),
    }
}
