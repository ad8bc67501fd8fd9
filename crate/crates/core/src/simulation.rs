//! Monte Carlo harness for independent-Bernoulli sub-treatments: data
//! generation, analytic targets, shrinkage paths and the bias/variance
//! decomposition of the reconstructed per-sub-treatment effects.
//!
//! Randomness is counter-based. Rep `r` draws from a ChaCha8 stream keyed by
//! the run seed with stream id `r` (plus `attempt << 40` on redraws), so reps
//! can be evaluated in any order, serially or in parallel, with bitwise
//! identical results.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, FocalSpec, ResidualizedDesign};
use crate::reconstruct::{analytic_tau0_binary_max, conditional_frequencies, moment_ratios, reconstruct_tau0};
use crate::residualize::{residualize, NuisanceSpec};
use crate::ridge::{CovarianceKind, RidgeProblem};
use crate::tuning::log_spaced;

/// Documented in every run manifest.
pub const RNG_DESCRIPTION: &str = "ChaCha8Rng (rand_chacha 0.9); key = seed_from_u64(seed); \
     stream = rep_index + (attempt << 40); Bernoulli(p) as uniform f64 < p, row-major over \
     (unit, sub-treatment), then one standard normal per unit when noise_sd > 0";

const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub prevalences: Vec<f64>,
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub n: usize,
    pub noise_sd: f64,
    pub focal: FocalSpec,
    pub reps: usize,
    pub seed: u64,
    pub lambda_grid: Vec<f64>,
}

/// 0 followed by 25 log-spaced penalties from `1e-4 n` to `1e5 n`.
pub fn default_simulation_grid(n: usize) -> Vec<f64> {
    let n = n as f64;
    let mut grid = vec![0.0];
    grid.extend(log_spaced(1e-4 * n, 1e5 * n, 25));
    grid
}

impl SimulationConfig {
    /// Six sub-treatments with prevalences `[0.2, 0.05, 0.2, 0.05, 0.2, 0.05]`,
    /// `β₀ = 5`, `β = [2, 2, 1, 1, -1, -1]`, no outcome noise, max focal.
    /// Sample size, reps and grid are not pinned by the model and default to
    /// 2000 units, 500 reps and [`default_simulation_grid`].
    pub fn paper_defaults() -> Self {
        Self {
            prevalences: vec![0.2, 0.05, 0.2, 0.05, 0.2, 0.05],
            beta0: 5.0,
            beta: vec![2.0, 2.0, 1.0, 1.0, -1.0, -1.0],
            n: 2000,
            noise_sd: 0.0,
            focal: FocalSpec::Max,
            reps: 500,
            seed: 0,
            lambda_grid: default_simulation_grid(2000),
        }
    }

    pub fn sub_treatment_count(&self) -> usize {
        self.prevalences.len()
    }

    pub fn treatment_names(&self) -> Vec<String> {
        (1..=self.prevalences.len()).map(|k| format!("d{k}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSimulation(m));
        if self.prevalences.is_empty() {
            return bad("need at least one sub-treatment".into());
        }
        if let Some(p) = self.prevalences.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return bad(format!("prevalence {p} outside (0, 1)"));
        }
        if self.beta.len() != self.prevalences.len() {
            return bad(format!(
                "{} coefficients for {} prevalences",
                self.beta.len(),
                self.prevalences.len()
            ));
        }
        if !self.beta0.is_finite() || self.beta.iter().any(|b| !b.is_finite()) {
            return bad("coefficients must be finite".into());
        }
        if self.n < 2 {
            return bad(format!("n = {} (need >= 2)", self.n));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return bad(format!("noise_sd = {} (need finite >= 0)", self.noise_sd));
        }
        if self.reps < 1 {
            return bad("reps must be >= 1".into());
        }
        crate::tuning::validate_grid(&self.lambda_grid)
    }
}

fn rep_rng(seed: u64, rep_index: u64, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep_index + (attempt << 40));
    rng
}

fn draw(config: &SimulationConfig, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let n = config.n;
    let k = config.sub_treatment_count();
    let mut t = DMatrix::zeros(n, k);
    for i in 0..n {
        for (j, &p) in config.prevalences.iter().enumerate() {
            if rng.random::<f64>() < p {
                t[(i, j)] = 1.0;
            }
        }
    }
    let focal = crate::model::apply_focal(&t, config.focal);
    let beta = DVector::from_column_slice(&config.beta);
    let mut y = &focal * config.beta0 + &t * beta;
    if config.noise_sd > 0.0 {
        for v in y.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += config.noise_sd * z;
        }
    }
    Dataset::new(y, DMatrix::zeros(n, 0), t, config.treatment_names(), Vec::new())
}

/// One draw of the data-generating process for `rep_index` (first attempt,
/// no degeneracy screening). No covariates.
pub fn simulate_dgp(config: &SimulationConfig, rep_index: u64) -> Result<Dataset> {
    config.validate()?;
    draw(config, &mut rep_rng(config.seed, rep_index, 0))
}

fn is_degenerate(data: &Dataset, focal: FocalSpec) -> bool {
    data.check_focal(focal).is_err() || data.treated_counts().contains(&0)
}

/// Draws rep `rep_index`, redrawing from escalated substreams while the focal
/// column is constant or some sub-treatment never occurs. Returns the data and
/// the number of redraws.
pub fn simulate_rep(config: &SimulationConfig, rep_index: u64) -> Result<(Dataset, usize)> {
    for attempt in 0..MAX_ATTEMPTS {
        let data = draw(config, &mut rep_rng(config.seed, rep_index, attempt))?;
        if !is_degenerate(&data, config.focal) {
            return Ok((data, attempt as usize));
        }
    }
    Err(Error::TooManyRedraws {
        redraws: MAX_ATTEMPTS as usize,
        reps: 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticTargets {
    pub tau0: f64,
    pub tau: Vec<f64>,
}

/// Population targets under independence: `τ_j = β_j + β₀ + Σ_{k≠j} β_k p_k`
/// and, for the max focal, `τ₀ = β₀ + Σ β_k p_k / (1 − Π(1 − p_m))`.
pub fn analytic_targets(config: &SimulationConfig) -> Result<AnalyticTargets> {
    config.validate()?;
    if config.focal != FocalSpec::Max {
        return Err(Error::Unsupported(
            "analytic targets are only available for the max focal function".into(),
        ));
    }
    let total: f64 = config
        .prevalences
        .iter()
        .zip(&config.beta)
        .map(|(p, b)| p * b)
        .sum();
    let tau = config
        .beta
        .iter()
        .zip(&config.prevalences)
        .map(|(b, p)| b + config.beta0 + total - b * p)
        .collect();
    Ok(AnalyticTargets {
        tau0: analytic_tau0_binary_max(&config.prevalences, config.beta0, &config.beta)?,
        tau,
    })
}

/// Estimates at one penalty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaEstimates {
    pub lambda: f64,
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub tau0: f64,
    pub tau: Vec<f64>,
    /// Standard errors of `(β̂₀, β̂₁, …)`; empty when unavailable.
    pub se: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

/// Fits every penalty on one dataset and reconstructs the effects.
pub fn estimate_path(
    design: &ResidualizedDesign,
    data: &Dataset,
    grid: &[f64],
    kind: CovarianceKind,
    standardize: bool,
) -> Result<Vec<LambdaEstimates>> {
    let k = data.sub_treatment_count();
    if design.sub_treatment_count() != k || design.unit_count() != data.unit_count() {
        return Err(Error::DimensionMismatch("design and data disagree".into()));
    }
    if let Some(j) = data.treated_counts().iter().position(|&c| c == 0) {
        return Err(Error::NoTreatedUnits(data.treatment_names()[j].clone()));
    }
    let problem = if standardize {
        RidgeProblem::standardized(design)
    } else {
        RidgeProblem::new(design)
    };
    let freqs = conditional_frequencies(data);
    let ratios = moment_ratios(design)?;
    grid.iter()
        .map(|&lambda| {
            let fit = problem.fit(lambda, kind)?;
            let tau = (0..k)
                .map(|j| {
                    let spill: f64 = (0..k)
                        .filter(|&m| m != j)
                        .map(|m| fit.beta[m] * freqs[(j, m)])
                        .sum();
                    fit.beta[j] + fit.beta0 + spill
                })
                .collect();
            debug_assert!({
                let direct = reconstruct_tau0(&fit, design).unwrap_or(f64::NAN);
                let via = fit.beta0 + fit.beta.dot(&ratios);
                (direct - via).abs() <= 1e-12 * direct.abs().max(1.0)
            });
            Ok(LambdaEstimates {
                lambda,
                beta0: fit.beta0,
                beta: fit.beta.iter().copied().collect(),
                tau0: fit.beta0 + fit.beta.dot(&ratios),
                tau,
                se: fit
                    .standard_errors()
                    .map(|s| s.iter().copied().collect())
                    .unwrap_or_default(),
            })
        })
        .collect()
}

/// One row of a shrinkage-path table. The focal row carries `β̂₀` and has
/// `tau_hat = tau0_hat`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathRow {
    pub lambda: f64,
    pub coefficient_name: String,
    pub beta_hat: f64,
    pub tau_hat: f64,
    pub tau0_hat: f64,
    pub se: Option<f64>,
}

/// Coefficients and reconstructed effects across a penalty grid on one
/// dataset, in long format: for each penalty, the focal row then one row per
/// sub-treatment.
pub fn shrinkage_path(
    design: &ResidualizedDesign,
    data: &Dataset,
    grid: &[f64],
    kind: CovarianceKind,
    standardize: bool,
) -> Result<Vec<PathRow>> {
    crate::tuning::validate_grid(grid)?;
    let est = estimate_path(design, data, grid, kind, standardize)?;
    Ok(path_rows(&est, data.treatment_names()))
}

pub fn path_rows(est: &[LambdaEstimates], names: &[String]) -> Vec<PathRow> {
    let mut rows = Vec::with_capacity(est.len() * (names.len() + 1));
    for e in est {
        let se = |i: usize| e.se.get(i).copied();
        rows.push(PathRow {
            lambda: e.lambda,
            coefficient_name: "focal".into(),
            beta_hat: e.beta0,
            tau_hat: e.tau0,
            tau0_hat: e.tau0,
            se: se(0),
        });
        for (j, name) in names.iter().enumerate() {
            rows.push(PathRow {
                lambda: e.lambda,
                coefficient_name: name.clone(),
                beta_hat: e.beta[j],
                tau_hat: e.tau[j],
                tau0_hat: e.tau0,
                se: se(j + 1),
            });
        }
    }
    rows
}

/// Output of one simulated rep.
#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    pub redraws: usize,
    pub estimates: Vec<LambdaEstimates>,
}

fn run_rep(config: &SimulationConfig, rep: usize) -> Result<RepOutcome> {
    let (data, redraws) = simulate_rep(config, rep as u64)?;
    let design = residualize(&data, config.focal, &NuisanceSpec::default())?;
    let estimates = estimate_path(
        &design,
        &data,
        &config.lambda_grid,
        CovarianceKind::Homoscedastic,
        false,
    )?;
    Ok(RepOutcome { redraws, estimates })
}

/// Runs every rep, returned in rep order whatever the execution mode.
pub fn run_reps(config: &SimulationConfig, exec: Execution) -> Result<Vec<RepOutcome>> {
    config.validate()?;
    let outcomes: Vec<RepOutcome> = match exec {
        Execution::Serial => (0..config.reps)
            .map(|r| run_rep(config, r))
            .collect::<Result<_>>()?,
        Execution::Parallel => (0..config.reps)
            .into_par_iter()
            .map(|r| run_rep(config, r))
            .collect::<Result<_>>()?,
    };
    let redraws: usize = outcomes.iter().map(|o| o.redraws).sum();
    if redraws * 10 > config.reps {
        return Err(Error::TooManyRedraws {
            redraws,
            reps: config.reps,
        });
    }
    Ok(outcomes)
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

fn pairwise_mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// One `(sub-treatment, penalty)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseCell {
    pub lambda: f64,
    pub sub_treatment: usize,
    pub name: String,
    pub target: f64,
    pub mean_estimate: f64,
    pub bias_sq: f64,
    /// Mean squared deviation from the Monte Carlo mean (`1/reps`), so that
    /// `mse = bias_sq + variance`.
    pub variance: f64,
    /// Unbiased (`1/(reps-1)`) sample variance of the estimates.
    pub sample_variance: f64,
    /// Mean squared deviation from the target.
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseDecomposition {
    pub reps: usize,
    pub redraws: usize,
    pub targets: AnalyticTargets,
    pub lambda_grid: Vec<f64>,
    /// Ordered by penalty, then sub-treatment.
    pub cells: Vec<MseCell>,
}

impl MseDecomposition {
    pub fn cell(&self, sub_treatment: usize, lambda_index: usize) -> &MseCell {
        &self.cells[lambda_index * self.targets.tau.len() + sub_treatment]
    }

    /// The penalty index with the smallest MSE for one sub-treatment.
    pub fn argmin_mse(&self, sub_treatment: usize) -> usize {
        (0..self.lambda_grid.len())
            .min_by(|&a, &b| {
                self.cell(sub_treatment, a)
                    .mse
                    .total_cmp(&self.cell(sub_treatment, b).mse)
            })
            .expect("nonempty grid")
    }
}

/// Rep-averaged shrinkage path row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimPathRow {
    pub lambda: f64,
    pub coefficient_name: String,
    pub beta_hat: f64,
    pub tau_hat: f64,
    pub tau0_hat: f64,
    /// Monte Carlo standard error of `tau_hat`.
    pub tau_hat_mc_se: f64,
    pub tau_target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationStudy {
    pub decomposition: MseDecomposition,
    pub path: Vec<SimPathRow>,
}

fn summarize(values: &[f64], target: f64) -> (f64, f64, f64, f64) {
    let r = values.len() as f64;
    let mean = pairwise_mean(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let err: Vec<f64> = values.iter().map(|v| (v - target) * (v - target)).collect();
    let ss = pairwise_sum(&dev);
    let sample_var = if values.len() > 1 { ss / (r - 1.0) } else { 0.0 };
    (mean, ss / r, sample_var, pairwise_mean(&err))
}

/// Aggregates rep outcomes into the decomposition and the averaged path.
pub fn summarize_reps(config: &SimulationConfig, outcomes: &[RepOutcome]) -> Result<SimulationStudy> {
    let targets = analytic_targets(config)?;
    let k = config.sub_treatment_count();
    let names = config.treatment_names();
    let reps = outcomes.len();
    let mut cells = Vec::with_capacity(config.lambda_grid.len() * k);
    let mut path = Vec::with_capacity(config.lambda_grid.len() * (k + 1));
    for (li, &lambda) in config.lambda_grid.iter().enumerate() {
        let column = |f: &dyn Fn(&LambdaEstimates) -> f64| -> Vec<f64> {
            outcomes.iter().map(|o| f(&o.estimates[li])).collect()
        };
        let tau0s = column(&|e| e.tau0);
        let beta0s = column(&|e| e.beta0);
        let (tau0_mean, _, tau0_svar, _) = summarize(&tau0s, targets.tau0);
        path.push(SimPathRow {
            lambda,
            coefficient_name: "focal".into(),
            beta_hat: pairwise_mean(&beta0s),
            tau_hat: tau0_mean,
            tau0_hat: tau0_mean,
            tau_hat_mc_se: (tau0_svar / reps as f64).sqrt(),
            tau_target: targets.tau0,
        });
        for j in 0..k {
            let taus = column(&|e| e.tau[j]);
            let betas = column(&|e| e.beta[j]);
            let target = targets.tau[j];
            let (mean, variance, sample_variance, mse) = summarize(&taus, target);
            cells.push(MseCell {
                lambda,
                sub_treatment: j,
                name: names[j].clone(),
                target,
                mean_estimate: mean,
                bias_sq: (mean - target) * (mean - target),
                variance,
                sample_variance,
                mse,
            });
            path.push(SimPathRow {
                lambda,
                coefficient_name: names[j].clone(),
                beta_hat: pairwise_mean(&betas),
                tau_hat: mean,
                tau0_hat: tau0_mean,
                tau_hat_mc_se: (sample_variance / reps as f64).sqrt(),
                tau_target: target,
            });
        }
    }
    Ok(SimulationStudy {
        decomposition: MseDecomposition {
            reps,
            redraws: outcomes.iter().map(|o| o.redraws).sum(),
            targets,
            lambda_grid: config.lambda_grid.clone(),
            cells,
        },
        path,
    })
}

pub fn run_study(config: &SimulationConfig, exec: Execution) -> Result<SimulationStudy> {
    analytic_targets(config)?;
    let outcomes = run_reps(config, exec)?;
    summarize_reps(config, &outcomes)
}

/// Bias², variance and MSE of every reconstructed `τ̂_j(λ)` against its
/// analytic target. Needs at least two reps.
pub fn run_mse_decomposition(config: &SimulationConfig) -> Result<MseDecomposition> {
    run_mse_decomposition_with(config, Execution::Parallel)
}

pub fn run_mse_decomposition_with(
    config: &SimulationConfig,
    exec: Execution,
) -> Result<MseDecomposition> {
    if config.reps < 2 {
        return Err(Error::InvalidSimulation(
            "the MSE decomposition needs reps >= 2".into(),
        ));
    }
    Ok(run_study(config, exec)?.decomposition)
}
