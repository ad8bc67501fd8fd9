//! Hold-out selection of the ridge penalty.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ResidualizedDesign;
use crate::residualize::fold_assignment;
use crate::ridge::{CovarianceKind, RidgeProblem};

/// Minimum rows on each side of a split.
pub const MIN_SPLIT_ROWS: usize = 10;

/// Relative slack under which two hold-out scores count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TuningMetric {
    #[default]
    HoldoutMse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    /// `None` selects [`default_grid`] for the design being tuned.
    pub grid: Option<Vec<f64>>,
    pub holdout_fraction: f64,
    /// 1 uses a single hold-out split; more averages over k folds.
    pub folds: usize,
    pub seed: u64,
    pub metric: TuningMetric,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            grid: None,
            holdout_fraction: 0.25,
            folds: 1,
            seed: 0,
            metric: TuningMetric::HoldoutMse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaScore {
    pub lambda: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuningResult {
    pub best_lambda: f64,
    pub scores: Vec<LambdaScore>,
}

/// `count` log-spaced points from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count)
                .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
                .collect()
        }
    }
}

/// 0 followed by 25 log-spaced points from `1e-6 g` to `1e4 g`, with
/// `g = trace(X'X) / K`.
pub fn default_grid(design: &ResidualizedDesign) -> Vec<f64> {
    let x = design.design_matrix();
    let trace: f64 = x.column_iter().map(|c| c.norm_squared()).sum();
    let g = trace / design.sub_treatment_count() as f64;
    let mut grid = vec![0.0];
    grid.extend(log_spaced(1e-6 * g, 1e4 * g, 25));
    grid
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidTuning("lambda grid is empty".into()));
    }
    if let Some(l) = grid.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(Error::InvalidLambda(*l));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidTuning("lambda grid must be strictly increasing".into()));
    }
    Ok(())
}

fn holdout_mse(train: &ResidualizedDesign, test: &ResidualizedDesign, grid: &[f64]) -> Result<Vec<f64>> {
    let problem = RidgeProblem::new(train);
    let x_test = test.design_matrix();
    grid.iter()
        .map(|&lam| {
            let coef = problem.coefficients(lam)?;
            let err = test.y_tilde() - &x_test * coef;
            Ok(err.norm_squared() / test.unit_count() as f64)
        })
        .collect()
}

/// Picks the penalty with the lowest hold-out prediction error of `Ỹ`.
/// Scores within [`TIE_TOLERANCE`] of the minimum tie, and ties go to the
/// larger penalty.
pub fn tune_lambda(design: &ResidualizedDesign, config: &TuningConfig) -> Result<TuningResult> {
    let grid = match &config.grid {
        Some(g) => g.clone(),
        None => default_grid(design),
    };
    validate_grid(&grid)?;
    let n = design.unit_count();

    let fold_scores: Vec<Vec<f64>> = if config.folds <= 1 {
        if !(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0) {
            return Err(Error::InvalidTuning(format!(
                "holdout fraction {} outside (0, 1)",
                config.holdout_fraction
            )));
        }
        let n_test = (n as f64 * config.holdout_fraction).round() as usize;
        if n_test < MIN_SPLIT_ROWS || n - n_test < MIN_SPLIT_ROWS {
            return Err(Error::InvalidTuning(format!(
                "too few rows to split: {n} rows give {n_test} hold-out and {} training rows \
                 (need at least {MIN_SPLIT_ROWS} each)",
                n - n_test
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
        let (test_rows, train_rows) = order.split_at(n_test);
        let mut test_rows = test_rows.to_vec();
        let mut train_rows = train_rows.to_vec();
        test_rows.sort_unstable();
        train_rows.sort_unstable();
        vec![holdout_mse(
            &design.select_rows(&train_rows)?,
            &design.select_rows(&test_rows)?,
            &grid,
        )?]
    } else {
        let folds = config.folds;
        if n / folds < MIN_SPLIT_ROWS {
            return Err(Error::InvalidTuning(format!(
                "too few rows to split: {n} rows over {folds} folds (need at least {MIN_SPLIT_ROWS} per fold)"
            )));
        }
        let fold_of = fold_assignment(n, folds, config.seed);
        (0..folds)
            .map(|f| {
                let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
                let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
                holdout_mse(&design.select_rows(&train)?, &design.select_rows(&test)?, &grid)
            })
            .collect::<Result<_>>()?
    };

    let scores: Vec<f64> = (0..grid.len())
        .map(|i| fold_scores.iter().map(|s| s[i]).sum::<f64>() / fold_scores.len() as f64)
        .collect();
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidTuning(format!(
            "non-finite hold-out score at lambda = {}",
            grid[i]
        )));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let y_scale = design.y_tilde().norm_squared() / n as f64;
    let slack = TIE_TOLERANCE * min.max(y_scale);
    let best = scores
        .iter()
        .rposition(|&s| s <= min + slack)
        .expect("nonempty grid");

    Ok(TuningResult {
        best_lambda: grid[best],
        scores: grid
            .iter()
            .zip(&scores)
            .map(|(&lambda, &score)| LambdaScore { lambda, score })
            .collect(),
    })
}

/// Convenience: tune, then refit the full design at the chosen penalty.
pub fn tune_and_fit(
    design: &ResidualizedDesign,
    config: &TuningConfig,
    kind: CovarianceKind,
) -> Result<(TuningResult, crate::ridge::RidgeFit)> {
    let tuned = tune_lambda(design, config)?;
    let fit = RidgeProblem::new(design).fit(tuned.best_lambda, kind)?;
    Ok((tuned, fit))
}
