//! Partialling-out of covariates: each of the outcome, the focal column and
//! every sub-treatment column is replaced by its residual from a nuisance
//! regression on the covariates.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, FocalSpec, Provenance, ResidualizedDesign};

/// Reference nuisance learners. All of them predict `E[target | X]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceLearner {
    #[default]
    MeanOnly,
    /// OLS on `[1, X]`.
    LinearLeastSquares,
    /// Average of the `k` nearest rows, Euclidean distance on covariates
    /// standardized to unit variance, ties broken by row index.
    KNearestNeighbors(usize),
}

impl NuisanceLearner {
    pub fn name(&self) -> String {
        match self {
            NuisanceLearner::MeanOnly => "mean".into(),
            NuisanceLearner::LinearLeastSquares => "linear".into(),
            NuisanceLearner::KNearestNeighbors(k) => format!("knn:{k}"),
        }
    }

    /// Fits the learner to `target` on covariate rows `x`. `target_name`
    /// only labels errors.
    pub fn fit(
        &self,
        x: &DMatrix<f64>,
        target: &DVector<f64>,
        target_name: &str,
    ) -> Result<FittedNuisance> {
        if x.nrows() != target.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate rows for {} targets",
                x.nrows(),
                target.len()
            )));
        }
        if target.is_empty() {
            return Err(Error::TooFewObservations(0));
        }
        match *self {
            NuisanceLearner::MeanOnly => Ok(FittedNuisance::Mean {
                mean: target.mean(),
                dims: x.ncols(),
            }),
            NuisanceLearner::LinearLeastSquares => fit_linear(x, target, target_name),
            NuisanceLearner::KNearestNeighbors(k) => {
                if k == 0 || k > x.nrows() {
                    return Err(Error::InvalidNuisance(format!(
                        "knn requires 1 <= k <= {} training rows, got k = {k}",
                        x.nrows()
                    )));
                }
                let (center, scale) = column_scaling(x);
                let mut train = x.clone();
                standardize(&mut train, &center, &scale);
                Ok(FittedNuisance::Knn {
                    train,
                    target: target.clone(),
                    center,
                    scale,
                    k,
                })
            }
        }
    }
}

impl std::str::FromStr for NuisanceLearner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "mean" => Ok(NuisanceLearner::MeanOnly),
            "linear" => Ok(NuisanceLearner::LinearLeastSquares),
            _ => {
                let k = s
                    .strip_prefix("knn:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::Usage(format!(
                            "unknown nuisance learner `{s}` (expected mean, linear or knn:K)"
                        ))
                    })?;
                if k == 0 {
                    return Err(Error::InvalidNuisance("knn requires k >= 1".into()));
                }
                Ok(NuisanceLearner::KNearestNeighbors(k))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpec {
    pub learner: NuisanceLearner,
    /// 1 disables cross-fitting.
    pub cross_fit_folds: usize,
    /// Seeds the fold assignment.
    pub seed: u64,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        Self {
            learner: NuisanceLearner::MeanOnly,
            cross_fit_folds: 1,
            seed: 0,
        }
    }
}

/// Fitted nuisance state.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedNuisance {
    Mean {
        mean: f64,
        dims: usize,
    },
    Linear {
        intercept: f64,
        slopes: DVector<f64>,
    },
    Knn {
        train: DMatrix<f64>,
        target: DVector<f64>,
        center: Vec<f64>,
        scale: Vec<f64>,
        k: usize,
    },
}

impl FittedNuisance {
    fn dims(&self) -> usize {
        match self {
            FittedNuisance::Mean { dims, .. } => *dims,
            FittedNuisance::Linear { slopes, .. } => slopes.len(),
            FittedNuisance::Knn { train, .. } => train.ncols(),
        }
    }

    /// Predicts `E[target | X]` for each row of `x`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.dims() {
            return Err(Error::DimensionMismatch(format!(
                "learner fitted on {} covariates, got {}",
                self.dims(),
                x.ncols()
            )));
        }
        Ok(match self {
            FittedNuisance::Mean { mean, .. } => DVector::from_element(x.nrows(), *mean),
            FittedNuisance::Linear { intercept, slopes } => {
                let mut out = x * slopes;
                out.add_scalar_mut(*intercept);
                out
            }
            FittedNuisance::Knn {
                train,
                target,
                center,
                scale,
                k,
            } => {
                let mut query = x.clone();
                standardize(&mut query, center, scale);
                let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train.nrows());
                DVector::from_iterator(
                    x.nrows(),
                    query.row_iter().map(|q| {
                        dist.clear();
                        dist.extend(
                            train
                                .row_iter()
                                .enumerate()
                                .map(|(i, t)| ((t - q).norm_squared(), i)),
                        );
                        dist.select_nth_unstable_by(*k - 1, |a, b| {
                            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
                        });
                        dist[..*k].iter().map(|&(_, i)| target[i]).sum::<f64>() / *k as f64
                    }),
                )
            }
        })
    }
}

/// Free-function form of [`FittedNuisance::predict`].
pub fn predict_nuisance(fitted: &FittedNuisance, rows: &DMatrix<f64>) -> Result<DVector<f64>> {
    fitted.predict(rows)
}

fn column_scaling(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut center = Vec::with_capacity(x.ncols());
    let mut scale = Vec::with_capacity(x.ncols());
    for col in x.column_iter() {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        center.push(m);
        scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
    }
    (center, scale)
}

fn standardize(x: &mut DMatrix<f64>, center: &[f64], scale: &[f64]) {
    for (j, mut col) in x.column_iter_mut().enumerate() {
        col.add_scalar_mut(-center[j]);
        col /= scale[j];
    }
}

fn fit_linear(x: &DMatrix<f64>, target: &DVector<f64>, target_name: &str) -> Result<FittedNuisance> {
    let n = x.nrows();
    let d = x.ncols();
    if n < d + 1 {
        return Err(Error::SingularNuisance {
            target: target_name.to_string(),
        });
    }
    // Center first so the intercept does not inflate the condition number.
    let (center, _) = column_scaling(x);
    let y_mean = target.mean();
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-center[j]);
    }
    let slopes = if d == 0 {
        DVector::zeros(0)
    } else {
        let qr = xc.qr();
        let r = qr.r();
        let max_diag = r.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if max_diag == 0.0 || r.diagonal().iter().any(|v| v.abs() <= 1e-10 * max_diag) {
            return Err(Error::SingularNuisance {
                target: target_name.to_string(),
            });
        }
        let mut rhs = target.add_scalar(-y_mean);
        qr.q_tr_mul(&mut rhs);
        let rhs = rhs.rows(0, d).into_owned();
        r.solve_upper_triangular(&rhs)
            .ok_or_else(|| Error::SingularNuisance {
                target: target_name.to_string(),
            })?
    };
    let intercept = y_mean - center.iter().zip(slopes.iter()).map(|(c, b)| c * b).sum::<f64>();
    Ok(FittedNuisance::Linear { intercept, slopes })
}

/// Seeded assignment of `n` rows to `folds` folds of near-equal size.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        fold_of[row] = pos % folds;
    }
    fold_of
}

fn out_of_fold_residuals(
    learner: NuisanceLearner,
    x: &DMatrix<f64>,
    target: &DVector<f64>,
    name: &str,
    folds: &[Vec<usize>],
) -> Result<DVector<f64>> {
    let n = target.len();
    if folds.len() <= 1 {
        let fitted = learner.fit(x, target, name)?;
        return Ok(target - fitted.predict(x)?);
    }
    let mut residual = DVector::zeros(n);
    for (j, held_out) in folds.iter().enumerate() {
        let train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != j)
            .flat_map(|(_, rows)| rows.iter().copied())
            .collect();
        let fitted = learner.fit(&x.select_rows(&train), &target.select_rows(&train), name)?;
        let pred = fitted.predict(&x.select_rows(held_out))?;
        for (p, &row) in pred.iter().zip(held_out) {
            residual[row] = target[row] - p;
        }
    }
    Ok(residual)
}

/// Robinson partialling-out of the outcome, the focal column and each
/// sub-treatment. The focal column is its own regression target rather than
/// being rebuilt from the residualized sub-treatments.
pub fn residualize(
    data: &Dataset,
    focal: FocalSpec,
    nuisance: &NuisanceSpec,
) -> Result<ResidualizedDesign> {
    let n = data.unit_count();
    let learner = if data.covariate_count() == 0 {
        NuisanceLearner::MeanOnly
    } else {
        nuisance.learner
    };
    let m = nuisance.cross_fit_folds;
    if m == 0 || m > n {
        return Err(Error::InvalidNuisance(format!(
            "cross_fit_folds must be in 1..={n}, got {m}"
        )));
    }
    let folds: Vec<Vec<usize>> = if m > 1 {
        let fold_of = fold_assignment(n, m, nuisance.seed);
        let mut folds = vec![Vec::new(); m];
        for (row, &f) in fold_of.iter().enumerate() {
            folds[f].push(row);
        }
        for (f, rows) in folds.iter().enumerate() {
            if rows.len() < 2 {
                return Err(Error::SmallFold {
                    fold: f,
                    size: rows.len(),
                });
            }
        }
        folds
    } else {
        Vec::new()
    };
    if let NuisanceLearner::KNearestNeighbors(k) = learner {
        let smallest_train = if m > 1 {
            n - folds.iter().map(Vec::len).max().unwrap_or(0)
        } else {
            n
        };
        if k == 0 || k > smallest_train {
            return Err(Error::InvalidNuisance(format!(
                "knn requires 1 <= k <= {smallest_train} training rows, got k = {k}"
            )));
        }
    }

    let x = data.covariates();
    let mut targets: Vec<(String, DVector<f64>)> = Vec::with_capacity(data.sub_treatment_count() + 2);
    targets.push(("outcome".into(), data.outcome().clone()));
    targets.push(("focal".into(), data.focal(focal)));
    for (k, name) in data.treatment_names().iter().enumerate() {
        targets.push((name.clone(), data.treatments().column(k).into_owned()));
    }

    let residuals: Vec<DVector<f64>> = targets
        .par_iter()
        .map(|(name, target)| out_of_fold_residuals(learner, x, target, name, &folds))
        .collect::<Result<_>>()?;

    let mut it = residuals.into_iter();
    let y_tilde = it.next().expect("outcome residual");
    let focal_tilde = it.next().expect("focal residual");
    let cols: Vec<DVector<f64>> = it.collect();
    let treat_tilde = DMatrix::from_columns(&cols);

    ResidualizedDesign::new(
        y_tilde,
        focal_tilde,
        treat_tilde,
        data.treatment_names().to_vec(),
        Provenance {
            learner: learner.name(),
            cross_fit_folds: m,
            seed: nuisance.seed,
            covariate_adjusted: learner != NuisanceLearner::MeanOnly,
        },
    )
}
