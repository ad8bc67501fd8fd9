//! Domain types shared across the estimator: raw observations, the focal
//! function, and the residualized design the ridge fit consumes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aggregation of the sub-treatments into the single focal column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FocalSpec {
    /// `D' = max_k D_k`, i.e. "any sub-treatment active".
    #[default]
    Max,
    /// `D' = sum_k D_k`, the number of active sub-treatments.
    Sum,
}

impl FocalSpec {
    pub fn name(self) -> &'static str {
        match self {
            FocalSpec::Max => "max",
            FocalSpec::Sum => "sum",
        }
    }
}

impl std::str::FromStr for FocalSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "max" => Ok(FocalSpec::Max),
            "sum" => Ok(FocalSpec::Sum),
            other => Err(Error::Usage(format!(
                "unknown focal kind `{other}` (expected max or sum)"
            ))),
        }
    }
}

/// Maps an `n x K` binary treatment matrix to the focal column.
pub fn apply_focal(treatments: &DMatrix<f64>, spec: FocalSpec) -> DVector<f64> {
    let n = treatments.nrows();
    DVector::from_iterator(
        n,
        treatments.row_iter().map(|row| match spec {
            FocalSpec::Max => row.iter().fold(0.0_f64, |acc, &v| acc.max(v)),
            FocalSpec::Sum => row.iter().sum(),
        }),
    )
}

/// Raw observations. Immutable once constructed; every invariant is checked
/// in [`Dataset::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    outcome: DVector<f64>,
    covariates: DMatrix<f64>,
    treatments: DMatrix<f64>,
    treatment_names: Vec<String>,
    covariate_names: Vec<String>,
    treated_counts: Vec<usize>,
}

impl Dataset {
    pub fn new(
        outcome: DVector<f64>,
        covariates: DMatrix<f64>,
        treatments: DMatrix<f64>,
        treatment_names: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = outcome.len();
        if treatments.ncols() == 0 {
            return Err(Error::NoTreatments);
        }
        if n < 2 {
            return Err(Error::TooFewObservations(n));
        }
        for (what, rows) in [
            ("covariates", covariates.nrows()),
            ("treatments", treatments.nrows()),
        ] {
            if rows != n {
                return Err(Error::MismatchedRows {
                    what: what.to_string(),
                    expected: n,
                    got: rows,
                });
            }
        }
        if treatment_names.len() != treatments.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} treatment names for {} treatment columns",
                treatment_names.len(),
                treatments.ncols()
            )));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate names for {} covariate columns",
                covariate_names.len(),
                covariates.ncols()
            )));
        }
        for (i, v) in outcome.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::MissingValue {
                    row: i,
                    column: "outcome".into(),
                });
            }
        }
        for (j, col) in covariates.column_iter().enumerate() {
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::MissingValue {
                    row: i,
                    column: covariate_names[j].clone(),
                });
            }
        }
        let mut treated_counts = Vec::with_capacity(treatments.ncols());
        for (k, col) in treatments.column_iter().enumerate() {
            let mut count = 0;
            for (i, &v) in col.iter().enumerate() {
                if v == 1.0 {
                    count += 1;
                } else if v != 0.0 {
                    return Err(Error::NonBinaryTreatment {
                        row: i,
                        column: treatment_names[k].clone(),
                        value: v.to_string(),
                    });
                }
            }
            treated_counts.push(count);
        }
        Ok(Self {
            outcome,
            covariates,
            treatments,
            treatment_names,
            covariate_names,
            treated_counts,
        })
    }

    /// Rejects a focal column that is identical on every row.
    pub fn check_focal(&self, spec: FocalSpec) -> Result<()> {
        let focal = self.focal(spec);
        let first = focal[0];
        if focal.iter().all(|&v| v == first) {
            let msg = match (spec, first) {
                (FocalSpec::Max, 0.0) => "no row is treated".to_string(),
                (FocalSpec::Max, _) => "every row is treated".to_string(),
                (FocalSpec::Sum, v) => format!("every row has focal value {v}"),
            };
            return Err(Error::ConstantFocal(msg));
        }
        Ok(())
    }

    pub fn focal(&self, spec: FocalSpec) -> DVector<f64> {
        apply_focal(&self.treatments, spec)
    }

    pub fn outcome(&self) -> &DVector<f64> {
        &self.outcome
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn treatments(&self) -> &DMatrix<f64> {
        &self.treatments
    }

    pub fn treatment_names(&self) -> &[String] {
        &self.treatment_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn unit_count(&self) -> usize {
        self.outcome.len()
    }

    pub fn sub_treatment_count(&self) -> usize {
        self.treatments.ncols()
    }

    pub fn covariate_count(&self) -> usize {
        self.covariates.ncols()
    }

    /// Number of units with each sub-treatment active.
    pub fn treated_counts(&self) -> &[usize] {
        &self.treated_counts
    }

    /// Sample share of units with each sub-treatment active.
    pub fn prevalences(&self) -> Vec<f64> {
        let n = self.unit_count() as f64;
        self.treated_counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// A parsed table of string cells with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Which columns of a [`RawTable`] play which role. Nothing is inferred from
/// column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub outcome: String,
    pub treatments: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub focal: FocalSpec,
}

fn is_missing(cell: &str) -> bool {
    matches!(
        cell.trim().to_ascii_lowercase().as_str(),
        "" | "na" | "nan" | "null" | "none"
    )
}

/// Builds a [`Dataset`] from a raw table, checking every invariant and that the
/// configured focal column is not constant. Row numbers in errors are 1-based
/// data rows (the header is row 0).
pub fn validate_dataset(table: &RawTable, roles: &ColumnRoles) -> Result<Dataset> {
    if roles.treatments.is_empty() {
        return Err(Error::NoTreatments);
    }
    let index_of = |name: &str| {
        table
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let outcome_idx = index_of(&roles.outcome)?;
    let treat_idx: Vec<usize> = roles
        .treatments
        .iter()
        .map(|t| index_of(t))
        .collect::<Result<_>>()?;
    let cov_idx: Vec<usize> = roles
        .covariates
        .iter()
        .map(|c| index_of(c))
        .collect::<Result<_>>()?;

    let width = table.headers.len();
    let n = table.rows.len();
    for (i, row) in table.rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::MismatchedRows {
                what: format!("row {} field count", i + 1),
                expected: width,
                got: row.len(),
            });
        }
    }

    let cell = |i: usize, j: usize| -> Result<f64> {
        let raw = &table.rows[i][j];
        if is_missing(raw) {
            return Err(Error::MissingValue {
                row: i + 1,
                column: table.headers[j].clone(),
            });
        }
        let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
            row: i + 1,
            column: table.headers[j].clone(),
            value: raw.clone(),
        })?;
        if !v.is_finite() {
            return Err(Error::MissingValue {
                row: i + 1,
                column: table.headers[j].clone(),
            });
        }
        Ok(v)
    };

    let mut outcome = DVector::zeros(n);
    let mut treatments = DMatrix::zeros(n, treat_idx.len());
    let mut covariates = DMatrix::zeros(n, cov_idx.len());
    for i in 0..n {
        outcome[i] = cell(i, outcome_idx)?;
        for (k, &j) in treat_idx.iter().enumerate() {
            let raw = &table.rows[i][j];
            if is_missing(raw) {
                return Err(Error::MissingValue {
                    row: i + 1,
                    column: table.headers[j].clone(),
                });
            }
            treatments[(i, k)] = match raw.trim() {
                "0" => 0.0,
                "1" => 1.0,
                _ => {
                    return Err(Error::NonBinaryTreatment {
                        row: i + 1,
                        column: table.headers[j].clone(),
                        value: raw.clone(),
                    })
                }
            };
        }
        for (c, &j) in cov_idx.iter().enumerate() {
            covariates[(i, c)] = cell(i, j)?;
        }
    }

    let data = Dataset::new(
        outcome,
        covariates,
        treatments,
        roles.treatments.clone(),
        roles.covariates.clone(),
    )?;
    data.check_focal(roles.focal)?;
    Ok(data)
}

/// How the tilde quantities were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub learner: String,
    pub cross_fit_folds: usize,
    pub seed: u64,
    /// True when covariates were partialled out with a learner richer than
    /// the sample mean.
    pub covariate_adjusted: bool,
}

impl Provenance {
    pub fn identity() -> Self {
        Self {
            learner: "identity".into(),
            cross_fit_folds: 1,
            seed: 0,
            covariate_adjusted: false,
        }
    }
}

/// Residualized outcome, focal column and sub-treatment columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualizedDesign {
    y_tilde: DVector<f64>,
    focal_tilde: DVector<f64>,
    treat_tilde: DMatrix<f64>,
    treatment_names: Vec<String>,
    provenance: Provenance,
}

impl ResidualizedDesign {
    pub fn new(
        y_tilde: DVector<f64>,
        focal_tilde: DVector<f64>,
        treat_tilde: DMatrix<f64>,
        treatment_names: Vec<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = y_tilde.len();
        if focal_tilde.len() != n || treat_tilde.nrows() != n {
            return Err(Error::MismatchedRows {
                what: "residualized columns".into(),
                expected: n,
                got: if focal_tilde.len() != n {
                    focal_tilde.len()
                } else {
                    treat_tilde.nrows()
                },
            });
        }
        if treat_tilde.ncols() == 0 {
            return Err(Error::NoTreatments);
        }
        if treatment_names.len() != treat_tilde.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} treatment names for {} columns",
                treatment_names.len(),
                treat_tilde.ncols()
            )));
        }
        let all_finite = y_tilde.iter().all(|v| v.is_finite())
            && focal_tilde.iter().all(|v| v.is_finite())
            && treat_tilde.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::DimensionMismatch(
                "residualized design contains non-finite values".into(),
            ));
        }
        if focal_tilde.norm_squared() <= 0.0 {
            return Err(Error::ZeroFocalMoment);
        }
        Ok(Self {
            y_tilde,
            focal_tilde,
            treat_tilde,
            treatment_names,
            provenance,
        })
    }

    /// Uses the given columns as-is (no partialling-out). Treatment names
    /// default to `d1..dK`.
    pub fn from_columns(
        y: DVector<f64>,
        focal: DVector<f64>,
        treatments: DMatrix<f64>,
    ) -> Result<Self> {
        let names = (1..=treatments.ncols()).map(|k| format!("d{k}")).collect();
        Self::new(y, focal, treatments, names, Provenance::identity())
    }

    pub fn y_tilde(&self) -> &DVector<f64> {
        &self.y_tilde
    }

    pub fn focal_tilde(&self) -> &DVector<f64> {
        &self.focal_tilde
    }

    pub fn treat_tilde(&self) -> &DMatrix<f64> {
        &self.treat_tilde
    }

    pub fn treatment_names(&self) -> &[String] {
        &self.treatment_names
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn unit_count(&self) -> usize {
        self.y_tilde.len()
    }

    pub fn sub_treatment_count(&self) -> usize {
        self.treat_tilde.ncols()
    }

    /// `X = [focal_tilde, treat_tilde]`, shape `n x (K+1)`.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let n = self.unit_count();
        let k = self.sub_treatment_count();
        let mut x = DMatrix::zeros(n, k + 1);
        x.set_column(0, &self.focal_tilde);
        x.view_mut((0, 1), (n, k)).copy_from(&self.treat_tilde);
        x
    }

    /// Keeps the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            self.y_tilde.select_rows(rows),
            self.focal_tilde.select_rows(rows),
            self.treat_tilde.select_rows(rows),
            self.treatment_names.clone(),
            self.provenance.clone(),
        )
    }
}
