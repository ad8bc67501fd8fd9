//! Closed-form ridge regression with an unpenalized focal coefficient.
//!
//! Solves `(X'X + Λ) β = X'Ỹ` where `X = [D̃', D̃_1, …, D̃_K]` and
//! `Λ = diag(0, λ, …, λ)`. The penalized normal equations are Jacobi-scaled
//! and factored with a Cholesky decomposition whose pivots double as a
//! collinearity diagnostic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ResidualizedDesign;

/// Reciprocal condition estimates below this are treated as singular.
pub const SINGULARITY_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    /// `σ̂² A⁻¹ X'X A⁻¹` with `A = X'X + Λ`.
    #[default]
    Homoscedastic,
    /// `A⁻¹ X' diag(ε̂²) X A⁻¹`.
    Robust,
}

impl std::str::FromStr for CovarianceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "homoscedastic" => Ok(CovarianceKind::Homoscedastic),
            "robust" => Ok(CovarianceKind::Robust),
            other => Err(Error::Usage(format!(
                "unknown covariance kind `{other}` (expected homoscedastic or robust)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub lambda: f64,
    pub beta0: f64,
    pub beta: DVector<f64>,
    /// `‖Ỹ − Xβ̂‖² / (n − p)`; `None` when `n <= p`.
    pub sigma2_hat: Option<f64>,
    /// `None` when `n <= p`.
    pub covariance: Option<DMatrix<f64>>,
    pub covariance_kind: CovarianceKind,
    /// Diagonal of the penalty matrix actually applied (first entry is 0).
    pub penalty: DVector<f64>,
    pub rss: f64,
    pub n: usize,
    pub p: usize,
}

impl RidgeFit {
    /// `(β̂₀, β̂₁, …, β̂_K)` as one vector.
    pub fn coefficients(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.p);
        c[0] = self.beta0;
        c.rows_mut(1, self.p - 1).copy_from(&self.beta);
        c
    }

    /// Square roots of the covariance diagonal.
    pub fn standard_errors(&self) -> Option<DVector<f64>> {
        self.covariance
            .as_ref()
            .map(|c| c.diagonal().map(|v| v.max(0.0).sqrt()))
    }
}

/// Cholesky factor of a Jacobi-scaled SPD matrix: `A = D S D` with
/// `D = diag(sqrt(A_ii))` and `S = L L'`.
struct ScaledCholesky {
    l: DMatrix<f64>,
    scale: DVector<f64>,
}

impl ScaledCholesky {
    /// Fails with the index of the first column whose pivot drops below the
    /// singularity threshold, together with the smallest pivot seen.
    fn factor(a: &DMatrix<f64>) -> std::result::Result<Self, (usize, f64)> {
        let p = a.nrows();
        let mut scale = DVector::zeros(p);
        for i in 0..p {
            let d = a[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return Err((i, 0.0));
            }
            scale[i] = d.sqrt();
        }
        let mut l = DMatrix::zeros(p, p);
        for j in 0..p {
            let mut pivot = a[(j, j)] / (scale[j] * scale[j]);
            for k in 0..j {
                pivot -= l[(j, k)] * l[(j, k)];
            }
            // pivot = 1 - R² of column j on the preceding columns
            if !(pivot >= SINGULARITY_RCOND) {
                return Err((j, pivot.max(0.0)));
            }
            let ljj = pivot.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..p {
                let mut s = a[(i, j)] / (scale[i] * scale[j]);
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l, scale })
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let scaled = rhs.component_div(&self.scale);
        let z = self
            .l
            .solve_lower_triangular(&scaled)
            .expect("nonzero pivots");
        let w = self
            .l
            .tr_solve_lower_triangular(&z)
            .expect("nonzero pivots");
        w.component_div(&self.scale)
    }

    fn inverse(&self) -> DMatrix<f64> {
        let p = self.l.nrows();
        let mut inv = DMatrix::zeros(p, p);
        for j in 0..p {
            let mut e = DVector::zeros(p);
            e[j] = 1.0;
            inv.set_column(j, &self.solve(&e));
        }
        symmetrize(inv)
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn column_name(design: &ResidualizedDesign, j: usize) -> String {
    if j == 0 {
        "focal".to_string()
    } else {
        design.treatment_names()[j - 1].clone()
    }
}

/// A design with its Gram matrix `X'X` and `X'Ỹ` precomputed, so a grid of
/// penalties can be fitted without recomputing them.
#[derive(Debug, Clone)]
pub struct RidgeProblem<'a> {
    design: &'a ResidualizedDesign,
    x: DMatrix<f64>,
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    penalty_weights: DVector<f64>,
}

impl<'a> RidgeProblem<'a> {
    pub fn new(design: &'a ResidualizedDesign) -> Self {
        let x = design.design_matrix();
        let gram = symmetrize(x.tr_mul(&x));
        let xty = x.tr_mul(design.y_tilde());
        let mut penalty_weights = DVector::from_element(x.ncols(), 1.0);
        penalty_weights[0] = 0.0;
        Self {
            design,
            x,
            gram,
            xty,
            penalty_weights,
        }
    }

    /// Penalizes each sub-treatment coefficient as if its column had been
    /// scaled to unit mean square; coefficients stay on the original scale.
    pub fn standardized(design: &'a ResidualizedDesign) -> Self {
        let mut problem = Self::new(design);
        let n = design.unit_count() as f64;
        for j in 1..problem.gram.ncols() {
            let ms = problem.gram[(j, j)] / n;
            problem.penalty_weights[j] = if ms > 0.0 { ms } else { 1.0 };
        }
        problem
    }

    pub fn design(&self) -> &ResidualizedDesign {
        self.design
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn xty(&self) -> &DVector<f64> {
        &self.xty
    }

    pub fn penalty(&self, lambda: f64) -> DVector<f64> {
        &self.penalty_weights * lambda
    }

    fn factor(&self, penalty: &DVector<f64>) -> Result<ScaledCholesky> {
        let mut a = self.gram.clone();
        for j in 0..a.ncols() {
            a[(j, j)] += penalty[j];
        }
        ScaledCholesky::factor(&a).map_err(|(j, rcond)| Error::Singular {
            column: column_name(self.design, j),
            rcond,
        })
    }

    /// Coefficient vector `(β̂₀, β̂₁, …, β̂_K)` for one penalty.
    pub fn coefficients(&self, lambda: f64) -> Result<DVector<f64>> {
        check_lambda(lambda)?;
        Ok(self.factor(&self.penalty(lambda))?.solve(&self.xty))
    }

    pub fn fit(&self, lambda: f64, kind: CovarianceKind) -> Result<RidgeFit> {
        check_lambda(lambda)?;
        let penalty = self.penalty(lambda);
        let chol = self.factor(&penalty)?;
        let coef = chol.solve(&self.xty);
        let residuals = self.design.y_tilde() - &self.x * &coef;
        let rss = residuals.norm_squared();
        let n = self.x.nrows();
        let p = self.x.ncols();
        let (sigma2_hat, covariance) = if n > p {
            let sigma2 = rss / (n - p) as f64;
            let a_inv = chol.inverse();
            let cov = sandwich(&a_inv, &self.x, &self.gram, &residuals, sigma2, kind);
            (Some(sigma2), Some(cov))
        } else {
            (None, None)
        };
        Ok(RidgeFit {
            lambda,
            beta0: coef[0],
            beta: coef.rows(1, p - 1).into_owned(),
            sigma2_hat,
            covariance,
            covariance_kind: kind,
            penalty,
            rss,
            n,
            p,
        })
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidLambda(lambda))
    }
}

fn sandwich(
    a_inv: &DMatrix<f64>,
    x: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    residuals: &DVector<f64>,
    sigma2: f64,
    kind: CovarianceKind,
) -> DMatrix<f64> {
    let meat = match kind {
        CovarianceKind::Homoscedastic => gram * sigma2,
        CovarianceKind::Robust => {
            let mut weighted = x.clone();
            for (mut row, e) in weighted.row_iter_mut().zip(residuals.iter()) {
                row *= *e;
            }
            weighted.tr_mul(&weighted)
        }
    };
    symmetrize(a_inv * meat * a_inv)
}

/// Fits one penalty with homoscedastic covariance and no column scaling.
pub fn fit_ridge(design: &ResidualizedDesign, lambda: f64) -> Result<RidgeFit> {
    RidgeProblem::new(design).fit(lambda, CovarianceKind::Homoscedastic)
}

fn check_dims(fit: &RidgeFit, design: &ResidualizedDesign) -> Result<()> {
    if fit.p != design.sub_treatment_count() + 1 || fit.n != design.unit_count() {
        return Err(Error::DimensionMismatch(format!(
            "fit has n = {}, p = {}; design has n = {}, p = {}",
            fit.n,
            fit.p,
            design.unit_count(),
            design.sub_treatment_count() + 1
        )));
    }
    Ok(())
}

fn residuals(fit: &RidgeFit, design: &ResidualizedDesign) -> DVector<f64> {
    design.y_tilde() - design.design_matrix() * fit.coefficients()
}

/// `‖Ỹ − Xβ̂‖² / (n − p)` with `p = K + 1` at every penalty.
pub fn residual_variance(fit: &RidgeFit, design: &ResidualizedDesign) -> Result<f64> {
    check_dims(fit, design)?;
    if fit.n <= fit.p {
        return Err(Error::InsufficientDof { n: fit.n, p: fit.p });
    }
    Ok(residuals(fit, design).norm_squared() / (fit.n - fit.p) as f64)
}

/// Sandwich covariance of a fit's coefficients.
pub fn estimate_covariance(
    fit: &RidgeFit,
    design: &ResidualizedDesign,
    kind: CovarianceKind,
) -> Result<DMatrix<f64>> {
    check_dims(fit, design)?;
    if fit.n <= fit.p {
        return Err(Error::InsufficientDof { n: fit.n, p: fit.p });
    }
    let x = design.design_matrix();
    let gram = symmetrize(x.tr_mul(&x));
    let mut a = gram.clone();
    for j in 0..a.ncols() {
        a[(j, j)] += fit.penalty[j];
    }
    let chol = ScaledCholesky::factor(&a).map_err(|(j, rcond)| Error::Singular {
        column: column_name(design, j),
        rcond,
    })?;
    let e = residuals(fit, design);
    let sigma2 = e.norm_squared() / (fit.n - fit.p) as f64;
    Ok(sandwich(&chol.inverse(), &x, &gram, &e, sigma2, kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hand() -> ResidualizedDesign {
        ResidualizedDesign::from_columns(
            DVector::from_vec(vec![3., 1., 2., 0.]),
            DVector::from_vec(vec![1., 1., 1., 0.]),
            DMatrix::from_column_slice(4, 1, &[1., 0., 1., 0.]),
        )
        .unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn hand_fixture_ols() {
        let fit = fit_ridge(&hand(), 0.0).unwrap();
        assert!(close(fit.beta0, 1.0, 1e-12));
        assert!(close(fit.beta[0], 1.5, 1e-12));
        // residuals [0.5, 0, -0.5, 0] over n - p = 2
        assert!(close(fit.sigma2_hat.unwrap(), 0.25, 1e-12));
        assert!(close(residual_variance(&fit, &hand()).unwrap(), 0.25, 1e-12));
    }

    #[test]
    fn hand_fixture_penalized() {
        let fit = fit_ridge(&hand(), 2.0).unwrap();
        assert!(close(fit.beta0, 1.75, 1e-12));
        assert!(close(fit.beta[0], 0.375, 1e-12));
        assert_eq!(fit.penalty.as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn hand_fixture_huge_penalty() {
        let fit = fit_ridge(&hand(), 1e8).unwrap();
        assert!((fit.beta0 - 2.0).abs() < 1e-4);
        assert!(fit.beta[0].abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_lambda() {
        assert_eq!(fit_ridge(&hand(), -1.0), Err(Error::InvalidLambda(-1.0)));
        assert!(fit_ridge(&hand(), f64::NAN).is_err());
    }

    #[test]
    fn singular_design_names_column() {
        let d = ResidualizedDesign::from_columns(
            DVector::from_vec(vec![1., 2., 3., 4.]),
            DVector::from_vec(vec![1., 1., 0., 0.]),
            DMatrix::from_column_slice(4, 2, &[1., 0., 1., 0., 1., 1., 0., 0.]),
        )
        .unwrap();
        // d2 equals the focal column
        match fit_ridge(&d, 0.0) {
            Err(Error::Singular { column, .. }) => assert_eq!(column, "d2"),
            other => panic!("expected singular error, got {other:?}"),
        }
        let err = fit_ridge(&d, 0.0).unwrap_err().to_string();
        assert!(err.contains("lambda > 0"));
        // any positive penalty resolves it
        assert!(fit_ridge(&d, 0.1).is_ok());
    }

    #[test]
    fn zero_penalized_column_is_singular_only_without_penalty() {
        let d = ResidualizedDesign::from_columns(
            DVector::from_vec(vec![1., 2., 3.]),
            DVector::from_vec(vec![1., 0., 1.]),
            DMatrix::from_column_slice(3, 1, &[0., 0., 0.]),
        )
        .unwrap();
        assert!(matches!(fit_ridge(&d, 0.0), Err(Error::Singular { .. })));
        let fit = fit_ridge(&d, 1.0).unwrap();
        assert_eq!(fit.beta[0], 0.0);
    }

    #[test]
    fn too_few_rows_for_variance() {
        let d = ResidualizedDesign::from_columns(
            DVector::from_vec(vec![1., 2.]),
            DVector::from_vec(vec![1., 0.]),
            DMatrix::from_column_slice(2, 1, &[0., 1.]),
        )
        .unwrap();
        let fit = fit_ridge(&d, 0.0).unwrap();
        assert!(fit.sigma2_hat.is_none());
        assert!(fit.covariance.is_none());
        assert_eq!(
            residual_variance(&fit, &d),
            Err(Error::InsufficientDof { n: 2, p: 2 })
        );
        assert!(estimate_covariance(&fit, &d, CovarianceKind::Robust).is_err());
    }

    fn random_design(rng: &mut ChaCha8Rng, n: usize, k: usize, noise: f64) -> ResidualizedDesign {
        let t = DMatrix::from_fn(n, k, |_, j| {
            f64::from(rng.random::<f64>() < 0.1 + 0.3 * (j as f64 / k as f64))
        });
        let focal = crate::model::apply_focal(&t, crate::model::FocalSpec::Max);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            y[i] = 2.0 * focal[i] + (0..k).map(|j| (j as f64 - 1.0) * t[(i, j)]).sum::<f64>()
                + noise * (rng.random::<f64>() - 0.5);
        }
        let center = |v: DVector<f64>| {
            let m = v.mean();
            v.add_scalar(-m)
        };
        let mut tc = t.clone();
        for mut c in tc.column_iter_mut() {
            let m = c.mean();
            c.add_scalar_mut(-m);
        }
        ResidualizedDesign::from_columns(center(y), center(focal), tc).unwrap()
    }

    #[test]
    fn lambda_zero_matches_qr_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = random_design(&mut rng, 300, 5, 1.0);
        let fit = fit_ridge(&d, 0.0).unwrap();
        let x = d.design_matrix();
        let qr = x.clone().qr();
        let mut qty = d.y_tilde().clone();
        qr.q_tr_mul(&mut qty);
        let r = qr.r();
        let ols = r
            .solve_upper_triangular(&qty.rows(0, x.ncols()).into_owned())
            .unwrap();
        for (a, b) in fit.coefficients().iter().zip(ols.iter()) {
            assert!(close(*a, *b, 1e-10));
        }
        // classical OLS covariance σ̂² (X'X)⁻¹ = σ̂² R⁻¹ R⁻ᵀ
        let r_inv = r.try_inverse().unwrap();
        let classical = &r_inv * r_inv.transpose() * fit.sigma2_hat.unwrap();
        let cov = fit.covariance.unwrap();
        assert!((&cov - &classical).amax() <= 1e-10 * classical.amax());
    }

    #[test]
    fn zero_residuals_give_zero_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_design(&mut rng, 80, 3, 0.0);
        let fit = fit_ridge(&d, 0.0).unwrap();
        assert!(fit.sigma2_hat.unwrap() < 1e-20);
        for kind in [CovarianceKind::Homoscedastic, CovarianceKind::Robust] {
            let cov = estimate_covariance(&fit, &d, kind).unwrap();
            assert!(cov.amax() < 1e-20);
        }
    }

    #[test]
    fn stored_covariance_matches_standalone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random_design(&mut rng, 120, 4, 2.0);
        let problem = RidgeProblem::new(&d);
        for kind in [CovarianceKind::Homoscedastic, CovarianceKind::Robust] {
            let fit = problem.fit(3.0, kind).unwrap();
            let cov = estimate_covariance(&fit, &d, kind).unwrap();
            assert!((&cov - fit.covariance.as_ref().unwrap()).amax() < 1e-12 * cov.amax());
            for i in 0..cov.nrows() {
                assert!(cov[(i, i)] >= 0.0);
                for j in 0..cov.ncols() {
                    assert_eq!(cov[(i, j)], cov[(j, i)]);
                }
            }
        }
    }

    #[test]
    fn standardized_penalty_is_per_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = random_design(&mut rng, 200, 3, 1.0);
        let plain = RidgeProblem::new(&d);
        let scaled = RidgeProblem::standardized(&d);
        let n = d.unit_count() as f64;
        let lam = 5.0;
        // rescaling column j by s_j and penalizing uniformly is the same
        // problem as penalizing β_j with λ / s_j²
        let mut x = d.treat_tilde().clone();
        let mut s = Vec::new();
        for mut c in x.column_iter_mut() {
            let sj = (c.norm_squared() / n).sqrt();
            c /= sj;
            s.push(sj);
        }
        let d2 = ResidualizedDesign::from_columns(d.y_tilde().clone(), d.focal_tilde().clone(), x)
            .unwrap();
        let direct = fit_ridge(&d2, lam).unwrap();
        let fit = scaled.fit(lam, CovarianceKind::Homoscedastic).unwrap();
        assert!(close(fit.beta0, direct.beta0, 1e-10));
        for j in 0..3 {
            assert!(close(fit.beta[j], direct.beta[j] / s[j], 1e-10));
        }
        assert!(plain.coefficients(lam).unwrap() != scaled.coefficients(lam).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn unpenalized_first_order_condition(seed in 0u64..10_000, k in 1usize..8, lam_exp in -3.0f64..8.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_design(&mut rng, 200, k, 1.0);
            let lam = 10f64.powf(lam_exp);
            let Ok(fit) = fit_ridge(&d, lam) else { return Ok(()) };
            let e = residuals(&fit, &d);
            let scale = d.y_tilde().amax().max(1.0);
            prop_assert!(e.dot(d.focal_tilde()).abs() < 1e-8 * 200.0 * scale);
        }

        #[test]
        fn rss_nondecreasing_in_lambda(seed in 0u64..10_000, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_design(&mut rng, 150, k, 1.0);
            let problem = RidgeProblem::new(&d);
            let mut prev = 0.0;
            for lam in [1e-3, 1e-1, 1.0, 10.0, 1e3, 1e6] {
                let fit = problem.fit(lam, CovarianceKind::Homoscedastic).unwrap();
                prop_assert!(fit.rss >= prev * (1.0 - 1e-12));
                prev = fit.rss;
            }
        }

        #[test]
        fn row_permutation_invariance(seed in 0u64..10_000, lam in 0.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_design(&mut rng, 100, 3, 1.0);
            let mut rows: Vec<usize> = (0..100).collect();
            rows.reverse();
            rows.swap(3, 70);
            let permuted = d.select_rows(&rows).unwrap();
            let (Ok(a), Ok(b)) = (fit_ridge(&d, lam), fit_ridge(&permuted, lam)) else { return Ok(()) };
            for (x, y) in a.coefficients().iter().zip(b.coefficients().iter()) {
                prop_assert!(close(*x, *y, 1e-10));
            }
        }
    }

    #[test]
    fn infinite_penalty_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = random_design(&mut rng, 500, 6, 1.0);
        let problem = RidgeProblem::new(&d);
        let lam = 1e8 * problem.gram().trace();
        let fit = problem.fit(lam, CovarianceKind::Homoscedastic).unwrap();
        let proj = d.y_tilde().dot(d.focal_tilde()) / d.focal_tilde().norm_squared();
        assert!((fit.beta0 - proj).abs() < 1e-4 * proj.abs());
        assert!(fit.beta.amax() < 1e-6);
    }
}
