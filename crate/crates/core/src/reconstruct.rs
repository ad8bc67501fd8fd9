//! Rebuilding aggregate and per-sub-treatment effects from a ridge fit.
//!
//! Sample moments share the `1/n` normalization in numerator and denominator,
//! so every ratio here is normalization-free.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{apply_focal, Dataset, FocalSpec, ResidualizedDesign};
use crate::ridge::RidgeFit;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructedEffects {
    pub tau0: f64,
    pub tau: Vec<f64>,
    /// `⟨D̃', D̃_k⟩ / ⟨D̃', D̃'⟩`.
    pub moment_ratios: Vec<f64>,
    /// Row `j`, column `k`: sample `P(D_k = 1 | D_j = 1)`.
    pub cond_probs: Option<Vec<Vec<f64>>>,
    pub lambda_used: f64,
    /// Set when covariates were partialled out with a non-trivial learner:
    /// the per-sub-treatment effects still use raw conditional frequencies and
    /// are only valid if treatment assignment is unconfounded.
    pub tau_unconfounded_mode: bool,
}

/// `⟨D̃', D̃_k⟩ / ⟨D̃', D̃'⟩` for every sub-treatment.
pub fn moment_ratios(design: &ResidualizedDesign) -> Result<DVector<f64>> {
    let focal = design.focal_tilde();
    let denom = focal.norm_squared();
    if !(denom > 0.0) {
        return Err(Error::ZeroFocalMoment);
    }
    Ok(design.treat_tilde().tr_mul(focal) / denom)
}

/// `⟨Ỹ, D̃'⟩ / ⟨D̃', D̃'⟩`: the limit of the focal coefficient as the penalty
/// grows without bound.
pub fn univariate_projection(design: &ResidualizedDesign) -> Result<f64> {
    let focal = design.focal_tilde();
    let denom = focal.norm_squared();
    if !(denom > 0.0) {
        return Err(Error::ZeroFocalMoment);
    }
    Ok(design.y_tilde().dot(focal) / denom)
}

fn check_fit(fit: &RidgeFit, k: usize) -> Result<()> {
    if fit.beta.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "fit has {} sub-treatment coefficients, data has {k}",
            fit.beta.len()
        )));
    }
    Ok(())
}

/// `τ₀ = β̂₀ + Σ_k β̂_k m_k` using the design's residualized moments. Equal to
/// [`univariate_projection`] for every penalty.
pub fn reconstruct_tau0(fit: &RidgeFit, design: &ResidualizedDesign) -> Result<f64> {
    check_fit(fit, design.sub_treatment_count())?;
    if fit.n != design.unit_count() {
        return Err(Error::DimensionMismatch(format!(
            "fit on {} rows, design has {}",
            fit.n,
            design.unit_count()
        )));
    }
    Ok(fit.beta0 + fit.beta.dot(&moment_ratios(design)?))
}

/// Co-occurrence counts `C[j][k] = #{i : D_ij = 1 and D_ik = 1}`.
pub fn cooccurrence_counts(data: &Dataset) -> DMatrix<f64> {
    let t = data.treatments();
    t.tr_mul(t)
}

/// Row `j`, column `k`: sample `P(D_k = 1 | D_j = 1)`; NaN rows for
/// sub-treatments nobody received.
pub fn conditional_frequencies(data: &Dataset) -> DMatrix<f64> {
    let counts = cooccurrence_counts(data);
    let k = counts.nrows();
    DMatrix::from_fn(k, k, |j, m| {
        let cj = counts[(j, j)];
        if cj > 0.0 {
            counts[(j, m)] / cj
        } else {
            f64::NAN
        }
    })
}

fn tau_from_freqs(fit: &RidgeFit, freqs: &DMatrix<f64>, j: usize) -> f64 {
    let spill: f64 = (0..fit.beta.len())
        .filter(|&k| k != j)
        .map(|k| fit.beta[k] * freqs[(j, k)])
        .sum();
    fit.beta[j] + fit.beta0 + spill
}

/// `τ_j = β̂_j + β̂₀ + Σ_{k≠j} β̂_k P̂(D_k = 1 | D_j = 1)` with conditional
/// probabilities estimated as raw sample frequencies.
pub fn reconstruct_tau_j(fit: &RidgeFit, data: &Dataset, j: usize) -> Result<f64> {
    let k = data.sub_treatment_count();
    check_fit(fit, k)?;
    if j >= k {
        return Err(Error::DimensionMismatch(format!(
            "sub-treatment index {j} out of range for K = {k}"
        )));
    }
    if data.treated_counts()[j] == 0 {
        return Err(Error::NoTreatedUnits(data.treatment_names()[j].clone()));
    }
    Ok(tau_from_freqs(fit, &conditional_frequencies(data), j))
}

/// All reconstructed quantities for one fit.
pub fn reconstruct_effects(
    fit: &RidgeFit,
    design: &ResidualizedDesign,
    data: &Dataset,
) -> Result<ReconstructedEffects> {
    let k = data.sub_treatment_count();
    check_fit(fit, k)?;
    if let Some(j) = data.treated_counts().iter().position(|&c| c == 0) {
        return Err(Error::NoTreatedUnits(data.treatment_names()[j].clone()));
    }
    let freqs = conditional_frequencies(data);
    let tau = (0..k).map(|j| tau_from_freqs(fit, &freqs, j)).collect();
    Ok(ReconstructedEffects {
        tau0: reconstruct_tau0(fit, design)?,
        tau,
        moment_ratios: moment_ratios(design)?.iter().copied().collect(),
        cond_probs: Some(
            freqs
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        ),
        lambda_used: fit.lambda,
        tau_unconfounded_mode: design.provenance().covariate_adjusted,
    })
}

/// `τ₀ = β₀ + Σ_k β_k p_k / (1 − Π_m (1 − p_m))` for independent binary
/// sub-treatments under the max focal function.
pub fn analytic_tau0_binary_max(prevalences: &[f64], beta0: f64, beta: &[f64]) -> Result<f64> {
    if prevalences.len() != beta.len() || beta.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} prevalences for {} coefficients",
            prevalences.len(),
            beta.len()
        )));
    }
    if let Some(p) = prevalences.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidProbability(format!("prevalence {p} outside [0, 1]")));
    }
    let none = prevalences.iter().map(|p| 1.0 - p).product::<f64>();
    let any = 1.0 - none;
    if !(any > 0.0) {
        return Err(Error::InvalidProbability("all prevalences are zero".into()));
    }
    Ok(beta0
        + prevalences
            .iter()
            .zip(beta)
            .map(|(p, b)| b * p)
            .sum::<f64>()
            / any)
}

/// Joint distribution of two binary sub-treatments; `pXY` is
/// `P(D_1 = X, D_2 = Y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinaryJoint2 {
    pub p00: f64,
    pub p01: f64,
    pub p10: f64,
    pub p11: f64,
}

impl BinaryJoint2 {
    pub fn independent(p1: f64, p2: f64) -> Self {
        Self {
            p00: (1.0 - p1) * (1.0 - p2),
            p01: (1.0 - p1) * p2,
            p10: p1 * (1.0 - p2),
            p11: p1 * p2,
        }
    }

    fn validate(&self) -> Result<()> {
        let ps = [self.p00, self.p01, self.p10, self.p11];
        if ps.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidProbability(format!("negative or non-finite cell in {ps:?}")));
        }
        let total: f64 = ps.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidProbability(format!("joint sums to {total}, not 1")));
        }
        Ok(())
    }
}

/// The sum-focal (`D' = D_1 + D_2`) reading of `τ₀` as a weighted
/// combination of conditional means of `Y`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SumFocalDecomposition {
    /// From the moment form `β₀ + Σ β_k E[D'D_k]/E[D'²]`.
    pub tau0: f64,
    /// `w₁ E[Y|D'=1] + w₂ E[Y|D'=2]`.
    pub tau0_weighted: f64,
    pub w1: f64,
    pub w2: f64,
    /// `E[Y | D' = 1]`; `None` when `P(D' = 1) = 0`.
    pub mean_y_given_1: Option<f64>,
    /// `E[Y | D' = 2] = 2β₀ + β₁ + β₂`; `None` when `P(D' = 2) = 0`.
    pub mean_y_given_2: Option<f64>,
}

pub fn sum_focal_decomposition(
    joint: BinaryJoint2,
    beta0: f64,
    beta1: f64,
    beta2: f64,
) -> Result<SumFocalDecomposition> {
    joint.validate()?;
    let p_one = joint.p01 + joint.p10;
    let p_two = joint.p11;
    if !(p_one + p_two > 0.0) {
        return Err(Error::InvalidProbability("P(D' >= 1) = 0".into()));
    }
    let second_moment = p_one + 4.0 * p_two;
    let cross1 = joint.p10 + 2.0 * joint.p11;
    let cross2 = joint.p01 + 2.0 * joint.p11;
    let tau0 = beta0 + (beta1 * cross1 + beta2 * cross2) / second_moment;

    let w1 = p_one / second_moment;
    let w2 = 2.0 * p_two / second_moment;
    let mean_y_given_1 =
        (p_one > 0.0).then(|| beta0 + (beta1 * joint.p10 + beta2 * joint.p01) / p_one);
    let mean_y_given_2 = (p_two > 0.0).then_some(2.0 * beta0 + beta1 + beta2);
    let tau0_weighted = w1 * mean_y_given_1.unwrap_or(0.0) + w2 * mean_y_given_2.unwrap_or(0.0);

    if (tau0 - tau0_weighted).abs() > 1e-12 * tau0.abs().max(1.0) {
        return Err(Error::IdentityViolation(format!(
            "moment form {tau0} != weighted form {tau0_weighted}"
        )));
    }
    Ok(SumFocalDecomposition {
        tau0,
        tau0_weighted,
        w1,
        w2,
        mean_y_given_1,
        mean_y_given_2,
    })
}

/// Population `τ₀ = β₀ + Σ_k β_k E[D'D_k]/E[D'²]` (raw, no-intercept moments)
/// for an arbitrary distribution over the `2^K` treatment patterns. Bit `k`
/// of a pattern index is `D_{k+1}`.
pub fn population_tau0(
    pattern_probs: &[f64],
    focal: FocalSpec,
    beta0: f64,
    beta: &[f64],
) -> Result<f64> {
    let k = beta.len();
    if k == 0 || k >= usize::BITS as usize || pattern_probs.len() != 1 << k {
        return Err(Error::DimensionMismatch(format!(
            "{} pattern probabilities for K = {k}",
            pattern_probs.len()
        )));
    }
    let patterns = DMatrix::from_fn(1 << k, k, |pat, j| ((pat >> j) & 1) as f64);
    let focal_col = apply_focal(&patterns, focal);
    let mut second = 0.0;
    let mut cross = vec![0.0; k];
    for (pat, &prob) in pattern_probs.iter().enumerate() {
        if !(prob >= 0.0) {
            return Err(Error::InvalidProbability(format!("pattern {pat} has probability {prob}")));
        }
        let d = focal_col[pat];
        second += prob * d * d;
        for (j, c) in cross.iter_mut().enumerate() {
            *c += prob * d * patterns[(pat, j)];
        }
    }
    if !(second > 0.0) {
        return Err(Error::InvalidProbability("E[D'^2] = 0".into()));
    }
    Ok(beta0 + cross.iter().zip(beta).map(|(c, b)| b * c).sum::<f64>() / second)
}
