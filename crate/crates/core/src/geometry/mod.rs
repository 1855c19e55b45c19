//! Diagonal-Gaussian embeddings and their closed-form geometry.
//!
//! An embedding is `Z ~ N(mu, diag(sigma^2))`, stored as a mean vector and a
//! per-dimension log-variance so that positivity of the variance is
//! structural. Every quantity here comes with an analytic gradient with
//! respect to `(mu, log_var)` of each argument.
//!
//! ## Inclusion score
//!
//! `H(Z1 ⊂ Z2) = log ∫ p1² p2 − log ∫ p1 p2²`. Under diagonal covariance both
//! integrals factorize over dimensions, so `H` is a sum of 1-D terms. For one
//! dimension with means `m1, m2` and variances `v1, v2`:
//!
//! * `N(x; m, v)² = N(x; m, v/2) / (2 sqrt(pi v))`
//! * `∫ N(x; a, u) N(x; b, w) dx = N(a; b, u + w)`
//!
//! hence
//!
//! ```text
//! log ∫ p1² p2 = −log 2 − ½ log(pi v1) − ½ log(2 pi (v1/2 + v2)) − δ² / (2 (v1/2 + v2))
//! log ∫ p1 p2² = −log 2 − ½ log(pi v2) − ½ log(2 pi (v1 + v2/2)) − δ² / (2 (v1 + v2/2))
//! ```
//!
//! with `δ = m1 − m2`. The constants cancel in the difference. Writing
//! `A = 2 v1 + v2` and `B = v1 + 2 v2`,
//!
//! ```text
//! H_1d = ½ (log v2 − log v1 + log A − log B) + δ² (1/A − 1/B)
//! ```
//!
//! which is antisymmetric under `(m1, v1) <-> (m2, v2)` since that swap
//! exchanges `A` and `B`. `log A` and `log B` are evaluated with
//! `logaddexp` on the stored log-variances so nothing underflows.
//!
//! The quadrature oracle in [`quadrature`] evaluates the same two integrals
//! numerically and shares none of the algebra above.

pub mod quadrature;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub use quadrature::quadrature_inclusion_oracle;

/// A probabilistic embedding `N(mu, diag(exp(log_var)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        check_dim(mu.len(), log_var.len())?;
        if let Some(i) = mu.iter().chain(&log_var).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding entry {i}")));
        }
        Ok(Self { mu, log_var })
    }

    /// Builds an embedding from variances rather than log-variances.
    pub fn from_variance(mu: Vec<f64>, var: &[f64]) -> Result<Self> {
        if let Some((index, &value)) = var.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::NonPositiveVariance { index, value });
        }
        Self::new(mu, var.iter().map(|v| v.ln()).collect())
    }

    /// Unit-variance embedding centred at `mu`.
    pub fn isotropic(mu: Vec<f64>) -> Result<Self> {
        let d = mu.len();
        Self::new(mu, vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn mu_mut(&mut self) -> &mut [f64] {
        &mut self.mu
    }

    pub fn log_var_mut(&mut self) -> &mut [f64] {
        &mut self.log_var
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }

    pub fn total_variance(&self) -> f64 {
        self.log_var.iter().map(|l| l.exp()).sum()
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.mu, self.log_var)
    }
}

/// Learnable scale and bias of the pairwise sigmoid link.
///
/// `alpha` is kept as `log_alpha` so it stays positive under unconstrained
/// updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    log_alpha: f64,
    pub beta: f64,
}

impl SimilarityParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        if !beta.is_finite() {
            return Err(Error::NonFinite("beta".into()));
        }
        Ok(Self {
            log_alpha: alpha.ln(),
            beta,
        })
    }

    pub fn from_log_alpha(log_alpha: f64, beta: f64) -> Self {
        Self { log_alpha, beta }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn log_alpha(&self) -> f64 {
        self.log_alpha
    }

    pub fn log_alpha_mut(&mut self) -> &mut f64 {
        &mut self.log_alpha
    }
}

impl Default for SimilarityParams {
    /// alpha = 10, beta = -10.
    fn default() -> Self {
        Self::from_log_alpha(10f64.ln(), -10.0)
    }
}

/// Gradient of a scalar with respect to one embedding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianGrad {
    pub d_mu: Vec<f64>,
    pub d_log_var: Vec<f64>,
}

impl GaussianGrad {
    pub fn zeros(d: usize) -> Self {
        Self {
            d_mu: vec![0.0; d],
            d_log_var: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.d_mu.len()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &GaussianGrad, scale: f64) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.d_mu.iter_mut().zip(&other.d_mu) {
            *a += scale * b;
        }
        for (a, b) in self.d_log_var.iter_mut().zip(&other.d_log_var) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.d_mu.iter_mut().for_each(|v| *v *= factor);
        self.d_log_var.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.d_mu
            .iter()
            .chain(&self.d_log_var)
            .all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Corrected similarity `mu_a · mu_t − ½ (tr Σ_a + tr Σ_t)`.
pub fn csd_similarity(a: &DiagGaussian, t: &DiagGaussian) -> Result<f64> {
    check_dim(a.dim(), t.dim())?;
    Ok(dot(&a.mu, &t.mu) - 0.5 * (a.total_variance() + t.total_variance()))
}

/// Similarity together with its gradient with respect to both arguments.
pub fn csd_similarity_grad(
    a: &DiagGaussian,
    t: &DiagGaussian,
) -> Result<(f64, GaussianGrad, GaussianGrad)> {
    let s = csd_similarity(a, t)?;
    let ga = GaussianGrad {
        d_mu: t.mu.clone(),
        d_log_var: a.log_var.iter().map(|l| -0.5 * l.exp()).collect(),
    };
    let gt = GaussianGrad {
        d_mu: a.mu.clone(),
        d_log_var: t.log_var.iter().map(|l| -0.5 * l.exp()).collect(),
    };
    Ok((s, ga, gt))
}

fn check_inclusion_inputs(z1: &DiagGaussian, z2: &DiagGaussian) -> Result<()> {
    check_dim(z1.dim(), z2.dim())?;
    for z in [z1, z2] {
        for (index, l) in z.log_var.iter().enumerate() {
            let value = l.exp();
            if !(value > 0.0) {
                return Err(Error::NonPositiveVariance { index, value });
            }
        }
    }
    Ok(())
}

struct InclusionTerm {
    value: f64,
    d_mu1: f64,
    d_lv1: f64,
    d_lv2: f64,
}

fn inclusion_term(m1: f64, lv1: f64, m2: f64, lv2: f64) -> InclusionTerm {
    let ln2 = std::f64::consts::LN_2;
    let log_a = log_add_exp(ln2 + lv1, lv2);
    let log_b = log_add_exp(lv1, ln2 + lv2);
    let inv_a = (-log_a).exp();
    let inv_b = (-log_b).exp();
    let delta = m1 - m2;
    let d2 = delta * delta;
    let value = 0.5 * (lv2 - lv1 + log_a - log_b) + d2 * (inv_a - inv_b);

    // v/A and v/B taken as exp(log v − log A) to stay finite at extreme scales.
    let v1_a = (lv1 - log_a).exp();
    let v1_b = (lv1 - log_b).exp();
    let v2_a = (lv2 - log_a).exp();
    let v2_b = (lv2 - log_b).exp();
    let d_lv1 = 0.5 * (-1.0 + 2.0 * v1_a - v1_b) + d2 * (-2.0 * v1_a * inv_a + v1_b * inv_b);
    let d_lv2 = 0.5 * (1.0 + v2_a - 2.0 * v2_b) + d2 * (-v2_a * inv_a + 2.0 * v2_b * inv_b);
    InclusionTerm {
        value,
        d_mu1: 2.0 * delta * (inv_a - inv_b),
        d_lv1,
        d_lv2,
    }
}

/// Inclusion statistic `H(z1 ⊂ z2)`; positive when `z2` covers `z1`.
pub fn inclusion_score(z1: &DiagGaussian, z2: &DiagGaussian) -> Result<f64> {
    check_inclusion_inputs(z1, z2)?;
    Ok((0..z1.dim())
        .map(|i| inclusion_term(z1.mu[i], z1.log_var[i], z2.mu[i], z2.log_var[i]).value)
        .sum())
}

pub fn inclusion_score_grad(
    z1: &DiagGaussian,
    z2: &DiagGaussian,
) -> Result<(f64, GaussianGrad, GaussianGrad)> {
    check_inclusion_inputs(z1, z2)?;
    let d = z1.dim();
    let mut g1 = GaussianGrad::zeros(d);
    let mut g2 = GaussianGrad::zeros(d);
    let mut h = 0.0;
    for i in 0..d {
        let term = inclusion_term(z1.mu[i], z1.log_var[i], z2.mu[i], z2.log_var[i]);
        h += term.value;
        g1.d_mu[i] = term.d_mu1;
        g2.d_mu[i] = -term.d_mu1;
        g1.d_log_var[i] = term.d_lv1;
        g2.d_log_var[i] = term.d_lv2;
    }
    Ok((h, g1, g2))
}

/// `KL(N(mu, diag σ²) ‖ N(0, I))`, the variance-collapse regularizer.
pub fn kl_to_standard(z: &DiagGaussian) -> f64 {
    0.5 * z
        .mu
        .iter()
        .zip(&z.log_var)
        .map(|(m, l)| l.exp() + m * m - 1.0 - l)
        .sum::<f64>()
}

pub fn kl_to_standard_grad(z: &DiagGaussian) -> (f64, GaussianGrad) {
    let g = GaussianGrad {
        d_mu: z.mu.clone(),
        d_log_var: z.log_var.iter().map(|l| 0.5 * (l.exp() - 1.0)).collect(),
    };
    (kl_to_standard(z), g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mu: &[f64], var: &[f64]) -> DiagGaussian {
        DiagGaussian::from_variance(mu.to_vec(), var).unwrap()
    }

    #[test]
    fn zero_variance_similarity_is_dot_product() {
        // log_var far below any float noise stands in for σ² = 0.
        let a = DiagGaussian::new(vec![1.0, 0.0], vec![-800.0, -800.0]).unwrap();
        assert_eq!(csd_similarity(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn similarity_direct_substitution() {
        let a = g(&[1.0, 0.0], &[0.5, 0.5]);
        let t = g(&[0.0, 1.0], &[0.5, 0.5]);
        assert!((csd_similarity(&a, &t).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(
            csd_similarity(&a, &t).unwrap(),
            csd_similarity(&t, &a).unwrap()
        );
    }

    #[test]
    fn similarity_rejects_mismatched_dims() {
        let a = g(&[1.0], &[1.0]);
        let t = g(&[1.0, 2.0], &[1.0, 1.0]);
        assert!(matches!(
            csd_similarity(&a, &t),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn inclusion_of_identical_is_zero() {
        let z = g(&[0.3, -1.2, 4.0], &[0.2, 1.5, 3.0]);
        assert_eq!(inclusion_score(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn inclusion_wider_second_argument() {
        // Hand value: ½ (ln 4 + ln 6 − ln 9) = ½ ln(8/3).
        let h = inclusion_score(&g(&[0.0], &[1.0]), &g(&[0.0], &[4.0])).unwrap();
        assert!((h - 0.5 * (8.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((h - 0.490).abs() < 1e-3);
    }

    #[test]
    fn zero_variance_is_rejected_by_inclusion() {
        let z1 = DiagGaussian::new(vec![0.0], vec![-800.0]).unwrap();
        let z2 = g(&[0.0], &[1.0]);
        assert!(matches!(
            inclusion_score(&z1, &z2),
            Err(Error::NonPositiveVariance { .. })
        ));
    }

    #[test]
    fn kl_identity_and_substitution() {
        assert_eq!(kl_to_standard(&g(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0])), 0.0);
        let e = std::f64::consts::E;
        let kl = kl_to_standard(&g(&[0.0], &[e]));
        assert!((kl - 0.5 * (e - 2.0)).abs() < 1e-15);
        assert!((kl - 0.3591).abs() < 1e-4);
    }

    #[test]
    fn high_dimensional_inclusion_stays_finite() {
        let d = 512;
        let z1 = DiagGaussian::new(vec![0.1; d], vec![-20.0; d]).unwrap();
        let z2 = DiagGaussian::new(vec![-0.1; d], vec![20.0; d]).unwrap();
        let h = inclusion_score(&z1, &z2).unwrap();
        assert!(h.is_finite() && h > 0.0);
    }

    #[test]
    fn constructor_validates() {
        assert!(DiagGaussian::new(vec![], vec![]).is_err());
        assert!(DiagGaussian::new(vec![1.0], vec![0.0, 0.0]).is_err());
        assert!(DiagGaussian::new(vec![f64::NAN], vec![0.0]).is_err());
        assert!(DiagGaussian::from_variance(vec![0.0], &[0.0]).is_err());
        assert!(SimilarityParams::new(0.0, 1.0).is_err());
        assert!((SimilarityParams::default().alpha() - 10.0).abs() < 1e-12);
    }
}
