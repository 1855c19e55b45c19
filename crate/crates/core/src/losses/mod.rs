//! Loss terms of the probabilistic objective, each in value form and in
//! value-plus-gradient form.
//!
//! Sign convention for every pairwise sigmoid term (contrastive and mask
//! repulsive alike): `softplus(y * (-alpha * s + beta))` with `y = +1` for a
//! matched pair and `y = -1` otherwise.
//!
//! Inclusion terms floor each variance at [`VARIANCE_FLOOR`] before
//! evaluating the inclusion statistic; floored coordinates receive no
//! log-variance gradient.

mod infonce;
mod total;

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{
    csd_similarity, csd_similarity_grad, dot, inclusion_score, inclusion_score_grad,
    kl_to_standard, DiagGaussian, GaussianGrad, SimilarityParams,
};

pub use infonce::{infonce_loss, infonce_loss_grad};
pub use total::{
    total_loss, total_loss_value, Contrastive, LabelMatrix, LossBreakdown, LossOptions,
    ModalityBatch, ModalityGrad, Similarity, TotalGrad,
};

/// Smallest variance fed to the inclusion statistic.
pub const VARIANCE_FLOOR: f64 = 1e-12;

static FLOOR_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Hierarchical inclusion.
    pub lambda1: f64,
    /// Mask repulsive.
    pub lambda2: f64,
    /// Cross-modal inclusion.
    pub lambda3: f64,
    /// Variance regularizer.
    pub gamma: f64,
    /// Logistic link constant of the inclusion loss.
    pub c: f64,
}

impl LossWeights {
    pub const REFERENCE: LossWeights = LossWeights {
        lambda1: 5e-3,
        lambda2: 1e-4,
        lambda3: 5e-7,
        gamma: 1e-5,
        c: 1.0,
    };

    pub const NONE: LossWeights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        gamma: 0.0,
        c: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::invalid(format!(
                "c must be positive, got {}",
                self.c
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::REFERENCE
    }
}

/// Gradients of one loss with respect to each of its embedding arguments
/// (in argument order) and to the similarity parameters.
///
/// `d_alpha` is with respect to `alpha` itself, not `log_alpha`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradBundle {
    pub args: Vec<GaussianGrad>,
    pub d_alpha: f64,
    pub d_beta: f64,
}

impl GradBundle {
    fn zeros(d: usize, n: usize) -> Self {
        Self {
            args: vec![GaussianGrad::zeros(d); n],
            d_alpha: 0.0,
            d_beta: 0.0,
        }
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function; the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn label(y: i32) -> Result<f64> {
    match y {
        1 => Ok(1.0),
        -1 => Ok(-1.0),
        _ => Err(Error::invalid(format!(
            "match label must be +1 or -1, got {y}"
        ))),
    }
}

/// Pairwise sigmoid term for a given similarity: `(value, dL/ds, dL/dalpha, dL/dbeta)`.
pub(crate) fn sigmoid_pair(s: f64, y: f64, p: &SimilarityParams) -> (f64, f64, f64, f64) {
    let alpha = p.alpha();
    let u = y * (-alpha * s + p.beta);
    let g = sigmoid(u);
    (softplus(u), -g * y * alpha, -g * y * s, g * y)
}

/// Probabilistic pairwise contrastive loss on the corrected similarity.
pub fn ppcl(a: &DiagGaussian, t: &DiagGaussian, y: i32, p: &SimilarityParams) -> Result<f64> {
    let y = label(y)?;
    let s = csd_similarity(a, t)?;
    Ok(softplus(y * (-p.alpha() * s + p.beta)))
}

pub fn ppcl_grad(
    a: &DiagGaussian,
    t: &DiagGaussian,
    y: i32,
    p: &SimilarityParams,
) -> Result<(f64, GradBundle)> {
    let y = label(y)?;
    let (s, mut ga, mut gt) = csd_similarity_grad(a, t)?;
    let (value, ds, d_alpha, d_beta) = sigmoid_pair(s, y, p);
    ga.scale(ds);
    gt.scale(ds);
    Ok((
        value,
        GradBundle {
            args: vec![ga, gt],
            d_alpha,
            d_beta,
        },
    ))
}

/// Returns the embedding with log-variances clamped at the floor, and which
/// coordinates were clamped (`None` when nothing was).
fn floored(z: &DiagGaussian) -> (std::borrow::Cow<'_, DiagGaussian>, Option<Vec<bool>>) {
    let floor = VARIANCE_FLOOR.ln();
    if z.log_var().iter().all(|l| *l >= floor) {
        return (std::borrow::Cow::Borrowed(z), None);
    }
    if !FLOOR_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("variance floor {VARIANCE_FLOOR:e} hit in an inclusion term");
    }
    let hit: Vec<bool> = z.log_var().iter().map(|l| *l < floor).collect();
    log::debug!(
        "variance floor hit on {} of {} coordinates",
        hit.iter().filter(|h| **h).count(),
        hit.len()
    );
    let mut out = z.clone();
    for l in out.log_var_mut() {
        *l = l.max(floor);
    }
    (std::borrow::Cow::Owned(out), Some(hit))
}

fn zero_floored(g: &mut GaussianGrad, hit: &Option<Vec<bool>>) {
    if let Some(hit) = hit {
        for (d, h) in g.d_log_var.iter_mut().zip(hit) {
            if *h {
                *d = 0.0;
            }
        }
    }
}

/// `softplus(-c * H(z1 ⊂ z2))`: small when `z2` covers `z1`.
pub fn inclusion_loss(z1: &DiagGaussian, z2: &DiagGaussian, c: f64) -> Result<f64> {
    check_c(c)?;
    let (f1, _) = floored(z1);
    let (f2, _) = floored(z2);
    Ok(softplus(-c * inclusion_score(&f1, &f2)?))
}

pub fn inclusion_loss_grad(
    z1: &DiagGaussian,
    z2: &DiagGaussian,
    c: f64,
) -> Result<(f64, GradBundle)> {
    check_c(c)?;
    let (f1, hit1) = floored(z1);
    let (f2, hit2) = floored(z2);
    let (h, mut g1, mut g2) = inclusion_score_grad(&f1, &f2)?;
    let dh = -c * sigmoid(-c * h);
    g1.scale(dh);
    g2.scale(dh);
    zero_floored(&mut g1, &hit1);
    zero_floored(&mut g2, &hit2);
    Ok((
        softplus(-c * h),
        GradBundle {
            args: vec![g1, g2],
            d_alpha: 0.0,
            d_beta: 0.0,
        },
    ))
}

fn check_c(c: f64) -> Result<()> {
    if c.is_finite() && c > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("c must be positive, got {c}")))
    }
}

fn check_chain(chain: &[DiagGaussian], min_len: usize) -> Result<()> {
    if chain.len() < min_len {
        return Err(Error::invalid(format!(
            "mask chain needs at least {min_len} entries, got {}",
            chain.len()
        )));
    }
    let d = chain[0].dim();
    chain.iter().try_for_each(|z| check_dim(d, z.dim()))
}

/// `Σ_{i=0}^{L-1} L_inc(chain[i+1] ⊂ chain[i])`, where `chain[i]` is the
/// embedding under mask level `i` (`chain[0]` fully masked, `chain[L]` raw).
pub fn hier_inclusion_loss(chain: &[DiagGaussian], c: f64) -> Result<f64> {
    check_chain(chain, 2)?;
    chain
        .windows(2)
        .map(|w| inclusion_loss(&w[1], &w[0], c))
        .sum()
}

pub fn hier_inclusion_loss_grad(chain: &[DiagGaussian], c: f64) -> Result<(f64, GradBundle)> {
    check_chain(chain, 2)?;
    let mut out = GradBundle::zeros(chain[0].dim(), chain.len());
    let mut value = 0.0;
    for i in 0..chain.len() - 1 {
        let (v, g) = inclusion_loss_grad(&chain[i + 1], &chain[i], c)?;
        value += v;
        out.args[i + 1].add_scaled(&g.args[0], 1.0);
        out.args[i].add_scaled(&g.args[1], 1.0);
    }
    Ok((value, out))
}

/// Mask repulsive loss between two samples of one modality whose chains were
/// produced with the same masks. Sums the intermediate levels `1 .. L-1`.
/// For `same_sample` the label is `0` and the value is the constant
/// `(L - 1) log 2`.
pub fn mask_repulsive_loss(
    zp: &[DiagGaussian],
    zq: &[DiagGaussian],
    same_sample: bool,
    p: &SimilarityParams,
) -> Result<f64> {
    mask_repulsive_loss_grad(zp, zq, same_sample, p).map(|(v, _)| v)
}

/// Gradient arguments are `zp[0..=L]` followed by `zq[0..=L]`. Every
/// log-variance gradient is exactly zero (stop-gradient on uncertainty).
pub fn mask_repulsive_loss_grad(
    zp: &[DiagGaussian],
    zq: &[DiagGaussian],
    same_sample: bool,
    p: &SimilarityParams,
) -> Result<(f64, GradBundle)> {
    check_chain(zp, 2)?;
    check_chain(zq, 2)?;
    if zp.len() != zq.len() {
        return Err(Error::invalid(format!(
            "mask chains differ in length: {} vs {}",
            zp.len(),
            zq.len()
        )));
    }
    check_dim(zp[0].dim(), zq[0].dim())?;
    let n = zp.len();
    let levels = n - 1;
    let mut out = GradBundle::zeros(zp[0].dim(), 2 * n);
    if same_sample {
        return Ok((
            levels.saturating_sub(1) as f64 * std::f64::consts::LN_2,
            out,
        ));
    }
    let mut value = 0.0;
    for i in 1..levels {
        let s = csd_similarity(&zp[i], &zq[i])?;
        let (v, ds, da, db) = sigmoid_pair(s, -1.0, p);
        value += v;
        out.d_alpha += da;
        out.d_beta += db;
        for (g, m) in out.args[i].d_mu.iter_mut().zip(zq[i].mu()) {
            *g += ds * m;
        }
        for (g, m) in out.args[n + i].d_mu.iter_mut().zip(zp[i].mu()) {
            *g += ds * m;
        }
    }
    Ok((value, out))
}

/// Intra-modal objective over a batch of chains:
/// `Σ_p [λ1 L^h_inc(p) + λ2 Σ_q L_MR(p, q) + γ KL(raw_p)]`, including the
/// constant self-pair terms. The variance regularizer uses the last chain
/// entry (the raw view).
pub fn intra_modal_loss(
    batch_chains: &[Vec<DiagGaussian>],
    p: &SimilarityParams,
    w: &LossWeights,
) -> Result<f64> {
    w.validate()?;
    if batch_chains.is_empty() {
        return Err(Error::invalid("intra-modal loss needs a non-empty batch"));
    }
    let n = batch_chains[0].len();
    if let Some(bad) = batch_chains.iter().find(|c| c.len() != n) {
        return Err(Error::invalid(format!(
            "all chains must share length {n}, found {}",
            bad.len()
        )));
    }
    let mut total = 0.0;
    for (pi, chain) in batch_chains.iter().enumerate() {
        if w.lambda1 != 0.0 {
            total += w.lambda1 * hier_inclusion_loss(chain, w.c)?;
        }
        if w.lambda2 != 0.0 {
            let mut mr = 0.0;
            for (qi, other) in batch_chains.iter().enumerate() {
                mr += mask_repulsive_loss(chain, other, pi == qi, p)?;
            }
            total += w.lambda2 * mr;
        }
        if w.gamma != 0.0 {
            total += w.gamma * kl_to_standard(chain.last().expect("chain checked non-empty"));
        }
    }
    Ok(total)
}

/// Cosine similarity of the means and its gradients.
pub(crate) fn cosine_grad(a: &[f64], t: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    const NORM_FLOOR: f64 = 1e-12;
    let na = dot(a, a).sqrt().max(NORM_FLOOR);
    let nt = dot(t, t).sqrt().max(NORM_FLOOR);
    let c = dot(a, t) / (na * nt);
    let ga = a
        .iter()
        .zip(t)
        .map(|(ai, ti)| ti / (na * nt) - c * ai / (na * na))
        .collect();
    let gt = a
        .iter()
        .zip(t)
        .map(|(ai, ti)| ai / (na * nt) - c * ti / (nt * nt))
        .collect();
    (c, ga, gt)
}

pub fn cosine_similarity(a: &[f64], t: &[f64]) -> f64 {
    cosine_grad(a, t).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mu: &[f64], var: &[f64]) -> DiagGaussian {
        DiagGaussian::from_variance(mu.to_vec(), var).unwrap()
    }

    #[test]
    fn ppcl_at_zero_logit_is_log_two() {
        // s = 1·1 − ½(1 + 1) = 0, so −αs + β = β = 0.
        let a = g(&[1.0], &[1.0]);
        let p = SimilarityParams::new(3.0, 0.0).unwrap();
        assert!((ppcl(&a, &a, 1, &p).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ppcl_large_similarity_positive_pair() {
        // μ·μ = 10 with negligible variance.
        let a = DiagGaussian::new(vec![10f64.sqrt()], vec![-60.0]).unwrap();
        let p = SimilarityParams::new(1.0, 0.0).unwrap();
        let v = ppcl(&a, &a, 1, &p).unwrap();
        assert!((v - 4.539_889e-5).abs() < 1e-10, "{v}");
    }

    #[test]
    fn ppcl_rejects_bad_label() {
        let a = g(&[1.0], &[1.0]);
        assert!(ppcl(&a, &a, 0, &SimilarityParams::default()).is_err());
        assert!(ppcl(&a, &a, 2, &SimilarityParams::default()).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert!((sigmoid(-800.0)).abs() < 1e-300 && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn inclusion_loss_reference_values() {
        let z = g(&[0.2, 0.1], &[1.5, 0.4]);
        assert!((inclusion_loss(&z, &z, 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let narrow = g(&[0.0], &[1.0]);
        let wide = g(&[0.0], &[4.0]);
        let forward = inclusion_loss(&narrow, &wide, 1.0).unwrap();
        let backward = inclusion_loss(&wide, &narrow, 1.0).unwrap();
        // softplus(∓ ½ ln(8/3)).
        assert!(
            (forward - 0.477_706_656_912_438_5).abs() < 1e-12,
            "{forward}"
        );
        assert!(
            (backward - 0.968_121_283_418_301_6).abs() < 1e-12,
            "{backward}"
        );
        assert!(backward > forward);
    }

    #[test]
    fn variance_floor_blocks_gradient() {
        let tiny = DiagGaussian::new(vec![0.0, 0.0], vec![-40.0, 0.0]).unwrap();
        let wide = g(&[0.0, 0.0], &[2.0, 2.0]);
        let (v, gb) = inclusion_loss_grad(&tiny, &wide, 1.0).unwrap();
        assert!(v.is_finite());
        assert_eq!(gb.args[0].d_log_var[0], 0.0);
        assert_ne!(gb.args[0].d_log_var[1], 0.0);
    }

    #[test]
    fn hier_loss_identical_chain_and_single_term() {
        let z = g(&[0.5, -0.5], &[0.7, 1.1]);
        let chain = vec![z.clone(); 4];
        let v = hier_inclusion_loss(&chain, 1.0).unwrap();
        assert!((v - 3.0 * std::f64::consts::LN_2).abs() < 1e-14);

        let outer = g(&[0.1, 0.0], &[3.0, 2.0]);
        let inner = g(&[0.0, 0.2], &[1.0, 0.5]);
        let pair = [outer.clone(), inner.clone()];
        assert_eq!(
            hier_inclusion_loss(&pair, 1.0).unwrap(),
            inclusion_loss(&inner, &outer, 1.0).unwrap()
        );
        assert!(hier_inclusion_loss(&pair[..1], 1.0).is_err());
    }

    #[test]
    fn mask_repulsive_constants() {
        let z = g(&[0.3, 0.1], &[1.0, 1.0]);
        let chain = vec![z.clone(); 4];
        let p = SimilarityParams::default();
        let (v, gb) = mask_repulsive_loss_grad(&chain, &chain, true, &p).unwrap();
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!(gb
            .args
            .iter()
            .all(|a| a.d_mu.iter().chain(&a.d_log_var).all(|x| *x == 0.0)));

        // L = 2 and s = 0: one ln 2 term.
        let a = g(&[1.0, 0.0], &[0.5, 0.5]);
        let b = g(&[0.0, 0.0], &[0.5, 0.5]);
        let zero_s = DiagGaussian::new(vec![1.0, 0.0], vec![-60.0, -60.0]).unwrap();
        let orth = DiagGaussian::new(vec![0.0, 1.0], vec![-60.0, -60.0]).unwrap();
        let p = SimilarityParams::new(1.0, 0.0).unwrap();
        let v =
            mask_repulsive_loss(&[a, zero_s, b.clone()], &[b.clone(), orth, b], false, &p).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn mask_repulsive_rejects_mismatched_chains() {
        let z = g(&[0.0], &[1.0]);
        let p = SimilarityParams::default();
        assert!(mask_repulsive_loss(&vec![z.clone(); 3], &vec![z; 4], false, &p).is_err());
    }

    #[test]
    fn intra_modal_zero_weights_and_empty_batch() {
        let z = g(&[0.3], &[1.2]);
        let p = SimilarityParams::default();
        let batch = vec![vec![z.clone(); 4]; 3];
        let none = LossWeights::NONE;
        assert_eq!(intra_modal_loss(&batch, &p, &none).unwrap(), 0.0);
        assert!(intra_modal_loss(&[], &p, &none).is_err());
    }

    #[test]
    fn cosine_of_parallel_vectors() {
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).abs() < 1e-15);
    }
}
