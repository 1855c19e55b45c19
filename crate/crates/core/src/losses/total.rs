//! The full batch objective: contrastive term over all audio/text pairs,
//! intra-modal terms for both modalities, and cross-modal inclusion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{
    csd_similarity_grad, kl_to_standard, kl_to_standard_grad, DiagGaussian, GaussianGrad,
    SimilarityParams,
};

use super::{
    cosine_grad, cosine_similarity, hier_inclusion_loss, hier_inclusion_loss_grad, inclusion_loss,
    inclusion_loss_grad, infonce_loss, infonce_loss_grad, mask_repulsive_loss, sigmoid_pair,
    softplus, LossWeights,
};

/// Similarity used by the pairwise terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    /// Corrected similarity on full Gaussians.
    Csd,
    /// Cosine of the means; variances are ignored.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Contrastive {
    /// Pairwise sigmoid loss over every audio/text pair.
    Sigmoid,
    /// Symmetric InfoNCE on cosine similarities of the means.
    InfoNce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub similarity: Similarity,
    pub contrastive: Contrastive,
    /// Include the constant `y = 0` self-pairs of the repulsive double sum.
    pub self_repulsion: bool,
    /// Divide every batch sum by the batch size.
    pub normalize_by_batch: bool,
    /// Reduce partial sums in index order so results are bitwise stable
    /// across thread counts.
    pub deterministic: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            similarity: Similarity::Csd,
            contrastive: Contrastive::Sigmoid,
            self_repulsion: true,
            normalize_by_batch: false,
            deterministic: true,
        }
    }
}

/// `B x B` match labels: `+1` on matched pairs, `-1` elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    b: usize,
    y: Vec<i8>,
}

impl LabelMatrix {
    pub fn diagonal(b: usize) -> Self {
        let mut y = vec![-1i8; b * b];
        for i in 0..b {
            y[i * b + i] = 1;
        }
        Self { b, y }
    }

    /// Row-major labels; `audio` indexes rows and `text` columns.
    pub fn new(b: usize, labels: &[i32]) -> Result<Self> {
        check_dim(b * b, labels.len())?;
        let y = labels
            .iter()
            .map(|&l| match l {
                1 => Ok(1i8),
                -1 => Ok(-1i8),
                _ => Err(Error::invalid(format!(
                    "label matrix entries must be ±1, got {l}"
                ))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { b, y })
    }

    pub fn size(&self) -> usize {
        self.b
    }

    pub fn get(&self, a: usize, t: usize) -> f64 {
        f64::from(self.y[a * self.b + t])
    }

    pub fn is_match(&self, a: usize, t: usize) -> bool {
        self.y[a * self.b + t] == 1
    }
}

/// Embeddings of one modality for one batch.
///
/// `contrastive[k]` enters the pairwise and cross-modal terms. `chains[k]`
/// holds sample `k` under mask levels `0 ..= L` (its last entry is the raw
/// view, which also receives the variance regularizer). `chains` may be empty
/// when `lambda1`, `lambda2` and `gamma` are all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBatch {
    pub contrastive: Vec<DiagGaussian>,
    pub chains: Vec<Vec<DiagGaussian>>,
}

/// Gradients shaped exactly like a [`ModalityBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityGrad {
    pub contrastive: Vec<GaussianGrad>,
    pub chains: Vec<Vec<GaussianGrad>>,
}

impl ModalityGrad {
    fn zeros_like(batch: &ModalityBatch) -> Self {
        let d = |z: &DiagGaussian| GaussianGrad::zeros(z.dim());
        Self {
            contrastive: batch.contrastive.iter().map(d).collect(),
            chains: batch
                .chains
                .iter()
                .map(|c| c.iter().map(d).collect())
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.contrastive.iter().all(GaussianGrad::is_finite)
            && self.chains.iter().flatten().all(GaussianGrad::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalGrad {
    pub audio: ModalityGrad,
    pub text: ModalityGrad,
    /// With respect to `alpha` (not `log_alpha`).
    pub d_alpha: f64,
    pub d_beta: f64,
}

/// Weighted loss components; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub inc_cross: f64,
    pub inc_hier: f64,
    pub mr: f64,
    pub vib: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.contrastive + self.inc_cross + self.inc_hier + self.mr + self.vib;
        self
    }
}

fn validate(
    audio: &ModalityBatch,
    text: &ModalityBatch,
    labels: &LabelMatrix,
    w: &LossWeights,
    opts: &LossOptions,
) -> Result<usize> {
    w.validate()?;
    let b = audio.contrastive.len();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if text.contrastive.len() != b {
        return Err(Error::invalid(format!(
            "batch size mismatch: {b} audio vs {} text",
            text.contrastive.len()
        )));
    }
    check_dim(b, labels.size())?;
    let d = audio.contrastive[0].dim();
    for z in audio.contrastive.iter().chain(&text.contrastive) {
        check_dim(d, z.dim())?;
    }
    let needs_chains = w.lambda1 > 0.0 || w.lambda2 > 0.0 || w.gamma > 0.0;
    for m in [audio, text] {
        if m.chains.is_empty() {
            if needs_chains {
                return Err(Error::invalid(
                    "intra-modal terms are on but no mask chains were given",
                ));
            }
            continue;
        }
        check_dim(b, m.chains.len())?;
        let len = m.chains[0].len();
        let min = if w.lambda1 > 0.0 || w.lambda2 > 0.0 {
            2
        } else {
            1
        };
        if len < min {
            return Err(Error::invalid(format!(
                "mask chains need at least {min} entries"
            )));
        }
        for c in &m.chains {
            if c.len() != len {
                return Err(Error::invalid(
                    "mask chains within a modality must share length",
                ));
            }
            for z in c {
                check_dim(d, z.dim())?;
            }
        }
    }
    if opts.similarity == Similarity::Cosine
        && (w.lambda1 > 0.0 || w.lambda3 > 0.0 || w.gamma > 0.0)
    {
        return Err(Error::invalid(
            "cosine similarity ignores variances; lambda1, lambda3 and gamma must be zero",
        ));
    }
    if opts.contrastive == Contrastive::InfoNce {
        for a in 0..b {
            if (0..b).filter(|&t| labels.is_match(a, t)).count() != 1
                || (0..b).filter(|&t| labels.is_match(t, a)).count() != 1
            {
                return Err(Error::invalid(
                    "InfoNCE needs exactly one match per row and column",
                ));
            }
        }
    }
    Ok(b)
}

fn similarity_grad(
    kind: Similarity,
    a: &DiagGaussian,
    t: &DiagGaussian,
) -> (f64, GaussianGrad, GaussianGrad) {
    match kind {
        Similarity::Csd => csd_similarity_grad(a, t).expect("dimensions validated"),
        Similarity::Cosine => {
            let (c, ga, gt) = cosine_grad(a.mu(), t.mu());
            let d = a.dim();
            (
                c,
                GaussianGrad {
                    d_mu: ga,
                    d_log_var: vec![0.0; d],
                },
                GaussianGrad {
                    d_mu: gt,
                    d_log_var: vec![0.0; d],
                },
            )
        }
    }
}

fn reduce(parts: &[f64], deterministic: bool) -> f64 {
    if deterministic {
        parts.iter().sum()
    } else {
        parts.par_iter().sum()
    }
}

/// Term-by-term evaluation of the objective from the public single-term
/// functions. Serves as the value oracle for [`total_loss`].
pub fn total_loss_value(
    audio: &ModalityBatch,
    text: &ModalityBatch,
    labels: &LabelMatrix,
    p: &SimilarityParams,
    w: &LossWeights,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    let b = validate(audio, text, labels, w, opts)?;
    let norm = if opts.normalize_by_batch {
        1.0 / b as f64
    } else {
        1.0
    };
    let mut out = LossBreakdown::default();

    match opts.contrastive {
        Contrastive::Sigmoid => {
            for a in 0..b {
                for t in 0..b {
                    let y = labels.get(a, t);
                    out.contrastive += match opts.similarity {
                        Similarity::Csd => {
                            super::ppcl(&audio.contrastive[a], &text.contrastive[t], y as i32, p)?
                        }
                        Similarity::Cosine => {
                            let s = cosine_similarity(
                                audio.contrastive[a].mu(),
                                text.contrastive[t].mu(),
                            );
                            softplus(y * (-p.alpha() * s + p.beta))
                        }
                    };
                }
            }
        }
        Contrastive::InfoNce => {
            let am: Vec<&[f64]> = audio.contrastive.iter().map(|z| z.mu()).collect();
            let tm: Vec<&[f64]> = text.contrastive.iter().map(|z| z.mu()).collect();
            out.contrastive = infonce_loss(&am, &tm, labels, p.alpha())?;
        }
    }
    out.contrastive *= norm;

    for a in 0..b {
        for t in 0..b {
            if w.lambda3 > 0.0 && labels.is_match(a, t) {
                out.inc_cross +=
                    w.lambda3 * inclusion_loss(&audio.contrastive[a], &text.contrastive[t], w.c)?;
            }
        }
    }
    out.inc_cross *= norm;

    for m in [audio, text] {
        for (pi, chain) in m.chains.iter().enumerate() {
            if w.lambda1 > 0.0 {
                out.inc_hier += w.lambda1 * hier_inclusion_loss(chain, w.c)? * norm;
            }
            if w.lambda2 > 0.0 {
                for (qi, other) in m.chains.iter().enumerate() {
                    if pi == qi && !opts.self_repulsion {
                        continue;
                    }
                    let v = match opts.similarity {
                        Similarity::Csd => mask_repulsive_loss(chain, other, pi == qi, p)?,
                        Similarity::Cosine if pi == qi => {
                            (chain.len() - 2) as f64 * std::f64::consts::LN_2
                        }
                        Similarity::Cosine => (1..chain.len() - 1)
                            .map(|i| {
                                let s = cosine_similarity(chain[i].mu(), other[i].mu());
                                softplus(p.alpha() * s - p.beta)
                            })
                            .sum(),
                    };
                    out.mr += w.lambda2 * v * norm;
                }
            }
            if w.gamma > 0.0 {
                out.vib += w.gamma * kl_to_standard(chain.last().expect("validated")) * norm;
            }
        }
    }
    Ok(out.finish())
}

struct RowResult {
    value: f64,
    d_alpha: f64,
    d_beta: f64,
    grad: GaussianGrad,
}

/// Contrastive sigmoid term: row pass gives audio gradients, column pass text
/// gradients.
fn sigmoid_contrastive(
    audio: &[DiagGaussian],
    text: &[DiagGaussian],
    labels: &LabelMatrix,
    p: &SimilarityParams,
    opts: &LossOptions,
    audio_grad: &mut [GaussianGrad],
    text_grad: &mut [GaussianGrad],
) -> (f64, f64, f64) {
    let b = audio.len();
    let rows: Vec<RowResult> = (0..b)
        .into_par_iter()
        .map(|a| {
            let mut r = RowResult {
                value: 0.0,
                d_alpha: 0.0,
                d_beta: 0.0,
                grad: GaussianGrad::zeros(audio[a].dim()),
            };
            for t in 0..b {
                let (s, ga, _) = similarity_grad(opts.similarity, &audio[a], &text[t]);
                let (v, ds, da, db) = sigmoid_pair(s, labels.get(a, t), p);
                r.value += v;
                r.d_alpha += da;
                r.d_beta += db;
                r.grad.add_scaled(&ga, ds);
            }
            r
        })
        .collect();
    let cols: Vec<GaussianGrad> = (0..b)
        .into_par_iter()
        .map(|t| {
            let mut g = GaussianGrad::zeros(text[t].dim());
            for a in 0..b {
                let (s, _, gt) = similarity_grad(opts.similarity, &audio[a], &text[t]);
                let (_, ds, _, _) = sigmoid_pair(s, labels.get(a, t), p);
                g.add_scaled(&gt, ds);
            }
            g
        })
        .collect();
    let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let das: Vec<f64> = rows.iter().map(|r| r.d_alpha).collect();
    let dbs: Vec<f64> = rows.iter().map(|r| r.d_beta).collect();
    for (dst, r) in audio_grad.iter_mut().zip(&rows) {
        dst.add_scaled(&r.grad, 1.0);
    }
    for (dst, g) in text_grad.iter_mut().zip(&cols) {
        dst.add_scaled(g, 1.0);
    }
    (
        reduce(&values, opts.deterministic),
        reduce(&das, opts.deterministic),
        reduce(&dbs, opts.deterministic),
    )
}

/// Weighted intra-modal terms for one modality, accumulated into `grads`.
/// Returns `(inc_hier, mr, vib, d_alpha, d_beta)`, unnormalized.
fn intra_modal(
    chains: &[Vec<DiagGaussian>],
    p: &SimilarityParams,
    w: &LossWeights,
    opts: &LossOptions,
    grads: &mut [Vec<GaussianGrad>],
) -> Result<(f64, f64, f64, f64, f64)> {
    if chains.is_empty() {
        return Ok((0.0, 0.0, 0.0, 0.0, 0.0));
    }
    let n = chains[0].len();
    let levels = n - 1;

    struct Sample {
        hier: f64,
        mr: f64,
        vib: f64,
        d_alpha: f64,
        d_beta: f64,
        grads: Vec<GaussianGrad>,
    }

    let samples: Vec<Sample> = (0..chains.len())
        .into_par_iter()
        .map(|pi| -> Result<Sample> {
            let chain = &chains[pi];
            let d = chain[0].dim();
            let mut s = Sample {
                hier: 0.0,
                mr: 0.0,
                vib: 0.0,
                d_alpha: 0.0,
                d_beta: 0.0,
                grads: vec![GaussianGrad::zeros(d); n],
            };
            if w.lambda1 > 0.0 {
                let (v, gb) = hier_inclusion_loss_grad(chain, w.c)?;
                s.hier = w.lambda1 * v;
                for (dst, g) in s.grads.iter_mut().zip(&gb.args) {
                    dst.add_scaled(g, w.lambda1);
                }
            }
            if w.lambda2 > 0.0 {
                let mut mr = 0.0;
                for (qi, other) in chains.iter().enumerate() {
                    if qi == pi {
                        if opts.self_repulsion {
                            mr += levels.saturating_sub(1) as f64 * std::f64::consts::LN_2;
                        }
                        continue;
                    }
                    for i in 1..levels {
                        // (p, q): value and p as first argument.
                        let (sim, gp, _) = similarity_grad(opts.similarity, &chain[i], &other[i]);
                        let (v, ds, da, db) = sigmoid_pair(sim, -1.0, p);
                        mr += v;
                        s.d_alpha += w.lambda2 * da;
                        s.d_beta += w.lambda2 * db;
                        // (q, p): p as second argument.
                        let (sim_qp, _, gp2) =
                            similarity_grad(opts.similarity, &other[i], &chain[i]);
                        let (_, ds_qp, _, _) = sigmoid_pair(sim_qp, -1.0, p);
                        // Stop-gradient on uncertainty: only the means move.
                        for ((dst, a), b) in s.grads[i].d_mu.iter_mut().zip(&gp.d_mu).zip(&gp2.d_mu)
                        {
                            *dst += w.lambda2 * (ds * a + ds_qp * b);
                        }
                    }
                }
                s.mr = w.lambda2 * mr;
            }
            if w.gamma > 0.0 {
                let (v, g) = kl_to_standard_grad(chain.last().expect("validated"));
                s.vib = w.gamma * v;
                s.grads[levels].add_scaled(&g, w.gamma);
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;

    for (dst, s) in grads.iter_mut().zip(&samples) {
        for (d, g) in dst.iter_mut().zip(&s.grads) {
            d.add_scaled(g, 1.0);
        }
    }
    let col = |f: fn(&Sample) -> f64| -> Vec<f64> { samples.iter().map(f).collect() };
    Ok((
        reduce(&col(|s| s.hier), opts.deterministic),
        reduce(&col(|s| s.mr), opts.deterministic),
        reduce(&col(|s| s.vib), opts.deterministic),
        reduce(&col(|s| s.d_alpha), opts.deterministic),
        reduce(&col(|s| s.d_beta), opts.deterministic),
    ))
}

/// Value and full gradient of the objective with respect to every embedding
/// and to `(alpha, beta)`.
pub fn total_loss(
    audio: &ModalityBatch,
    text: &ModalityBatch,
    labels: &LabelMatrix,
    p: &SimilarityParams,
    w: &LossWeights,
    opts: &LossOptions,
) -> Result<(LossBreakdown, TotalGrad)> {
    let b = validate(audio, text, labels, w, opts)?;
    let norm = if opts.normalize_by_batch {
        1.0 / b as f64
    } else {
        1.0
    };
    let mut ga = ModalityGrad::zeros_like(audio);
    let mut gt = ModalityGrad::zeros_like(text);
    let mut out = LossBreakdown::default();
    let (mut d_alpha, mut d_beta) = (0.0, 0.0);

    match opts.contrastive {
        Contrastive::Sigmoid => {
            let (v, da, db) = sigmoid_contrastive(
                &audio.contrastive,
                &text.contrastive,
                labels,
                p,
                opts,
                &mut ga.contrastive,
                &mut gt.contrastive,
            );
            out.contrastive = v;
            d_alpha += da;
            d_beta += db;
        }
        Contrastive::InfoNce => {
            let am: Vec<&[f64]> = audio.contrastive.iter().map(|z| z.mu()).collect();
            let tm: Vec<&[f64]> = text.contrastive.iter().map(|z| z.mu()).collect();
            let (v, dam, dtm, da) = infonce_loss_grad(&am, &tm, labels, p.alpha())?;
            out.contrastive = v;
            d_alpha += da;
            for (g, d) in ga.contrastive.iter_mut().zip(dam) {
                g.d_mu = d;
            }
            for (g, d) in gt.contrastive.iter_mut().zip(dtm) {
                g.d_mu = d;
            }
        }
    }

    if w.lambda3 > 0.0 {
        for a in 0..b {
            for t in 0..b {
                if labels.is_match(a, t) {
                    let (v, gb) =
                        inclusion_loss_grad(&audio.contrastive[a], &text.contrastive[t], w.c)?;
                    out.inc_cross += w.lambda3 * v;
                    ga.contrastive[a].add_scaled(&gb.args[0], w.lambda3);
                    gt.contrastive[t].add_scaled(&gb.args[1], w.lambda3);
                }
            }
        }
    }

    for (m, g) in [(audio, &mut ga), (text, &mut gt)] {
        let (hier, mr, vib, da, db) = intra_modal(&m.chains, p, w, opts, &mut g.chains)?;
        out.inc_hier += hier;
        out.mr += mr;
        out.vib += vib;
        d_alpha += da;
        d_beta += db;
    }

    let mut out = LossBreakdown {
        contrastive: out.contrastive * norm,
        inc_cross: out.inc_cross * norm,
        inc_hier: out.inc_hier * norm,
        mr: out.mr * norm,
        vib: out.vib * norm,
        total: 0.0,
    }
    .finish();
    if !out.total.is_finite() {
        out.total = f64::NAN;
    }
    if norm != 1.0 {
        for g in ga
            .contrastive
            .iter_mut()
            .chain(gt.contrastive.iter_mut())
            .chain(ga.chains.iter_mut().flatten())
            .chain(gt.chains.iter_mut().flatten())
        {
            g.scale(norm);
        }
        d_alpha *= norm;
        d_beta *= norm;
    }
    Ok((
        out,
        TotalGrad {
            audio: ga,
            text: gt,
            d_alpha,
            d_beta,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mu: &[f64], var: &[f64]) -> DiagGaussian {
        DiagGaussian::from_variance(mu.to_vec(), var).unwrap()
    }

    #[test]
    fn single_pair_zero_weights_is_log_two() {
        // s = 1 − ½(0.5 + 0.5 + 0.5 + 0.5) = 0 in 2-D.
        let z = g(&[1.0, 0.0], &[0.5, 0.5]);
        let batch = ModalityBatch {
            contrastive: vec![z],
            chains: vec![],
        };
        let p = SimilarityParams::new(1.0, 0.0).unwrap();
        let (v, _) = total_loss(
            &batch,
            &batch,
            &LabelMatrix::diagonal(1),
            &p,
            &LossWeights::NONE,
            &LossOptions::default(),
        )
        .unwrap();
        assert!((v.total - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn batch_size_mismatch_errors() {
        let z = g(&[1.0], &[1.0]);
        let a = ModalityBatch {
            contrastive: vec![z.clone(), z.clone()],
            chains: vec![],
        };
        let t = ModalityBatch {
            contrastive: vec![z],
            chains: vec![],
        };
        let r = total_loss(
            &a,
            &t,
            &LabelMatrix::diagonal(2),
            &SimilarityParams::default(),
            &LossWeights::NONE,
            &LossOptions::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn label_matrix_validates_entries() {
        assert!(LabelMatrix::new(2, &[1, -1, -1, 1]).is_ok());
        assert!(LabelMatrix::new(2, &[1, 0, -1, 1]).is_err());
        assert!(LabelMatrix::new(2, &[1, -1, 1]).is_err());
    }
}
