//! Central finite-difference checks of every analytic gradient.
//!
//! Each check perturbs one scalar input by `±FD_STEP`, compares the
//! numerical slope with the analytic one and keeps the worst relative error
//! per (function, argument) pair.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, Architecture, EncoderParams};
use crate::error::{Error, Result};
use crate::geometry::{
    csd_similarity, csd_similarity_grad, inclusion_score, inclusion_score_grad, kl_to_standard,
    kl_to_standard_grad, DiagGaussian, GaussianGrad, SimilarityParams,
};
use crate::losses::{
    hier_inclusion_loss, hier_inclusion_loss_grad, inclusion_loss, inclusion_loss_grad,
    mask_repulsive_loss, mask_repulsive_loss_grad, ppcl, ppcl_grad, total_loss, total_loss_value,
    Contrastive, LabelMatrix, LossBreakdown, LossOptions, LossWeights, ModalityBatch, Similarity,
};
use crate::masking::{build_chain, random_visibility};
use crate::model::Model;
use crate::trainer::{batch_gradient, BatchInputs};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, per unit of loss magnitude, so
/// entries whose true value is near zero are judged against the rounding
/// noise of the difference quotient (which grows with `|f|`).
pub const REL_FLOOR: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, REL_FLOOR * max(1, |f|))` where `f` is the
/// function value at the check point.
pub fn rel_err(analytic: f64, numeric: f64, f: f64) -> f64 {
    let floor = REL_FLOOR * f.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` at `x[i]`.
pub fn central_diff<F: FnMut(&[f64]) -> Result<f64>>(
    f: &mut F,
    x: &[f64],
    i: usize,
) -> Result<f64> {
    let mut xp = x.to_vec();
    xp[i] = x[i] + FD_STEP;
    let up = f(&xp)?;
    xp[i] = x[i] - FD_STEP;
    let down = f(&xp)?;
    Ok((up - down) / (2.0 * FD_STEP))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    Losses,
    Encoder,
    End2end,
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "losses" => Ok(Module::Losses),
            "encoder" => Ok(Module::Encoder),
            "end2end" => Ok(Module::End2end),
            _ => Err(Error::invalid(format!(
                "unknown gradcheck module `{s}` (expected losses, encoder or end2end)"
            ))),
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Losses => "losses",
            Module::Encoder => "encoder",
            Module::End2end => "end2end",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub function: String,
    pub argument: String,
    pub worst_rel_err: f64,
    /// Number of scalar entries compared.
    pub entries: usize,
    pub checks: usize,
}

/// Outcome of the mask-repulsive stop-gradient probe.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StopGradient {
    pub configs: usize,
    /// Largest |analytic| log-variance gradient seen; must be exactly 0.
    pub max_analytic: f64,
    /// Smallest (over configs) of the largest |finite difference|.
    pub min_numeric: f64,
}

impl StopGradient {
    pub fn holds(&self) -> bool {
        self.configs > 0 && self.max_analytic == 0.0 && self.min_numeric > 1e-8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub module: Module,
    pub trials: usize,
    pub pairs: Vec<PairResult>,
    pub stop_gradient: Option<StopGradient>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.pairs
            .iter()
            .map(|p| p.worst_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < TOLERANCE && self.stop_gradient.is_none_or(|s| s.holds())
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<22} {:<26} {:>8} {:>12}\n",
            "function", "argument", "checks", "worst rel"
        );
        for p in &self.pairs {
            out += &format!(
                "{:<22} {:<26} {:>8} {:>12.3e}{}\n",
                p.function,
                p.argument,
                p.checks,
                p.worst_rel_err,
                if p.worst_rel_err < TOLERANCE {
                    ""
                } else {
                    "  FAIL"
                }
            );
        }
        if let Some(s) = self.stop_gradient {
            out += &format!(
                "mask_repulsive stop-gradient: max |analytic d log_var| = {:e}, min max |fd| = {:.3e} over {} configs{}\n",
                s.max_analytic,
                s.min_numeric,
                s.configs,
                if s.holds() { "" } else { "  FAIL" }
            );
        }
        out
    }
}

#[derive(Default)]
struct Tally {
    pairs: Vec<PairResult>,
}

impl Tally {
    fn record(
        &mut self,
        function: &str,
        argument: &str,
        analytic: &[f64],
        numeric: &[f64],
        f: f64,
    ) {
        debug_assert_eq!(analytic.len(), numeric.len());
        let worst = analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| rel_err(a, n, f))
            .fold(0.0, f64::max);
        let row = match self
            .pairs
            .iter_mut()
            .find(|p| p.function == function && p.argument == argument)
        {
            Some(r) => r,
            None => {
                self.pairs.push(PairResult {
                    function: function.into(),
                    argument: argument.into(),
                    worst_rel_err: 0.0,
                    entries: 0,
                    checks: 0,
                });
                self.pairs.last_mut().expect("just pushed")
            }
        };
        row.worst_rel_err = row.worst_rel_err.max(worst);
        row.entries += analytic.len();
        row.checks += 1;
    }
}

pub fn run(module: Module, trials: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    let mut stop = None;
    match module {
        Module::Losses => {
            let mut sg = StopGradient {
                min_numeric: f64::INFINITY,
                ..Default::default()
            };
            for _ in 0..trials {
                check_losses(&mut rng, &mut tally, &mut sg)?;
            }
            stop = Some(sg);
        }
        Module::Encoder => {
            for _ in 0..trials {
                check_encoder(&mut rng, &mut tally)?;
            }
        }
        Module::End2end => {
            for _ in 0..trials {
                check_end2end(&mut rng, &mut tally)?;
            }
        }
    }
    Ok(GradcheckReport {
        module,
        trials,
        pairs: tally.pairs,
        stop_gradient: stop,
    })
}

fn gaussian<R: Rng>(rng: &mut R, d: usize) -> DiagGaussian {
    let mu = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let lv = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    DiagGaussian::new(mu, lv).expect("finite by construction")
}

fn flatten(z: &DiagGaussian) -> Vec<f64> {
    z.mu().iter().chain(z.log_var()).copied().collect()
}

fn unflatten(x: &[f64]) -> Result<DiagGaussian> {
    let d = x.len() / 2;
    DiagGaussian::new(x[..d].to_vec(), x[d..].to_vec())
}

fn flat_grad(g: &GaussianGrad) -> Vec<f64> {
    g.d_mu.iter().chain(&g.d_log_var).copied().collect()
}

/// Finite differences of `f` over every entry of `x`.
/// Slopes along every coordinate, plus the function value at `x`.
fn numeric<F: FnMut(&[f64]) -> Result<f64>>(mut f: F, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let at = f(x)?;
    let slopes = (0..x.len())
        .map(|i| central_diff(&mut f, x, i))
        .collect::<Result<_>>()?;
    Ok((slopes, at))
}

/// Checks a function of a list of Gaussians (plus alpha, beta) against its
/// analytic gradient, one argument at a time.
fn check_args<F>(
    tally: &mut Tally,
    function: &str,
    names: &[&str],
    args: &[DiagGaussian],
    analytic: &[GaussianGrad],
    mut f: F,
) -> Result<()>
where
    F: FnMut(&[DiagGaussian]) -> Result<f64>,
{
    for (k, name) in names.iter().enumerate() {
        let x = flatten(&args[k]);
        let (num, f_num) = numeric(
            |xk| {
                let mut a = args.to_vec();
                a[k] = unflatten(xk)?;
                f(&a)
            },
            &x,
        )?;
        tally.record(function, name, &flat_grad(&analytic[k]), &num, f_num);
    }
    Ok(())
}

fn check_sim_params<F>(
    tally: &mut Tally,
    function: &str,
    p: SimilarityParams,
    d_alpha: f64,
    d_beta: f64,
    mut f: F,
) -> Result<()>
where
    F: FnMut(&SimilarityParams) -> Result<f64>,
{
    let (num, f_num) = numeric(
        |x| f(&SimilarityParams::new(x[0], x[1])?),
        &[p.alpha(), p.beta],
    )?;
    tally.record(function, "alpha", &[d_alpha], &[num[0]], f_num);
    tally.record(function, "beta", &[d_beta], &[num[1]], f_num);
    Ok(())
}

fn sim_params<R: Rng>(rng: &mut R) -> SimilarityParams {
    SimilarityParams::new(rng.random_range(0.5..5.0), rng.random_range(-3.0..3.0))
        .expect("positive alpha")
}

fn check_losses<R: Rng>(rng: &mut R, tally: &mut Tally, sg: &mut StopGradient) -> Result<()> {
    let d = rng.random_range(1..=6);
    let (a, t) = (gaussian(rng, d), gaussian(rng, d));
    let pair = [a.clone(), t.clone()];

    let (_, ga, gt) = csd_similarity_grad(&a, &t)?;
    check_args(
        tally,
        "csd_similarity",
        &["a", "t"],
        &pair,
        &[ga, gt],
        |z| csd_similarity(&z[0], &z[1]),
    )?;

    let (_, g1, g2) = inclusion_score_grad(&a, &t)?;
    check_args(
        tally,
        "inclusion_score",
        &["z1", "z2"],
        &pair,
        &[g1, g2],
        |z| inclusion_score(&z[0], &z[1]),
    )?;

    let p = sim_params(rng);
    let y = if rng.random_bool(0.5) { 1 } else { -1 };
    let (_, g) = ppcl_grad(&a, &t, y, &p)?;
    check_args(tally, "ppcl", &["a", "t"], &pair, &g.args, |z| {
        ppcl(&z[0], &z[1], y, &p)
    })?;
    check_sim_params(tally, "ppcl", p, g.d_alpha, g.d_beta, |q| {
        ppcl(&a, &t, y, q)
    })?;

    let c = rng.random_range(0.5..3.0);
    let (_, g) = inclusion_loss_grad(&a, &t, c)?;
    check_args(
        tally,
        "inclusion_loss",
        &["z1", "z2"],
        &pair,
        &g.args,
        |z| inclusion_loss(&z[0], &z[1], c),
    )?;

    let levels = rng.random_range(1..=3);
    let chain: Vec<DiagGaussian> = (0..=levels).map(|_| gaussian(rng, d)).collect();
    let (_, g) = hier_inclusion_loss_grad(&chain, c)?;
    let names: Vec<String> = (0..=levels).map(|i| format!("chain[{i}]")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    check_args(tally, "hier_inclusion_loss", &names, &chain, &g.args, |z| {
        hier_inclusion_loss(z, c)
    })?;

    let (_, g) = kl_to_standard_grad(&a);
    check_args(tally, "vib", &["z"], &pair[..1], &[g], |z| {
        Ok(kl_to_standard(&z[0]))
    })?;

    check_mask_repulsive(rng, tally, sg, d)?;
    check_total(rng, tally)
}

fn check_mask_repulsive<R: Rng>(
    rng: &mut R,
    tally: &mut Tally,
    sg: &mut StopGradient,
    d: usize,
) -> Result<()> {
    let levels = rng.random_range(2..=4);
    let zp: Vec<DiagGaussian> = (0..=levels).map(|_| gaussian(rng, d)).collect();
    let zq: Vec<DiagGaussian> = (0..=levels).map(|_| gaussian(rng, d)).collect();
    // Centre level 1 on the sigmoid so the variance sensitivity is visible.
    let alpha = rng.random_range(0.5..5.0);
    let p = SimilarityParams::new(alpha, alpha * csd_similarity(&zp[1], &zq[1])?)?;
    let (_, g) = mask_repulsive_loss_grad(&zp, &zq, false, &p)?;
    let n = zp.len();
    let value = |zp: &[DiagGaussian], zq: &[DiagGaussian]| mask_repulsive_loss(zp, zq, false, &p);

    let mut max_analytic: f64 = 0.0;
    let mut max_numeric: f64 = 0.0;
    for side in 0..2 {
        for i in 0..n {
            let base = if side == 0 { &zp } else { &zq };
            let grad = &g.args[side * n + i];
            let mu: Vec<f64> = base[i].mu().to_vec();
            let (num_mu, f_num_mu) = numeric(
                |m| {
                    let mut c = base.clone();
                    c[i] = DiagGaussian::new(m.to_vec(), base[i].log_var().to_vec())?;
                    if side == 0 {
                        value(&c, &zq)
                    } else {
                        value(&zp, &c)
                    }
                },
                &mu,
            )?;
            tally.record(
                "mask_repulsive",
                if side == 0 { "zp mu" } else { "zq mu" },
                &grad.d_mu,
                &num_mu,
                f_num_mu,
            );
            let (num_lv, _) = numeric(
                |l| {
                    let mut c = base.clone();
                    c[i] = DiagGaussian::new(base[i].mu().to_vec(), l.to_vec())?;
                    if side == 0 {
                        value(&c, &zq)
                    } else {
                        value(&zp, &c)
                    }
                },
                base[i].log_var(),
            )?;
            max_analytic = grad
                .d_log_var
                .iter()
                .fold(max_analytic, |m, v| m.max(v.abs()));
            max_numeric = num_lv.iter().fold(max_numeric, |m, v| m.max(v.abs()));
        }
    }
    check_sim_params(tally, "mask_repulsive", p, g.d_alpha, g.d_beta, |q| {
        mask_repulsive_loss(&zp, &zq, false, q)
    })?;
    sg.configs += 1;
    sg.max_analytic = sg.max_analytic.max(max_analytic);
    sg.min_numeric = sg.min_numeric.min(max_numeric);
    Ok(())
}

struct TotalCase {
    audio: ModalityBatch,
    text: ModalityBatch,
    labels: LabelMatrix,
    p: SimilarityParams,
    w: LossWeights,
    opts: LossOptions,
}

fn random_weights<R: Rng>(rng: &mut R, opts: &LossOptions) -> LossWeights {
    let on = |rng: &mut R| {
        if rng.random_bool(0.8) {
            rng.random_range(0.05..2.0)
        } else {
            0.0
        }
    };
    let mut w = LossWeights {
        lambda1: on(rng),
        lambda2: on(rng),
        lambda3: on(rng),
        gamma: on(rng),
        c: rng.random_range(0.5..3.0),
    };
    if opts.similarity == Similarity::Cosine {
        w.lambda1 = 0.0;
        w.lambda3 = 0.0;
        w.gamma = 0.0;
    }
    w
}

fn random_options<R: Rng>(rng: &mut R) -> LossOptions {
    let contrastive = if rng.random_bool(0.25) {
        Contrastive::InfoNce
    } else {
        Contrastive::Sigmoid
    };
    let similarity = if contrastive == Contrastive::InfoNce || rng.random_bool(0.25) {
        Similarity::Cosine
    } else {
        Similarity::Csd
    };
    LossOptions {
        similarity,
        contrastive,
        self_repulsion: rng.random_bool(0.5),
        normalize_by_batch: rng.random_bool(0.5),
        deterministic: true,
    }
}

fn random_total_case<R: Rng>(rng: &mut R) -> TotalCase {
    let b = rng.random_range(1..=3);
    let d = rng.random_range(1..=4);
    let levels = rng.random_range(2..=3);
    let opts = random_options(rng);
    let w = random_weights(rng, &opts);
    let labels = if opts.contrastive == Contrastive::InfoNce {
        LabelMatrix::diagonal(b)
    } else {
        let y: Vec<i32> = (0..b * b)
            .map(|_| if rng.random_bool(0.4) { 1 } else { -1 })
            .collect();
        LabelMatrix::new(b, &y).expect("labels are ±1")
    };
    let modality = |rng: &mut R| ModalityBatch {
        contrastive: (0..b).map(|_| gaussian(rng, d)).collect(),
        chains: (0..b)
            .map(|_| (0..=levels).map(|_| gaussian(rng, d)).collect())
            .collect(),
    };
    TotalCase {
        audio: modality(rng),
        text: modality(rng),
        labels,
        p: sim_params(rng),
        w,
        opts,
    }
}

/// Objective whose mask-repulsive part sees the chain variances of `frozen`,
/// the function the stop-gradient rule actually differentiates.
fn stop_grad_objective(
    audio: &ModalityBatch,
    text: &ModalityBatch,
    frozen: (&ModalityBatch, &ModalityBatch),
    labels: &LabelMatrix,
    p: &SimilarityParams,
    w: &LossWeights,
    opts: &LossOptions,
) -> Result<f64> {
    let full = total_loss_value(audio, text, labels, p, w, opts)?;
    if w.lambda2 == 0.0 {
        return Ok(full.total);
    }
    let freeze = |live: &ModalityBatch, base: &ModalityBatch| -> Result<ModalityBatch> {
        let chains = live
            .chains
            .iter()
            .zip(&base.chains)
            .map(|(lc, bc)| {
                lc.iter()
                    .zip(bc)
                    .map(|(l, b)| DiagGaussian::new(l.mu().to_vec(), b.log_var().to_vec()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(ModalityBatch {
            contrastive: live.contrastive.clone(),
            chains,
        })
    };
    let mr_only = |b: &LossBreakdown| b.mr;
    let fa = freeze(audio, frozen.0)?;
    let ft = freeze(text, frozen.1)?;
    let frozen_mr = total_loss_value(&fa, &ft, labels, p, w, opts)?;
    Ok(full.total - mr_only(&full) + mr_only(&frozen_mr))
}

fn check_total<R: Rng>(rng: &mut R, tally: &mut Tally) -> Result<()> {
    let case = random_total_case(rng);
    let (_, grad) = total_loss(
        &case.audio,
        &case.text,
        &case.labels,
        &case.p,
        &case.w,
        &case.opts,
    )?;
    let eval = |audio: &ModalityBatch, text: &ModalityBatch, p: &SimilarityParams| {
        stop_grad_objective(
            audio,
            text,
            (&case.audio, &case.text),
            &case.labels,
            p,
            &case.w,
            &case.opts,
        )
    };

    for (side, (batch, g)) in [(&case.audio, &grad.audio), (&case.text, &grad.text)]
        .into_iter()
        .enumerate()
    {
        let name = if side == 0 { "audio" } else { "text" };
        let rebuild = |b: ModalityBatch| {
            if side == 0 {
                eval(&b, &case.text, &case.p)
            } else {
                eval(&case.audio, &b, &case.p)
            }
        };
        for (k, z) in batch.contrastive.iter().enumerate() {
            let (num, f_num) = numeric(
                |x| {
                    let mut b = batch.clone();
                    b.contrastive[k] = unflatten(x)?;
                    rebuild(b)
                },
                &flatten(z),
            )?;
            tally.record(
                "total_loss",
                &format!("{name} contrastive"),
                &flat_grad(&g.contrastive[k]),
                &num,
                f_num,
            );
        }
        for (k, chain) in batch.chains.iter().enumerate() {
            for (j, z) in chain.iter().enumerate() {
                let (num, f_num) = numeric(
                    |x| {
                        let mut b = batch.clone();
                        b.chains[k][j] = unflatten(x)?;
                        rebuild(b)
                    },
                    &flatten(z),
                )?;
                tally.record(
                    "total_loss",
                    &format!("{name} chains"),
                    &flat_grad(&g.chains[k][j]),
                    &num,
                    f_num,
                );
            }
        }
    }
    check_sim_params(
        tally,
        "total_loss",
        case.p,
        grad.d_alpha,
        grad.d_beta,
        |q| eval(&case.audio, &case.text, q),
    )
}

fn random_arch<R: Rng>(rng: &mut R) -> Architecture {
    Architecture {
        d_in: rng.random_range(2..=6),
        hidden: rng.random_range(1..=6),
        n_layers: rng.random_range(0..=2),
        d_out: rng.random_range(1..=4),
    }
}

fn random_params<R: Rng>(rng: &mut R, arch: Architecture) -> Result<EncoderParams> {
    let n = arch.param_count();
    EncoderParams::from_flat(arch, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn check_encoder<R: Rng>(rng: &mut R, tally: &mut Tally) -> Result<()> {
    let arch = random_arch(rng);
    let params = random_params(rng, arch)?;
    let x: Vec<f64> = (0..arch.d_in)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let vis = rng
        .random_bool(0.5)
        .then(|| random_visibility(arch.d_in, 0.5, rng));
    let up = GaussianGrad {
        d_mu: (0..arch.d_out)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
        d_log_var: (0..arch.d_out)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    };
    let objective = |p: &EncoderParams, x: &[f64]| -> Result<f64> {
        let (z, _) = encoder::forward(p, x, vis.as_deref())?;
        Ok(up.d_mu.iter().zip(z.mu()).map(|(a, b)| a * b).sum::<f64>()
            + up.d_log_var
                .iter()
                .zip(z.log_var())
                .map(|(a, b)| a * b)
                .sum::<f64>())
    };
    let (_, tape) = encoder::forward(&params, &x, vis.as_deref())?;
    let (g_params, g_x) = encoder::backward(&params, &tape, &up)?;

    let (num, f_num) = numeric(
        |f| objective(&EncoderParams::from_flat(arch, f.to_vec())?, &x),
        params.flat(),
    )?;
    let split = |v: &[f64], r: std::ops::Range<usize>| v[r].to_vec();
    let mut rest = (vec![], vec![]);
    for i in 0..num.len() {
        if !params.mask_token_range().contains(&i) {
            rest.0.push(g_params[i]);
            rest.1.push(num[i]);
        }
    }
    tally.record("encoder", "weights", &rest.0, &rest.1, f_num);
    let mt = params.mask_token_range();
    tally.record(
        "encoder",
        "mask token",
        &split(&g_params, mt.clone()),
        &split(&num, mt),
        f_num,
    );
    let (num_x, f_num_x) = numeric(|xx| objective(&params, xx), &x)?;
    tally.record("encoder", "input", &g_x, &num_x, f_num_x);
    Ok(())
}

fn random_inputs<R: Rng>(
    rng: &mut R,
    d: usize,
    b: usize,
    weights: &LossWeights,
) -> Result<BatchInputs> {
    let xs = |rng: &mut R| -> Vec<Vec<f64>> {
        (0..b)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect()
    };
    let audio = xs(rng);
    let text = xs(rng);
    let vis = |rng: &mut R| -> Vec<Option<Vec<bool>>> {
        (0..b)
            .map(|_| rng.random_bool(0.3).then(|| random_visibility(d, 0.5, rng)))
            .collect()
    };
    let audio_vis = vis(rng);
    let text_vis = vis(rng);
    let needs = weights.lambda1 > 0.0 || weights.lambda2 > 0.0 || weights.gamma > 0.0;
    let levels = rng.random_range(2..=3).min(d);
    let chain = |rng: &mut R| -> Result<_> {
        if needs {
            let keep = vec![0.5; levels - 1];
            Some(build_chain(d, levels, &keep, rng.random())).transpose()
        } else {
            Ok(None)
        }
    };
    Ok(BatchInputs {
        audio,
        text,
        audio_vis,
        text_vis,
        audio_chain: chain(rng)?,
        text_chain: chain(rng)?,
    })
}

/// Embeds `inputs` the way [`batch_gradient`] does.
fn embed_batch(model: &Model, inputs: &BatchInputs) -> Result<(ModalityBatch, ModalityBatch)> {
    let side = |p: &EncoderParams,
                xs: &[Vec<f64>],
                vis: &[Option<Vec<bool>>],
                chain: Option<&crate::masking::MaskChain>| {
        let contrastive = xs
            .iter()
            .zip(vis)
            .map(|(x, v)| encoder::forward(p, x, v.as_deref()).map(|(z, _)| z))
            .collect::<Result<Vec<_>>>()?;
        let chains = match chain {
            Some(c) => xs
                .iter()
                .map(|x| {
                    (0..=c.levels())
                        .map(|i| encoder::forward(p, x, Some(&c.visible(i))).map(|(z, _)| z))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok::<_, Error>(ModalityBatch {
            contrastive,
            chains,
        })
    };
    Ok((
        side(
            &model.audio,
            &inputs.audio,
            &inputs.audio_vis,
            inputs.audio_chain.as_ref(),
        )?,
        side(
            &model.text,
            &inputs.text,
            &inputs.text_vis,
            inputs.text_chain.as_ref(),
        )?,
    ))
}

fn check_end2end<R: Rng>(rng: &mut R, tally: &mut Tally) -> Result<()> {
    let arch = random_arch(rng);
    let sim = sim_params(rng);
    let opts = random_options(rng);
    let w = random_weights(rng, &opts);
    let mut model = Model {
        audio: random_params(rng, arch)?,
        text: random_params(rng, arch)?,
        sim,
        similarity: opts.similarity,
    };
    let b = rng.random_range(1..=3);
    let inputs = random_inputs(rng, arch.d_in, b, &w)?;
    let (_, analytic) = batch_gradient(&model, &inputs, &w, &opts)?;
    let labels = LabelMatrix::diagonal(b);
    let base = embed_batch(&model, &inputs)?;
    let theta = model.flat_params();
    let (num, f_num) = numeric(
        |t| {
            model.set_flat_params(t)?;
            let (a, x) = embed_batch(&model, &inputs)?;
            stop_grad_objective(&a, &x, (&base.0, &base.1), &labels, &model.sim, &w, &opts)
        },
        &theta,
    )?;
    let na = model.audio.flat().len();
    let nt = model.text.flat().len();
    tally.record(
        "end2end",
        "audio encoder",
        &analytic[..na],
        &num[..na],
        f_num,
    );
    tally.record(
        "end2end",
        "text encoder",
        &analytic[na..na + nt],
        &num[na..na + nt],
        f_num,
    );
    tally.record(
        "end2end",
        "log_alpha",
        &analytic[na + nt..na + nt + 1],
        &num[na + nt..na + nt + 1],
        f_num,
    );
    tally.record(
        "end2end",
        "beta",
        &analytic[na + nt + 1..],
        &num[na + nt + 1..],
        f_num,
    );
    Ok(())
}
