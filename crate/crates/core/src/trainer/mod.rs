//! Training loop: batch assembly, mask chains, the full objective, backprop
//! through both encoders and Adam with a warm-up cosine schedule.
//!
//! Every source of randomness is derived from `TrainConfig::seed`, so a run
//! is a pure function of the dataset and the config. Work inside a batch fans
//! out over samples; partial sums are always combined in sample order.

mod adam;
mod checkpoint;
mod schedule;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{parse_list, parse_value, unknown_key, KeyValues};
use crate::dataset::{write_atomic, HierDataset, LEVELS};
use crate::encoder::{self, Architecture, EncoderParams, Tape};
use crate::error::{check_dim, Error, Result};
use crate::geometry::{DiagGaussian, SimilarityParams};
use crate::losses::{
    total_loss, Contrastive, LabelMatrix, LossBreakdown, LossOptions, LossWeights, ModalityBatch,
    ModalityGrad, Similarity,
};
use crate::masking::{build_chain, random_visibility, MaskChain};
use crate::model::Model;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{checkpoint_name, Checkpoint, CHECKPOINT_FORMAT};
pub use schedule::lr_at;

/// Named configurations. Each is a single edit on top of the defaults.
pub const PRESETS: &[&str] = &[
    "prolap-full",
    "prolap-hier",
    "prolap-mr",
    "prolap-baseline",
    "siglip-csd",
    "siglip-det",
    "clap-infonce",
    "reference-weights",
];

/// Loss weights used by the `prolap-*` presets. The reference weights in
/// [`LossWeights::REFERENCE`] are tuned for fine-tuning a pretrained model at a
/// far larger batch; training these small encoders from scratch needs the
/// auxiliary terms to weigh more.
pub const DESK_WEIGHTS: LossWeights = LossWeights {
    lambda1: 5.0,
    lambda2: 0.2,
    lambda3: 0.01,
    gamma: 0.01,
    c: 1.0,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Clamped to the dataset size.
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_epochs: usize,
    pub weights: LossWeights,
    /// Mask chain depth `L`.
    pub levels: usize,
    /// `L - 1` keep fractions; `None` spaces the expected masked fractions
    /// evenly (`(L - i) / L` at level `i`).
    pub keep_fractions: Option<Vec<f64>>,
    pub masked_batch_fraction: f64,
    pub mask_ratio: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub hidden: usize,
    pub n_layers: usize,
    pub d_out: usize,
    pub init_alpha: f64,
    pub init_beta: f64,
    pub similarity: Similarity,
    pub contrastive: Contrastive,
    pub normalize_by_batch: bool,
    /// Write a checkpoint every this many epochs (0 disables periodic ones).
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            max_lr: 2e-3,
            warmup_epochs: 1,
            weights: DESK_WEIGHTS,
            levels: 3,
            keep_fractions: None,
            masked_batch_fraction: 0.125,
            mask_ratio: 0.75,
            seed: 0,
            deterministic: true,
            hidden: 64,
            n_layers: 1,
            d_out: 16,
            init_alpha: 1.0,
            init_beta: 0.0,
            similarity: Similarity::Csd,
            contrastive: Contrastive::Sigmoid,
            normalize_by_batch: true,
            checkpoint_every: 10,
            adam: AdamConfig::default(),
        }
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string())).map_err(|_| {
        Error::Config {
            key: key.to_string(),
            message: format!("unknown variant `{value}`"),
        }
    })
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.to_string(),
                message,
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        for (key, v) in [
            ("masked_batch_fraction", self.masked_batch_fraction),
            ("mask_ratio", self.mask_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(key, format!("must lie in [0, 1], got {v}"));
            }
        }
        if !(self.max_lr.is_finite() && self.max_lr >= 0.0) {
            return bad(
                "max_lr",
                format!("must be finite and >= 0, got {}", self.max_lr),
            );
        }
        if self.levels == 0 {
            return bad("levels", "must be at least 1".into());
        }
        if let Some(k) = &self.keep_fractions {
            if k.len() != self.levels - 1 {
                return bad(
                    "keep_fractions",
                    format!(
                        "levels = {} needs {} values, got {}",
                        self.levels,
                        self.levels - 1,
                        k.len()
                    ),
                );
            }
        }
        if !(self.init_alpha > 0.0 && self.init_alpha.is_finite()) {
            return bad(
                "init_alpha",
                format!("must be positive, got {}", self.init_alpha),
            );
        }
        self.weights
            .validate()
            .or_else(|e| bad("weights", e.to_string()))
    }

    pub fn keep_fractions(&self) -> Vec<f64> {
        self.keep_fractions.clone().unwrap_or_else(|| {
            let l = self.levels as f64;
            (1..self.levels)
                .map(|i| (l - i as f64) / (l - i as f64 + 1.0))
                .collect()
        })
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            similarity: self.similarity,
            contrastive: self.contrastive,
            self_repulsion: false,
            normalize_by_batch: self.normalize_by_batch,
            deterministic: self.deterministic,
        }
    }

    pub fn architecture(&self, d_in: usize) -> Architecture {
        Architecture {
            d_in,
            hidden: self.hidden,
            n_layers: self.n_layers,
            d_out: self.d_out,
        }
    }

    /// Applies key-value assignments; unknown keys are errors.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in kv.iter() {
            match k {
                "epochs" => self.epochs = parse_value(k, v)?,
                "batch_size" => self.batch_size = parse_value(k, v)?,
                "max_lr" => self.max_lr = parse_value(k, v)?,
                "warmup_epochs" => self.warmup_epochs = parse_value(k, v)?,
                "lambda1" => self.weights.lambda1 = parse_value(k, v)?,
                "lambda2" => self.weights.lambda2 = parse_value(k, v)?,
                "lambda3" => self.weights.lambda3 = parse_value(k, v)?,
                "gamma" => self.weights.gamma = parse_value(k, v)?,
                "c" => self.weights.c = parse_value(k, v)?,
                "levels" => self.levels = parse_value(k, v)?,
                "keep_fractions" => {
                    self.keep_fractions = match v {
                        "auto" => None,
                        _ => Some(parse_list(k, v)?),
                    }
                }
                "masked_batch_fraction" => self.masked_batch_fraction = parse_value(k, v)?,
                "mask_ratio" => self.mask_ratio = parse_value(k, v)?,
                "seed" => self.seed = parse_value(k, v)?,
                "deterministic" => self.deterministic = parse_value(k, v)?,
                "hidden" => self.hidden = parse_value(k, v)?,
                "n_layers" => self.n_layers = parse_value(k, v)?,
                "d_out" => self.d_out = parse_value(k, v)?,
                "init_alpha" => self.init_alpha = parse_value(k, v)?,
                "init_beta" => self.init_beta = parse_value(k, v)?,
                "similarity" => self.similarity = parse_enum(k, v)?,
                "contrastive" => self.contrastive = parse_enum(k, v)?,
                "normalize_by_batch" => self.normalize_by_batch = parse_value(k, v)?,
                "checkpoint_every" => self.checkpoint_every = parse_value(k, v)?,
                "adam_beta1" => self.adam.beta1 = parse_value(k, v)?,
                "adam_beta2" => self.adam.beta2 = parse_value(k, v)?,
                "adam_eps" => self.adam.eps = parse_value(k, v)?,
                _ => return Err(unknown_key(k)),
            }
        }
        self.validate()
    }

    /// Every key accepted by [`TrainConfig::apply`] with its current value;
    /// applying the result to the defaults reproduces `self`.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let enum_str = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
        let keep = match &self.keep_fractions {
            None => "auto".to_string(),
            Some(k) => k
                .iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(","),
        };
        let w = &self.weights;
        for (k, v) in [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_lr", format!("{:?}", self.max_lr)),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("lambda1", format!("{:?}", w.lambda1)),
            ("lambda2", format!("{:?}", w.lambda2)),
            ("lambda3", format!("{:?}", w.lambda3)),
            ("gamma", format!("{:?}", w.gamma)),
            ("c", format!("{:?}", w.c)),
            ("levels", self.levels.to_string()),
            ("keep_fractions", keep),
            (
                "masked_batch_fraction",
                format!("{:?}", self.masked_batch_fraction),
            ),
            ("mask_ratio", format!("{:?}", self.mask_ratio)),
            ("seed", self.seed.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("hidden", self.hidden.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("d_out", self.d_out.to_string()),
            ("init_alpha", format!("{:?}", self.init_alpha)),
            ("init_beta", format!("{:?}", self.init_beta)),
            (
                "similarity",
                enum_str(serde_json::to_value(self.similarity).unwrap_or_default()),
            ),
            (
                "contrastive",
                enum_str(serde_json::to_value(self.contrastive).unwrap_or_default()),
            ),
            ("normalize_by_batch", self.normalize_by_batch.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("adam_beta1", format!("{:?}", self.adam.beta1)),
            ("adam_beta2", format!("{:?}", self.adam.beta2)),
            ("adam_eps", format!("{:?}", self.adam.eps)),
        ] {
            kv.set(k, &v);
        }
        kv
    }

    /// Applies a named preset from [`PRESETS`].
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let w = match name {
            "prolap-full" => DESK_WEIGHTS,
            "prolap-hier" => LossWeights {
                lambda2: 0.0,
                ..DESK_WEIGHTS
            },
            "prolap-mr" => LossWeights {
                lambda1: 0.0,
                ..DESK_WEIGHTS
            },
            "prolap-baseline" => LossWeights {
                lambda1: 0.0,
                lambda2: 0.0,
                ..DESK_WEIGHTS
            },
            "siglip-csd" => LossWeights::NONE,
            "siglip-det" | "clap-infonce" => {
                self.similarity = Similarity::Cosine;
                self.init_alpha = 10.0;
                self.init_beta = -10.0;
                if name == "clap-infonce" {
                    self.contrastive = Contrastive::InfoNce;
                    self.init_alpha = 1.0 / 0.07;
                }
                LossWeights::NONE
            }
            "reference-weights" => {
                self.epochs = 50;
                self.batch_size = 256;
                self.max_lr = 1e-5;
                LossWeights::REFERENCE
            }
            _ => {
                return Err(Error::Config {
                    key: "preset".into(),
                    message: format!("unknown preset `{name}`; known: {}", PRESETS.join(", ")),
                })
            }
        };
        self.weights = w;
        self.validate()
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-seed for stream `stream`, index `index`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix(mix(seed ^ mix(stream)) ^ index)
}

const STREAM_AUDIO_INIT: u64 = 1;
const STREAM_TEXT_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_BATCH: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub ppcl: f64,
    pub l_inc_cross: f64,
    pub l_inc_hier: f64,
    pub l_mr: f64,
    pub l_vib: f64,
    pub total: f64,
}

impl MetricsRow {
    fn new(step: usize, lr: f64, b: &LossBreakdown) -> Self {
        Self {
            step,
            lr,
            ppcl: b.contrastive,
            l_inc_cross: b.inc_cross,
            l_inc_hier: b.inc_hier,
            l_mr: b.mr,
            l_vib: b.vib,
            total: b.total,
        }
    }
}

pub const METRICS_HEADER: &str = "step,lr,ppcl,l_inc_cross,l_inc_hier,l_mr,l_vib,total";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.step, r.lr, r.ppcl, r.l_inc_cross, r.l_inc_hier, r.l_mr, r.l_vib, r.total
        )
        .expect("String write");
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub final_checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub checkpoint_paths: Vec<PathBuf>,
}

struct Encoded {
    contrastive: (DiagGaussian, Tape),
    chain: Vec<(DiagGaussian, Tape)>,
}

fn encode(
    params: &EncoderParams,
    x: &[f64],
    vis: Option<&[bool]>,
    chain: Option<&MaskChain>,
) -> Result<Encoded> {
    let contrastive = encoder::forward(params, x, vis)?;
    let chain = match chain {
        Some(c) => (0..=c.levels())
            .map(|i| encoder::forward(params, x, Some(&c.visible(i))))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    Ok(Encoded { contrastive, chain })
}

fn batch_of(enc: &[Encoded]) -> ModalityBatch {
    ModalityBatch {
        contrastive: enc.iter().map(|e| e.contrastive.0.clone()).collect(),
        chains: enc
            .iter()
            .filter(|e| !e.chain.is_empty())
            .map(|e| e.chain.iter().map(|(z, _)| z.clone()).collect())
            .collect(),
    }
}

/// Parameter gradient summed over samples in index order.
fn backprop(params: &EncoderParams, enc: &[Encoded], grad: &ModalityGrad) -> Result<Vec<f64>> {
    let n = params.flat().len();
    let parts: Vec<Vec<f64>> = (0..enc.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut g = vec![0.0; n];
            encoder::backward_into(params, &enc[i].contrastive.1, &grad.contrastive[i], &mut g)?;
            for (j, (_, tape)) in enc[i].chain.iter().enumerate() {
                encoder::backward_into(params, tape, &grad.chains[i][j], &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; n];
    for p in &parts {
        for (t, x) in total.iter_mut().zip(p) {
            *t += x;
        }
    }
    Ok(total)
}

/// Randomness drawn for one batch.
struct BatchPlan {
    caption_levels: Vec<usize>,
    audio_vis: Vec<Option<Vec<bool>>>,
    text_vis: Vec<Option<Vec<bool>>>,
    audio_chain: Option<MaskChain>,
    text_chain: Option<MaskChain>,
}

fn plan_batch(cfg: &TrainConfig, b: usize, d: usize, seed: u64) -> Result<BatchPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let caption_levels = (0..b).map(|_| rng.random_range(1..=LEVELS)).collect();
    let n_masked = ((cfg.masked_batch_fraction * b as f64).round() as usize).min(b);
    let vis = |rng: &mut ChaCha8Rng| -> Vec<Option<Vec<bool>>> {
        (0..b)
            .map(|i| (i < n_masked).then(|| random_visibility(d, cfg.mask_ratio, rng)))
            .collect()
    };
    let audio_vis = vis(&mut rng);
    let text_vis = vis(&mut rng);
    let w = &cfg.weights;
    let needs_chains = w.lambda1 > 0.0 || w.lambda2 > 0.0 || w.gamma > 0.0;
    let (audio_chain, text_chain) = if needs_chains {
        let keep = cfg.keep_fractions();
        let (sa, st): (u64, u64) = (rng.random(), rng.random());
        (
            Some(build_chain(d, cfg.levels, &keep, sa)?),
            Some(build_chain(d, cfg.levels, &keep, st)?),
        )
    } else {
        (None, None)
    };
    Ok(BatchPlan {
        caption_levels,
        audio_vis,
        text_vis,
        audio_chain,
        text_chain,
    })
}

fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(checkpoint_name(ck.epoch));
    ck.save(&path)?;
    Ok(path)
}

/// Trains on every item of `ds`. With `out_dir`, checkpoints and
/// `metrics.csv` are written there; the metrics file is also written when a
/// batch aborts.
pub fn train(
    ds: &HierDataset,
    cfg: &TrainConfig,
    preset: Option<&str>,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let d = ds
        .dim()
        .ok_or_else(|| Error::invalid("cannot train on an empty dataset"))?;
    if ds.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let n = ds.len();
    let b = cfg.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(b);
    let total_steps = cfg.epochs * batches_per_epoch;
    let warmup_steps = cfg.warmup_epochs * batches_per_epoch;
    let opts = cfg.loss_options();

    let mut model = Model::init(
        cfg.architecture(d),
        derive_seed(cfg.seed, STREAM_AUDIO_INIT, 0),
        derive_seed(cfg.seed, STREAM_TEXT_INIT, 0),
        SimilarityParams::new(cfg.init_alpha, cfg.init_beta)?,
        cfg.similarity,
    )?;
    let n_audio = model.audio.flat().len();
    let n_text = model.text.flat().len();
    let mut opt = OptimizerState::new(n_audio + n_text + 2, cfg.adam);

    let snapshot = |model: &Model, epoch: usize, step: usize| Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        epoch,
        step,
        model: model.clone(),
        adam: cfg.adam,
        seed: cfg.seed,
        deterministic: cfg.deterministic,
        preset: preset.map(str::to_string),
        config: cfg.clone(),
    };

    let mut paths = Vec::new();
    if let Some(dir) = out_dir {
        paths.push(save_checkpoint(&snapshot(&model, 0, 0), dir)?);
    }
    let mut metrics = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    let write_metrics = |rows: &[MetricsRow]| -> Result<()> {
        match out_dir {
            Some(dir) => write_atomic(&dir.join("metrics.csv"), metrics_csv(rows).as_bytes()),
            None => Ok(()),
        }
    };

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            STREAM_SHUFFLE,
            epoch as u64,
        )));
        for (bi, idx) in order.chunks(b).enumerate() {
            step += 1;
            let batch_seed =
                derive_seed(cfg.seed, STREAM_BATCH, ((epoch as u64) << 32) | bi as u64);
            let lr = lr_at(step, total_steps, warmup_steps, cfg.max_lr);
            let result = train_step(&mut model, &mut opt, ds, idx, cfg, &opts, batch_seed, lr);
            match result {
                Ok(breakdown) => metrics.push(MetricsRow::new(step, lr, &breakdown)),
                Err(e) => {
                    write_metrics(&metrics)?;
                    return Err(match e {
                        Error::NonFinite(msg) => Error::NonFinite(format!(
                            "{msg} (epoch {epoch}, batch {bi}, step {step}, batch seed {batch_seed})"
                        )),
                        other => other,
                    });
                }
            }
        }
        let periodic = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
        if let Some(dir) = out_dir {
            if periodic || epoch == cfg.epochs {
                paths.push(save_checkpoint(&snapshot(&model, epoch, step), dir)?);
            }
        }
    }
    write_metrics(&metrics)?;
    log::info!("trained {step} steps over {} epochs", cfg.epochs);
    Ok(TrainOutput {
        final_checkpoint: snapshot(&model, cfg.epochs, step),
        metrics,
        checkpoint_paths: paths,
    })
}

/// Inputs of one batch after all randomness has been drawn.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub audio: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
    pub audio_vis: Vec<Option<Vec<bool>>>,
    pub text_vis: Vec<Option<Vec<bool>>>,
    pub audio_chain: Option<MaskChain>,
    pub text_chain: Option<MaskChain>,
}

/// Batch objective and its gradient with respect to
/// [`Model::flat_params`], with diagonal match labels.
pub fn batch_gradient(
    model: &Model,
    inputs: &BatchInputs,
    weights: &LossWeights,
    opts: &LossOptions,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let b = inputs.audio.len();
    check_dim(b, inputs.text.len())?;
    check_dim(b, inputs.audio_vis.len())?;
    check_dim(b, inputs.text_vis.len())?;
    let run = |params: &EncoderParams,
               xs: &[Vec<f64>],
               vis: &[Option<Vec<bool>>],
               chain: Option<&MaskChain>| {
        (0..b)
            .into_par_iter()
            .map(|i| encode(params, &xs[i], vis[i].as_deref(), chain))
            .collect::<Result<Vec<_>>>()
    };
    let audio = run(
        &model.audio,
        &inputs.audio,
        &inputs.audio_vis,
        inputs.audio_chain.as_ref(),
    )?;
    let text = run(
        &model.text,
        &inputs.text,
        &inputs.text_vis,
        inputs.text_chain.as_ref(),
    )?;

    let (breakdown, grads) = total_loss(
        &batch_of(&audio),
        &batch_of(&text),
        &LabelMatrix::diagonal(b),
        &model.sim,
        weights,
        opts,
    )?;
    let mut g = backprop(&model.audio, &audio, &grads.audio)?;
    g.extend(backprop(&model.text, &text, &grads.text)?);
    g.push(grads.d_alpha * model.sim.alpha());
    g.push(grads.d_beta);
    Ok((breakdown, g))
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    ds: &HierDataset,
    idx: &[usize],
    cfg: &TrainConfig,
    opts: &LossOptions,
    batch_seed: u64,
    lr: f64,
) -> Result<LossBreakdown> {
    let d = model.audio.arch().d_in;
    let plan = plan_batch(cfg, idx.len(), d, batch_seed)?;
    let items: Vec<_> = idx.iter().map(|&i| &ds.items[i]).collect();
    let inputs = BatchInputs {
        audio: items.iter().map(|it| it.audio_feat.clone()).collect(),
        text: items
            .iter()
            .zip(&plan.caption_levels)
            .map(|(it, &l)| it.caption(l).to_vec())
            .collect(),
        audio_vis: plan.audio_vis,
        text_vis: plan.text_vis,
        audio_chain: plan.audio_chain,
        text_chain: plan.text_chain,
    };
    let (breakdown, g) = batch_gradient(model, &inputs, &cfg.weights, opts)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {}", breakdown.total)));
    }
    let mut flat = model.flat_params();
    adam_step(&mut flat, &g, opt, lr)?;
    model.set_flat_params(&flat)?;
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenConfig};

    fn tiny() -> HierDataset {
        generate(&GenConfig {
            n_items: 24,
            d_in: 8,
            branching: [2, 2, 1, 1],
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn quick() -> TrainConfig {
        let mut cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            hidden: 6,
            d_out: 4,
            ..TrainConfig::default()
        };
        cfg.apply_preset("prolap-full").unwrap();
        cfg
    }

    #[test]
    fn zero_epochs_yields_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..quick()
        };
        let out = train(&tiny(), &cfg, None, Some(dir.path())).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.checkpoint_paths.len(), 1);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.trim(), METRICS_HEADER);
    }

    #[test]
    fn runs_are_reproducible() {
        let ds = tiny();
        let a = train(&ds, &quick(), None, None).unwrap();
        let b = train(&ds, &quick(), None, None).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.final_checkpoint, b.final_checkpoint);
        assert_eq!(a.metrics.len(), 2 * 3);
    }

    #[test]
    fn default_keep_fractions_space_masking_evenly() {
        let cfg = TrainConfig::default();
        let k = cfg.keep_fractions();
        assert!((k[0] - 2.0 / 3.0).abs() < 1e-15 && (k[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn config_keys_and_presets() {
        let mut cfg = TrainConfig::default();
        let kv = KeyValues::from_overrides(&[
            "similarity=cosine",
            "lambda1=0",
            "lambda3=0",
            "gamma=0",
            "epochs=3",
        ])
        .unwrap();
        cfg.apply(&kv).unwrap();
        assert_eq!((cfg.similarity, cfg.epochs), (Similarity::Cosine, 3));
        let bad = KeyValues::from_overrides(&["mask_ratio=1.5"]).unwrap();
        assert!(cfg
            .apply(&bad)
            .unwrap_err()
            .to_string()
            .contains("mask_ratio"));
        for p in PRESETS {
            TrainConfig::default().apply_preset(p).unwrap();
        }
        let mut base = TrainConfig::default();
        base.apply_preset("prolap-baseline").unwrap();
        assert_eq!((base.weights.lambda1, base.weights.lambda2), (0.0, 0.0));
        assert!(TrainConfig::default().apply_preset("nope").is_err());
    }

    #[test]
    fn key_values_reproduce_the_config() {
        let mut cfg = TrainConfig::default();
        cfg.apply_preset("clap-infonce").unwrap();
        cfg.keep_fractions = Some(vec![0.3, 0.7]);
        cfg.max_lr = 1.0 / 3.0;
        let mut back = TrainConfig::default();
        back.apply(&cfg.to_key_values()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn nan_abort_names_the_batch_seed() {
        let mut ds = tiny();
        ds.items[3].audio_feat[0] = f64::NAN;
        let cfg = TrainConfig {
            batch_size: 24,
            ..quick()
        };
        let e = train(&ds, &cfg, None, None).unwrap_err();
        assert!(e.to_string().contains("batch seed"), "{e}");
    }
}
