//! Command-line driver.
//!
//! Every command that writes files takes an output directory and records a
//! `manifest.json` there before any work starts. The manifest is updated with
//! the outputs and a status when the command ends.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{apply_gen_config, gen_config_key_values, KeyValues};
use crate::dataset::{
    self, generate, quality_report, write_atomic, GenConfig, HierDataset, LEVELS,
};
use crate::dump::{read_jsonl, write_jsonl, EmbeddingRecord};
use crate::error::{Error, ErrorKind, Result};
use crate::eval::{
    self, embed_split, profile_csv, retrieval_eval, Direction, RetrievalReport, TraversalReport,
    UncertaintyReport, RECALL_KS,
};
use crate::geometry::DiagGaussian;
use crate::gradcheck::{self, GradcheckReport, Module};
use crate::losses::Similarity;
use crate::trainer::{self, Checkpoint, TrainConfig, PRESETS};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FILE: &str = "dataset.tsv";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(
    name = "prolap",
    version,
    about = "Probabilistic audio-text embeddings at desk scale"
)]
pub struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic hierarchical dataset.
    GenData(GenDataArgs),
    /// Train an audio/text encoder pair.
    Train(TrainArgs),
    /// Evaluate a checkpoint or embedding dumps.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write JSONL embedding dumps of a dataset.
    Embed(EmbedArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// `key = value` generation config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; receives `dataset.tsv` and `manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Replace existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset file, or a directory containing `dataset.tsv`.
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` training config, applied after the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    pub preset: Option<String>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Retrieval,
    Inclusion,
    Traversal,
    Uncertainty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimilarityArg {
    Csd,
    Cosine,
}

impl From<SimilarityArg> for Similarity {
    fn from(s: SimilarityArg) -> Self {
        match s {
            SimilarityArg::Csd => Similarity::Csd,
            SimilarityArg::Cosine => Similarity::Cosine,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset file, or a directory containing `dataset.tsv`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long)]
    pub out: PathBuf,
    /// Interpolation points per traversal line.
    #[arg(long, default_value_t = 50)]
    pub n_points: usize,
    /// Mask-chain seed for the uncertainty task (default: the training seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Audio embedding dump (retrieval without a checkpoint).
    #[arg(long)]
    pub audio_embeds: Option<PathBuf>,
    /// Text embedding dump (retrieval without a checkpoint).
    #[arg(long)]
    pub text_embeds: Option<PathBuf>,
    /// Level-1 caption dump, paired line by line with `--level4`.
    #[arg(long)]
    pub level1: Option<PathBuf>,
    #[arg(long)]
    pub level4: Option<PathBuf>,
    /// Similarity for dump-based retrieval.
    #[arg(long, value_enum, default_value_t = SimilarityArg::Csd)]
    pub similarity: SimilarityArg,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModuleArg {
    Losses,
    Encoder,
    End2end,
}

impl From<ModuleArg> for Module {
    fn from(m: ModuleArg) -> Self {
        match m {
            ModuleArg::Losses => Module::Losses,
            ModuleArg::Encoder => Module::Encoder,
            ModuleArg::End2end => Module::End2end,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    pub module: ModuleArg,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Receives `audio.jsonl` and `text_level{1..4}.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// An invocation with every resolved setting spelled out.
    pub replay: Vec<String>,
    pub resolved_config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub git_describe: String,
    pub version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// `running`, `ok`, or `failed: <message>`.
    pub status: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    fn new(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.into(),
            argv: argv.to_vec(),
            replay: Vec::new(),
            resolved_config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            git_describe: env!("PROLAP_GIT_DESCRIBE").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            started_at: now(),
            finished_at: None,
            status: "running".into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Runs `work` between the initial and the final manifest write.
    fn around<T>(mut self, dir: &Path, work: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.write(dir)?;
        let result = work(&mut self);
        self.finished_at = Some(now());
        self.status = match &result {
            Ok(_) => "ok".into(),
            Err(e) => format!("failed: {e}"),
        };
        self.write(dir)?;
        result
    }
}

fn is_artifact(name: &str) -> bool {
    name == MANIFEST_FILE
        || name == DATASET_FILE
        || name.ends_with(".csv")
        || name.ends_with(".jsonl")
        || name.ends_with(".tmp")
        || (name.starts_with("ckpt-epoch-") && name.ends_with(".json"))
}

/// Creates `dir`; a non-empty directory is an error unless `force`, which
/// removes earlier artifacts of this tool (and nothing else).
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        if !entries.is_empty() && !force {
            return Err(Error::invalid(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
        for e in entries {
            let name = e.file_name().to_string_lossy().into_owned();
            if e.path().is_file() && is_artifact(&name) {
                fs::remove_file(e.path()).map_err(|err| Error::io(e.path(), err))?;
            }
        }
        Ok(())
    } else {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }
}

fn dataset_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(DATASET_FILE)
    } else {
        p.to_path_buf()
    }
}

fn overrides(config: Option<&Path>, set: &[String]) -> Result<KeyValues> {
    let mut kv = match config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    kv.extend(&KeyValues::from_overrides(set)?);
    Ok(kv)
}

fn set_args(kv: &KeyValues) -> Vec<String> {
    kv.iter()
        .flat_map(|(k, v)| ["--set".to_string(), format!("{k}={v}")])
        .collect()
}

/// Absolute form of `p`, so replays do not depend on the working directory.
fn path_str(p: &Path) -> String {
    std::path::absolute(p)
        .unwrap_or_else(|_| p.to_path_buf())
        .display()
        .to_string()
}

fn value_name<T: ValueEnum>(v: T) -> String {
    v.to_possible_value()
        .expect("no skipped variants")
        .get_name()
        .to_string()
}

fn eval_replay(args: &EvalArgs) -> Vec<String> {
    let mut r: Vec<String> = ["prolap", "eval", "--task"].map(String::from).to_vec();
    r.push(value_name(args.task));
    r.extend(["--out".into(), path_str(&args.out), "--force".into()]);
    r.extend(["--n-points".into(), args.n_points.to_string()]);
    r.extend(["--similarity".into(), value_name(args.similarity)]);
    if let Some(seed) = args.seed {
        r.extend(["--seed".into(), seed.to_string()]);
    }
    let paths = [
        ("--checkpoint", &args.checkpoint),
        ("--data", &args.data),
        ("--audio-embeds", &args.audio_embeds),
        ("--text-embeds", &args.text_embeds),
        ("--level1", &args.level1),
        ("--level4", &args.level4),
    ];
    for (flag, p) in paths {
        if let Some(p) = p {
            r.extend([flag.to_string(), path_str(p)]);
        }
    }
    r
}

pub struct GenDataSummary {
    pub dataset: HierDataset,
    pub path: PathBuf,
}

pub fn cmd_gen_data(args: &GenDataArgs, argv: &[String]) -> Result<GenDataSummary> {
    let mut cfg = GenConfig::default();
    apply_gen_config(&mut cfg, &overrides(args.config.as_deref(), &args.set)?)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    prepare_out(&args.out, args.force)?;
    let path = args.out.join(DATASET_FILE);

    let mut m = RunManifest::new("gen-data", argv);
    m.resolved_config = serde_json::to_value(&cfg)?;
    m.seeds.insert("dataset".into(), cfg.seed);
    m.replay = [
        "prolap",
        "gen-data",
        "--out",
        &path_str(&args.out),
        "--force",
    ]
    .map(String::from)
    .into_iter()
    .chain(set_args(&gen_config_key_values(&cfg)))
    .collect();
    m.inputs.extend(args.config.clone());
    m.around(&args.out, |m| {
        let ds = generate(&cfg)?;
        dataset::save(&ds, &path)?;
        m.outputs.push(path.clone());
        let q = quality_report(&ds);
        println!("items          {}", ds.len());
        println!("tree shape     {:?}", ds.tree_shape());
        println!(
            "specificity    {} (mean audio-caption distance by level: {})",
            if q.monotone_specificity {
                "monotone"
            } else {
                "NOT monotone"
            },
            q.level_distances
                .iter()
                .map(|d| format!("{d:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        println!("nearest L4     {:.3}", q.nearest_caption_rate);
        println!("wrote          {}", path.display());
        Ok(GenDataSummary {
            dataset: ds,
            path: path.clone(),
        })
    })
}

/// Resolves the training config: defaults, then the preset, then the config
/// file, then `--set`.
pub fn resolve_train_config(
    preset: Option<&str>,
    config: Option<&Path>,
    set: &[String],
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = preset {
        cfg.apply_preset(p)?;
    }
    cfg.apply(&overrides(config, set)?)?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs, argv: &[String]) -> Result<trainer::TrainOutput> {
    let cfg = resolve_train_config(args.preset.as_deref(), args.config.as_deref(), &args.set)?;
    let data = dataset_path(&args.data);
    let ds = dataset::load(&data)?;
    prepare_out(&args.out, args.force)?;

    let mut m = RunManifest::new("train", argv);
    m.resolved_config = serde_json::to_value(&cfg)?;
    m.seeds.insert("train".into(), cfg.seed);
    if let Some(g) = &ds.config {
        m.seeds.insert("dataset".into(), g.seed);
    }
    m.replay = [
        "prolap",
        "train",
        "--data",
        &path_str(&data),
        "--out",
        &path_str(&args.out),
        "--force",
    ]
    .map(String::from)
    .into_iter()
    .chain(
        args.preset
            .iter()
            .flat_map(|p| ["--preset".to_string(), p.clone()]),
    )
    .chain(set_args(&cfg.to_key_values()))
    .collect();
    m.inputs.push(data.clone());
    m.inputs.extend(args.config.clone());
    m.around(&args.out, |m| {
        let out = trainer::train(&ds, &cfg, args.preset.as_deref(), Some(&args.out));
        m.outputs.push(args.out.join(METRICS_FILE));
        let out = out?;
        m.outputs.extend(out.checkpoint_paths.iter().cloned());
        if let Some(last) = out.metrics.last() {
            println!(
                "step {}  lr {:.2e}  total {:.4}  ppcl {:.4}  inc_cross {:.4}  inc_hier {:.4}  mr {:.4}  vib {:.4}",
                last.step, last.lr, last.total, last.ppcl, last.l_inc_cross, last.l_inc_hier, last.l_mr, last.l_vib
            );
        }
        let w = &cfg.weights;
        println!(
            "weights lambda1={} lambda2={} lambda3={} gamma={}  preset {}",
            w.lambda1,
            w.lambda2,
            w.lambda3,
            w.gamma,
            args.preset.as_deref().unwrap_or("-")
        );
        for p in &out.checkpoint_paths {
            println!("checkpoint {}", p.display());
        }
        Ok(out)
    })
}

/// Reports produced by `cmd_eval`; exactly one field is set.
#[derive(Debug, Default)]
pub struct EvalSummary {
    pub retrieval: Option<[RetrievalReport; 2]>,
    pub inclusion_rate: Option<f64>,
    pub traversal: Option<TraversalReport>,
    pub uncertainty: Option<UncertaintyReport>,
    pub files: Vec<PathBuf>,
}

fn load_model_and_data(args: &EvalArgs) -> Result<(Checkpoint, HierDataset, PathBuf, PathBuf)> {
    let (Some(ck), Some(data)) = (&args.checkpoint, &args.data) else {
        return Err(Error::invalid(format!(
            "task {:?} needs --checkpoint and --data",
            args.task
        )));
    };
    let data = dataset_path(data);
    let ckpt = Checkpoint::load(ck)?;
    let ds = dataset::load(&data)?;
    eval::check_model_fits(&ckpt.model, &ds)?;
    Ok((ckpt, ds, ck.clone(), data))
}

fn retrieval_csv(reports: &[RetrievalReport]) -> String {
    let mut out = String::from("direction,metric,value\n");
    for r in reports {
        for (k, v) in &r.r_at {
            let _ = writeln!(out, "{},R@{k},{v:?}", r.direction);
        }
        let _ = writeln!(out, "{},mAP@10,{:?}", r.direction, r.map_at_10);
        let _ = writeln!(out, "{},n_queries,{}", r.direction, r.n_queries);
        let _ = writeln!(out, "{},gallery_size,{}", r.direction, r.gallery_size);
    }
    out
}

fn gaussians(records: &[EmbeddingRecord]) -> Result<Vec<DiagGaussian>> {
    records.iter().map(EmbeddingRecord::gaussian).collect()
}

fn write_file(dir: &Path, name: &str, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    write_atomic(&p, text.as_bytes())?;
    files.push(p);
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, argv: &[String]) -> Result<EvalSummary> {
    if args.n_points < 2 {
        return Err(Error::invalid("--n-points must be at least 2"));
    }
    prepare_out(&args.out, args.force)?;
    let mut m = RunManifest::new("eval", argv);
    m.resolved_config = serde_json::json!({
        "task": value_name(args.task),
        "n_points": args.n_points,
        "similarity": value_name(args.similarity),
    });
    m.replay = eval_replay(args);
    let inputs = [
        &args.checkpoint,
        &args.data,
        &args.audio_embeds,
        &args.text_embeds,
        &args.level1,
        &args.level4,
    ];
    m.inputs = inputs.iter().filter_map(|p| (*p).clone()).collect();
    let out = args.out.clone();
    m.around(&out, |m| {
        let mut s = EvalSummary::default();
        match args.task {
            Task::Retrieval => eval_retrieval(args, &mut s)?,
            Task::Inclusion => eval_inclusion(args, &mut s)?,
            Task::Traversal => eval_traversal(args, &mut s)?,
            Task::Uncertainty => eval_uncertainty(args, m, &mut s)?,
        }
        m.outputs = s.files.clone();
        Ok(s)
    })
}

fn eval_retrieval(args: &EvalArgs, s: &mut EvalSummary) -> Result<()> {
    let reports = match (&args.audio_embeds, &args.text_embeds) {
        (Some(a), Some(t)) => {
            let (ra, rt) = (read_jsonl(a)?, read_jsonl(t)?);
            let pairs: Vec<(usize, usize)> = ra
                .iter()
                .enumerate()
                .flat_map(|(i, x)| {
                    rt.iter()
                        .enumerate()
                        .filter(move |(_, y)| y.item_id == x.item_id)
                        .map(move |(j, _)| (i, j))
                })
                .collect();
            let (za, zt) = (gaussians(&ra)?, gaussians(&rt)?);
            let kind = args.similarity.into();
            [
                retrieval_eval(&za, &zt, &pairs, kind, Direction::AudioToText)?,
                retrieval_eval(&za, &zt, &pairs, kind, Direction::TextToAudio)?,
            ]
        }
        (None, None) => {
            let (ck, ds, _, _) = load_model_and_data(args)?;
            eval::retrieval_task(&ck.model, &embed_split(&ck.model, &ds)?)?
        }
        _ => {
            return Err(Error::invalid(
                "--audio-embeds and --text-embeds go together",
            ))
        }
    };
    println!(
        "{:<12} {}",
        "direction",
        RECALL_KS
            .map(|k| format!("{:>8}", format!("R@{k}")))
            .join("")
            + "   mAP@10"
    );
    for r in &reports {
        let recalls: String = r.r_at.values().map(|v| format!("{v:>8.4}")).collect();
        println!(
            "{:<12} {recalls} {:>8.4}",
            r.direction.to_string(),
            r.map_at_10
        );
    }
    write_file(
        &args.out,
        "retrieval.csv",
        &retrieval_csv(&reports),
        &mut s.files,
    )?;
    s.retrieval = Some(reports);
    Ok(())
}

fn eval_inclusion(args: &EvalArgs, s: &mut EvalSummary) -> Result<()> {
    let (rate, n) = match (&args.level1, &args.level4) {
        (Some(p1), Some(p4)) => {
            let (r1, r4) = (read_jsonl(p1)?, read_jsonl(p4)?);
            if let Some((a, b)) = r1.iter().zip(&r4).find(|(a, b)| a.item_id != b.item_id) {
                return Err(Error::Incompatible(format!(
                    "level files are not paired: item {} vs item {}",
                    a.item_id, b.item_id
                )));
            }
            (
                eval::inclusion_test_rate(&gaussians(&r1)?, &gaussians(&r4)?)?,
                r1.len(),
            )
        }
        (None, None) => {
            let (ck, ds, _, _) = load_model_and_data(args)?;
            (
                eval::inclusion_task(&embed_split(&ck.model, &ds)?)?,
                ds.len(),
            )
        }
        _ => return Err(Error::invalid("--level1 and --level4 go together")),
    };
    println!("inclusion test rate {rate:.2}% over {n} pairs (strict H > 0)");
    let csv = format!("metric,value\ninclusion_test_rate,{rate:?}\nn_pairs,{n}\n");
    write_file(&args.out, "inclusion.csv", &csv, &mut s.files)?;
    s.inclusion_rate = Some(rate);
    Ok(())
}

#[derive(Serialize)]
struct TraceRecord {
    item_id: usize,
    /// Gallery entries as `[item_id, level]`.
    trace: Vec<[usize; 2]>,
    retrieved: Vec<[usize; 2]>,
    precision: f64,
    r_at_1: f64,
    r_at_1_lv1: f64,
}

fn eval_traversal(args: &EvalArgs, s: &mut EvalSummary) -> Result<()> {
    let (ck, ds, _, _) = load_model_and_data(args)?;
    let split = embed_split(&ck.model, &ds)?;
    let report = eval::traversal_task(&ck.model, &ds, &split, args.n_points)?;
    let label = |g: usize| [ds.items[g / LEVELS].item_id, g % LEVELS + 1];
    let mut csv = String::from("item_id,precision,r_at_1,r_at_1_lv1,n_retrieved\n");
    let mut traces = String::new();
    for (item, e) in ds.items.iter().zip(&report.entries) {
        let _ = writeln!(
            csv,
            "{},{:?},{:?},{:?},{}",
            item.item_id,
            e.precision,
            e.r_at_1,
            e.r_at_1_lv1,
            e.retrieved.len()
        );
        let rec = TraceRecord {
            item_id: item.item_id,
            trace: e.trace.iter().map(|&g| label(g)).collect(),
            retrieved: e.retrieved.iter().map(|&g| label(g)).collect(),
            precision: e.precision,
            r_at_1: e.r_at_1,
            r_at_1_lv1: e.r_at_1_lv1,
        };
        traces += &serde_json::to_string(&rec)?;
        traces.push('\n');
    }
    let summary = format!(
        "metric,value\nprecision,{:?}\nr_at_1,{:?}\nr_at_1_lv1,{:?}\nn_points,{}\nn_queries,{}\n",
        report.precision,
        report.r_at_1,
        report.r_at_1_lv1,
        args.n_points,
        report.entries.len()
    );
    println!(
        "traversal over {} queries, {} points per line",
        report.entries.len(),
        args.n_points
    );
    println!(
        "precision {:.4}  R@1 {:.4}  R@1-Lv1 {:.4}",
        report.precision, report.r_at_1, report.r_at_1_lv1
    );
    println!("note: precision and R@1 follow this tool's own definitions (see README)");
    write_file(&args.out, "traversal_summary.csv", &summary, &mut s.files)?;
    write_file(&args.out, "traversal.csv", &csv, &mut s.files)?;
    write_file(&args.out, "traversal_traces.jsonl", &traces, &mut s.files)?;
    s.traversal = Some(report);
    Ok(())
}

fn eval_uncertainty(args: &EvalArgs, m: &mut RunManifest, s: &mut EvalSummary) -> Result<()> {
    let (ck, ds, _, _) = load_model_and_data(args)?;
    let seed = args.seed.unwrap_or(ck.seed);
    m.seeds.insert("mask_chains".into(), seed);
    let cfg = &ck.config;
    let r = eval::uncertainty_task(&ck.model, &ds, cfg.levels, &cfg.keep_fractions(), seed)?;
    let show = |title: &str, rows: &[eval::ProfileRow<usize>]| {
        let cells: Vec<String> = rows
            .iter()
            .map(|r| format!("{}:{:.3}", r.group, r.mean_total_variance))
            .collect();
        println!("{title:<30} {}", cells.join("  "));
    };
    show("audio by mask level", &r.audio_by_mask_level);
    show("text (L4) by mask level", &r.text_by_mask_level);
    show("text by caption level", &r.text_by_caption_level);
    show("text by informative length", &r.text_by_length);
    println!(
        "masked >= intermediate >= raw: audio {}, text {};  length profile non-increasing: {}",
        UncertaintyReport::mask_ordering_holds(&r.audio_by_mask_level),
        UncertaintyReport::mask_ordering_holds(&r.text_by_mask_level),
        UncertaintyReport::non_increasing(&r.text_by_length)
    );
    let files = [
        (
            "uncertainty_audio_mask.csv",
            "mask_level",
            &r.audio_by_mask_level,
        ),
        (
            "uncertainty_text_mask.csv",
            "mask_level",
            &r.text_by_mask_level,
        ),
        (
            "uncertainty_text_caption_level.csv",
            "caption_level",
            &r.text_by_caption_level,
        ),
        (
            "uncertainty_text_length.csv",
            "visible_informative",
            &r.text_by_length,
        ),
    ];
    for (name, key, rows) in files {
        write_file(&args.out, name, &profile_csv(key, rows), &mut s.files)?;
    }
    s.uncertainty = Some(r);
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradcheckReport> {
    let report = gradcheck::run(args.module.into(), args.trials, args.seed)?;
    print!("{}", report.table());
    println!(
        "{} trials, worst relative error {:.3e} (threshold {:e}): {}",
        report.trials,
        report.worst(),
        gradcheck::TOLERANCE,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(report)
}

pub fn cmd_embed(args: &EmbedArgs, argv: &[String]) -> Result<Vec<PathBuf>> {
    let data = dataset_path(&args.data);
    let ck = Checkpoint::load(&args.checkpoint)?;
    let ds = dataset::load(&data)?;
    eval::check_model_fits(&ck.model, &ds)?;
    prepare_out(&args.out, args.force)?;
    let mut m = RunManifest::new("embed", argv);
    m.replay = [
        "prolap",
        "embed",
        "--checkpoint",
        &path_str(&args.checkpoint),
        "--data",
        &path_str(&data),
        "--out",
        &path_str(&args.out),
        "--force",
    ]
    .map(String::from)
    .to_vec();
    m.inputs = vec![args.checkpoint.clone(), data];
    m.around(&args.out, |m| {
        let split = embed_split(&ck.model, &ds)?;
        let ids: Vec<usize> = ds.items.iter().map(|i| i.item_id).collect();
        let audio: Vec<EmbeddingRecord> = ids
            .iter()
            .zip(&split.audio)
            .map(|(&id, z)| EmbeddingRecord::new(id, None, z))
            .collect();
        let mut files = vec![args.out.join("audio.jsonl")];
        write_jsonl(&files[0], &audio)?;
        for level in 1..=LEVELS {
            let recs: Vec<EmbeddingRecord> = ids
                .iter()
                .zip(&split.captions)
                .map(|(&id, c)| EmbeddingRecord::new(id, Some(level), &c[level - 1]))
                .collect();
            let p = args.out.join(format!("text_level{level}.jsonl"));
            write_jsonl(&p, &recs)?;
            files.push(p);
        }
        println!("embedded {} items into {}", ds.len(), args.out.display());
        m.outputs = files.clone();
        Ok(files)
    })
}

pub fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let argv: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    init_logging(cli.verbose);
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            log::warn!("thread pool already initialised; --threads ignored");
        }
    }
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, &argv).map(|_| 0),
        Command::Train(a) => cmd_train(a, &argv).map(|_| 0),
        Command::Eval(a) => cmd_eval(a, &argv).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(a).map(|r| if r.passed() { 0 } else { 3 }),
        Command::Embed(a) => cmd_embed(a, &argv).map(|_| 0),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
