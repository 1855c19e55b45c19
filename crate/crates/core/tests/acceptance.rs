//! Acceptance criteria. Each test writes one `[criterion N] PASS|FAIL ...`
//! line to stderr (uncaptured) and then asserts.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use prolap::cli::{cmd_train, TrainArgs};
use prolap::config::KeyValues;
use prolap::dataset::{self, generate, GenConfig, HierDataset};
use prolap::eval::{self, Direction, UncertaintyReport, RECALL_KS};
use prolap::geometry::quadrature::quadrature_inclusion_oracle;
use prolap::geometry::{csd_similarity, inclusion_score, DiagGaussian};
use prolap::gradcheck::{self, Module};
use prolap::trainer::{train, TrainConfig};

const FIXTURE_DATA_SEED: u64 = 7;
const FIXTURE_OVERRIDES: [&str; 4] = ["seed=2", "batch_size=64", "epochs=30", "deterministic=true"];
const RUN_BUDGET: Duration = Duration::from_secs(300);

fn report(n: usize, pass: bool, detail: impl std::fmt::Display) -> bool {
    let line = format!(
        "[criterion {n}] {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> DiagGaussian {
    let mu = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lv = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    DiagGaussian::new(mu, lv).unwrap()
}

#[test]
fn c1_closed_form_inclusion_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(1..=8);
        let (z1, z2) = (random_gaussian(&mut rng, d), random_gaussian(&mut rng, d));
        let exact = inclusion_score(&z1, &z2).unwrap();
        let oracle = quadrature_inclusion_oracle(&z1, &z2).unwrap();
        worst = worst.max((exact - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-9 && secs < 60.0;
    assert!(report(
        1,
        pass,
        format!("worst rel err {worst:.2e} over 1000 cases in {secs:.1}s")
    ));
}

#[test]
fn c2_gradient_suite() {
    let mut ok = true;
    let mut detail = Vec::new();
    for (i, module) in [Module::Losses, Module::Encoder, Module::End2end]
        .into_iter()
        .enumerate()
    {
        let r = gradcheck::run(module, 200, 1000 + i as u64).unwrap();
        ok &= r.passed() && r.trials >= 200;
        detail.push(format!("{module} worst {:.2e}", r.worst()));
        if let Some(s) = r.stop_gradient {
            ok &= s.holds();
            detail.push(format!(
                "stop-grad max|analytic| {:e} min|numeric| {:.1e} ({} configs)",
                s.max_analytic, s.min_numeric, s.configs
            ));
        }
    }
    if !detail.iter().any(|d| d.starts_with("stop-grad")) {
        ok = false;
    }
    assert!(report(2, ok, detail.join(", ")));
}

/// `s = ½(‖μa‖² + ‖μt‖²) − ½ E‖za − zt‖²`, estimated by sampling.
#[test]
fn c3_monte_carlo_identity() {
    const SAMPLES: usize = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_z = 0.0f64;
    let mut failures = 0;
    for _ in 0..50 {
        let d = rng.random_range(1..=8);
        let (a, t) = (random_gaussian(&mut rng, d), random_gaussian(&mut rng, d));
        let (sa, st): (Vec<f64>, Vec<f64>) = (
            a.variance().iter().map(|v| v.sqrt()).collect(),
            t.variance().iter().map(|v| v.sqrt()).collect(),
        );
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..SAMPLES {
            let mut dist = 0.0;
            for k in 0..d {
                let za = a.mu()[k] + sa[k] * rng.sample::<f64, _>(StandardNormal);
                let zt = t.mu()[k] + st[k] * rng.sample::<f64, _>(StandardNormal);
                dist += (za - zt) * (za - zt);
            }
            sum += dist;
            sum_sq += dist * dist;
        }
        let n = SAMPLES as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean) * n / (n - 1.0) / n).sqrt();
        let norms: f64 = a.mu().iter().chain(t.mu()).map(|m| m * m).sum();
        let estimate = 0.5 * norms - 0.5 * mean;
        let z = (csd_similarity(&a, &t).unwrap() - estimate).abs() / (0.5 * se);
        worst_z = worst_z.max(z);
        failures += (z > 3.0) as usize;
    }
    let pass = failures == 0;
    assert!(report(
        3,
        pass,
        format!("worst deviation {worst_z:.2} SE over 50 cases, {failures} beyond 3 SE")
    ));
}

/// Relevant items' ranks by counting better-scored items directly.
fn brute_force_metrics(row: &[f64], relevant: &BTreeSet<usize>) -> (Vec<bool>, f64) {
    let rank_of = |g: usize| {
        1 + row
            .iter()
            .enumerate()
            .filter(|&(j, s)| *s > row[g] || (*s == row[g] && j < g))
            .count()
    };
    let mut ranks: Vec<usize> = relevant.iter().map(|&g| rank_of(g)).collect();
    ranks.sort_unstable();
    let hits = RECALL_KS.iter().map(|&k| ranks[0] <= k).collect();
    let mut ap = 0.0;
    for (i, &r) in ranks.iter().enumerate().take_while(|(_, r)| **r <= 10) {
        ap += (i + 1) as f64 / r as f64;
    }
    (hits, ap / relevant.len().min(10) as f64)
}

#[test]
fn c4_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut mismatches, mut five_relevant) = (0, 0);
    for _ in 0..100 {
        let scores: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..20).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let relevant: Vec<Vec<usize>> = (0..20)
            .map(|q| {
                let k = if q % 2 == 0 {
                    5
                } else {
                    rng.random_range(1..=5)
                };
                let mut set = BTreeSet::new();
                while set.len() < k {
                    set.insert(rng.random_range(0..20));
                }
                set.into_iter().collect()
            })
            .collect();
        five_relevant += relevant.iter().filter(|r| r.len() == 5).count();
        let got = eval::retrieval_from_scores(Direction::AudioToText, &scores, &relevant).unwrap();
        let per_query: Vec<_> = scores
            .iter()
            .zip(&relevant)
            .map(|(row, rel)| brute_force_metrics(row, &rel.iter().copied().collect()))
            .collect();
        for (i, k) in RECALL_KS.iter().enumerate() {
            let r = per_query.iter().filter(|(h, _)| h[i]).count() as f64 / 20.0;
            mismatches += (got.r_at[k] != r) as usize;
        }
        let map = per_query.iter().map(|(_, ap)| ap).sum::<f64>() / 20.0;
        mismatches += (got.map_at_10 != map) as usize;
    }
    let pass = mismatches == 0;
    assert!(report(
        4,
        pass,
        format!(
            "{mismatches} mismatches over 100 matrices ({five_relevant} five-relevant queries)"
        )
    ));
}

struct PresetRun {
    elapsed: Duration,
    inclusion: f64,
    traversal_precision: f64,
    r_at_1: f64,
    gallery: usize,
    uncertainty: UncertaintyReport,
}

struct Fixture {
    full: PresetRun,
    hier: PresetRun,
    baseline: PresetRun,
}

fn fixture_config(preset: &str) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_preset(preset).unwrap();
    cfg.apply(&KeyValues::from_overrides(&FIXTURE_OVERRIDES).unwrap())
        .unwrap();
    cfg
}

fn fixture_dataset() -> HierDataset {
    generate(&GenConfig {
        seed: FIXTURE_DATA_SEED,
        ..GenConfig::default()
    })
    .unwrap()
}

fn run_preset(ds: &HierDataset, preset: &str) -> PresetRun {
    let cfg = fixture_config(preset);
    let start = Instant::now();
    let out = train(ds, &cfg, Some(preset), None).unwrap();
    let elapsed = start.elapsed();
    let model = &out.final_checkpoint.model;
    let split = eval::embed_split(model, ds).unwrap();
    let [a2t, _] = eval::retrieval_task(model, &split).unwrap();
    PresetRun {
        elapsed,
        inclusion: eval::inclusion_task(&split).unwrap(),
        traversal_precision: eval::traversal_task(model, ds, &split, 50)
            .unwrap()
            .precision,
        r_at_1: a2t.r_at[&1],
        gallery: a2t.gallery_size,
        uncertainty: eval::uncertainty_task(model, ds, cfg.levels, &cfg.keep_fractions(), cfg.seed)
            .unwrap(),
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let ds = fixture_dataset();
        Fixture {
            full: run_preset(&ds, "prolap-full"),
            hier: run_preset(&ds, "prolap-hier"),
            baseline: run_preset(&ds, "prolap-baseline"),
        }
    })
}

#[test]
fn c5_inclusion_rate_ordering() {
    let f = fixture();
    let (full, hier, base) = (f.full.inclusion, f.hier.inclusion, f.baseline.inclusion);
    let in_budget = [&f.full, &f.hier, &f.baseline]
        .iter()
        .all(|r| r.elapsed <= RUN_BUDGET);
    let pass = full >= hier && hier >= base && full - base >= 10.0 && in_budget;
    let detail = format!(
        "inclusion rate full {full:.1}% / hier {hier:.1}% / baseline {base:.1}% (full - baseline {:+.1}pp), runs {:.0}s/{:.0}s/{:.0}s",
        full - base,
        f.full.elapsed.as_secs_f64(),
        f.hier.elapsed.as_secs_f64(),
        f.baseline.elapsed.as_secs_f64()
    );
    assert!(report(5, pass, detail));
}

#[test]
fn c6_traversal_precision() {
    let f = fixture();
    let (full, base) = (f.full.traversal_precision, f.baseline.traversal_precision);
    let pass = full > base && f.full.elapsed <= RUN_BUDGET && f.baseline.elapsed <= RUN_BUDGET;
    assert!(report(
        6,
        pass,
        format!("traversal precision full {full:.3} vs baseline {base:.3}")
    ));
}

#[test]
fn c7_uncertainty_ordering() {
    let u = &fixture().full.uncertainty;
    let fmt = |rows: &[eval::ProfileRow<usize>]| {
        rows.iter()
            .map(|r| format!("{:.2}", r.mean_total_variance))
            .collect::<Vec<_>>()
            .join(" > ")
    };
    let pass = UncertaintyReport::mask_ordering_holds(&u.audio_by_mask_level)
        && UncertaintyReport::mask_ordering_holds(&u.text_by_mask_level)
        && UncertaintyReport::non_increasing(&u.text_by_length);
    let detail = format!(
        "audio by mask level [{}], text by mask level [{}], text by length [{}]",
        fmt(&u.audio_by_mask_level),
        fmt(&u.text_by_mask_level),
        fmt(&u.text_by_length)
    );
    assert!(report(7, pass, detail));
}

#[test]
fn c8_retrieval_learnability() {
    let r = &fixture().full;
    let chance = 1.0 / r.gallery as f64;
    let pass = r.r_at_1 >= 10.0 * chance;
    assert!(report(
        8,
        pass,
        format!(
            "audio->text R@1 {:.4} vs 10x chance {:.4}",
            r.r_at_1,
            10.0 * chance
        )
    ));
}

fn run_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != prolap::cli::MANIFEST_FILE)
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn c9_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("dataset.tsv");
    dataset::save(&fixture_dataset(), &data).unwrap();
    let run = |name: &str| {
        let args = TrainArgs {
            data: data.clone(),
            config: None,
            out: tmp.path().join(name),
            preset: Some("prolap-full".into()),
            set: ["seed=2", "batch_size=64", "epochs=3", "deterministic=true"]
                .map(String::from)
                .to_vec(),
            force: false,
        };
        cmd_train(&args, &[]).unwrap();
        run_files(&args.out)
    };
    let (a, b) = (run("a"), run("b"));
    let checkpoints = a.iter().filter(|(n, _)| n.starts_with("ckpt-")).count();
    let has_metrics = a.iter().any(|(n, _)| n == prolap::cli::METRICS_FILE);
    let pass = a == b && checkpoints > 0 && has_metrics;
    let detail = format!(
        "{} checkpoints and {} compared byte for byte",
        checkpoints,
        prolap::cli::METRICS_FILE
    );
    assert!(report(9, pass, detail));
}
