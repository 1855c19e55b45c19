use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prolap::geometry::{inclusion_score, DiagGaussian};

fn prolap(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prolap"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = prolap(args, cwd);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = prolap(args, cwd);
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Small dataset plus a short training run, shared layout for several tests.
fn trained(tmp: &Path, n_items: usize) -> PathBuf {
    let n = format!("n_items={n_items}");
    ok(
        &["gen-data", "--out", "data", "--seed", "4", "--set", &n],
        tmp,
    );
    ok(
        &[
            "train",
            "--data",
            "data",
            "--out",
            "run",
            "--preset",
            "prolap-full",
            "--set",
            "epochs=2",
            "--set",
            "batch_size=16",
            "--set",
            "hidden=16",
        ],
        tmp,
    );
    tmp.join("run/ckpt-epoch-0002.json")
}

fn replay(dir: &Path, cwd: &Path) {
    let m = manifest(dir);
    let argv: Vec<&str> = m["replay"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(argv[0], "prolap");
    ok(&argv[1..], cwd);
}

#[test]
fn gen_data_is_seeded_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(
        &[
            "gen-data",
            "--out",
            "a",
            "--seed",
            "11",
            "--set",
            "n_items=40",
        ],
        t,
    );
    ok(
        &[
            "gen-data",
            "--out",
            "b",
            "--seed",
            "11",
            "--set",
            "n_items=40",
        ],
        t,
    );
    let a = fs::read(t.join("a/dataset.tsv")).unwrap();
    assert_eq!(a, fs::read(t.join("b/dataset.tsv")).unwrap());
    let m = manifest(&t.join("a"));
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seeds"]["dataset"], 11);

    // Replaying from another directory rewrites the same bytes.
    fs::remove_file(t.join("a/dataset.tsv")).unwrap();
    let elsewhere = tempfile::tempdir().unwrap();
    replay(&t.join("a"), elsewhere.path());
    assert_eq!(a, fs::read(t.join("a/dataset.tsv")).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (c, err) = code(&["gen-data", "--out", "x", "--set", "branching=4,0,2,2"], t);
    assert_eq!(c, 1);
    assert!(err.contains("branching"), "{err}");
    let (c, err) = code(&["gen-data", "--out", "x", "--set", "no_such_key=1"], t);
    assert_eq!(c, 1);
    assert!(err.contains("no_such_key"), "{err}");
    assert_eq!(code(&["frobnicate"], t).0, 1);
    assert_eq!(
        code(
            &["train", "--data", "x", "--out", "y", "--preset", "nope"],
            t
        )
        .0,
        1
    );

    ok(&["gen-data", "--out", "d", "--set", "n_items=8"], t);
    let (c, err) = code(&["gen-data", "--out", "d", "--set", "n_items=8"], t);
    assert_eq!(c, 1, "existing output without --force");
    assert!(err.contains("--force"), "{err}");
    ok(
        &["gen-data", "--out", "d", "--set", "n_items=8", "--force"],
        t,
    );
}

#[test]
fn data_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let ckpt = trained(t, 24);
    let ck = ckpt.to_str().unwrap();
    assert_eq!(
        code(&["train", "--data", "missing.tsv", "--out", "o"], t).0,
        2
    );

    fs::write(
        t.join("bad.tsv"),
        "prolap-hier v1\nnode\t0\t-\t0\t0.0\nitem\t0\n",
    )
    .unwrap();
    let (c, err) = code(&["train", "--data", "bad.tsv", "--out", "o"], t);
    assert_eq!(c, 2);
    assert!(err.contains(":3"), "line number in {err}");

    ok(
        &[
            "gen-data",
            "--out",
            "wide",
            "--set",
            "n_items=8",
            "--set",
            "d_in=16",
        ],
        t,
    );
    let (c, err) = code(
        &[
            "eval",
            "--checkpoint",
            ck,
            "--data",
            "wide",
            "--task",
            "retrieval",
            "--out",
            "e",
        ],
        t,
    );
    assert_eq!(c, 2);
    assert!(err.contains("32") && err.contains("16"), "{err}");
}

#[test]
fn numerical_failures_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["gen-data", "--out", "d", "--set", "n_items=32"], t);
    let args = [
        "train",
        "--data",
        "d",
        "--out",
        "o",
        "--set",
        "epochs=2",
        "--set",
        "batch_size=16",
        "--set",
        "max_lr=1e150",
    ];
    let (c, err) = code(&args, t);
    assert_eq!(c, 3, "{err}");
    assert!(err.contains("non-finite"), "{err}");
    assert!(manifest(&t.join("o"))["status"]
        .as_str()
        .unwrap()
        .starts_with("failed"));
}

#[test]
fn train_records_preset_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["gen-data", "--out", "d", "--set", "n_items=32"], t);
    let run = |out: &str| {
        ok(
            &[
                "train",
                "--data",
                "d",
                "--out",
                out,
                "--preset",
                "prolap-baseline",
                "--set",
                "epochs=2",
                "--set",
                "batch_size=8",
            ],
            t,
        )
    };
    run("a");
    run("b");
    let m = manifest(&t.join("a"));
    let w = &m["resolved_config"]["weights"];
    assert_eq!(
        (w["lambda1"].as_f64(), w["lambda2"].as_f64()),
        (Some(0.0), Some(0.0))
    );
    let metrics = fs::read(t.join("a/metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read(t.join("b/metrics.csv")).unwrap());
    let ckpt = fs::read(t.join("a/ckpt-epoch-0002.json")).unwrap();
    assert_eq!(ckpt, fs::read(t.join("b/ckpt-epoch-0002.json")).unwrap());

    // The manifest alone reproduces the run.
    fs::remove_file(t.join("a/metrics.csv")).unwrap();
    replay(&t.join("a"), tempfile::tempdir().unwrap().path());
    assert_eq!(metrics, fs::read(t.join("a/metrics.csv")).unwrap());
    assert_eq!(ckpt, fs::read(t.join("a/ckpt-epoch-0002.json")).unwrap());
}

#[test]
fn zero_epochs_leave_only_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["gen-data", "--out", "d", "--set", "n_items=8"], t);
    ok(
        &["train", "--data", "d", "--out", "o", "--set", "epochs=0"],
        t,
    );
    assert!(t.join("o/ckpt-epoch-0000.json").exists());
    let metrics = fs::read_to_string(t.join("o/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1, "header only: {metrics}");
}

#[test]
fn single_item_retrieval_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let ckpt = trained(t, 16);
    ok(&["gen-data", "--out", "one", "--set", "n_items=1"], t);
    ok(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            "one",
            "--task",
            "retrieval",
            "--out",
            "e",
        ],
        t,
    );
    let csv = fs::read_to_string(t.join("e/retrieval.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[1].starts_with("R@") || f[1] == "mAP@10" {
            assert_eq!(f[2], "1.0", "{line}");
        }
    }
    replay(&t.join("e"), t);
}

/// Hand-built dumps; the expected rate comes from the closed form directly.
#[test]
fn inclusion_from_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let l1 = [
        ([0.0, 0.0], [1.0, 1.0]),
        ([0.0, 0.0], [0.0, 0.0]),
        ([3.0, 0.0], [0.0, 0.0]),
    ];
    let l4 = [
        ([0.0, 0.0], [0.0, 0.0]),
        ([0.0, 0.0], [0.0, 0.0]),
        ([0.0, 0.0], [-1.0, -1.0]),
    ];
    let write = |name: &str, rows: &[([f64; 2], [f64; 2])], level: usize| {
        let text: String = rows
            .iter()
            .enumerate()
            .map(|(i, (mu, lv))| {
                serde_json::json!({"item_id": i, "level": level, "mu": mu, "log_var": lv})
                    .to_string()
                    + "\n"
            })
            .collect();
        fs::write(t.join(name), text).unwrap();
    };
    write("l1.jsonl", &l1, 1);
    write("l4.jsonl", &l4, 4);
    let g = |(mu, lv): &([f64; 2], [f64; 2])| DiagGaussian::new(mu.to_vec(), lv.to_vec()).unwrap();
    let passed = l1
        .iter()
        .zip(&l4)
        .filter(|(a, b)| inclusion_score(&g(b), &g(a)).unwrap() > 0.0)
        .count();
    let expected = 100.0 * passed as f64 / 3.0;

    ok(
        &[
            "eval",
            "--task",
            "inclusion",
            "--level1",
            "l1.jsonl",
            "--level4",
            "l4.jsonl",
            "--out",
            "e",
        ],
        t,
    );
    let csv = fs::read_to_string(t.join("e/inclusion.csv")).unwrap();
    let rate: f64 = csv
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(rate, expected);
    assert_eq!(
        passed, 2,
        "the wide L1 and the far-but-narrow L4 pairs pass, the identical pair fails"
    );
}

#[test]
fn embed_then_evaluate_from_dumps_matches_the_model() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let ckpt = trained(t, 24);
    let ck = ckpt.to_str().unwrap();
    ok(
        &[
            "embed",
            "--checkpoint",
            ck,
            "--data",
            "data",
            "--out",
            "emb",
        ],
        t,
    );
    for name in [
        "audio",
        "text_level1",
        "text_level2",
        "text_level3",
        "text_level4",
    ] {
        let text = fs::read_to_string(t.join(format!("emb/{name}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), 24, "{name}");
    }
    ok(
        &[
            "eval",
            "--checkpoint",
            ck,
            "--data",
            "data",
            "--task",
            "inclusion",
            "--out",
            "m1",
        ],
        t,
    );
    ok(
        &[
            "eval",
            "--task",
            "inclusion",
            "--level1",
            "emb/text_level1.jsonl",
            "--level4",
            "emb/text_level4.jsonl",
            "--out",
            "m2",
        ],
        t,
    );
    assert_eq!(
        fs::read(t.join("m1/inclusion.csv")).unwrap(),
        fs::read(t.join("m2/inclusion.csv")).unwrap()
    );

    ok(
        &[
            "eval",
            "--checkpoint",
            ck,
            "--data",
            "data",
            "--task",
            "retrieval",
            "--out",
            "r1",
        ],
        t,
    );
    ok(
        &[
            "eval",
            "--task",
            "retrieval",
            "--audio-embeds",
            "emb/audio.jsonl",
            "--text-embeds",
            "emb/text_level4.jsonl",
            "--out",
            "r2",
        ],
        t,
    );
    assert_eq!(
        fs::read(t.join("r1/retrieval.csv")).unwrap(),
        fs::read(t.join("r2/retrieval.csv")).unwrap()
    );

    let (c, _) = code(
        &[
            "eval",
            "--task",
            "inclusion",
            "--level1",
            "emb/audio.jsonl",
            "--out",
            "x",
        ],
        t,
    );
    assert_eq!(c, 1, "--level1 without --level4");
}

#[test]
fn traversal_and_uncertainty_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let ckpt = trained(t, 24);
    let ck = ckpt.to_str().unwrap();
    ok(
        &[
            "eval",
            "--checkpoint",
            ck,
            "--data",
            "data",
            "--task",
            "traversal",
            "--out",
            "tr",
        ],
        t,
    );
    let traces = fs::read_to_string(t.join("tr/traversal_traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 24);
    for line in traces.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["trace"].as_array().unwrap().len(), 50);
        let p = v["precision"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
    assert!(t.join("tr/traversal_summary.csv").exists());

    ok(
        &[
            "eval",
            "--checkpoint",
            ck,
            "--data",
            "data",
            "--task",
            "traversal",
            "--n-points",
            "2",
            "--out",
            "tr2",
        ],
        t,
    );
    let first: serde_json::Value = serde_json::from_str(
        fs::read_to_string(t.join("tr2/traversal_traces.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(first["trace"].as_array().unwrap().len(), 2);

    ok(
        &[
            "eval",
            "--checkpoint",
            ck,
            "--data",
            "data",
            "--task",
            "uncertainty",
            "--out",
            "u",
        ],
        t,
    );
    for name in [
        "audio_mask",
        "text_mask",
        "text_caption_level",
        "text_length",
    ] {
        let csv = fs::read_to_string(t.join(format!("u/uncertainty_{name}.csv"))).unwrap();
        assert!(csv.lines().count() >= 2, "{name}: {csv}");
    }
    assert_eq!(
        code(
            &[
                "eval",
                "--checkpoint",
                ck,
                "--data",
                "data",
                "--task",
                "traversal",
                "--n-points",
                "1",
                "--out",
                "z"
            ],
            t
        )
        .0,
        1
    );
}

#[test]
fn gradcheck_command_reports_and_passes() {
    let tmp = tempfile::tempdir().unwrap();
    for module in ["losses", "encoder", "end2end"] {
        let out = ok(
            &[
                "gradcheck",
                "--module",
                module,
                "--trials",
                "10",
                "--seed",
                "1",
            ],
            tmp.path(),
        );
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("PASS"), "{text}");
    }
    assert_eq!(
        code(&["gradcheck", "--module", "optimizer"], tmp.path()).0,
        1
    );
}
