use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const ODP: &str = env!("CARGO_BIN_EXE_odp");

fn odp(args: &[&str]) -> Output {
    Command::new(ODP).args(args).env_remove("ODP_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn without_timestamp(text: &str) -> String {
    text.lines()
        .filter(|l| !l.contains("\"generated_at\""))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Closed-form LSTM-with-projection size: four gates over input and
/// recurrent projection, gate biases, and the projection matrix.
fn lstm_params(input: usize, hidden: usize, proj: usize) -> usize {
    4 * hidden * (input + proj) + 4 * hidden + hidden * proj
}

#[test]
fn schedule_matches_golden_and_writes_file() {
    let golden =
        fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/schedule_nw6_ns2_b3_es2.csv"))
            .unwrap();
    let o = odp(&[
        "schedule", "--nw", "6", "--ns", "2", "--b", "3", "--es", "2", "--total", "10",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), golden);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let o = odp(&[
        "schedule",
        "--nw",
        "6",
        "--ns",
        "2",
        "--b",
        "3",
        "--es",
        "2",
        "--total",
        "10",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    assert_eq!(fs::read_to_string(&path).unwrap(), golden);
}

#[test]
fn schedule_errors_exit_with_code_2() {
    let o = odp(&[
        "schedule", "--nw", "6", "--ns", "0", "--b", "3", "--es", "2", "--total", "10",
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = odp(&[
        "schedule", "--nw", "6", "--ns", "2", "--b", "3", "--es", "2", "--total", "5",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("window never fills"), "{}", stderr(&o));

    let o = odp(&[
        "schedule", "--nw", "6", "--ns", "7", "--b", "3", "--es", "2", "--total", "20",
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = odp(&[
        "schedule",
        "--nw",
        "6",
        "--ns",
        "2",
        "--b",
        "3",
        "--es",
        "2",
        "--total",
        "5",
        "--allow-partial",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 5);
}

#[test]
fn shuffled_schedule_is_reproducible() {
    let args = [
        "schedule",
        "--nw",
        "8",
        "--ns",
        "4",
        "--b",
        "3",
        "--es",
        "2",
        "--total",
        "20",
        "--shuffle-seed",
        "5",
    ];
    let a = odp(&args);
    let b = odp(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn count_params_tiny_matches_closed_form() {
    let o = odp(&["count-params", "--preset", "tiny", "--format", "json", "--per-layer"]);
    assert_eq!(o.status.code(), Some(0));
    let doc: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let rows: Vec<(String, u64)> = doc["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["group"].as_str().unwrap().to_string(), r["params"].as_u64().unwrap()))
        .collect();

    // tiny: 12 stacked input features, hidden 32, projection 16, the second
    // layer sees two stacked projections, 8 graphemes plus blank.
    let (h, p) = (32, 16);
    let enc = [
        lstm_params(12, h, p),
        lstm_params(2 * p, h, p),
        lstm_params(p, h, p),
        lstm_params(p, h, p),
    ];
    let lm = lstm_params(9, h, p) + lstm_params(p, h, p);
    let joint = (p * 16 + p * 16 + 16) + (16 * 9 + 9);
    let expected = [
        ("Joint", joint),
        ("LM", lm),
        ("Decoder", lm + joint),
        ("Encoder 3", enc[3]),
        ("Encoder 2-3", enc[2] + enc[3]),
        ("Encoder 1-3", enc[1..].iter().sum()),
        ("Encoder 0-3", enc.iter().sum()),
        ("All", enc.iter().sum::<usize>() + lm + joint),
    ];
    assert_eq!(rows.len(), expected.len());
    for ((name, n), (want_name, want)) in rows.iter().zip(expected) {
        assert_eq!(name, want_name);
        assert_eq!(*n as usize, want, "{name}");
    }
    let layers: Vec<usize> = doc["per_layer"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap() as usize)
        .collect();
    assert_eq!(layers, enc);
}

#[test]
fn count_params_single_group_and_unknown_group() {
    let o = odp(&["count-params", "--group", "Encoder 4-7", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("Encoder 4-7,"));

    let o = odp(&["count-params", "--group", "Encoder 12"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in ["Joint", "LM", "Decoder", "Encoder 7", "Encoder 0-7", "All"] {
        assert!(err.contains(name), "{err}");
    }

    let o = odp(&["count-params", "--preset", "huge"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn count_params_reads_model_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    fs::write(
        &path,
        r#"{"input_dim": 12, "enc_layers": 2, "lm_layers": 1, "lstm_hidden": 8, "lstm_proj": 4,
            "mid_stack_after_layer": 1, "mid_stack_stride": 2, "vocab": 5, "joint_hidden": 6}"#,
    )
    .unwrap();
    let o = odp(&[
        "count-params",
        "--config",
        path.to_str().unwrap(),
        "--group",
        "All",
        "--format",
        "json",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let enc = lstm_params(12, 8, 4) + lstm_params(8, 8, 4);
    let lm = lstm_params(6, 8, 4);
    let joint = (4 * 6 + 4 * 6 + 6) + (6 * 6 + 6);
    assert_eq!(doc["rows"][0]["params"].as_u64().unwrap() as usize, enc + lm + joint);

    fs::write(&path, r#"{"input_dim": 12}"#).unwrap();
    let o = odp(&["count-params", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_boundary_zero_is_trivial() {
    let o = odp(&["bench", "--preset", "tiny", "--boundary", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["reduction_ratio"].as_f64(), Some(0.0));
    assert_eq!(r["max_grad_rel_diff"].as_f64(), Some(0.0));
    assert_eq!(r["extra_forward_ops"].as_u64(), Some(0));
    assert_eq!(r["bit_exact"].as_bool(), Some(true));
}

#[test]
fn bench_report_is_deterministic_and_reports_reduction() {
    let a = odp(&["bench", "--boundary", "4", "--seed", "3"]);
    let b = odp(&["bench", "--boundary", "4", "--seed", "3"]);
    assert_eq!(a.status.code(), Some(0));
    let (ta, tb) = (stdout(&a), stdout(&b));
    assert_eq!(without_timestamp(&ta), without_timestamp(&tb));
    assert_eq!(ta.lines().filter(|l| l.contains("generated_at")).count(), 1);

    let r: Value = serde_json::from_str(&ta).unwrap();
    assert!(r["combined_peak_bytes"].as_u64().unwrap() > 0);
    let peaks = r["split_phase_peaks"].as_object().unwrap();
    assert_eq!(peaks.len(), 3);
    let max_split = peaks.values().map(|v| v.as_u64().unwrap()).max().unwrap();
    assert!(max_split < r["combined_peak_bytes"].as_u64().unwrap());
    assert!(r["reduction_ratio"].as_f64().unwrap() > 0.0);
    assert_eq!(r["max_grad_rel_diff"].as_f64(), Some(0.0));
    assert_eq!(r["seed"].as_u64(), Some(3));
}

#[test]
fn bench_rejects_bad_boundary_and_group() {
    assert_eq!(
        odp(&["bench", "--preset", "tiny", "--boundary", "9"]).status.code(),
        Some(2)
    );
    assert_eq!(odp(&["bench", "--group", "Encoder 99"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let o = odp(&["gradcheck", "--op-instances", "5", "--rnnt-instances", "50"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let verdict = text.lines().last().unwrap();
    assert!(verdict.starts_with("PASS max rel err"), "{verdict}");
    let err: f64 = verdict.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err <= 1e-4);
}

fn write_run_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.json");
    let text = format!(
        r#"{{
  "cache": {{"window": 10, "shift": 5, "batch_size": 5, "epochs_per_session": 1}},
  "group": "Encoder 1-end",
  "seeds": [0, 1],
  "output_dir": "out",
  "pretrain": {{"epochs": 1, "batch_size": 4, "optimizer": {{"lr": 0.03, "momentum": 0.9}}, "shuffle_seed": 0, "clip_norm": 1.0}},
  "pretrain_examples": 8,
  "personal_examples": 20,
  "eval_examples": 4{extra}
}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_with_zero_lr_gives_flat_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run_config(dir.path(), r#", "optimizer": {"lr": 0.0, "momentum": 0.9}"#);
    let o = odp(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let out = dir.path().join("out");
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    for seed in [0, 1] {
        let seed_dir = out.join(format!("seed-{seed}"));
        let lines: Vec<Value> = fs::read_to_string(seed_dir.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        let initial = summary["seeds"][seed]["initial"]["heldout_loss"].as_f64().unwrap();
        for l in &lines {
            assert_eq!(l["heldout_loss"].as_f64().unwrap(), initial);
        }
        assert_eq!(
            fs::read(seed_dir.join("base.ckpt")).unwrap(),
            fs::read(seed_dir.join("personalized.ckpt")).unwrap()
        );
        assert!(seed_dir.join("metrics.csv").is_file());
        assert!(seed_dir.join("pretrain.csv").is_file());
    }
}

#[test]
fn train_is_deterministic_across_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run_config(
        dir.path(),
        r#", "split_boundary": 2, "optimizer": {"lr": 0.01, "momentum": 0.9}"#,
    );
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(
        odp(&["train", "--config", cfg, "--out", a.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        odp(&["train", "--config", cfg, "--out", b.to_str().unwrap(), "--jobs", "2"])
            .status
            .code(),
        Some(0)
    );
    for file in [
        "metrics.jsonl",
        "metrics.csv",
        "pretrain.csv",
        "base.ckpt",
        "personalized.ckpt",
    ] {
        for seed in [0, 1] {
            let rel = format!("seed-{seed}/{file}");
            assert_eq!(
                fs::read(a.join(&rel)).unwrap(),
                fs::read(b.join(&rel)).unwrap(),
                "{rel}"
            );
        }
    }
    let sa: Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    let sb: Value = serde_json::from_str(&fs::read_to_string(b.join("summary.json")).unwrap()).unwrap();
    assert_eq!(sa["seeds"], sb["seeds"]);
}

#[test]
fn seed_env_overrides_config_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run_config(dir.path(), "");
    let o = Command::new(ODP)
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("ODP_SEED", "7")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert!(out.join("seed-7").is_dir());
    assert!(!out.join("seed-0").exists());

    let o = Command::new(ODP)
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("ODP_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.json");
    assert_eq!(
        odp(&["train", "--config", missing.to_str().unwrap()]).status.code(),
        Some(2)
    );

    let cfg = write_run_config(dir.path(), r#", "base_checkpoint": "missing.ckpt""#);
    let o = odp(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.ckpt"));

    let cfg = write_run_config(dir.path(), r#", "unknown_field": 1"#);
    assert_eq!(
        odp(&["train", "--config", cfg.to_str().unwrap()]).status.code(),
        Some(2)
    );

    let cfg = write_run_config(dir.path(), "");
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"").unwrap();
    let o = odp(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        blocker.join("sub").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not writable"), "{}", stderr(&o));
}

#[test]
fn train_runtime_io_failure_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run_config(dir.path(), "");
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("seed-0"), b"in the way").unwrap();
    let o = odp(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_resumes_from_base_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run_config(dir.path(), "");
    assert_eq!(
        odp(&["train", "--config", cfg.to_str().unwrap()]).status.code(),
        Some(0)
    );
    let base = dir.path().join("out/seed-0/base.ckpt");
    let first = fs::read(dir.path().join("out/seed-0/metrics.jsonl")).unwrap();

    let cfg = write_run_config(dir.path(), &format!(r#", "base_checkpoint": "{}""#, base.display()));
    let again = dir.path().join("again");
    let o = Command::new(ODP)
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            again.to_str().unwrap(),
        ])
        .env("ODP_SEED", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(again.join("seed-0/metrics.jsonl")).unwrap(), first);
    assert!(!again.join("seed-0/pretrain.csv").exists());
}

#[test]
fn bench_reads_run_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run_config(dir.path(), r#", "split_boundary": 3"#);
    let o = odp(&["bench", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["boundary"].as_u64(), Some(3));
    assert_eq!(r["batch_size"].as_u64(), Some(5));
    assert_eq!(r["group"].as_str(), Some("Encoder 1-end"));
    assert_eq!(r["seed"].as_u64(), Some(0));
    assert_eq!(r["bit_exact"].as_bool(), Some(true));
}

#[test]
fn usage_errors_exit_with_code_2() {
    assert_eq!(odp(&[]).status.code(), Some(2));
    assert_eq!(odp(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(odp(&["train"]).status.code(), Some(2));
    assert_eq!(odp(&["--help"]).status.code(), Some(0));
}
