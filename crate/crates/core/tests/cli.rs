use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn ekfac(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ekfac"))
        .args(args)
        .current_dir(cwd)
        .env("EKFAC_OUT_ROOT", cwd.join("runs"))
        .output()
        .expect("spawn ekfac")
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

fn write_config(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const SMOKE: &str = "dataset = \"synthetic-teacher\"\nlambda = 1.0\nalpha = 0.05\nepochs = 2\n";

#[test]
fn missing_lambda_is_a_config_error_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.toml", "dataset = \"synthetic-teacher\"\nepochs = 1\n");
    let out = ekfac(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    assert!(text(&out).contains("lambda"), "{}", text(&out));
}

#[test]
fn invalid_value_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.toml", "lambda = 1.0\nbatch_size = 0\n");
    let out = ekfac(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    assert!(text(&out).contains("batch_size"), "{}", text(&out));
}

#[test]
fn smoke_train_writes_metrics_posterior_and_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.toml", SMOKE);
    let run = dir.path().join("run");
    let out = ekfac(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));

    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.len() >= 50, "{} lines", lines.len());
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["iteration"].as_u64(), Some(i as u64 + 1));
        for key in ["elbo", "ll_term", "kl_term"] {
            assert!(l[key].as_f64().unwrap().is_finite(), "{key} at line {i}");
        }
    }

    let m = manifest(&run);
    assert_eq!(m["command"], "train");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["config"]["lambda"], 1.0);
    assert!(m["finished_unix_ms"].as_u64() >= m["started_unix_ms"].as_u64());
    assert!(run.join("posterior.json").exists());

    let inspected = ekfac(&["inspect", run.to_str().unwrap()], dir.path());
    assert_eq!(inspected.status.code(), Some(0), "{}", text(&inspected));
    let shown = text(&inspected);
    assert!(shown.contains("emvg") && shown.contains("layers"), "{shown}");
}

#[test]
fn override_takes_precedence_over_file_and_default() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "c.toml",
        "dataset = \"synthetic-teacher\"\nlambda = 1.0\nepochs = 1\nalpha = 0.2\nbeta = 0.005\n",
    );
    let run = dir.path().join("run");
    let out = ekfac(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--override",
            "alpha=0.01",
            "--out",
            run.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let m = manifest(&run);
    assert_eq!(m["config"]["alpha"], 0.01);
    assert_eq!(m["config"]["beta"], 0.005);
    assert_eq!(m["config"]["omega"], 0.01);
}

#[test]
fn existing_run_directory_is_refused() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.toml", SMOKE);
    let run = dir.path().join("run");
    let args = [
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ];
    assert_eq!(ekfac(&args, dir.path()).status.code(), Some(0));
    let before = fs::read(run.join("manifest.json")).unwrap();
    let again = ekfac(&args, dir.path());
    assert_eq!(again.status.code(), Some(2), "{}", text(&again));
    assert_eq!(fs::read(run.join("manifest.json")).unwrap(), before);
}

#[test]
fn default_run_directory_lives_under_the_output_root() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.toml", SMOKE);
    let out = ekfac(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].as_ref().unwrap().path().join("manifest.json").exists());
}

#[test]
fn two_optimizer_bench_is_a_two_row_table_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "b.toml",
        "dataset = \"synthetic-teacher\"\nlambda = 1.0\noptimizers = [\"noisy-ekfac\", \"noisy-kfac\"]\nrepeats = 2\nn_mc = 20\n",
    );
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let out = ekfac(
            &[
                "bench",
                "--config",
                cfg.to_str().unwrap(),
                "--seed",
                "3",
                "--jobs",
                "2",
                "--out",
                run.to_str().unwrap(),
            ],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0), "{}", text(&out));
        dirs.push(run);
    }

    let table = fs::read_to_string(dirs[0].join("table.txt")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| l.contains("synthetic-teacher")).collect();
    assert_eq!(rows.len(), 2, "{table}");
    assert!(
        rows[0].contains("noisy-ekfac") && rows[1].contains("noisy-kfac"),
        "{table}"
    );

    for file in ["results.jsonl", "aggregate.jsonl", "table.txt"] {
        assert_eq!(
            fs::read(dirs[0].join(file)).unwrap(),
            fs::read(dirs[1].join(file)).unwrap(),
            "{file}"
        );
    }

    let agg: Vec<Value> = fs::read_to_string(dirs[0].join("aggregate.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let elbo = |i: usize| agg[i]["final_elbo"]["mean"].as_f64().unwrap();
    assert!(elbo(0) >= elbo(1), "noisy-ekfac {} < noisy-kfac {}", elbo(0), elbo(1));
}

#[test]
fn bench_rejects_tiny_data_sets() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("tiny.data");
    fs::write(&data, (0..10).map(|i| format!("{i} {}\n", 2 * i)).collect::<String>()).unwrap();
    let cfg = write_config(
        &dir,
        "b.toml",
        &format!("dataset = {:?}\nlambda = 1.0\n", data.to_str().unwrap()),
    );
    let out = ekfac(&["bench", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
}

#[test]
fn verify_fast_passes_and_corrupted_r_fails_psd() {
    let dir = TempDir::new().unwrap();
    let ok = ekfac(&["verify", "--level", "fast"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", text(&ok));
    let shown = text(&ok);
    for name in [
        "kronecker-matvec",
        "frobenius-optimality",
        "sampling-covariance",
        "kl-dense-oracle",
        "gradient-finite-difference",
    ] {
        assert!(shown.contains(&format!("PASS {name}")), "{name}: {shown}");
    }

    let bad = ekfac(&["verify", "--level", "fast", "--corrupt-r"], dir.path());
    assert_eq!(bad.status.code(), Some(1), "{}", text(&bad));
    let shown = text(&bad);
    assert!(shown.contains("FAIL posterior-psd"), "{shown}");
    assert!(shown.contains("FAILED: posterior-psd"), "{shown}");
}

#[test]
fn unknown_subcommand_and_bad_level_exit_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(ekfac(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(
        ekfac(&["verify", "--level", "medium"], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn inspect_missing_path_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = ekfac(&["inspect", "no-such-posterior.json"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
}
