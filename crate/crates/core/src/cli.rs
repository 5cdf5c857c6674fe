//! `ekfac train | bench | verify | inspect`.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or input
//! error, 3 runtime abort.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::bench::{self, Standardizer};
use crate::config::{self, RunConfig};
use crate::error::{Error, Result};
use crate::optim::{ModelPosterior, StepReport};
use crate::verify::{self, Level, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "EKFAC_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const POSTERIOR_FILE: &str = "posterior.json";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const AGGREGATE_FILE: &str = "aggregate.jsonl";
pub const TABLE_FILE: &str = "table.txt";
pub const TIMINGS_FILE: &str = "timings.jsonl";

#[derive(Parser, Debug)]
#[command(
    name = "ekfac",
    version,
    about = "Kronecker-factored natural-gradient variational inference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one optimizer on one split of one data set.
    Train(RunArgs),
    /// Train every configured optimizer on every split and tabulate results.
    Bench(RunArgs),
    /// Run the oracle and property suite.
    Verify(VerifyArgs),
    /// Summarize a run directory or posterior snapshot.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Flat TOML config file.
    #[arg(long)]
    pub config: PathBuf,
    /// KEY=VALUE, applied after the file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for independent splits.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Run directory; defaults to a fresh directory under $EKFAC_OUT_ROOT or ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value = "fast", value_parser = ["fast", "full"])]
    pub level: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate one re-scaling entry before the PSD check.
    #[arg(long)]
    pub corrupt_r: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Run directory or posterior.json.
    pub path: PathBuf,
}

/// Written once per run directory, when the run ends.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: std::collections::BTreeMap<String, Json>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub status: String,
    pub outputs: Vec<String>,
    pub summary: Json,
}

/// Snapshot written by `train`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosteriorSnapshot {
    pub layer_sizes: Vec<usize>,
    pub transform: Standardizer,
    pub posterior: ModelPosterior,
}

pub fn version_string() -> String {
    match option_env!("EKFAC_GIT_DESCRIBE") {
        Some(d) => d.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Failure with an exit code attached.
struct Failure {
    code: i32,
    error: Error,
}

fn config_err(error: Error) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error,
    }
}

fn runtime_err(error: Error) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        error,
    }
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Verify(a) => return cmd_verify(&a),
        Command::Inspect(a) => cmd_inspect(&a.path),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

fn resolve_config(a: &RunArgs) -> std::result::Result<RunConfig, Failure> {
    let table = config::read_table(&a.config).map_err(config_err)?;
    let overrides = a
        .overrides
        .iter()
        .map(|s| config::parse_override(s))
        .collect::<Result<Vec<_>>>()
        .map_err(config_err)?;
    config::resolve(table, &overrides, a.seed, a.config.parent()).map_err(config_err)
}

fn pick_run_dir(out: &Option<PathBuf>, command: &str, cfg: &RunConfig) -> std::result::Result<PathBuf, Failure> {
    let dir = match out {
        Some(d) => d.clone(),
        None => {
            let root = std::env::var_os(OUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
            let stem = format!(
                "{command}-{}-seed{}-{}",
                cfg.bench.train.optimizer,
                cfg.bench.train.seed,
                now_ms()
            );
            let mut dir = root.join(&stem);
            let mut n = 1;
            while dir.exists() {
                dir = root.join(format!("{stem}-{n}"));
                n += 1;
            }
            dir
        }
    };
    if dir.join(MANIFEST_FILE).exists() {
        return Err(config_err(Error::config(
            "out",
            format!("{} already holds a run manifest", dir.display()),
        )));
    }
    fs::create_dir_all(&dir).map_err(|e| config_err(e.into()))?;
    Ok(dir)
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let file = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(dir.join(MANIFEST_FILE))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn jsonl_line(w: &mut impl Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    writeln!(w)?;
    Ok(())
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    iteration: u64,
    elbo: f64,
    ll_term: f64,
    kl_term: f64,
    grad_norms: &'a [f64],
}

impl<'a> From<&'a StepReport> for MetricsLine<'a> {
    fn from(r: &'a StepReport) -> Self {
        MetricsLine {
            iteration: r.iteration,
            elbo: r.elbo,
            ll_term: r.ll_term,
            kl_term: r.kl_term,
            grad_norms: &r.grad_norms,
        }
    }
}

fn cmd_train(a: &RunArgs) -> std::result::Result<(), Failure> {
    let started = now_ms();
    let cfg = resolve_config(a)?;
    let datasets = cfg.load_datasets().map_err(config_err)?;
    let ds = &datasets[0];
    if datasets.len() > 1 {
        log::warn!("train uses only the first data set, `{}`", ds.name);
    }
    let dir = pick_run_dir(&a.out, "train", &cfg)?;
    let optimizer = cfg.bench.train.optimizer;

    let metrics = File::create(dir.join(METRICS_FILE)).map_err(|e| runtime_err(e.into()))?;
    let mut metrics = BufWriter::new(metrics);
    let mut write_err = None;
    let outcome = bench::train_split(&cfg.bench, ds, optimizer, cfg.split_index, |r| {
        if write_err.is_none() {
            if let Err(e) = jsonl_line(&mut metrics, &MetricsLine::from(r)) {
                write_err = Some(e);
            }
        }
    });
    metrics.flush().map_err(|e| runtime_err(e.into()))?;
    if let Some(e) = write_err {
        return Err(runtime_err(e));
    }

    let mut outputs = vec![METRICS_FILE.to_string()];
    let (status, summary, failure) = match outcome {
        Ok(run) => {
            let snapshot = PosteriorSnapshot {
                layer_sizes: cfg.bench.layer_sizes(ds.dim()),
                transform: run.split.transform.clone(),
                posterior: run.trainer.posterior().map_err(runtime_err)?,
            };
            let file = File::create(dir.join(POSTERIOR_FILE)).map_err(|e| runtime_err(e.into()))?;
            serde_json::to_writer(BufWriter::new(file), &snapshot).map_err(|e| runtime_err(e.into()))?;
            outputs.push(POSTERIOR_FILE.to_string());
            let summary = json!({
                "dataset": ds.name,
                "optimizer": optimizer.name(),
                "iterations": run.trainer.iteration(),
                "final_elbo": run.final_elbo,
                "test_rmse": run.metrics.rmse,
                "test_ll": run.metrics.test_ll,
                "noise_precision": run.trainer.noise().precision(),
            });
            println!(
                "{} on {}: {} iterations, final ELBO {:.4}, test RMSE {:.4}, test LL {:.4}",
                optimizer,
                ds.name,
                run.trainer.iteration(),
                run.final_elbo,
                run.metrics.rmse,
                run.metrics.test_ll
            );
            ("ok", summary, None)
        }
        Err(e) => ("aborted", json!({ "error": e.to_string() }), Some(e)),
    };
    let manifest = RunManifest {
        command: "train".into(),
        version: version_string(),
        seed: cfg.bench.train.seed,
        config: cfg.snapshot(),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        status: status.into(),
        outputs,
        summary,
    };
    write_manifest(&dir, &manifest).map_err(runtime_err)?;
    println!("run directory: {}", dir.display());
    match failure {
        Some(e) => Err(runtime_err(e)),
        None => Ok(()),
    }
}

fn cmd_bench(a: &RunArgs) -> std::result::Result<(), Failure> {
    let started = now_ms();
    let cfg = resolve_config(a)?;
    let datasets = cfg.load_datasets().map_err(config_err)?;
    let dir = pick_run_dir(&a.out, "bench", &cfg)?;
    let result = bench::run_benchmark(&cfg.bench, &datasets, &cfg.optimizers, a.jobs).map_err(|e| match e {
        Error::Config { .. } | Error::InvalidArgument(_) => config_err(e),
        other => runtime_err(other),
    })?;

    let write_all = || -> Result<()> {
        let mut results = BufWriter::new(File::create(dir.join(RESULTS_FILE))?);
        let mut timings = BufWriter::new(File::create(dir.join(TIMINGS_FILE))?);
        for r in &result.records {
            jsonl_line(&mut results, r)?;
            jsonl_line(
                &mut timings,
                &json!({
                    "dataset": r.dataset,
                    "optimizer": r.optimizer,
                    "split": r.split,
                    "wall_clock_s": r.wall_clock_s,
                }),
            )?;
        }
        results.flush()?;
        timings.flush()?;
        let mut agg = BufWriter::new(File::create(dir.join(AGGREGATE_FILE))?);
        for a in &result.aggregates {
            jsonl_line(&mut agg, a)?;
        }
        agg.flush()?;
        fs::write(dir.join(TABLE_FILE), bench::render_table(&result.aggregates))?;
        Ok(())
    };
    write_all().map_err(runtime_err)?;
    print!("{}", bench::render_table(&result.aggregates));

    let failed = result.records.iter().filter(|r| !r.is_ok()).count();
    let manifest = RunManifest {
        command: "bench".into(),
        version: version_string(),
        seed: cfg.bench.train.seed,
        config: cfg.snapshot(),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        status: if failed == 0 {
            "ok".into()
        } else {
            format!("{failed} splits failed")
        },
        outputs: [RESULTS_FILE, AGGREGATE_FILE, TABLE_FILE, TIMINGS_FILE]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        summary: serde_json::to_value(&result.aggregates).map_err(|e| runtime_err(e.into()))?,
    };
    write_manifest(&dir, &manifest).map_err(runtime_err)?;
    println!("run directory: {}", dir.display());
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> i32 {
    let level: Level = match a.level.parse() {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let opts = VerifyOptions {
        level,
        seed: a.seed,
        corrupt_r: a.corrupt_r,
    };
    let checks = verify::run(opts, |c| println!("{c}"));
    let failures: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failures.is_empty() {
        println!("all {} properties passed", checks.len());
        EXIT_OK
    } else {
        println!("FAILED: {}", failures.join(", "));
        EXIT_VERIFY_FAILED
    }
}

fn summarize(values: &[f64]) -> (f64, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    (min, mean, max)
}

fn cmd_inspect(path: &Path) -> std::result::Result<(), Failure> {
    let read_json = |p: &Path| -> Result<Json> {
        let text = fs::read_to_string(p)?;
        Ok(serde_json::from_str(&text)?)
    };
    let posterior_path = if path.is_dir() {
        let manifest_path = path.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let m: RunManifest = serde_json::from_value(read_json(&manifest_path).map_err(config_err)?)
                .map_err(|e| config_err(e.into()))?;
            println!("command   {}", m.command);
            println!("version   {}", m.version);
            println!("seed      {}", m.seed);
            println!("status    {}", m.status);
            println!("optimizer {}", m.config.get("optimizer").cloned().unwrap_or(Json::Null));
            println!("summary   {}", m.summary);
        }
        path.join(POSTERIOR_FILE)
    } else {
        path.to_path_buf()
    };
    if !posterior_path.exists() {
        if path.is_dir() {
            return Ok(());
        }
        return Err(config_err(Error::config(
            "path",
            format!("{} does not exist", posterior_path.display()),
        )));
    }
    let snap: PosteriorSnapshot =
        serde_json::from_value(read_json(&posterior_path).map_err(config_err)?).map_err(|e| config_err(e.into()))?;
    let post = &snap.posterior;
    println!("layers    {:?}", snap.layer_sizes);
    println!(
        "noise     precision {:.4} (shape {:.2}, rate {:.4})",
        post.noise.precision(),
        post.noise.shape,
        post.noise.rate
    );
    println!("prior     eta {} lambda {}", post.eta, post.lambda);
    println!(
        "{:<5} {:<6} {:>9} {:>11} {:>11} {:>11} {:>11} {:>11}",
        "layer", "family", "shape", "|mean|_F", "var min", "var mean", "var max", "KL"
    );
    for (l, layer) in post.layers.iter().enumerate() {
        let mean = layer.mean();
        let var = layer.marginal_variances().map_err(runtime_err)?;
        let (lo, avg, hi) = summarize(var.as_slice());
        let kl = layer.kl_to_spherical_prior(post.eta).map_err(runtime_err)?;
        println!(
            "{:<5} {:<6} {:>9} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e}",
            l,
            layer.family(),
            format!("{}x{}", mean.rows(), mean.cols()),
            mean.frobenius_norm(),
            lo,
            avg,
            hi,
            kl
        );
    }
    Ok(())
}
