//! Regression benchmarking on delimited-text data sets: loading, 90/10 splits,
//! standardization, training, evaluation and mean ± standard-error tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nn::{self, Network, Targets, Task};
use crate::optim::{ModelPosterior, OptimizerKind, TrainConfig, Trainer};

/// Smallest data set the benchmark will split.
pub const MIN_BENCH_ROWS: usize = 20;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const INIT_STREAM: u64 = 0x696e_6974;
const EVAL_STREAM: u64 = 0x6576_616c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub features: Mat,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Mat, targets: Vec<f64>) -> Result<Self> {
        if features.rows() != targets.len() {
            return Err(Error::dims("Dataset::new", features.rows(), targets.len()));
        }
        features.ensure_finite("dataset features")?;
        if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("dataset target in row {}", i + 1)));
        }
        Ok(Dataset {
            name: name.into(),
            features,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows reordered so that new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.select_rows(perm),
            targets: perm.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    /// Any run of spaces or tabs.
    Whitespace,
    Char(char),
}

impl Delimiter {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "whitespace" | " " => Ok(Delimiter::Whitespace),
            "tab" | "\t" => Ok(Delimiter::Char('\t')),
            "comma" => Ok(Delimiter::Char(',')),
            _ => {
                let mut chars = s.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => Ok(Delimiter::Char(c)),
                    _ => Err(Error::config(
                        "delimiter",
                        format!("expected one character or `whitespace`, got `{s}`"),
                    )),
                }
            }
        }
    }

    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Whitespace => line.split_whitespace().collect(),
            Delimiter::Char(c) => line.split(*c).map(str::trim).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub delimiter: Delimiter,
    /// Zero-based target column; `None` means the last column.
    pub target_column: Option<usize>,
    pub has_header: bool,
}

impl Default for DatasetSchema {
    fn default() -> Self {
        DatasetSchema {
            delimiter: Delimiter::Whitespace,
            target_column: None,
            has_header: false,
        }
    }
}

/// Reads a delimited text file. Blank lines and lines starting with `#` are
/// skipped. Row numbers in errors are 1-based file line numbers.
pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_dataset(&name, &text, schema)
}

pub fn parse_dataset(name: &str, text: &str, schema: &DatasetSchema) -> Result<Dataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    let mut header_skipped = !schema.has_header;
    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !header_skipped {
            header_skipped = true;
            continue;
        }
        let fields = schema.delimiter.split(trimmed);
        if let Some(w) = width {
            if fields.len() != w {
                return Err(Error::Parse {
                    row,
                    column: fields.len().min(w) + 1,
                    message: format!("expected {w} fields, found {}", fields.len()),
                });
            }
        } else {
            if fields.len() < 2 {
                return Err(Error::Parse {
                    row,
                    column: 1,
                    message: "need at least one feature and a target".into(),
                });
            }
            width = Some(fields.len());
        }
        let values = fields
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let missing = || Error::Parse {
                    row,
                    column: j + 1,
                    message: format!("missing or non-finite value `{f}`"),
                };
                if f.is_empty() || *f == "?" || f.eq_ignore_ascii_case("na") {
                    return Err(missing());
                }
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    row,
                    column: j + 1,
                    message: format!("cannot parse `{f}` as a number"),
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(missing())
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(values);
    }
    let width = width.ok_or_else(|| Error::Parse {
        row: 0,
        column: 0,
        message: "no data rows".into(),
    })?;
    let target = schema.target_column.unwrap_or(width - 1);
    if target >= width {
        return Err(Error::config(
            "target_column",
            format!("column {target} out of range for {width} columns"),
        ));
    }
    let targets = rows.iter().map(|r| r[target]).collect();
    let features = Mat::from_fn(rows.len(), width - 1, |i, j| {
        rows[i][if j < target { j } else { j + 1 }]
    });
    Dataset::new(name, features, targets)
}

/// Writes features then target per row, in shortest round-trip notation.
pub fn write_dataset(path: &Path, ds: &Dataset, delimiter: Delimiter) -> Result<()> {
    let sep = match delimiter {
        Delimiter::Whitespace => ' ',
        Delimiter::Char(c) => c,
    };
    let mut out = String::new();
    for i in 0..ds.len() {
        for v in ds.features.row(i) {
            let _ = write!(out, "{v:?}{sep}");
        }
        let _ = writeln!(out, "{:?}", ds.targets[i]);
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.9,
            repeats: 10,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(
                "train_fraction",
                format!("must lie in (0, 1), got {}", self.train_fraction),
            ));
        }
        if self.repeats < 1 {
            return Err(Error::config("repeats", "must be at least 1"));
        }
        Ok(())
    }

    pub fn train_size(&self, n: usize) -> usize {
        ((self.train_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
    }

    /// Train and test indices of split `repeat`, each sorted ascending.
    pub fn indices(&self, n: usize, repeat: usize) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(repeat as u64);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let cut = self.train_size(n);
        let mut train = perm[..cut].to_vec();
        let mut test = perm[cut..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        (train, test)
    }
}

/// Affine maps fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Standardizer {
    pub fn fit(features: &Mat, targets: &[f64]) -> Self {
        let mut x_mean = Vec::with_capacity(features.cols());
        let mut x_std = Vec::with_capacity(features.cols());
        for j in 0..features.cols() {
            let (m, s) = mean_std((0..features.rows()).map(|i| features[(i, j)]));
            x_mean.push(m);
            if s > 0.0 {
                x_std.push(s);
            } else {
                log::warn!("feature {j} has zero variance on the training split; centering only");
                x_std.push(1.0);
            }
        }
        let (y_mean, mut y_std) = mean_std(targets.iter().copied());
        if y_std.is_nan() || y_std <= 0.0 {
            log::warn!("training targets have zero variance; centering only");
            y_std = 1.0;
        }
        Standardizer {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn transform_features(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_std[j])
    }

    pub fn transform_targets(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_std).collect()
    }

    pub fn inverse_targets(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.y_std + self.y_mean).collect()
    }
}

#[derive(Clone, Debug)]
pub struct NormalizedSplit {
    pub train_x: Mat,
    /// Standardized training targets, `N_train × 1`.
    pub train_y: Mat,
    pub test_x: Mat,
    /// Raw test targets.
    pub test_y: Vec<f64>,
    pub transform: Standardizer,
}

pub fn normalize_split(ds: &Dataset, train: &[usize], test: &[usize]) -> Result<NormalizedSplit> {
    let n = ds.len();
    let mut seen = vec![false; n];
    for &i in train.iter().chain(test) {
        if i >= n || seen[i] {
            return Err(Error::InvalidArgument(format!(
                "split indices must be disjoint and within 0..{n}; offending index {i}"
            )));
        }
        seen[i] = true;
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let raw_train_x = ds.features.select_rows(train);
    let raw_train_y: Vec<f64> = train.iter().map(|&i| ds.targets[i]).collect();
    let transform = Standardizer::fit(&raw_train_x, &raw_train_y);
    let train_y = transform.transform_targets(&raw_train_y);
    Ok(NormalizedSplit {
        train_x: transform.transform_features(&raw_train_x),
        train_y: Mat::from_vec(train_y.len(), 1, train_y)?,
        test_x: transform.transform_features(&ds.features.select_rows(test)),
        test_y: test.iter().map(|&i| ds.targets[i]).collect(),
        transform,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub rmse: f64,
    /// Mean per-point predictive log-likelihood in original target units.
    pub test_ll: f64,
}

fn log_mean_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + (values.iter().map(|v| (v - m).exp()).sum::<f64>() / values.len() as f64).ln()
}

/// RMSE of the de-standardized posterior-mean prediction and the posterior
/// predictive log-likelihood, estimated with `n_mc` weight samples.
pub fn evaluate<R: Rng + ?Sized>(
    post: &ModelPosterior,
    test_x: &Mat,
    test_y: &[f64],
    transform: &Standardizer,
    n_mc: usize,
    rng: &mut R,
) -> Result<TestMetrics> {
    if n_mc < 1 {
        return Err(Error::InvalidArgument("n_mc must be at least 1".into()));
    }
    if post.task != Task::Regression {
        return Err(Error::InvalidArgument("evaluate expects a regression posterior".into()));
    }
    let n = test_y.len();
    if n == 0 || test_x.rows() != n {
        return Err(Error::dims("evaluate", test_x.rows(), n));
    }
    let mean_w = post.mean_weights();
    let refs: Vec<&Mat> = mean_w.iter().collect();
    let pred = transform.inverse_targets(&nn::predict_with(&refs, test_x)?.col(0));
    let rmse = (pred.iter().zip(test_y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n as f64).sqrt();

    let tau = post.noise.precision();
    let y_std_space = transform.transform_targets(test_y);
    let mut per_point = vec![Vec::with_capacity(n_mc); n];
    for _ in 0..n_mc {
        let w = post.sample_weights(rng)?;
        let refs: Vec<&Mat> = w.iter().collect();
        let p = nn::predict_with(&refs, test_x)?;
        for (i, lls) in per_point.iter_mut().enumerate() {
            let r = y_std_space[i] - p[(i, 0)];
            lls.push(0.5 * (tau.ln() - LN_2PI) - 0.5 * tau * r * r);
        }
    }
    let ln_scale = transform.y_std.ln();
    let test_ll = per_point.iter().map(|lls| log_mean_exp(lls) - ln_scale).sum::<f64>() / n as f64;
    Ok(TestMetrics { rmse, test_ll })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub train: TrainConfig,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub split: SplitSpec,
    /// Posterior samples for the test log-likelihood.
    pub n_mc: usize,
    /// Posterior samples for the final training-set ELBO.
    pub elbo_samples: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            train: TrainConfig::default(),
            hidden: vec![50],
            split: SplitSpec::default(),
            n_mc: 100,
            elbo_samples: 10,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.split.validate()?;
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        if self.n_mc < 1 {
            return Err(Error::config("n_mc", "must be at least 1"));
        }
        if self.elbo_samples < 1 {
            return Err(Error::config("elbo_samples", "must be at least 1"));
        }
        Ok(())
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(1);
        sizes
    }
}

/// Outcome of training and evaluating one optimizer on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub dataset: String,
    pub optimizer: OptimizerKind,
    pub split: usize,
    pub rmse: Option<f64>,
    pub test_ll: Option<f64>,
    pub final_elbo: Option<f64>,
    /// Mean step ELBO per epoch.
    pub elbo_curve: Vec<f64>,
    pub error: Option<String>,
    /// Seconds spent on this split; kept out of the serialized record so that
    /// result files are reproducible.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl SplitRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Everything produced by training on one split.
pub struct SplitRun {
    pub trainer: Trainer,
    pub split: NormalizedSplit,
    pub metrics: TestMetrics,
    pub final_elbo: f64,
    pub elbo_curve: Vec<f64>,
}

/// Network initialization shared by every optimizer on the same split.
pub fn init_network(cfg: &BenchConfig, input_dim: usize, repeat: usize) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(INIT_STREAM + repeat as u64);
    Network::init(&cfg.layer_sizes(input_dim), Task::Regression, &mut rng)
}

/// Trains `optimizer` on split `repeat` of `ds` and evaluates it.
pub fn train_split(
    cfg: &BenchConfig,
    ds: &Dataset,
    optimizer: OptimizerKind,
    repeat: usize,
    on_step: impl FnMut(&crate::optim::StepReport),
) -> Result<SplitRun> {
    let (train, test) = cfg.split.indices(ds.len(), repeat);
    let split = normalize_split(ds, &train, &test)?;
    let (trainer, final_elbo, elbo_curve, mut eval_rng) = fit(cfg, &split, ds.dim(), optimizer, repeat, on_step)?;
    let post = trainer.posterior()?;
    let metrics = evaluate(
        &post,
        &split.test_x,
        &split.test_y,
        &split.transform,
        cfg.n_mc,
        &mut eval_rng,
    )?;
    Ok(SplitRun {
        trainer,
        split,
        metrics,
        final_elbo,
        elbo_curve,
    })
}

/// Trains `optimizer` on every row of `ds` (standardized, no held-out part)
/// and returns the trainer with its final ELBO estimate.
pub fn train_full(
    cfg: &BenchConfig,
    ds: &Dataset,
    optimizer: OptimizerKind,
    on_step: impl FnMut(&crate::optim::StepReport),
) -> Result<(Trainer, f64)> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let split = normalize_split(ds, &all, &[])?;
    let (trainer, final_elbo, _, _) = fit(cfg, &split, ds.dim(), optimizer, 0, on_step)?;
    Ok((trainer, final_elbo))
}

fn fit(
    cfg: &BenchConfig,
    split: &NormalizedSplit,
    input_dim: usize,
    optimizer: OptimizerKind,
    repeat: usize,
    mut on_step: impl FnMut(&crate::optim::StepReport),
) -> Result<(Trainer, f64, Vec<f64>, ChaCha8Rng)> {
    let net = init_network(cfg, input_dim, repeat)?;
    let tcfg = TrainConfig {
        optimizer,
        seed: cfg.train.seed.wrapping_add(repeat as u64),
        ..cfg.train.clone()
    };
    let mut trainer = Trainer::new(tcfg, net, split.train_x.clone(), Targets::Real(split.train_y.clone()))?;
    let per_epoch = trainer.iterations_per_epoch() as usize;
    let mut curve = Vec::new();
    let mut acc = 0.0;
    trainer.run(|r| {
        acc += r.elbo;
        if (r.iteration as usize).is_multiple_of(per_epoch) {
            curve.push(acc / per_epoch as f64);
            acc = 0.0;
        }
        on_step(r);
    })?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(repeat as u64));
    eval_rng.set_stream(EVAL_STREAM);
    let final_elbo = trainer.estimate_elbo(cfg.elbo_samples, &mut eval_rng)?.elbo;
    Ok((trainer, final_elbo, curve, eval_rng))
}

fn run_one(cfg: &BenchConfig, ds: &Dataset, optimizer: OptimizerKind, repeat: usize) -> SplitRecord {
    let start = Instant::now();
    let outcome = train_split(cfg, ds, optimizer, repeat, |_| {});
    let mut rec = SplitRecord {
        dataset: ds.name.clone(),
        optimizer,
        split: repeat,
        rmse: None,
        test_ll: None,
        final_elbo: None,
        elbo_curve: Vec::new(),
        error: None,
        wall_clock_s: 0.0,
    };
    match outcome {
        Ok(run) => {
            rec.rmse = Some(run.metrics.rmse);
            rec.test_ll = Some(run.metrics.test_ll);
            rec.final_elbo = Some(run.final_elbo);
            rec.elbo_curve = run.elbo_curve;
        }
        Err(e) => {
            log::warn!("{} / {optimizer} / split {repeat} failed: {e}", ds.name);
            rec.error = Some(e.to_string());
        }
    }
    rec.wall_clock_s = start.elapsed().as_secs_f64();
    rec
}

/// Mean and standard error `sd / √k`; the error is `None` for one value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: Option<f64>,
}

pub fn mean_se(values: &[f64]) -> Option<MeanSe> {
    let k = values.len();
    if k == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let se = (k > 1).then(|| {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
        (var / k as f64).sqrt()
    });
    Some(MeanSe { mean, se })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dataset: String,
    pub optimizer: OptimizerKind,
    pub splits_ok: usize,
    pub splits_failed: usize,
    pub rmse: Option<MeanSe>,
    pub test_ll: Option<MeanSe>,
    pub final_elbo: Option<MeanSe>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub records: Vec<SplitRecord>,
    pub aggregates: Vec<Aggregate>,
}

/// Folds per-split records, in order, into one aggregate per
/// (dataset, optimizer) pair.
pub fn aggregate(records: &[SplitRecord]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, OptimizerKind)> = Vec::new();
    for r in records {
        if !keys.iter().any(|(d, o)| d == &r.dataset && *o == r.optimizer) {
            keys.push((r.dataset.clone(), r.optimizer));
        }
    }
    keys.into_iter()
        .map(|(dataset, optimizer)| {
            let group: Vec<&SplitRecord> = records
                .iter()
                .filter(|r| r.dataset == dataset && r.optimizer == optimizer)
                .collect();
            let ok: Vec<&&SplitRecord> = group.iter().filter(|r| r.is_ok()).collect();
            let collect =
                |f: fn(&SplitRecord) -> Option<f64>| mean_se(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            Aggregate {
                splits_ok: ok.len(),
                splits_failed: group.len() - ok.len(),
                rmse: collect(|r| r.rmse),
                test_ll: collect(|r| r.test_ll),
                final_elbo: collect(|r| r.final_elbo),
                dataset,
                optimizer,
            }
        })
        .collect()
}

/// Trains every optimizer on every split of every data set. Splits run in
/// parallel on `jobs` threads; results are ordered by data set, optimizer and
/// split index regardless of scheduling.
pub fn run_benchmark(
    cfg: &BenchConfig,
    datasets: &[Dataset],
    optimizers: &[OptimizerKind],
    jobs: usize,
) -> Result<RunResult> {
    cfg.validate()?;
    for ds in datasets {
        if ds.len() < MIN_BENCH_ROWS {
            return Err(Error::InvalidArgument(format!(
                "data set `{}` has {} rows; at least {MIN_BENCH_ROWS} are needed",
                ds.name,
                ds.len()
            )));
        }
    }
    let tasks: Vec<(&Dataset, OptimizerKind, usize)> = datasets
        .iter()
        .flat_map(|ds| {
            optimizers
                .iter()
                .flat_map(move |&o| (0..cfg.split.repeats).map(move |r| (ds, o, r)))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let records: Vec<SplitRecord> =
        pool.install(|| tasks.par_iter().map(|&(ds, o, r)| run_one(cfg, ds, o, r)).collect());
    let aggregates = aggregate(&records);
    Ok(RunResult { records, aggregates })
}

fn fmt_mean_se(v: &Option<MeanSe>) -> String {
    match v {
        None => "NA".into(),
        Some(MeanSe { mean, se: Some(se) }) => format!("{mean:.3} ± {se:.3}"),
        Some(MeanSe { mean, se: None }) => format!("{mean:.3} ± NA"),
    }
}

/// Aligned text table, one row per aggregate.
pub fn render_table(aggregates: &[Aggregate]) -> String {
    let header = ["dataset", "optimizer", "splits", "test RMSE", "test LL", "final ELBO"];
    let rows: Vec<[String; 6]> = aggregates
        .iter()
        .map(|a| {
            let splits = if a.splits_failed > 0 {
                format!("{} ({} failed)", a.splits_ok, a.splits_failed)
            } else {
                a.splits_ok.to_string()
            };
            [
                a.dataset.clone(),
                a.optimizer.to_string(),
                splits,
                fmt_mean_se(&a.rmse),
                fmt_mean_se(&a.test_ll),
                fmt_mean_se(&a.final_elbo),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            s.push_str(c);
            s.extend(std::iter::repeat_n(' ', w - c.chars().count()));
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    out.push_str(&line(
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect(),
    ));
    for row in &rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

/// `y = xᵀw + b + ε` with `x ~ N(0, I)`, `w ~ N(0, I)`, `ε ~ N(0, σ²)`.
pub fn synthetic_linear(n: usize, d: usize, noise_sd: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let b: f64 = rng.sample(StandardNormal);
    let x = Mat::from_fn(n, d, |_, _| rng.sample(StandardNormal));
    let y = (0..n)
        .map(|i| {
            let f: f64 = x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            f + noise_sd * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    Dataset::new("synthetic-linear", x, y).expect("finite synthetic data")
}

/// Input dimension, size and noise level of the teacher task.
pub const TEACHER_DIM: usize = 8;
pub const TEACHER_ROWS: usize = 400;
pub const TEACHER_HIDDEN: usize = 10;
pub const TEACHER_NOISE_SD: f64 = 0.3;

/// Targets from a random one-hidden-layer ReLU teacher plus Gaussian noise.
pub fn synthetic_teacher(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher =
        Network::init(&[TEACHER_DIM, TEACHER_HIDDEN, 1], Task::Regression, &mut rng).expect("valid teacher sizes");
    let x = Mat::from_fn(TEACHER_ROWS, TEACHER_DIM, |_, _| rng.sample(StandardNormal));
    let f = teacher.predict(&x).expect("teacher forward pass");
    let y = (0..TEACHER_ROWS)
        .map(|i| f[(i, 0)] + TEACHER_NOISE_SD * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Dataset::new("synthetic-teacher", x, y).expect("finite synthetic data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GaussianNoiseModel;
    use crate::optim::LayerPosterior;

    #[test]
    fn toy_csv_loads() {
        let text = "1,2,3\n4,5,6\n7,8,9\n";
        let schema = DatasetSchema {
            delimiter: Delimiter::Char(','),
            ..DatasetSchema::default()
        };
        let ds = parse_dataset("toy", text, &schema).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.targets, vec![3.0, 6.0, 9.0]);
        assert_eq!(ds.features.row(2), &[7.0, 8.0]);
    }

    #[test]
    fn nan_row_is_named() {
        let text = "1 2 3\n4 NaN 6\n7 8 9\n";
        let err = parse_dataset("toy", text, &DatasetSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, column: 2, .. }), "{err}");
        assert!(err.to_string().contains("row 2"), "{err}");
        let err = parse_dataset("toy", "1 2\n? 4\n", &DatasetSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, column: 1, .. }));
    }

    #[test]
    fn header_and_target_column() {
        let text = "y,a,b\n1,2,3\n4,5,6\n";
        let schema = DatasetSchema {
            delimiter: Delimiter::Char(','),
            target_column: Some(0),
            has_header: true,
        };
        let ds = parse_dataset("h", text, &schema).unwrap();
        assert_eq!(ds.targets, vec![1.0, 4.0]);
        assert_eq!(ds.features.row(1), &[5.0, 6.0]);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let err = parse_dataset("r", "1 2 3\n4 5\n", &DatasetSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }));
    }

    #[test]
    fn write_then_load_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic_linear(30, 4, 0.7, 3);
        for delim in [Delimiter::Whitespace, Delimiter::Char(',')] {
            let path = dir.path().join("d.txt");
            write_dataset(&path, &ds, delim).unwrap();
            let back = load_dataset(
                &path,
                &DatasetSchema {
                    delimiter: delim,
                    ..DatasetSchema::default()
                },
            )
            .unwrap();
            assert_eq!(back.features, ds.features);
            assert_eq!(back.targets, ds.targets);
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let spec = SplitSpec {
            seed: 5,
            ..SplitSpec::default()
        };
        for n in [20, 21, 37, 506] {
            for r in 0..3 {
                let (train, test) = spec.indices(n, r);
                assert_eq!(train.len(), (0.9 * n as f64).round() as usize);
                let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
                all.sort_unstable();
                assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
        assert_ne!(spec.indices(50, 0), spec.indices(50, 1));
    }

    #[test]
    fn train_targets_are_standardized() {
        let ds = synthetic_linear(100, 3, 1.0, 4);
        let (train, test) = SplitSpec::default().indices(100, 0);
        let s = normalize_split(&ds, &train, &test).unwrap();
        let (m, sd) = mean_std(s.train_y.as_slice().iter().copied());
        assert!(m.abs() < 1e-10);
        assert!((sd * sd - 1.0).abs() < 1e-10);
        assert_eq!(s.test_y.len(), 10);
        assert_eq!(s.test_y[0], ds.targets[test[0]]);
    }

    #[test]
    fn constant_feature_keeps_unit_scale() {
        let mut ds = synthetic_linear(40, 2, 1.0, 5);
        for i in 0..40 {
            ds.features[(i, 1)] = 3.5;
        }
        let (train, test) = SplitSpec::default().indices(40, 0);
        let s = normalize_split(&ds, &train, &test).unwrap();
        assert_eq!(s.transform.x_std[1], 1.0);
        assert!(s.train_x.col(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let ds = synthetic_linear(20, 2, 1.0, 6);
        assert!(normalize_split(&ds, &[0, 1, 2], &[2, 3]).is_err());
    }

    #[test]
    fn perfect_predictions_round_trip() {
        let ds = synthetic_linear(50, 2, 1.0, 7);
        let (train, test) = SplitSpec::default().indices(50, 0);
        let s = normalize_split(&ds, &train, &test).unwrap();
        let back = s.transform.inverse_targets(s.train_y.as_slice());
        for (b, &i) in back.iter().zip(&train) {
            assert!((b - ds.targets[i]).abs() < 1e-10);
        }
    }

    fn point_posterior(w: Mat, precision: f64) -> ModelPosterior {
        ModelPosterior {
            task: Task::Regression,
            layers: vec![LayerPosterior::Point { mean: w }],
            noise: GaussianNoiseModel::fixed(precision),
            eta: 1.0,
            lambda: 1.0,
        }
    }

    #[test]
    fn perfect_predictor_metrics() {
        // y = 2x + 1 exactly, identity transform
        let x = Mat::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y: Vec<f64> = x.as_slice().iter().map(|v| 2.0 * v + 1.0).collect();
        let w = Mat::from_vec(2, 1, vec![2.0, 1.0]).unwrap();
        let t = Standardizer {
            x_mean: vec![0.0],
            x_std: vec![1.0],
            y_mean: 0.0,
            y_std: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = evaluate(&point_posterior(w, 1.0), &x, &y, &t, 1, &mut rng).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert!((m.test_ll + 0.5 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn single_sample_is_plain_likelihood() {
        let x = Mat::from_vec(3, 1, vec![0.5, -1.0, 2.0]).unwrap();
        let y = vec![1.0, 0.0, -1.0];
        let w = Mat::from_vec(2, 1, vec![0.3, 0.1]).unwrap();
        let t = Standardizer {
            x_mean: vec![0.0],
            x_std: vec![1.0],
            y_mean: 0.5,
            y_std: 2.0,
        };
        let post = point_posterior(w.clone(), 3.0);
        let m = evaluate(&post, &x, &y, &t, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut expected = 0.0;
        for i in 0..3 {
            let mu = (0.3 * x[(i, 0)] + 0.1) * 2.0 + 0.5;
            let var: f64 = 4.0 / 3.0;
            expected += -0.5 * (LN_2PI + var.ln()) - 0.5 * (y[i] - mu) * (y[i] - mu) / var;
        }
        assert!((m.test_ll - expected / 3.0).abs() < 1e-12);
    }

    #[test]
    fn true_predictive_has_analytic_log_likelihood() {
        // exact generative model: LL → −½ log(2πe) for unit noise
        let n = 200_000;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Mat::from_fn(n, 1, |_, _| rng.sample(StandardNormal));
        let y: Vec<f64> = (0..n)
            .map(|i| 1.5 * x[(i, 0)] - 0.5 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w = Mat::from_vec(2, 1, vec![1.5, -0.5]).unwrap();
        let t = Standardizer {
            x_mean: vec![0.0],
            x_std: vec![1.0],
            y_mean: 0.0,
            y_std: 1.0,
        };
        let m = evaluate(&point_posterior(w, 1.0), &x, &y, &t, 1, &mut rng).unwrap();
        let expected = -0.5 * (LN_2PI + 1.0);
        assert!((m.test_ll - expected).abs() < 0.05, "{}", m.test_ll);
        assert!((m.rmse - 1.0).abs() < 0.01);
    }

    #[test]
    fn standard_error_of_one_two_three() {
        let s = mean_se(&[1.0, 2.0, 3.0]).unwrap();
        assert!((s.mean - 2.0).abs() < 1e-15);
        assert!((s.se.unwrap() - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_se(&[4.0]).unwrap().se, None);
        assert!(mean_se(&[]).is_none());
    }

    fn smoke_cfg() -> BenchConfig {
        BenchConfig {
            train: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            hidden: vec![8],
            split: SplitSpec {
                repeats: 1,
                ..SplitSpec::default()
            },
            n_mc: 5,
            elbo_samples: 2,
        }
    }

    #[test]
    fn smoke_benchmark_is_finite_and_deterministic() {
        let ds = synthetic_linear(60, 3, 0.5, 9);
        let cfg = smoke_cfg();
        let kinds = [OptimizerKind::NoisyEkfac, OptimizerKind::Bbb];
        let a = run_benchmark(&cfg, std::slice::from_ref(&ds), &kinds, 2).unwrap();
        let b = run_benchmark(&cfg, std::slice::from_ref(&ds), &kinds, 1).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.aggregates.len(), 2);
        for agg in &a.aggregates {
            assert_eq!(agg.splits_ok, 1);
            assert!(agg.rmse.unwrap().mean.is_finite());
            assert!(agg.test_ll.unwrap().mean.is_finite());
            assert_eq!(agg.rmse.unwrap().se, None);
        }
        let table = render_table(&a.aggregates);
        assert_eq!(table.lines().count(), 4);
        assert!(table.contains("± NA"));
    }

    #[test]
    fn metrics_ignore_row_order() {
        let ds = synthetic_linear(40, 2, 0.5, 10);
        let cfg = smoke_cfg();
        let (train, test) = cfg.split.indices(40, 0);
        let mut perm: Vec<usize> = (0..40).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(11));
        let shuffled = ds.permuted(&perm);
        let mut inv = vec![0; 40];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let map = |idx: &[usize]| idx.iter().map(|&i| inv[i]).collect::<Vec<_>>();
        let a = normalize_split(&ds, &train, &test).unwrap();
        let b = normalize_split(&shuffled, &map(&train), &map(&test)).unwrap();
        assert_eq!(a.train_x, b.train_x);
        assert_eq!(a.train_y, b.train_y);
        assert_eq!(a.test_y, b.test_y);
    }

    #[test]
    fn failed_split_is_recorded() {
        let ds = synthetic_linear(30, 2, 0.5, 12);
        let mut cfg = smoke_cfg();
        cfg.split.repeats = 2;
        // a divergent config should either train or be recorded as a failure,
        // never abort the whole run
        cfg.train.alpha = 1.0;
        cfg.train.gamma_ex = 0.0;
        let res = run_benchmark(&cfg, &[ds], &[OptimizerKind::Kfac], 1).unwrap();
        assert_eq!(res.records.len(), 2);
        let agg = &res.aggregates[0];
        assert_eq!(agg.splits_ok + agg.splits_failed, 2);
    }

    #[test]
    fn small_datasets_are_rejected() {
        let ds = synthetic_linear(10, 2, 0.5, 13);
        assert!(run_benchmark(&smoke_cfg(), &[ds], &[OptimizerKind::Kfac], 1).is_err());
    }

    #[test]
    fn teacher_task_shape() {
        let ds = synthetic_teacher(0);
        assert_eq!((ds.len(), ds.dim()), (TEACHER_ROWS, TEACHER_DIM));
        assert_eq!(synthetic_teacher(0), ds);
    }
}
