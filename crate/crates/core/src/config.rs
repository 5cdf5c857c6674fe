//! Flat key-value run configuration.
//!
//! A config file is a TOML document without tables. Values are resolved as
//! defaults, then the file, then `KEY=VALUE` overrides; every key is checked
//! against the schema below.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value as Json};
use toml::Value;

use crate::bench::{self, BenchConfig, Dataset, DatasetSchema, Delimiter};
use crate::error::{Error, Result};
use crate::fisher::FisherSampling;
use crate::optim::{OptimizerKind, StatsInit};

/// Keys that must be present after overrides are applied.
pub const REQUIRED_KEYS: &[&str] = &["lambda"];

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("optimizer", "kfac | ekfac | noisy-kfac | noisy-ekfac | bbb"),
    ("optimizers", "list of optimizers for `bench` (defaults to `optimizer`)"),
    ("alpha", "step size"),
    ("beta", "EMA rate of the Kronecker factors"),
    ("omega", "EMA rate of the re-scaling grid"),
    ("lambda", "KL weight (required)"),
    ("eta", "prior variance"),
    ("gamma_ex", "extrinsic damping"),
    ("t_stats", "factor update interval"),
    ("t_scale", "re-scaling update interval"),
    ("t_eig", "eigenbasis / inverse refresh interval"),
    ("t_reinit", "re-scaling re-initialization interval"),
    ("batch_size", "mini-batch size"),
    ("epochs", "passes over the training split"),
    ("seed", "seed for initialization, batching and sampling"),
    ("fisher_sampling", "empirical | model"),
    ("lr_decay", "step-size factor for the second half of training"),
    ("stats_init", "identity | data"),
    ("bbb_init_log_sigma", "initial BBB log standard deviation"),
    ("noise_prior_shape", "Gamma prior shape of the noise precision"),
    ("noise_prior_rate", "Gamma prior rate of the noise precision"),
    ("hidden", "hidden layer widths, integer or list"),
    (
        "dataset",
        "file path, `synthetic-teacher` or `synthetic-linear`; list for `bench`",
    ),
    ("data_seed", "seed of the synthetic generators"),
    ("delimiter", "`whitespace`, `comma`, `tab` or one character"),
    ("target_column", "zero-based target column, -1 for the last"),
    ("header", "skip the first data line"),
    ("train_fraction", "training share of each split"),
    ("repeats", "number of random splits for `bench`"),
    ("split_seed", "seed of the split permutation"),
    ("split", "split index used by `train`"),
    ("n_mc", "posterior samples for the test log-likelihood"),
    ("elbo_samples", "posterior samples for the final ELBO"),
];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    SyntheticTeacher,
    SyntheticLinear,
    File(PathBuf),
}

impl DataSource {
    fn parse(s: &str, base: Option<&Path>) -> DataSource {
        match s {
            "synthetic-teacher" => DataSource::SyntheticTeacher,
            "synthetic-linear" => DataSource::SyntheticLinear,
            path => {
                let p = PathBuf::from(path);
                match base {
                    Some(dir) if p.is_relative() => DataSource::File(dir.join(p)),
                    _ => DataSource::File(p),
                }
            }
        }
    }

    fn describe(&self) -> String {
        match self {
            DataSource::SyntheticTeacher => "synthetic-teacher".into(),
            DataSource::SyntheticLinear => "synthetic-linear".into(),
            DataSource::File(p) => p.display().to_string(),
        }
    }
}

/// Size and noise of the `synthetic-linear` source.
pub const LINEAR_ROWS: usize = 500;
pub const LINEAR_DIM: usize = 5;
pub const LINEAR_NOISE_SD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub bench: BenchConfig,
    pub datasets: Vec<DataSource>,
    pub schema: DatasetSchema,
    pub data_seed: u64,
    pub optimizers: Vec<OptimizerKind>,
    pub split_index: usize,
}

impl RunConfig {
    /// Loads every configured data set.
    pub fn load_datasets(&self) -> Result<Vec<Dataset>> {
        self.datasets
            .iter()
            .map(|src| match src {
                DataSource::SyntheticTeacher => Ok(bench::synthetic_teacher(self.data_seed)),
                DataSource::SyntheticLinear => Ok(bench::synthetic_linear(
                    LINEAR_ROWS,
                    LINEAR_DIM,
                    LINEAR_NOISE_SD,
                    self.data_seed,
                )),
                DataSource::File(p) => bench::load_dataset(p, &self.schema).map_err(|e| match e {
                    Error::Io(io) => Error::config("dataset", format!("cannot read {}: {io}", p.display())),
                    other => other,
                }),
            })
            .collect()
    }

    /// Fully resolved key-value snapshot, using the same keys as config files.
    pub fn snapshot(&self) -> BTreeMap<String, Json> {
        let t = &self.bench.train;
        let b = &self.bench;
        let datasets: Vec<String> = self.datasets.iter().map(DataSource::describe).collect();
        let delimiter = match self.schema.delimiter {
            Delimiter::Whitespace => "whitespace".to_string(),
            Delimiter::Char(c) => c.to_string(),
        };
        let entries = [
            ("optimizer", json!(t.optimizer.name())),
            (
                "optimizers",
                json!(self.optimizers.iter().map(|o| o.name()).collect::<Vec<_>>()),
            ),
            ("alpha", json!(t.alpha)),
            ("beta", json!(t.beta)),
            ("omega", json!(t.omega)),
            ("lambda", json!(t.lambda)),
            ("eta", json!(t.eta)),
            ("gamma_ex", json!(t.gamma_ex)),
            ("t_stats", json!(t.t_stats)),
            ("t_scale", json!(t.t_scale)),
            ("t_eig", json!(t.t_eig)),
            ("t_reinit", json!(t.t_reinit)),
            ("batch_size", json!(t.batch_size)),
            ("epochs", json!(t.epochs)),
            ("seed", json!(t.seed)),
            ("fisher_sampling", json!(t.fisher_sampling.to_string())),
            ("lr_decay", json!(t.lr_decay)),
            ("stats_init", json!(t.stats_init)),
            ("bbb_init_log_sigma", json!(t.bbb_init_log_sigma)),
            ("noise_prior_shape", json!(t.noise_prior_shape)),
            ("noise_prior_rate", json!(t.noise_prior_rate)),
            ("hidden", json!(b.hidden)),
            ("dataset", json!(datasets)),
            ("data_seed", json!(self.data_seed)),
            ("delimiter", json!(delimiter)),
            (
                "target_column",
                json!(self.schema.target_column.map_or(-1, |c| c as i64)),
            ),
            ("header", json!(self.schema.has_header)),
            ("train_fraction", json!(b.split.train_fraction)),
            ("repeats", json!(b.split.repeats)),
            ("split_seed", json!(b.split.seed)),
            ("split", json!(self.split_index)),
            ("n_mc", json!(b.n_mc)),
            ("elbo_samples", json!(b.elbo_samples)),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// Parses `KEY=VALUE`; the value is read as a TOML literal when possible and
/// as a bare string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::config("override", format!("expected KEY=VALUE, got `{s}`")))?;
    let key = key.trim().to_string();
    if key.is_empty() {
        return Err(Error::config("override", format!("empty key in `{s}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}

/// Reads a config file into a flat table.
pub fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
    parse_table(&text)
}

pub fn parse_table(text: &str) -> Result<toml::Table> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
    for (k, v) in &table {
        if v.is_table() {
            return Err(Error::config(k, "nested tables are not supported"));
        }
    }
    Ok(table)
}

struct Fields {
    table: toml::Table,
}

impl Fields {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.table.remove(key)
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Float(f)) => Ok(f),
            Some(Value::Integer(i)) => Ok(i as f64),
            Some(other) => Err(type_error(key, "a number", &other)),
        }
    }

    fn u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Integer(i)) if i >= 0 => Ok(i as u64),
            Some(other) => Err(type_error(key, "a non-negative integer", &other)),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        self.u64(key, default as u64).map(|v| v as usize)
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(type_error(key, "a string", &other)),
        }
    }

    fn strings(&mut self, key: &str) -> Result<Option<Vec<String>>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.split(',').map(|p| p.trim().to_string()).collect())),
            Some(Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    other => Err(type_error(key, "a list of strings", &other)),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(other) => Err(type_error(key, "a string or list of strings", &other)),
        }
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(b),
            Some(other) => Err(type_error(key, "true or false", &other)),
        }
    }

    fn parsed<T: std::str::FromStr<Err = Error>>(&mut self, key: &str, default: T) -> Result<T> {
        match self.string(key)? {
            None => Ok(default),
            Some(s) => s.parse(),
        }
    }
}

fn type_error(key: &str, expected: &str, got: &Value) -> Error {
    Error::config(key, format!("expected {expected}, got {got}"))
}

/// Resolves defaults, then `table`, then `overrides`, then `seed`.
/// Relative data paths are taken relative to `base`.
pub fn resolve(
    mut table: toml::Table,
    overrides: &[(String, Value)],
    seed: Option<u64>,
    base: Option<&Path>,
) -> Result<RunConfig> {
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    if let Some(s) = seed {
        table.insert("seed".into(), Value::Integer(s as i64));
    }
    for key in table.keys() {
        if !KEYS.iter().any(|(k, _)| k == key) {
            return Err(Error::config(key, "unknown field"));
        }
    }
    for key in REQUIRED_KEYS {
        if !table.contains_key(*key) {
            return Err(Error::config(*key, "required field is missing"));
        }
    }

    let mut f = Fields { table };
    let mut bench = BenchConfig::default();
    let t = &mut bench.train;
    t.optimizer = f.parsed("optimizer", t.optimizer)?;
    t.alpha = f.f64("alpha", t.alpha)?;
    t.beta = f.f64("beta", t.beta)?;
    t.omega = f.f64("omega", t.omega)?;
    t.lambda = f.f64("lambda", t.lambda)?;
    t.eta = f.f64("eta", t.eta)?;
    t.gamma_ex = f.f64("gamma_ex", t.gamma_ex)?;
    t.t_stats = f.u64("t_stats", t.t_stats)?;
    t.t_scale = f.u64("t_scale", t.t_scale)?;
    t.t_eig = f.u64("t_eig", t.t_eig)?;
    t.t_reinit = f.u64("t_reinit", t.t_reinit)?;
    t.batch_size = f.usize("batch_size", t.batch_size)?;
    t.epochs = f.usize("epochs", t.epochs)?;
    t.seed = f.u64("seed", t.seed)?;
    t.fisher_sampling = f.parsed::<FisherSampling>("fisher_sampling", t.fisher_sampling)?;
    t.lr_decay = f.f64("lr_decay", t.lr_decay)?;
    t.stats_init = f.parsed::<StatsInit>("stats_init", t.stats_init)?;
    t.bbb_init_log_sigma = f.f64("bbb_init_log_sigma", t.bbb_init_log_sigma)?;
    t.noise_prior_shape = f.f64("noise_prior_shape", t.noise_prior_shape)?;
    t.noise_prior_rate = f.f64("noise_prior_rate", t.noise_prior_rate)?;

    bench.hidden = match f.take("hidden") {
        None => bench.hidden,
        Some(Value::Integer(w)) if w > 0 => vec![w as usize],
        Some(Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                Value::Integer(w) if w > 0 => Ok(w as usize),
                other => Err(type_error("hidden", "positive integers", &other)),
            })
            .collect::<Result<_>>()?,
        Some(other) => return Err(type_error("hidden", "a positive integer or a list", &other)),
    };
    bench.split.train_fraction = f.f64("train_fraction", bench.split.train_fraction)?;
    bench.split.repeats = f.usize("repeats", bench.split.repeats)?;
    bench.split.seed = f.u64("split_seed", bench.split.seed)?;
    bench.n_mc = f.usize("n_mc", bench.n_mc)?;
    bench.elbo_samples = f.usize("elbo_samples", bench.elbo_samples)?;

    let datasets = f
        .strings("dataset")?
        .unwrap_or_else(|| vec!["synthetic-teacher".into()])
        .iter()
        .map(|s| DataSource::parse(s, base))
        .collect();
    let data_seed = f.u64("data_seed", 0)?;
    let delimiter = match f.string("delimiter")? {
        None => Delimiter::Whitespace,
        Some(s) => Delimiter::parse(&s)?,
    };
    let target_column = match f.take("target_column") {
        None | Some(Value::Integer(-1)) => None,
        Some(Value::Integer(c)) if c >= 0 => Some(c as usize),
        Some(other) => return Err(type_error("target_column", "a column index or -1", &other)),
    };
    let has_header = f.bool("header", false)?;
    let optimizers = match f.strings("optimizers")? {
        None => vec![bench.train.optimizer],
        Some(list) => list.iter().map(|s| s.parse()).collect::<Result<_>>()?,
    };
    if optimizers.is_empty() {
        return Err(Error::config("optimizers", "list is empty"));
    }
    let split_index = f.usize("split", 0)?;
    debug_assert!(
        f.table.is_empty(),
        "unconsumed keys: {:?}",
        f.table.keys().collect::<Vec<_>>()
    );

    bench.validate()?;
    if split_index >= bench.split.repeats.max(1) && split_index > 0 {
        return Err(Error::config(
            "split",
            format!("index {split_index} not below repeats {}", bench.split.repeats),
        ));
    }
    Ok(RunConfig {
        bench,
        datasets,
        schema: DatasetSchema {
            delimiter,
            target_column,
            has_header,
        },
        data_seed,
        optimizers,
        split_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(s: &str) -> toml::Table {
        parse_table(s).unwrap()
    }

    #[test]
    fn missing_lambda_is_named() {
        let err = resolve(table("alpha = 0.1"), &[], None, None).unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");
    }

    #[test]
    fn precedence_is_override_then_file_then_default() {
        let cfg = resolve(table("lambda = 1.0\nalpha = 0.5"), &[], None, None).unwrap();
        assert_eq!(cfg.bench.train.alpha, 0.5);
        assert_eq!(cfg.bench.train.beta, 0.001);
        let ov = vec![parse_override("alpha=0.01").unwrap()];
        let cfg = resolve(table("lambda = 1.0\nalpha = 0.5"), &ov, Some(9), None).unwrap();
        assert_eq!(cfg.bench.train.alpha, 0.01);
        assert_eq!(cfg.bench.train.seed, 9);
        assert_eq!(cfg.snapshot()["alpha"], json!(0.01));
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        let err = resolve(table("lambda = 1\nalhpa = 0.1"), &[], None, None).unwrap_err();
        assert!(err.to_string().contains("alhpa"));
        let err = resolve(table("lambda = 1\nepochs = \"ten\""), &[], None, None).unwrap_err();
        assert!(err.to_string().contains("epochs"));
        let err = resolve(table("lambda = 1\noptimizer = \"sgd\""), &[], None, None).unwrap_err();
        assert!(err.to_string().contains("optimizer"));
        assert!(parse_table("[train]\nlambda = 1").is_err());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = resolve(table("lambda = 1\nbeta = 2.0"), &[], None, None).unwrap_err();
        assert!(err.to_string().contains("beta"), "{err}");
    }

    #[test]
    fn overrides_parse_typed_and_bare_values() {
        assert_eq!(parse_override("alpha=0.01").unwrap().1, Value::Float(0.01));
        assert_eq!(parse_override("epochs=3").unwrap().1, Value::Integer(3));
        assert_eq!(
            parse_override("optimizer=noisy-kfac").unwrap().1,
            Value::String("noisy-kfac".into())
        );
        assert!(parse_override("alpha").is_err());
        let ov = vec![
            parse_override("optimizers=kfac,bbb").unwrap(),
            parse_override("hidden=[4, 3]").unwrap(),
        ];
        let cfg = resolve(table("lambda = 1"), &ov, None, None).unwrap();
        assert_eq!(cfg.optimizers, vec![OptimizerKind::Kfac, OptimizerKind::Bbb]);
        assert_eq!(cfg.bench.hidden, vec![4, 3]);
    }

    #[test]
    fn snapshot_covers_every_key() {
        let cfg = resolve(table("lambda = 1"), &[], None, None).unwrap();
        let snap = cfg.snapshot();
        for (k, _) in KEYS {
            assert!(snap.contains_key(*k), "{k}");
        }
        assert_eq!(snap.len(), KEYS.len());
    }

    #[test]
    fn relative_paths_use_config_dir() {
        let cfg = resolve(
            table("lambda = 1\ndataset = \"data/x.txt\""),
            &[],
            None,
            Some(Path::new("/cfg")),
        )
        .unwrap();
        assert_eq!(cfg.datasets, vec![DataSource::File(PathBuf::from("/cfg/data/x.txt"))]);
    }
}
