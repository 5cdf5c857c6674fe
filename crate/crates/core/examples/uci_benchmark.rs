//! Ten random 90/10 splits of a regression data file, noisy EK-FAC with the
//! standard UCI settings, mean ± standard error of test RMSE and
//! log-likelihood.
//!
//! ```text
//! cargo run --release --example uci_benchmark -- path/to/housing.data [optimizer ...]
//! ```
//!
//! The file is whitespace-delimited with the target in the last column (the
//! layout of the UCI `housing.data` file). Without a path the synthetic
//! linear-Gaussian set is used instead.

use std::path::Path;

use ekfac::bench::{self, BenchConfig, DatasetSchema};
use ekfac::optim::OptimizerKind;

fn main() -> ekfac::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ds = match args.first() {
        Some(p) => bench::load_dataset(Path::new(p), &DatasetSchema::default())?,
        None => bench::synthetic_linear(500, 5, 1.0, 0),
    };
    let optimizers = if args.len() > 1 {
        args[1..]
            .iter()
            .map(|s| s.parse())
            .collect::<ekfac::Result<Vec<OptimizerKind>>>()?
    } else {
        vec![OptimizerKind::NoisyEkfac]
    };
    let cfg = BenchConfig::default();
    println!(
        "{}: {} rows, {} features, {} splits, {} epochs, batch {}",
        ds.name,
        ds.len(),
        ds.dim(),
        cfg.split.repeats,
        cfg.train.epochs,
        cfg.train.batch_size
    );
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let result = bench::run_benchmark(&cfg, &[ds], &optimizers, jobs)?;
    print!("{}", bench::render_table(&result.aggregates));
    Ok(())
}
