//! Resolving a flat TOML run configuration with command-line style overrides,
//! then training the configured optimizer on the first split.
//!
//! ```text
//! cargo run --release --example config_run -- [path/to/config.toml] [KEY=VALUE ...]
//! ```
//!
//! Without a path the configuration below is used.

use std::path::Path;

use ekfac::bench;
use ekfac::config;

const DEFAULT: &str = r#"
dataset = "synthetic-linear"
optimizer = "noisy-kfac"
lambda = 1.0
epochs = 20
hidden = [20]
"#;

fn main() -> ekfac::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (table, base, rest) = match args.first() {
        Some(p) if !p.contains('=') => (config::read_table(Path::new(p))?, Path::new(p).parent(), &args[1..]),
        _ => (config::parse_table(DEFAULT)?, None, &args[..]),
    };
    let overrides = rest
        .iter()
        .map(|s| config::parse_override(s))
        .collect::<ekfac::Result<Vec<_>>>()?;
    let cfg = config::resolve(table, &overrides, None, base)?;
    for (key, value) in cfg.snapshot() {
        println!("{key:<20} {value}");
    }

    let ds = &cfg.load_datasets()?[0];
    let optimizer = cfg.bench.train.optimizer;
    let run = bench::train_split(&cfg.bench, ds, optimizer, cfg.split_index, |_| {})?;
    println!(
        "\n{} on {} split {}: RMSE {:.4}, test LL {:.4}, ELBO {:.3}",
        optimizer, ds.name, cfg.split_index, run.metrics.rmse, run.metrics.test_ll, run.final_elbo
    );
    Ok(())
}
