//! Final training-set ELBO of noisy EK-FAC, noisy K-FAC and Bayes-by-Backprop
//! on the synthetic teacher task, over several seeds.
//!
//! ```text
//! cargo run --release --example compare_optimizers -- [seeds] [epochs]
//! ```

use ekfac::bench::{self, BenchConfig};
use ekfac::optim::OptimizerKind;

fn main() -> ekfac::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(5, |s| s.parse().expect("seeds must be an integer"));
    let epochs: Option<usize> = args.next().map(|s| s.parse().expect("epochs must be an integer"));

    let ds = bench::synthetic_teacher(0);
    let kinds = [OptimizerKind::NoisyEkfac, OptimizerKind::NoisyKfac, OptimizerKind::Bbb];
    println!("{:<6} {:>14} {:>14} {:>14}", "seed", "noisy-ekfac", "noisy-kfac", "bbb");
    for seed in 0..seeds {
        let mut cfg = BenchConfig::default();
        cfg.train.seed = seed;
        if let Some(e) = epochs {
            cfg.train.epochs = e;
        }
        let mut row = Vec::new();
        for kind in kinds {
            let (_, elbo) = bench::train_full(&cfg, &ds, kind, |_| {})?;
            row.push(elbo);
        }
        let ordered = row[0] >= row[1] && row[1] >= row[2];
        println!(
            "{seed:<6} {:>14.3} {:>14.3} {:>14.3}  {}",
            row[0],
            row[1],
            row[2],
            if ordered { "ordered" } else { "not ordered" }
        );
    }
    Ok(())
}
