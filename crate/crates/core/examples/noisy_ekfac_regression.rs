//! Noisy EK-FAC on the synthetic teacher task: per-epoch ELBO while training
//! on a 90% split, then held-out RMSE and log-likelihood from the learned
//! posterior.
//!
//! ```text
//! cargo run --release --example noisy_ekfac_regression -- [epochs]
//! ```

use ekfac::bench::{self, BenchConfig};
use ekfac::optim::OptimizerKind;

fn main() -> ekfac::Result<()> {
    let mut cfg = BenchConfig::default();
    if let Some(e) = std::env::args().nth(1) {
        cfg.train.epochs = e.parse().expect("epochs must be an integer");
    }
    let ds = bench::synthetic_teacher(0);
    let run = bench::train_split(&cfg, &ds, OptimizerKind::NoisyEkfac, 0, |_| {})?;

    for (epoch, elbo) in run.elbo_curve.iter().enumerate() {
        if epoch % 5 == 4 || epoch == 0 {
            println!("epoch {:>3}  mean step ELBO {elbo:>10.3}", epoch + 1);
        }
    }
    let t = &run.trainer;
    println!(
        "γ_in = λ/(Nη) = {:.3e}, posterior scale λ/N = {:.3e}",
        t.gamma_in(),
        t.posterior_scale()
    );
    println!("noise precision {:.3} (standardized targets)", t.noise().precision());
    println!("final ELBO {:.3}", run.final_elbo);
    println!(
        "test RMSE {:.4}, test log-likelihood {:.4}",
        run.metrics.rmse, run.metrics.test_ll
    );
    Ok(())
}
