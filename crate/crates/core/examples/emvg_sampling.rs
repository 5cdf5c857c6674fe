//! Eigenvalue-corrected matrix-variate Gaussian: build one from Kronecker
//! statistics, draw samples, and compare the sample covariance, log-density
//! and KL against their dense counterparts.
//!
//! ```text
//! cargo run --release --example emvg_sampling -- [samples]
//! ```

use ekfac::fisher::RescalingDiag;
use ekfac::linalg::{self, Mat};
use ekfac::oracle;
use ekfac::posterior::{EmvgPosterior, VariationalPosterior};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ekfac::Result<()> {
    let samples: usize = std::env::args()
        .nth(1)
        .map_or(100_000, |s| s.parse().expect("samples must be an integer"));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, p) = (2, 2);
    let eig_a = linalg::sym_eig(&oracle::random_psd(&mut rng, n))?;
    let eig_s = linalg::sym_eig(&oracle::random_psd(&mut rng, p))?;
    let grid = Mat::from_fn(n, p, |_, _| rng.gen_range(0.2..2.0));
    let resc = RescalingDiag {
        r: grid,
        gamma_in: 0.1,
        gamma_ex: 0.0,
    };
    let mean = oracle::random_mat(&mut rng, n, p);
    let post = EmvgPosterior::new(mean.clone(), eig_a, eig_s, resc, 0.5)?;

    let draws: Vec<Vec<f64>> = (0..samples)
        .map(|_| post.sample(&mut rng).map(|w| linalg::vec(&w)))
        .collect::<ekfac::Result<_>>()?;
    let empirical = oracle::empirical_covariance(&draws);
    let exact = post.materialize_covariance()?;
    println!("materialized Σ:");
    show(&exact);
    println!("sample covariance ({samples} draws):");
    show(&empirical);
    println!(
        "max relative error above 1% of max: {:.4}",
        oracle::max_relative_error_above(&empirical, &exact, 0.01)
    );

    let w = post.sample(&mut rng)?;
    let dense = oracle::gaussian_log_density(&linalg::vec(&w), &linalg::vec(&mean), &exact)?;
    println!("log-density {:.10} vs dense {:.10}", post.log_density(&w)?, dense);
    let eta = 1.0;
    let kl_dense = oracle::kl_to_spherical(&linalg::vec(&mean), &exact, eta)?;
    println!(
        "KL to N(0, I): {:.10} vs dense {:.10}",
        post.kl_to_spherical_prior(eta)?,
        kl_dense
    );
    Ok(())
}

fn show(m: &Mat) {
    for i in 0..m.rows() {
        println!("  {:>9.4?}", m.row(i));
    }
}
