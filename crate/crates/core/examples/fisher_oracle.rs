//! Exact per-layer Fisher of a tiny network against its K-FAC (`S⊗A`) and
//! EK-FAC (`Q R Qᵀ`) approximations, all estimated from the same batch.
//!
//! ```text
//! cargo run --example fisher_oracle
//! ```

use ekfac::fisher::{self, FisherSampling, KronStats, RescalingDiag};
use ekfac::linalg::{self, Mat};
use ekfac::nn::{self, GaussianNoiseModel, Network, Targets, Task};
use ekfac::oracle;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ekfac::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sizes = [4, 5, 2];
    let mut net = Network::init(&sizes, Task::Regression, &mut rng)?;
    let x = oracle::random_mat(&mut rng, 32, sizes[0]);
    let y = Targets::Real(oracle::random_mat(&mut rng, 32, 2));
    let noise = GaussianNoiseModel::fixed(1.0);

    let exact = fisher::exact_fisher_oracle(&mut net, &x, &y, Some(&noise), FisherSampling::Empirical, &mut rng)?;
    let preds = net.forward(&x)?;
    net.backward(&nn::output_grad(Task::Regression, &preds, &y, Some(&noise))?)?;

    println!(
        "{:<6} {:>8} {:>12} {:>12} {:>12}",
        "layer", "size", "‖F‖_F", "K-FAC err", "EK-FAC err"
    );
    for (l, layer) in net.layers().iter().enumerate() {
        let (rows, cols) = layer.weights().shape();
        let mut stats = KronStats::new(rows, cols);
        fisher::update_kron_stats(&mut stats, layer, 1.0)?;
        stats.refresh_eig()?;
        let mut resc = RescalingDiag::new(rows, cols, 0.0, 0.0);
        fisher::update_rescaling(&mut resc, &stats, layer, 1.0, 0)?;

        let (ea, es) = stats.eigs()?;
        let q = oracle::kron(&es.basis, &ea.basis);
        let kfac = oracle::kron(&stats.s, &stats.a);
        let ekfac = q.matmul(&Mat::diag(&linalg::vec(&resc.r))).matmul_t(&q);
        println!(
            "{:<6} {:>8} {:>12.4e} {:>12.4e} {:>12.4e}",
            l,
            format!("{rows}x{cols}"),
            exact[l].frobenius_norm(),
            exact[l].sub(&kfac).frobenius_norm(),
            exact[l].sub(&ekfac).frobenius_norm()
        );
    }
    Ok(())
}
