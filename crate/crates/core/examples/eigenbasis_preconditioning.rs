//! One preconditioned step for a single layer: the EK-FAC direction computed
//! in the Kronecker eigenbasis against a dense solve with `Q (R + γ) Qᵀ`, and
//! the K-FAC direction with π-split damping for comparison.
//!
//! ```text
//! cargo run --example eigenbasis_preconditioning
//! ```

use ekfac::fisher::{self, KronStats, RescalingDiag};
use ekfac::linalg::{self, Mat};
use ekfac::nn::{self, GaussianNoiseModel, Network, Targets, Task};
use ekfac::optim;
use ekfac::oracle;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ekfac::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, p, n) = (5, 3, 64);
    let mut net = Network::init(&[d, p], Task::Regression, &mut rng)?;
    let x = oracle::random_mat(&mut rng, n, d);
    let y = Targets::Real(oracle::random_mat(&mut rng, n, p));
    let noise = GaussianNoiseModel::fixed(1.0);
    let preds = net.forward(&x)?;
    let grads = net.backward(&nn::output_grad(Task::Regression, &preds, &y, Some(&noise))?)?;
    let layer = &net.layers()[0];

    let mut stats = KronStats::new(d + 1, p);
    fisher::update_kron_stats(&mut stats, layer, 1.0)?;
    stats.refresh_eig()?;
    let (gamma_in, gamma_ex) = (1e-2, 1e-3);
    let mut resc = RescalingDiag::new(d + 1, p, gamma_in, gamma_ex);
    fisher::update_rescaling(&mut resc, &stats, layer, 1.0, 0)?;

    let v = grads[0].clone();
    let (ea, es) = stats.eigs()?;
    let step = optim::ekfac_direction(ea, es, &resc.total_damped(), &v)?;

    let q = oracle::kron(&es.basis, &ea.basis);
    let precond = q.matmul(&Mat::diag(&linalg::vec(&resc.total_damped()))).matmul_t(&q);
    let dense = oracle::inverse(&precond)?.matvec(&linalg::vec(&v));
    let dense = linalg::unvec(&dense, d + 1, p)?;
    println!(
        "EK-FAC direction vs dense solve: {:.2e} max abs",
        step.max_abs_diff(&dense)
    );

    let (a_inv, s_inv) = optim::damped_inverses(&stats.a, &stats.s, resc.total_damping())?;
    let kstep = optim::kfac_direction(&a_inv, &s_inv, &v);
    let cos = linalg::vec(&step)
        .iter()
        .zip(linalg::vec(&kstep))
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / (step.frobenius_norm() * kstep.frobenius_norm());
    println!(
        "‖gradient‖ {:.4}, ‖EK-FAC step‖ {:.4}, ‖K-FAC step‖ {:.4}",
        v.frobenius_norm(),
        step.frobenius_norm(),
        kstep.frobenius_norm()
    );
    println!("cosine between EK-FAC and K-FAC steps: {cos:.4}");
    Ok(())
}
