use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ekfac::bench::{self, BenchConfig, SplitSpec};
use ekfac::fisher::{self, KronStats, RescalingDiag};
use ekfac::linalg::{self, Mat, SymEig};
use ekfac::nn::{self, GaussianNoiseModel, Network, Targets, Task};
use ekfac::optim::{self, LayerPosterior, ModelPosterior, OptimizerKind, StatsInit, TrainConfig, Trainer};
use ekfac::oracle;
use ekfac::posterior::{EmvgPosterior, MvgPosterior, VariationalPosterior};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn regression_problem(seed: u64, n: usize, d: usize) -> (Mat, Targets) {
    let mut r = rng(seed);
    let x = oracle::random_mat(&mut r, n, d);
    let w = oracle::random_mat(&mut r, d, 1);
    let y = x.matmul(&w).map(|v| (2.0 * v).sin() + 0.1 * r.gen::<f64>());
    (x, Targets::Real(y))
}

/// Row `i` of the result is row `perm[i]` of `m`; the bias row stays last.
fn permute_input_rows(w: &Mat, perm: &[usize]) -> Mat {
    let mut rows: Vec<usize> = perm.to_vec();
    rows.push(w.rows() - 1);
    w.select_rows(&rows)
}

#[test]
fn natural_gradient_optimizers_are_input_permutation_invariant() {
    let (n, d, hidden) = (60, 4, 6);
    let (x, y) = regression_problem(11, n, d);
    let perm = [2, 0, 3, 1];
    let x_perm = Mat::from_fn(n, d, |i, j| x[(i, perm[j])]);
    let mut inverse = [0; 4];
    for (j, &p) in perm.iter().enumerate() {
        inverse[p] = j;
    }
    let base = Network::init(&[d, hidden, 1], Task::Regression, &mut rng(5)).unwrap();
    let mut permuted_weights = base.weights();
    permuted_weights[0] = permute_input_rows(&permuted_weights[0], &perm);
    let permuted = Network::from_weights(permuted_weights, Task::Regression).unwrap();

    for kind in [
        OptimizerKind::Kfac,
        OptimizerKind::Ekfac,
        OptimizerKind::NoisyKfac,
        OptimizerKind::NoisyEkfac,
    ] {
        let cfg = TrainConfig {
            optimizer: kind,
            stats_init: StatsInit::Data,
            alpha: 0.05,
            batch_size: 20,
            epochs: 4,
            t_eig: 2,
            t_reinit: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut a = Trainer::new(cfg.clone(), base.clone(), x.clone(), y.clone()).unwrap();
        let mut b = Trainer::new(cfg, permuted.clone(), x_perm.clone(), y.clone()).unwrap();
        a.run(|_| {}).unwrap();
        b.run(|_| {}).unwrap();

        let wa = a.mean_weights();
        let mut wb = b.mean_weights();
        wb[0] = permute_input_rows(&wb[0], &inverse);
        let pa = nn::predict_with(&wa.iter().collect::<Vec<_>>(), &x).unwrap();
        let pb = nn::predict_with(&wb.iter().collect::<Vec<_>>(), &x).unwrap();
        let diff = pa.max_abs_diff(&pb);
        assert!(diff <= 1e-8, "{kind}: predictions differ by {diff:e}");
    }
}

#[test]
fn conjugate_linear_model_elbo_matches_log_evidence() {
    // y = w x + b + noise with prior N(0, η I) and known noise precision τ;
    // the exact posterior is Gaussian and its ELBO (λ = 1) is the log evidence.
    let (n, eta, tau) = (30, 0.7, 4.0);
    let mut r = rng(2);
    let x = oracle::random_mat(&mut r, n, 1);
    let y: Vec<f64> = (0..n).map(|i| 0.8 * x[(i, 0)] - 0.3 + r.gen_range(-0.5..0.5)).collect();
    let design = x.append_column(1.0);

    let precision = design
        .t_matmul(&design)
        .scale(tau)
        .add(&Mat::identity(2).scale(1.0 / eta));
    let cov = oracle::inverse(&precision).unwrap();
    let ymat = Mat::from_vec(n, 1, y.clone()).unwrap();
    let mean = cov.matmul(&design.t_matmul(&ymat)).scale(tau);

    let marginal = design
        .matmul_t(&design)
        .scale(eta)
        .add(&Mat::identity(n).scale(1.0 / tau));
    let evidence = oracle::gaussian_log_density(&y, &vec![0.0; n], &marginal).unwrap();

    let mvg = MvgPosterior::from_damped_factors(mean, precision, Mat::identity(1), 1.0).unwrap();
    let post = ModelPosterior {
        task: Task::Regression,
        layers: vec![LayerPosterior::Mvg(mvg)],
        noise: GaussianNoiseModel::fixed(tau),
        eta,
        lambda: 1.0,
    };
    let est = optim::estimate_elbo(&post, &x, &Targets::Real(ymat), 200_000, &mut rng(9)).unwrap();
    assert!(
        (est.elbo - evidence).abs() <= 4.0 * est.ll_std_err + 1e-9,
        "elbo {} vs log evidence {evidence} (se {})",
        est.elbo,
        est.ll_std_err
    );
}

#[test]
fn aggregates_are_reproducible_from_records() {
    let ds = bench::synthetic_linear(60, 3, 0.5, 4);
    let mut cfg = BenchConfig::default();
    cfg.train.epochs = 3;
    cfg.hidden = vec![5];
    cfg.split = SplitSpec {
        repeats: 3,
        ..SplitSpec::default()
    };
    cfg.n_mc = 10;
    let opts = [OptimizerKind::NoisyEkfac, OptimizerKind::Bbb];
    let result = bench::run_benchmark(&cfg, &[ds], &opts, 2).unwrap();
    assert_eq!(bench::aggregate(&result.records), result.aggregates);
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=4, 1usize..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kronecker_factors_stay_psd_under_arbitrary_updates(
        seed in any::<u64>(),
        (d, p) in dims(),
        rates in prop::collection::vec(0.0f64..=1.0, 1..12),
    ) {
        let mut r = rng(seed);
        let mut net = Network::init(&[d, p], Task::Regression, &mut r).unwrap();
        let mut stats = KronStats::new(d + 1, p);
        for rate in rates {
            let batch = r.gen_range(1..6);
            let x = oracle::random_mat(&mut r, batch, d).scale(r.gen_range(0.1..10.0));
            let y = Targets::Real(oracle::random_mat(&mut r, batch, p));
            let preds = net.forward(&x).unwrap();
            net.backward(&nn::output_grad(Task::Regression, &preds, &y, Some(&GaussianNoiseModel::fixed(1.0))).unwrap()).unwrap();
            fisher::update_kron_stats(&mut stats, &net.layers()[0], rate).unwrap();
            for m in [&stats.a, &stats.s] {
                prop_assert_eq!(m, &m.transpose());
                let min = linalg::sym_eig_raw(m).unwrap().min_eigval();
                prop_assert!(min >= -1e-8 * m.frobenius_norm().max(1.0), "min eigenvalue {}", min);
            }
        }
    }

    #[test]
    fn rescaling_in_identity_bases_is_diagonal_fisher(seed in any::<u64>(), (d, p) in dims(), batch in 1usize..8) {
        let mut r = rng(seed);
        let mut net = Network::init(&[d, p], Task::Regression, &mut r).unwrap();
        let x = oracle::random_mat(&mut r, batch, d);
        let y = Targets::Real(oracle::random_mat(&mut r, batch, p));
        let preds = net.forward(&x).unwrap();
        net.backward(&nn::output_grad(Task::Regression, &preds, &y, Some(&GaussianNoiseModel::fixed(1.0))).unwrap()).unwrap();
        let layer = &net.layers()[0];

        let mut stats = KronStats::new(d + 1, p);
        stats.set_eigs(identity_eig(d + 1), identity_eig(p)).unwrap();
        let mut resc = RescalingDiag::new(d + 1, p, 0.0, 0.0);
        fisher::update_rescaling(&mut resc, &stats, layer, 1.0, 0).unwrap();

        let mut expected = Mat::zeros(d + 1, p);
        for i in 0..batch {
            let g = layer.per_example_grad(i).unwrap();
            expected = expected.add(&g.map(|v| v * v));
        }
        let expected = expected.scale(1.0 / batch as f64);
        prop_assert!(resc.r.max_abs_diff(&expected) <= 1e-12 * expected.max_abs().max(1.0));
    }

    #[test]
    fn emvg_kl_is_invariant_to_the_orthogonal_basis(seed in any::<u64>(), (n, p) in dims(), eta in 0.1f64..5.0) {
        let mut r = rng(seed);
        let mean = oracle::random_mat(&mut r, n, p);
        let grid = Mat::from_fn(n, p, |_, _| r.gen_range(0.05..3.0));
        let make = |r: &mut ChaCha8Rng| {
            let ea = SymEig { basis: oracle::random_orthogonal(r, n), eigvals: vec![1.0; n] };
            let es = SymEig { basis: oracle::random_orthogonal(r, p), eigvals: vec![1.0; p] };
            let resc = RescalingDiag { r: grid.clone(), gamma_in: 0.0, gamma_ex: 0.0 };
            EmvgPosterior::new(mean.clone(), ea, es, resc, 1.0).unwrap()
        };
        let first = make(&mut r);
        let rotated = make(&mut r);
        let closed = first.kl_to_spherical_prior(eta).unwrap();
        for post in [&first, &rotated] {
            let cov = post.materialize_covariance().unwrap();
            let dense = oracle::kl_to_spherical(&linalg::vec(&mean), &cov, eta).unwrap();
            prop_assert!((dense - closed).abs() <= 1e-8 * closed.abs().max(1.0), "dense {} closed {}", dense, closed);
        }
        prop_assert!((rotated.kl_to_spherical_prior(eta).unwrap() - closed).abs() <= 1e-12 * closed.abs().max(1.0));
    }

    #[test]
    fn splits_partition_the_rows(n in 20usize..400, repeat in 0usize..10, seed in any::<u64>()) {
        let spec = SplitSpec { seed, ..SplitSpec::default() };
        let (train, test) = spec.indices(n, repeat);
        prop_assert_eq!(train.len(), (0.9 * n as f64).round() as usize);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn mean_gradient_is_mean_of_outer_products(seed in any::<u64>(), d in 1usize..5, h in 1usize..6, batch in 1usize..7) {
        let mut r = rng(seed);
        let mut net = Network::init(&[d, h, 2], Task::Regression, &mut r).unwrap();
        let x = oracle::random_mat(&mut r, batch, d);
        let y = Targets::Real(oracle::random_mat(&mut r, batch, 2));
        let preds = net.forward(&x).unwrap();
        let grads = net.backward(&nn::output_grad(Task::Regression, &preds, &y, Some(&GaussianNoiseModel::fixed(1.0))).unwrap()).unwrap();
        for (l, layer) in net.layers().iter().enumerate() {
            let mut sum = Mat::zeros(grads[l].rows(), grads[l].cols());
            for i in 0..batch {
                sum = sum.add(&layer.per_example_grad(i).unwrap());
            }
            let mean = sum.scale(1.0 / batch as f64);
            prop_assert!(mean.max_abs_diff(&grads[l]) <= 1e-12 * grads[l].max_abs().max(1.0));
        }
    }
}

fn identity_eig(d: usize) -> SymEig {
    SymEig {
        basis: Mat::identity(d),
        eigvals: vec![1.0; d],
    }
}
