//! Oracle and property checks over the whole stack.
//!
//! Each `measure_*` function runs a seeded randomized experiment against the
//! dense routes in [`crate::oracle`] and returns raw error measurements; the
//! caller decides the tolerance. [`run`] bundles them with fixed tolerances
//! for the `verify` command.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fisher::{self, KronStats, RescalingDiag};
use crate::fixtures::{self, SamplingLayout, COVARIANCE_FLOOR};
use crate::linalg::{self, Mat};
use crate::nn::{self, GaussianNoiseModel, Network, Targets, Task};
use crate::optim::{self, OptimizerKind, TrainConfig, Trainer};
use crate::oracle;
use crate::posterior::{
    pi_damped_factors, spherical_prior_log_density, EmvgPosterior, FfgPosterior, VariationalPosterior,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            other => Err(Error::config(
                "level",
                format!("expected `fast` or `full`, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<26} {}", self.name, self.detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_abs_vec_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_abs_vec(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct KroneckerOutcome {
    /// Worst `‖got − dense‖∞ / ‖dense‖∞` of the matrix-vector product.
    pub matvec_rel: f64,
    /// Worst eigenvalue mismatch relative to the largest eigenvalue.
    pub eigval_rel: f64,
    /// Worst `‖(S⊗A)v − λv‖∞ / λ_max` over outer-product eigenpairs.
    pub eigpair_rel: f64,
}

/// Factored Kronecker products against explicit `B ⊗ A`.
pub fn measure_kronecker(trials: usize, seed: u64) -> Result<KroneckerOutcome> {
    let mut r = rng(seed);
    let mut out = KroneckerOutcome::default();
    for _ in 0..trials {
        let (n, p) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let a = oracle::random_mat(&mut r, n, n);
        let b = oracle::random_mat(&mut r, p, p);
        let x = oracle::random_vec(&mut r, n * p);
        let got = linalg::kron_matvec(&b, &a, &x)?;
        let dense = oracle::kron(&b, &a).matvec(&x);
        let scale = max_abs_vec(&dense).max(f64::MIN_POSITIVE);
        out.matvec_rel = out.matvec_rel.max(max_abs_vec_diff(&got, &dense) / scale);

        let (da, ds) = (r.gen_range(1..=5), r.gen_range(1..=5));
        let fa = oracle::random_psd(&mut r, da);
        let fs = oracle::random_psd(&mut r, ds);
        let ea = linalg::sym_eig_raw(&fa)?;
        let es = linalg::sym_eig_raw(&fs)?;
        let kron = oracle::kron(&fs, &fa);
        let mut outer: Vec<f64> = es
            .eigvals
            .iter()
            .flat_map(|ls| ea.eigvals.iter().map(move |la| la * ls))
            .collect();
        outer.sort_by(|x, y| y.total_cmp(x));
        let dense_eig = linalg::sym_eig_raw(&kron)?;
        let top = outer[0].abs().max(f64::MIN_POSITIVE);
        out.eigval_rel = out.eigval_rel.max(max_abs_vec_diff(&outer, &dense_eig.eigvals) / top);
        for (j, ls) in es.eigvals.iter().enumerate() {
            for (i, la) in ea.eigvals.iter().enumerate() {
                let v: Vec<f64> = es
                    .basis
                    .col(j)
                    .iter()
                    .flat_map(|s| ea.basis.col(i).into_iter().map(move |a| a * s))
                    .collect();
                let kv = kron.matvec(&v);
                let lv: Vec<f64> = v.iter().map(|x| x * la * ls).collect();
                out.eigpair_rel = out.eigpair_rel.max(max_abs_vec_diff(&kv, &lv) / top);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FrobeniusOutcome {
    pub trials: usize,
    /// Trials where the re-scaled error is no larger than the K-FAC error.
    pub not_worse: usize,
    /// Trials where it is strictly smaller.
    pub strictly_better: usize,
}

/// `‖F̂ − Q R Qᵀ‖_F` against `‖F̂ − Q(Λ_S ⊗ Λ_A)Qᵀ‖_F` with one-shot statistics
/// of the last layer of a random tiny network.
pub fn measure_frobenius_optimality(trials: usize, seed: u64) -> Result<FrobeniusOutcome> {
    let mut r = rng(seed);
    let mut out = FrobeniusOutcome {
        trials,
        ..Default::default()
    };
    for _ in 0..trials {
        let d = r.gen_range(1..=5);
        let h = r.gen_range(2..=7);
        let p = r.gen_range(1..=6);
        let batch = r.gen_range(4..=24);
        let mut net = Network::init(&[d, h, p], Task::Regression, &mut r)?;
        // non-zero biases so the homogeneous coordinate is informative
        let mut w = net.weights();
        for l in &mut w {
            let rows = l.rows();
            for j in 0..l.cols() {
                l[(rows - 1, j)] = r.gen_range(-0.5..0.5);
            }
        }
        net.set_weights(&w)?;
        let x = oracle::random_mat(&mut r, batch, d);
        let y = Targets::Real(oracle::random_mat(&mut r, batch, p));
        let preds = net.forward(&x)?;
        let og = nn::output_grad(Task::Regression, &preds, &y, Some(&GaussianNoiseModel::fixed(1.0)))?;
        net.backward(&og)?;

        let mut layer_ok = (true, true);
        for layer in net.layers() {
            let (rows, cols) = (layer.fan_in() + 1, layer.fan_out());
            let mut stats = KronStats::new(rows, cols);
            fisher::update_kron_stats(&mut stats, layer, 1.0)?;
            stats.refresh_eig()?;
            let mut resc = RescalingDiag::new(rows, cols, 0.0, 0.0);
            fisher::update_rescaling(&mut resc, &stats, layer, 1.0, 0)?;
            let grid = fisher::kfac_eigen_rescaling(&stats)?;

            let k = rows * cols;
            let mut f_hat = Mat::zeros(k, k);
            for i in 0..layer.batch_size() {
                let v = linalg::vec(&layer.per_example_grad(i)?);
                f_hat = f_hat.add(&Mat::outer(&v, &v));
            }
            let f_hat = f_hat.scale(1.0 / layer.batch_size() as f64);
            let (ea, es) = stats.eigs()?;
            let q = oracle::kron(&es.basis, &ea.basis);
            let approx = |diag: &Mat| q.matmul(&Mat::diag(&linalg::vec(diag))).matmul_t(&q);
            let err_r = f_hat.sub(&approx(&resc.r)).frobenius_norm();
            let err_k = f_hat.sub(&approx(&grid)).frobenius_norm();
            let slack = 1e-12 * f_hat.frobenius_norm();
            layer_ok.0 &= err_r <= err_k + slack;
            layer_ok.1 &= err_r < err_k - slack;
        }
        out.not_worse += layer_ok.0 as usize;
        out.strictly_better += layer_ok.1 as usize;
    }
    Ok(out)
}

fn random_regression_trainer<R: Rng + ?Sized>(r: &mut R, cfg: TrainConfig) -> Result<Trainer> {
    let d = r.gen_range(1..=4);
    let h = r.gen_range(2..=6);
    let p = r.gen_range(1..=3);
    let n = r.gen_range(12..=40);
    let net = Network::init(&[d, h, p], Task::Regression, r)?;
    let x = oracle::random_mat(r, n, d);
    let y = Targets::Real(oracle::random_mat(r, n, p));
    Trainer::new(cfg, net, x, y)
}

fn random_train_config<R: Rng + ?Sized>(r: &mut R, optimizer: OptimizerKind) -> TrainConfig {
    TrainConfig {
        optimizer,
        alpha: r.gen_range(0.001..0.1),
        beta: r.gen_range(0.05..1.0),
        omega: r.gen_range(0.05..1.0),
        lambda: r.gen_range(0.1..2.0),
        eta: r.gen_range(0.1..2.0),
        gamma_ex: r.gen_range(0.0..0.05),
        t_eig: r.gen_range(1..=3),
        t_reinit: r.gen_range(1..=10),
        batch_size: r.gen_range(2..=10),
        epochs: 3,
        seed: r.gen(),
        ..TrainConfig::default()
    }
}

/// Dense `(kron(Q_S, Q_A)) diag(1 / r) (kron(Q_S, Q_A))ᵀ vec(V)`.
fn dense_eigen_direction(q_a: &Mat, q_s: &Mat, r_damped: &Mat, v: &Mat) -> Vec<f64> {
    let q = oracle::kron(q_s, q_a);
    let inv = Mat::diag(&linalg::vec(r_damped).iter().map(|x| 1.0 / x).collect::<Vec<_>>());
    q.matmul(&inv).matmul_t(&q).matvec(&linalg::vec(v))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct UpdateOracleOutcome {
    /// Worst relative error of noisy EK-FAC directions.
    pub ekfac_rel: f64,
    /// Worst relative error of noisy K-FAC directions.
    pub kfac_rel: f64,
}

/// Directions produced by real optimizer steps from random states against the
/// dense preconditioners.
pub fn measure_update_oracle(states: usize, seed: u64) -> Result<UpdateOracleOutcome> {
    let mut r = rng(seed);
    let mut out = UpdateOracleOutcome::default();
    for _ in 0..states {
        let cfg = random_train_config(&mut r, OptimizerKind::NoisyEkfac);
        let mut t = random_regression_trainer(&mut r, cfg)?;
        for _ in 0..r.gen_range(1..=8) {
            t.step()?;
        }
        let trace = t.last_step();
        for (l, st) in t.layers().iter().enumerate() {
            let (ea, es) = st.stats.eigs()?;
            let dense = dense_eigen_direction(&ea.basis, &es.basis, &st.resc.total_damped(), &trace.v[l]);
            let got = linalg::vec(&trace.direction[l]);
            out.ekfac_rel = out
                .ekfac_rel
                .max(max_abs_vec_diff(&got, &dense) / max_abs_vec(&dense).max(1e-300));
        }

        // inverses refreshed every step so the oracle sees the same factors
        let cfg = TrainConfig {
            t_eig: 1,
            ..random_train_config(&mut r, OptimizerKind::NoisyKfac)
        };
        let mut t = random_regression_trainer(&mut r, cfg)?;
        for _ in 0..r.gen_range(1..=8) {
            t.step()?;
        }
        let damping = t.gamma_in() + t.config().gamma_ex;
        let trace = t.last_step();
        for (l, st) in t.layers().iter().enumerate() {
            let (ad, sd, _) = pi_damped_factors(&st.stats.a, &st.stats.s, damping);
            let dense = oracle::inverse(&oracle::kron(&sd, &ad))?.matvec(&linalg::vec(&trace.v[l]));
            let got = linalg::vec(&trace.direction[l]);
            out.kfac_rel = out
                .kfac_rel
                .max(max_abs_vec_diff(&got, &dense) / max_abs_vec(&dense).max(1e-300));
        }
    }
    Ok(out)
}

/// Noisy EK-FAC with `R` reset to the Kronecker grid on every iteration
/// against noisy K-FAC with exact damping `(S ⊗ A + γ I)⁻¹`, applied densely.
/// Returns the worst relative difference of the mean-update directions.
pub fn measure_reduction(trials: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let cfg = TrainConfig {
            t_eig: 1,
            t_reinit: 1,
            ..random_train_config(&mut r, OptimizerKind::NoisyEkfac)
        };
        let mut t = random_regression_trainer(&mut r, cfg)?;
        for _ in 0..r.gen_range(1..=6) {
            t.step()?;
        }
        let damping = t.gamma_in() + t.config().gamma_ex;
        let trace = t.last_step();
        for (l, st) in t.layers().iter().enumerate() {
            if st.resc.r != fisher::kfac_eigen_rescaling(&st.stats)? {
                return Err(Error::InvalidArgument(
                    "re-scaling was not pinned to the Kronecker grid".into(),
                ));
            }
            let exact = oracle::kron(&st.stats.s, &st.stats.a).add_diag(damping);
            let dense = oracle::inverse(&exact)?.matvec(&linalg::vec(&trace.v[l]));
            let got = linalg::vec(&trace.direction[l]);
            worst = worst.max(max_abs_vec_diff(&got, &dense) / max_abs_vec(&dense).max(1e-300));
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SamplingOutcome {
    /// Worst relative covariance error on resolvable EMVG fixtures.
    pub emvg_rel: f64,
    /// Worst relative covariance error on resolvable MVG fixtures.
    pub mvg_rel: f64,
    /// Worst z-score of any covariance entry on generic 2 × 3 fixtures.
    pub generic_z: f64,
    /// Worst absolute log-density error against the dense Gaussian.
    pub log_density_abs: f64,
}

fn empirical_cov<P: VariationalPosterior, R: Rng + ?Sized>(post: &P, samples: usize, r: &mut R) -> Result<Mat> {
    let draws = (0..samples)
        .map(|_| post.sample(r).map(|w| linalg::vec(&w)))
        .collect::<Result<Vec<_>>>()?;
    Ok(oracle::empirical_covariance(&draws))
}

/// Monte-Carlo covariances of EMVG and MVG samples against the materialized
/// covariance, and EMVG log-densities against the dense Gaussian.
pub fn measure_sampling(samples: usize, seed: u64) -> Result<SamplingOutcome> {
    let mut r = rng(seed);
    let mut out = SamplingOutcome::default();
    for layout in [SamplingLayout::Generic(2, 2), SamplingLayout::Decoupled2x3] {
        let post = fixtures::resolvable(&mut r, |r| fixtures::random_emvg(r, layout, 0.1, 0.5))?;
        let cov = post.materialize_covariance()?;
        let est = empirical_cov(&post, samples, &mut r)?;
        out.emvg_rel = out
            .emvg_rel
            .max(oracle::max_relative_error_above(&est, &cov, COVARIANCE_FLOOR));

        let post = fixtures::resolvable(&mut r, |r| fixtures::random_mvg(r, layout, 0.1, 0.5))?;
        let cov = post.materialize_covariance()?;
        let est = empirical_cov(&post, samples, &mut r)?;
        out.mvg_rel = out
            .mvg_rel
            .max(oracle::max_relative_error_above(&est, &cov, COVARIANCE_FLOOR));
    }
    let post = fixtures::random_emvg(&mut r, SamplingLayout::Generic(2, 3), 0.1, 0.5)?;
    let cov = post.materialize_covariance()?;
    let est = empirical_cov(&post, samples, &mut r)?;
    out.generic_z = oracle::max_covariance_z_score(&est, &cov, samples);
    let post = fixtures::random_mvg(&mut r, SamplingLayout::Generic(2, 3), 0.1, 0.5)?;
    let cov = post.materialize_covariance()?;
    let est = empirical_cov(&post, samples, &mut r)?;
    out.generic_z = out.generic_z.max(oracle::max_covariance_z_score(&est, &cov, samples));

    for _ in 0..20 {
        let post = fixtures::random_emvg(&mut r, SamplingLayout::Generic(2, 2), 0.1, 0.5)?;
        let cov = post.materialize_covariance()?;
        for _ in 0..5 {
            let w = post.sample(&mut r)?.add(&oracle::random_mat(&mut r, 2, 2).scale(0.3));
            let dense = oracle::gaussian_log_density(&linalg::vec(&w), &linalg::vec(&post.mean), &cov)?;
            out.log_density_abs = out.log_density_abs.max((post.log_density(&w)? - dense).abs());
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct KlOutcome {
    /// Worst `|closed form − dense|` over all families.
    pub dense_abs: f64,
    /// Worst `|closed form − MC| / SE` per family: EMVG, MVG, FFG.
    pub mc_z: [f64; 3],
}

fn mc_kl<P: VariationalPosterior, R: Rng + ?Sized>(
    post: &P,
    eta: f64,
    samples: usize,
    r: &mut R,
) -> Result<(f64, f64)> {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let w = post.sample(r)?;
        let v = post.log_density(&w)? - spherical_prior_log_density(&w, eta);
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Closed-form KL divergences against dense-covariance KL and Monte-Carlo
/// estimates of `E_q[log q − log p]`.
pub fn measure_kl(dense_trials: usize, mc_samples: usize, seed: u64) -> Result<KlOutcome> {
    let mut r = rng(seed);
    let mut out = KlOutcome::default();
    let ffg = |r: &mut ChaCha8Rng, n: usize, p: usize| {
        FfgPosterior::new(oracle::random_mat(r, n, p), oracle::random_mat(r, n, p).scale(0.5))
    };
    for _ in 0..dense_trials {
        let eta = r.gen_range(0.2..3.0);
        let (n, p) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let layout = SamplingLayout::Generic(n, p);
        let e = fixtures::random_emvg(&mut r, layout, 0.1, 0.3)?;
        let m = fixtures::random_mvg(&mut r, layout, 0.1, 0.3)?;
        let f = ffg(&mut r, n, p)?;
        let check = |closed: f64, mean: &Mat, cov: Mat| -> Result<f64> {
            Ok((closed - oracle::kl_to_spherical(&linalg::vec(mean), &cov, eta)?).abs())
        };
        out.dense_abs = out
            .dense_abs
            .max(check(
                e.kl_to_spherical_prior(eta)?,
                &e.mean,
                e.materialize_covariance()?,
            )?)
            .max(check(
                m.kl_to_spherical_prior(eta)?,
                &m.mean,
                m.materialize_covariance()?,
            )?)
            .max(check(
                f.kl_to_spherical_prior(eta)?,
                &f.mean,
                f.materialize_covariance()?,
            )?);
    }
    let eta = 0.8;
    let layout = SamplingLayout::Generic(2, 3);
    let e = fixtures::random_emvg(&mut r, layout, 0.1, 0.3)?;
    let m = fixtures::random_mvg(&mut r, layout, 0.1, 0.3)?;
    let f = ffg(&mut r, 2, 3)?;
    let z = |closed: f64, (mean, se): (f64, f64)| (closed - mean).abs() / se;
    out.mc_z = [
        z(e.kl_to_spherical_prior(eta)?, mc_kl(&e, eta, mc_samples, &mut r)?),
        z(m.kl_to_spherical_prior(eta)?, mc_kl(&m, eta, mc_samples, &mut r)?),
        z(f.kl_to_spherical_prior(eta)?, mc_kl(&f, eta, mc_samples, &mut r)?),
    ];
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradientOutcome {
    /// Worst per-layer `‖fd − analytic‖ / ‖analytic‖` of backprop gradients.
    pub backprop_rel: f64,
    /// Same for the BBB objective with respect to `(μ, log σ)`.
    pub bbb_rel: f64,
}

fn rel_err(fd: &Mat, an: &Mat) -> f64 {
    fd.sub(an).frobenius_norm() / an.frobenius_norm().max(1e-8)
}

fn central_difference(w: &Mat, h: f64, mut f: impl FnMut(&Mat) -> Result<f64>) -> Result<Mat> {
    let mut out = Mat::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[(i, j)] += h;
            minus[(i, j)] -= h;
            out[(i, j)] = (f(&plus)? - f(&minus)?) / (2.0 * h);
        }
    }
    Ok(out)
}

const KINK_MARGIN: f64 = 1e-3;

/// Smallest `|s|` over the hidden-layer pre-activations of `x`.
fn kink_margin(weights: &[Mat], x: &Mat) -> f64 {
    let mut margin = f64::INFINITY;
    let mut h = x.clone();
    for w in &weights[..weights.len() - 1] {
        let s = h.append_column(1.0).matmul(w);
        margin = s.as_slice().iter().fold(margin, |m, v| m.min(v.abs()));
        h = s.map(|v| v.max(0.0));
    }
    margin
}

/// Central finite differences of the mean log-likelihood and of the BBB
/// objective on random networks with one to three layers.
pub fn measure_gradients(trials: usize, seed: u64) -> Result<GradientOutcome> {
    let mut r = rng(seed);
    let mut out = GradientOutcome::default();
    let h = 1e-5;
    for trial in 0..trials {
        let depth = 1 + trial % 3;
        let mut sizes = vec![r.gen_range(1..=4)];
        for _ in 1..depth {
            sizes.push(r.gen_range(2..=5));
        }
        let classify = trial % 2 == 1;
        let task = if classify {
            Task::Classification
        } else {
            Task::Regression
        };
        sizes.push(if classify {
            r.gen_range(2..=4)
        } else {
            r.gen_range(1..=2)
        });
        let n = 6;
        let x = oracle::random_mat(&mut r, n, sizes[0]);
        let out_dim = *sizes.last().unwrap();
        let y = if classify {
            Targets::Labels((0..n).map(|_| r.gen_range(0..out_dim)).collect())
        } else {
            Targets::Real(oracle::random_mat(&mut r, n, out_dim))
        };
        let noise = GaussianNoiseModel::fixed(r.gen_range(0.5..2.0));
        let noise_opt = (task == Task::Regression).then_some(&noise);
        // Finite differences are meaningless across a ReLU kink, so fixtures
        // keep every hidden pre-activation at least KINK_MARGIN from zero, at
        // the weights and at the BBB sample.
        let log_sigma_of = |w: &Mat, r: &mut ChaCha8Rng| w.map(|_| r.gen_range(-2.0..-0.5));
        let (weights, log_sigmas, eps) = loop {
            let w: Vec<Mat> = sizes
                .windows(2)
                .map(|d| oracle::random_mat(&mut r, d[0] + 1, d[1]))
                .collect();
            let ls: Vec<Mat> = w.iter().map(|w| log_sigma_of(w, &mut r)).collect();
            let e: Vec<Mat> = w
                .iter()
                .map(|w| oracle::random_mat(&mut r, w.rows(), w.cols()))
                .collect();
            let sampled: Vec<Mat> = w
                .iter()
                .zip(&ls)
                .zip(&e)
                .map(|((m, s), e)| m.zip_map(&s.zip_map(e, |s, e| s.exp() * e), |m, d| m + d))
                .collect();
            if kink_margin(&w, &x) >= KINK_MARGIN && kink_margin(&sampled, &x) >= KINK_MARGIN {
                break (w, ls, e);
            }
        };
        let mut net = Network::from_weights(weights.clone(), task)?;
        let preds = net.forward(&x)?;
        let grads = net.backward(&nn::output_grad(task, &preds, &y, noise_opt)?)?;
        for l in 0..weights.len() {
            let fd = central_difference(&weights[l], h, |wl| {
                let mut w = weights.clone();
                w[l] = wl.clone();
                let refs: Vec<&Mat> = w.iter().collect();
                let p = nn::predict_with(&refs, &x)?;
                let ll = nn::log_likelihood(task, &p, &y, noise_opt)?;
                Ok(ll.iter().sum::<f64>() / n as f64)
            })?;
            out.backprop_rel = out.backprop_rel.max(rel_err(&fd, &grads[l]));
        }

        if task == Task::Regression {
            let posts: Vec<FfgPosterior> = weights
                .iter()
                .zip(log_sigmas)
                .map(|(w, ls)| FfgPosterior::new(w.clone(), ls))
                .collect::<Result<_>>()?;
            let (kl_scale, eta) = (0.05, 0.9);
            let (_, g) = optim::bbb_objective_and_grad(&mut net, &posts, &eps, &x, &y, &noise, kl_scale, eta)?;
            for l in 0..posts.len() {
                for which in 0..2 {
                    let base = if which == 0 {
                        &posts[l].mean
                    } else {
                        &posts[l].log_sigma
                    };
                    let fd = central_difference(base, h, |m| {
                        let mut ps = posts.clone();
                        if which == 0 {
                            ps[l].mean = m.clone();
                        } else {
                            ps[l].log_sigma = m.clone();
                        }
                        let mut scratch = net.clone();
                        Ok(optim::bbb_objective_and_grad(&mut scratch, &ps, &eps, &x, &y, &noise, kl_scale, eta)?.0)
                    })?;
                    let an = if which == 0 { &g[l].0 } else { &g[l].1 };
                    out.bbb_rel = out.bbb_rel.max(rel_err(&fd, an));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct PsdOutcome {
    /// Smallest eigenvalue over all materialized covariances.
    pub min_eigval: f64,
    /// Whether every re-scaling grid was non-negative.
    pub r_nonnegative: bool,
}

/// Positive semi-definiteness of posterior covariances. With `corrupt_r` the
/// largest entry of one EMVG re-scaling grid is negated first.
pub fn measure_psd(trials: usize, seed: u64, corrupt_r: bool) -> Result<PsdOutcome> {
    let mut r = rng(seed);
    let mut out = PsdOutcome {
        min_eigval: f64::INFINITY,
        r_nonnegative: true,
    };
    for t in 0..trials {
        let layout = SamplingLayout::Generic(r.gen_range(1..=3), r.gen_range(1..=3));
        let mut e = fixtures::random_emvg(&mut r, layout, 0.05, 0.5)?;
        if corrupt_r && t == 0 {
            let grid = e.resc.r.clone();
            let (idx, _) =
                grid.as_slice().iter().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                );
            let mut resc = e.resc.clone();
            resc.r.as_mut_slice()[idx] = -grid.as_slice()[idx];
            e = EmvgPosterior { resc, ..e };
        }
        out.r_nonnegative &= e.resc.is_nonnegative();
        let covs = [
            e.materialize_covariance(),
            fixtures::random_mvg(&mut r, layout, 0.05, 0.5)?.materialize_covariance(),
        ];
        for cov in covs {
            match cov {
                Ok(c) => out.min_eigval = out.min_eigval.min(linalg::sym_eig_raw(&c)?.min_eigval()),
                Err(_) => out.min_eigval = f64::NEG_INFINITY,
            }
        }
    }
    Ok(out)
}

/// Options for [`run`].
#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub level: Level,
    pub seed: u64,
    /// Negate one re-scaling entry before the PSD check.
    pub corrupt_r: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            level: Level::Fast,
            seed: 0,
            corrupt_r: false,
        }
    }
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn failed(name: &'static str, e: Error) -> Check {
    check(name, false, format!("error: {e}"))
}

/// Runs every property and returns one result per property, in order. The
/// optional callback sees each result as soon as it is available.
pub fn run(opts: VerifyOptions, mut on_check: impl FnMut(&Check)) -> Vec<Check> {
    let full = opts.level == Level::Full;
    let seed = opts.seed;
    let mut checks = Vec::new();
    let mut push = |c: Check| {
        on_check(&c);
        checks.push(c);
    };
    let started = Instant::now();

    let trials = if full { 500 } else { 100 };
    match measure_kronecker(trials, seed) {
        Ok(k) => {
            push(check(
                "kronecker-matvec",
                k.matvec_rel <= 1e-12,
                format!(
                    "{trials} trials, worst relative error {:.2e} (limit 1e-12)",
                    k.matvec_rel
                ),
            ));
            push(check(
                "kronecker-eigenvalues",
                k.eigval_rel <= 1e-8 && k.eigpair_rel <= 1e-8,
                format!(
                    "worst eigenvalue error {:.2e}, eigenpair residual {:.2e} (limit 1e-8)",
                    k.eigval_rel, k.eigpair_rel
                ),
            ));
        }
        Err(e) => push(failed("kronecker", e)),
    }

    let trials = if full { 100 } else { 30 };
    match measure_frobenius_optimality(trials, seed) {
        Ok(f) => push(check(
            "frobenius-optimality",
            f.not_worse == f.trials && f.strictly_better * 100 >= 95 * f.trials,
            format!(
                "{}/{} not worse, {}/{} strictly better",
                f.not_worse, f.trials, f.strictly_better, f.trials
            ),
        )),
        Err(e) => push(failed("frobenius-optimality", e)),
    }

    let states = if full { 200 } else { 40 };
    match measure_update_oracle(states, seed) {
        Ok(u) => {
            push(check(
                "ekfac-update-oracle",
                u.ekfac_rel <= 1e-10,
                format!(
                    "{states} states, worst relative error {:.2e} (limit 1e-10)",
                    u.ekfac_rel
                ),
            ));
            push(check(
                "kfac-update-oracle",
                u.kfac_rel <= 1e-10,
                format!("{states} states, worst relative error {:.2e} (limit 1e-10)", u.kfac_rel),
            ));
        }
        Err(e) => push(failed("update-oracle", e)),
    }

    let trials = if full { 100 } else { 30 };
    match measure_reduction(trials, seed) {
        Ok(w) => push(check(
            "ekfac-kfac-reduction",
            w <= 1e-8,
            format!("{trials} trials, worst relative difference {w:.2e} (limit 1e-8)"),
        )),
        Err(e) => push(failed("ekfac-kfac-reduction", e)),
    }

    let samples = if full { 200_000 } else { 20_000 };
    match measure_sampling(samples, seed) {
        Ok(s) => {
            if full {
                push(check(
                    "sampling-covariance",
                    s.emvg_rel <= 0.05 && s.mvg_rel <= 0.05 && s.generic_z <= 5.0,
                    format!(
                        "{samples} samples, EMVG {:.3}, MVG {:.3} relative (limit 0.05), generic max z {:.2} (limit 5)",
                        s.emvg_rel, s.mvg_rel, s.generic_z
                    ),
                ));
            } else {
                push(check(
                    "sampling-covariance",
                    s.generic_z <= 5.0 && s.emvg_rel <= 0.15 && s.mvg_rel <= 0.15,
                    format!(
                        "{samples} samples, EMVG {:.3}, MVG {:.3} relative (limit 0.15), generic max z {:.2} (limit 5)",
                        s.emvg_rel, s.mvg_rel, s.generic_z
                    ),
                ));
            }
            push(check(
                "emvg-log-density",
                s.log_density_abs <= 1e-8,
                format!("worst absolute error {:.2e} (limit 1e-8)", s.log_density_abs),
            ));
        }
        Err(e) => push(failed("sampling", e)),
    }

    let mc = if full { 100_000 } else { 20_000 };
    match measure_kl(50, mc, seed) {
        Ok(k) => {
            push(check(
                "kl-dense-oracle",
                k.dense_abs <= 1e-8,
                format!("worst absolute error {:.2e} (limit 1e-8)", k.dense_abs),
            ));
            push(check(
                "kl-monte-carlo",
                k.mc_z.iter().all(|z| *z <= 3.0),
                format!(
                    "{mc} samples, z EMVG {:.2}, MVG {:.2}, FFG {:.2} (limit 3)",
                    k.mc_z[0], k.mc_z[1], k.mc_z[2]
                ),
            ));
        }
        Err(e) => push(failed("kl", e)),
    }

    let trials = if full { 30 } else { 9 };
    match measure_gradients(trials, seed) {
        Ok(g) => push(check(
            "gradient-finite-difference",
            g.backprop_rel <= 1e-5 && g.bbb_rel <= 1e-5,
            format!(
                "backprop {:.2e}, BBB {:.2e} relative (limit 1e-5)",
                g.backprop_rel, g.bbb_rel
            ),
        )),
        Err(e) => push(failed("gradient-finite-difference", e)),
    }

    match measure_psd(50, seed, opts.corrupt_r) {
        Ok(p) => push(check(
            "posterior-psd",
            p.r_nonnegative && p.min_eigval >= -1e-10,
            format!(
                "re-scaling non-negative: {}, min covariance eigenvalue {:.2e} (limit -1e-10)",
                p.r_nonnegative, p.min_eigval
            ),
        )),
        Err(e) => push(failed("posterior-psd", e)),
    }

    log::info!("verify finished in {:.1} s", started.elapsed().as_secs_f64());
    checks
}
