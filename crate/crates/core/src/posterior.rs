//! Variational posterior families over one layer's weight matrix.
//!
//! * [`FfgPosterior`]: fully factorized Gaussian.
//! * [`MvgPosterior`]: matrix-variate Gaussian, `vec(W) ~ N(vec(M), scale·(S^γ)⁻¹ ⊗ (A^γ)⁻¹)`.
//! * [`EmvgPosterior`]: eigenvalue-corrected matrix-variate Gaussian with a
//!   full diagonal variance in the Kronecker eigenbasis.
//!
//! MVG and EMVG are both Gaussian with covariance `Q diag(d) Qᵀ` for
//! `Q = Q_S ⊗ Q_A`; they differ only in how the variance grid `d` is built.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::RescalingDiag;
use crate::linalg::{self, Mat, SymEig};
use crate::oracle::{self, DENSE_LIMIT};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Floor for BBB log standard deviations.
pub const LOG_SIGMA_MIN: f64 = -10.0;

pub trait VariationalPosterior {
    fn mean(&self) -> &Mat;

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Mat>;

    fn log_density(&self, w: &Mat) -> Result<f64>;

    /// `KL(q ‖ N(0, η I))` in closed form.
    fn kl_to_spherical_prior(&self, eta: f64) -> Result<f64>;

    /// Dense covariance of `vec(W)`; only for small layers.
    fn materialize_covariance(&self) -> Result<Mat>;
}

pub fn kl_to_spherical_prior<P: VariationalPosterior>(post: &P, eta: f64) -> Result<f64> {
    post.kl_to_spherical_prior(eta)
}

pub fn materialize_covariance<P: VariationalPosterior>(post: &P) -> Result<Mat> {
    post.materialize_covariance()
}

/// Log-density of `N(0, η I)` at `w`.
pub fn spherical_prior_log_density(w: &Mat, eta: f64) -> f64 {
    let k = w.len() as f64;
    let sq: f64 = w.as_slice().iter().map(|v| v * v).sum();
    -0.5 * (sq / eta + k * (eta.ln() + LN_2PI))
}

fn standard_normal_mat<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "prior variance must be positive, got {eta}"
        )))
    }
}

fn guard_size(m: &Mat) -> Result<()> {
    if m.len() > DENSE_LIMIT {
        Err(Error::SizeGuard {
            size: m.len(),
            limit: DENSE_LIMIT,
        })
    } else {
        Ok(())
    }
}

fn positive_grid(d: &Mat) -> Result<()> {
    for (i, &v) in d.as_slice().iter().enumerate() {
        if v.is_nan() || v <= 0.0 {
            return Err(Error::NonPositiveVariance { index: i, value: v });
        }
    }
    Ok(())
}

/// `−½ Σ [P²/d + ln d + ln 2π]` with `P = Q_Aᵀ (W − M) Q_S`.
fn eigen_grid_log_density(mean: &Mat, q_a: &Mat, q_s: &Mat, d: &Mat, w: &Mat) -> Result<f64> {
    positive_grid(d)?;
    let p = linalg::project_to_eigenbasis(q_a, q_s, &w.sub(mean))?;
    Ok(-0.5
        * p.as_slice()
            .iter()
            .zip(d.as_slice())
            .map(|(pi, di)| pi * pi / di + di.ln() + LN_2PI)
            .sum::<f64>())
}

/// KL to `N(0, η I)` from the trace and log-determinant of `Σ`.
fn gaussian_kl(mean: &Mat, trace: f64, log_det: f64, eta: f64) -> f64 {
    let k = mean.len() as f64;
    let sq: f64 = mean.as_slice().iter().map(|v| v * v).sum();
    0.5 * (trace / eta + sq / eta - k + k * eta.ln() - log_det)
}

fn eigen_grid_covariance(q_a: &Mat, q_s: &Mat, d: &Mat) -> Result<Mat> {
    guard_size(d)?;
    let q = oracle::kron(q_s, q_a);
    let dv = linalg::vec(d);
    let scaled = Mat::from_fn(q.rows(), q.cols(), |i, j| q[(i, j)] * dv[j]);
    Ok(scaled.matmul_t(&q))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmvgPosterior {
    pub mean: Mat,
    pub eig_a: SymEig,
    pub eig_s: SymEig,
    pub resc: RescalingDiag,
    /// `λ / N`
    pub scale: f64,
}

impl EmvgPosterior {
    pub fn new(mean: Mat, eig_a: SymEig, eig_s: SymEig, resc: RescalingDiag, scale: f64) -> Result<Self> {
        if (eig_a.dim(), eig_s.dim()) != mean.shape() || resc.r.shape() != mean.shape() {
            return Err(Error::dims(
                "EmvgPosterior::new",
                format!("{:?}", mean.shape()),
                format!("bases ({}, {}), grid {:?}", eig_a.dim(), eig_s.dim(), resc.r.shape()),
            ));
        }
        Ok(EmvgPosterior {
            mean,
            eig_a,
            eig_s,
            resc,
            scale,
        })
    }

    /// Eigenbasis variances `d = scale / (r + γ_in)`.
    pub fn variance_grid(&self) -> Result<Mat> {
        let damped = self.resc.intrinsic_damped();
        positive_grid(&damped)?;
        Ok(damped.map(|v| self.scale / v))
    }
}

impl VariationalPosterior for EmvgPosterior {
    fn mean(&self) -> &Mat {
        &self.mean
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Mat> {
        sample_emvg(self, rng)
    }

    fn log_density(&self, w: &Mat) -> Result<f64> {
        emvg_log_density(self, w)
    }

    fn kl_to_spherical_prior(&self, eta: f64) -> Result<f64> {
        check_eta(eta)?;
        let d = self.variance_grid()?;
        positive_grid(&d)?;
        let trace = d.as_slice().iter().sum();
        let log_det = d.as_slice().iter().map(|v| v.ln()).sum();
        Ok(gaussian_kl(&self.mean, trace, log_det, eta))
    }

    fn materialize_covariance(&self) -> Result<Mat> {
        eigen_grid_covariance(&self.eig_a.basis, &self.eig_s.basis, &self.variance_grid()?)
    }
}

/// `M + Q_A [X ⊙ unvec(√d)] Q_Sᵀ` with `X` standard normal.
pub fn sample_emvg<R: Rng + ?Sized>(post: &EmvgPosterior, rng: &mut R) -> Result<Mat> {
    let d = post.variance_grid()?;
    let (rows, cols) = post.mean.shape();
    let x = standard_normal_mat(rng, rows, cols);
    let noise = linalg::project_from_eigenbasis(
        &post.eig_a.basis,
        &post.eig_s.basis,
        &x.zip_map(&d, |xi, di| xi * di.sqrt()),
    )?;
    Ok(post.mean.add(&noise))
}

pub fn emvg_log_density(post: &EmvgPosterior, w: &Mat) -> Result<f64> {
    eigen_grid_log_density(
        &post.mean,
        &post.eig_a.basis,
        &post.eig_s.basis,
        &post.variance_grid()?,
        w,
    )
}

/// Factored damping split `π = ((tr A / dim A) / (tr S / dim S))^{1/4}`.
pub fn pi_split(a: &Mat, s: &Mat) -> f64 {
    let ta = a.trace() / a.rows() as f64;
    let ts = s.trace() / s.rows() as f64;
    if ta > 0.0 && ts > 0.0 && ta.is_finite() && ts.is_finite() {
        (ta / ts).powf(0.25)
    } else {
        1.0
    }
}

/// `(A + π√γ I, S + (1/π)√γ I, π)`.
pub fn pi_damped_factors(a: &Mat, s: &Mat, damping: f64) -> (Mat, Mat, f64) {
    let pi = pi_split(a, s);
    let root = damping.sqrt();
    (a.add_diag(pi * root), s.add_diag(root / pi), pi)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MvgPosterior {
    pub mean: Mat,
    /// Damped `A^γ`; row covariance is `scale · (A^γ)⁻¹`.
    pub row_cov_inv_factor: Mat,
    /// Damped `S^γ`; column covariance is `(S^γ)⁻¹`.
    pub col_cov_inv_factor: Mat,
    pub pi: f64,
    pub scale: f64,
    row_eig: SymEig,
    col_eig: SymEig,
    row_root: Mat,
    col_root: Mat,
}

impl MvgPosterior {
    /// Damps raw Kronecker factors with the π split of `γ_in`.
    pub fn new(mean: Mat, a: &Mat, s: &Mat, gamma_in: f64, scale: f64) -> Result<Self> {
        let (ad, sd, pi) = pi_damped_factors(a, s, gamma_in);
        let mut post = MvgPosterior::from_damped_factors(mean, ad, sd, scale)?;
        post.pi = pi;
        Ok(post)
    }

    /// Uses already-damped factors as given.
    pub fn from_damped_factors(mean: Mat, row_factor: Mat, col_factor: Mat, scale: f64) -> Result<Self> {
        if (row_factor.rows(), col_factor.rows()) != mean.shape() {
            return Err(Error::dims(
                "MvgPosterior",
                format!("{:?}", mean.shape()),
                format!("({}, {})", row_factor.rows(), col_factor.rows()),
            ));
        }
        let row_eig = linalg::sym_eig_raw(&row_factor)?;
        let col_eig = linalg::sym_eig_raw(&col_factor)?;
        for e in [&row_eig, &col_eig] {
            if e.min_eigval().is_nan() || e.min_eigval() <= 0.0 {
                return Err(Error::Singular(e.min_eigval()));
            }
        }
        // L_U = Q_U D_U^{1/2} and L_Vᵀ = D_V^{1/2} Q_Vᵀ: standard normals live
        // in the factor eigenbasis, as for EMVG.
        let row_root = Mat::from_fn(row_eig.dim(), row_eig.dim(), |i, j| {
            row_eig.basis[(i, j)] * (scale / row_eig.eigvals[j]).sqrt()
        });
        let col_root = Mat::from_fn(col_eig.dim(), col_eig.dim(), |i, j| {
            (1.0 / col_eig.eigvals[i]).sqrt() * col_eig.basis[(j, i)]
        });
        Ok(MvgPosterior {
            mean,
            row_cov_inv_factor: row_factor,
            col_cov_inv_factor: col_factor,
            pi: 1.0,
            scale,
            row_eig,
            col_eig,
            row_root,
            col_root,
        })
    }

    /// Variances in the factor eigenbasis: `scale / (λ_A,i λ_S,j)`.
    pub fn variance_grid(&self) -> Mat {
        Mat::from_fn(self.mean.rows(), self.mean.cols(), |i, j| {
            self.scale / (self.row_eig.eigvals[i] * self.col_eig.eigvals[j])
        })
    }

    pub fn row_eig(&self) -> &SymEig {
        &self.row_eig
    }

    pub fn col_eig(&self) -> &SymEig {
        &self.col_eig
    }
}

impl VariationalPosterior for MvgPosterior {
    fn mean(&self) -> &Mat {
        &self.mean
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Mat> {
        sample_mvg(self, rng)
    }

    fn log_density(&self, w: &Mat) -> Result<f64> {
        eigen_grid_log_density(
            &self.mean,
            &self.row_eig.basis,
            &self.col_eig.basis,
            &self.variance_grid(),
            w,
        )
    }

    fn kl_to_spherical_prior(&self, eta: f64) -> Result<f64> {
        check_eta(eta)?;
        if self.scale.is_nan() || self.scale <= 0.0 {
            return Err(Error::NonPositiveVariance {
                index: 0,
                value: self.scale,
            });
        }
        let (n, p) = (self.mean.rows() as f64, self.mean.cols() as f64);
        let tr_u: f64 = self.row_eig.eigvals.iter().map(|l| 1.0 / l).sum();
        let tr_v: f64 = self.col_eig.eigvals.iter().map(|l| 1.0 / l).sum();
        let ld_u: f64 = self.row_eig.eigvals.iter().map(|l| -l.ln()).sum();
        let ld_v: f64 = self.col_eig.eigvals.iter().map(|l| -l.ln()).sum();
        // tr(cU ⊗ V) = c tr U tr V, log|cU ⊗ V| = np ln c + p ln|U| + n ln|V|
        let trace = self.scale * tr_u * tr_v;
        let log_det = n * p * self.scale.ln() + p * ld_u + n * ld_v;
        Ok(gaussian_kl(&self.mean, trace, log_det, eta))
    }

    fn materialize_covariance(&self) -> Result<Mat> {
        guard_size(&self.mean)?;
        let u = self.row_eig.spectral_map(|l| self.scale / l);
        let v = self.col_eig.spectral_map(|l| 1.0 / l);
        Ok(oracle::kron(&v, &u))
    }
}

/// `M + L_U X L_Vᵀ` with `L Lᵀ` the covariance factors, built from their
/// eigendecompositions.
pub fn sample_mvg<R: Rng + ?Sized>(post: &MvgPosterior, rng: &mut R) -> Result<Mat> {
    let (rows, cols) = post.mean.shape();
    let x = standard_normal_mat(rng, rows, cols);
    Ok(post.mean.add(&post.row_root.matmul(&x).matmul(&post.col_root)))
}

/// Fully factorized Gaussian parameterized by mean and log standard deviation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FfgPosterior {
    pub mean: Mat,
    pub log_sigma: Mat,
}

impl FfgPosterior {
    pub fn new(mean: Mat, log_sigma: Mat) -> Result<Self> {
        if mean.shape() != log_sigma.shape() {
            return Err(Error::dims(
                "FfgPosterior::new",
                format!("{:?}", mean.shape()),
                format!("{:?}", log_sigma.shape()),
            ));
        }
        Ok(FfgPosterior { mean, log_sigma })
    }

    pub fn from_variance(mean: Mat, variance: &Mat) -> Result<Self> {
        positive_grid(variance)?;
        FfgPosterior::new(mean, variance.map(|v| 0.5 * v.ln()))
    }

    pub fn sigma(&self) -> Mat {
        self.log_sigma.map(f64::exp)
    }

    pub fn variance(&self) -> Mat {
        self.log_sigma.map(|r| (2.0 * r).exp())
    }

    /// Sample and the standard-normal noise that produced it.
    pub fn sample_with_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> (Mat, Mat) {
        let eps = standard_normal_mat(rng, self.mean.rows(), self.mean.cols());
        (self.reparameterize(&eps), eps)
    }

    /// `μ + σ ⊙ ε`
    pub fn reparameterize(&self, eps: &Mat) -> Mat {
        self.mean.add(&self.sigma().hadamard(eps))
    }
}

impl VariationalPosterior for FfgPosterior {
    fn mean(&self) -> &Mat {
        &self.mean
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Mat> {
        Ok(self.sample_with_noise(rng).0)
    }

    fn log_density(&self, w: &Mat) -> Result<f64> {
        let var = self.variance();
        positive_grid(&var)?;
        Ok(-0.5
            * w.as_slice()
                .iter()
                .zip(self.mean.as_slice())
                .zip(var.as_slice())
                .map(|((wi, mi), vi)| (wi - mi) * (wi - mi) / vi + vi.ln() + LN_2PI)
                .sum::<f64>())
    }

    fn kl_to_spherical_prior(&self, eta: f64) -> Result<f64> {
        check_eta(eta)?;
        let var = self.variance();
        let trace = var.as_slice().iter().sum();
        let log_det = 2.0 * self.log_sigma.as_slice().iter().sum::<f64>();
        Ok(gaussian_kl(&self.mean, trace, log_det, eta))
    }

    fn materialize_covariance(&self) -> Result<Mat> {
        guard_size(&self.mean)?;
        Ok(Mat::diag(&linalg::vec(&self.variance())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::{kfac_eigen_rescaling, KronStats};
    use crate::fixtures::{self, SamplingLayout};
    use crate::oracle::{
        empirical_covariance, max_covariance_z_score, max_relative_error_above, random_mat, random_psd,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_emvg(r: &mut ChaCha8Rng, n: usize, p: usize, gamma_in: f64, scale: f64) -> EmvgPosterior {
        let mut stats = KronStats::from_factors(random_psd(r, n), random_psd(r, p)).unwrap();
        stats.refresh_eig().unwrap();
        let mut resc = RescalingDiag::new(n, p, gamma_in, 0.0);
        resc.r = random_mat(r, n, p).map(|v| v * v + 0.1);
        let (ea, es) = stats.eigs().unwrap();
        EmvgPosterior::new(random_mat(r, n, p), ea.clone(), es.clone(), resc, scale).unwrap()
    }

    #[test]
    fn emvg_zero_scale_returns_mean() {
        let mut r = rng(1);
        let post = random_emvg(&mut r, 2, 3, 0.1, 0.0);
        assert_eq!(sample_emvg(&post, &mut r).unwrap(), post.mean);
    }

    #[test]
    fn emvg_unit_variance_identity_basis() {
        let mut r = rng(2);
        let mut resc = RescalingDiag::new(2, 3, 0.5, 0.0);
        resc.r = Mat::filled(2, 3, 1.5);
        let post = EmvgPosterior::new(Mat::zeros(2, 3), SymEig::identity(2), SymEig::identity(3), resc, 2.0).unwrap();
        let mut r2 = r.clone();
        let w = sample_emvg(&post, &mut r).unwrap();
        let x = standard_normal_mat(&mut r2, 2, 3);
        assert!(w.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn emvg_log_density_at_mean_and_scalar_case() {
        let mut r = rng(3);
        let post = random_emvg(&mut r, 2, 2, 0.2, 0.5);
        let d = post.variance_grid().unwrap();
        let expected: f64 = -0.5 * d.as_slice().iter().map(|v| v.ln() + LN_2PI).sum::<f64>();
        assert!((emvg_log_density(&post, &post.mean).unwrap() - expected).abs() < 1e-12);

        let mut resc = RescalingDiag::new(1, 1, 0.5, 0.0);
        resc.r = Mat::filled(1, 1, 1.5);
        let post = EmvgPosterior::new(
            Mat::filled(1, 1, 0.3),
            SymEig::identity(1),
            SymEig::identity(1),
            resc,
            4.0,
        )
        .unwrap();
        // variance 4 / 2 = 2
        let lp = emvg_log_density(&post, &Mat::filled(1, 1, 1.3)).unwrap();
        let expected = -0.5 * (1.0 / 2.0 + 2f64.ln() + LN_2PI);
        assert!((lp - expected).abs() < 1e-14);
    }

    #[test]
    fn emvg_log_density_matches_dense() {
        let mut r = rng(4);
        for _ in 0..20 {
            let post = random_emvg(&mut r, 2, 2, 0.1, 0.7);
            let w = random_mat(&mut r, 2, 2);
            let cov = post.materialize_covariance().unwrap();
            let dense = oracle::gaussian_log_density(&linalg::vec(&w), &linalg::vec(&post.mean), &cov).unwrap();
            assert!((emvg_log_density(&post, &w).unwrap() - dense).abs() < 1e-8);
        }
    }

    #[test]
    fn emvg_rejects_non_positive_variance() {
        let mut resc = RescalingDiag::new(1, 2, 0.0, 0.0);
        resc.r[(0, 1)] = 0.0;
        let post = EmvgPosterior::new(Mat::zeros(1, 2), SymEig::identity(1), SymEig::identity(2), resc, 1.0).unwrap();
        assert!(matches!(
            emvg_log_density(&post, &Mat::zeros(1, 2)),
            Err(Error::NonPositiveVariance { index: 1, .. })
        ));
    }

    #[test]
    fn emvg_log_density_integrates_to_one() {
        let mut resc = RescalingDiag::new(1, 1, 0.3, 0.0);
        resc.r = Mat::filled(1, 1, 0.9);
        let post = EmvgPosterior::new(
            Mat::filled(1, 1, -0.4),
            SymEig::identity(1),
            SymEig::identity(1),
            resc,
            0.6,
        )
        .unwrap();
        let sd = post.variance_grid().unwrap()[(0, 0)].sqrt();
        let (lo, hi, steps) = (-0.4 - 12.0 * sd, -0.4 + 12.0 * sd, 20_000);
        let h = (hi - lo) / steps as f64;
        // composite Simpson
        let mut total = 0.0;
        for k in 0..=steps {
            let w = Mat::filled(1, 1, lo + k as f64 * h);
            let f = emvg_log_density(&post, &w).unwrap().exp();
            let c = if k == 0 || k == steps {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            total += c * f;
        }
        total *= h / 3.0;
        assert!((total - 1.0).abs() < 1e-6, "integral {total}");
    }

    #[test]
    fn mvg_trivial_cases() {
        let mut r = rng(5);
        let post = MvgPosterior::new(Mat::zeros(2, 2), &Mat::identity(2), &Mat::identity(2), 0.0, 1.0).unwrap();
        let mut r2 = r.clone();
        let w = sample_mvg(&post, &mut r).unwrap();
        assert!(w.max_abs_diff(&standard_normal_mat(&mut r2, 2, 2)) < 1e-15);

        let m = random_mat(&mut r, 2, 3);
        let post = MvgPosterior::new(m.clone(), &random_psd(&mut r, 2), &random_psd(&mut r, 3), 0.1, 0.0).unwrap();
        assert_eq!(sample_mvg(&post, &mut r).unwrap(), m);
    }

    #[test]
    fn mvg_rejects_singular_factor() {
        let err = MvgPosterior::from_damped_factors(Mat::zeros(2, 1), Mat::diag(&[1.0, 0.0]), Mat::identity(1), 1.0);
        assert!(matches!(err, Err(Error::Singular(_))));
    }

    #[test]
    fn mvg_pi_split_damping() {
        let a = Mat::diag(&[4.0, 4.0]);
        let s = Mat::diag(&[0.25, 0.25, 0.25]);
        let (ad, sd, pi) = pi_damped_factors(&a, &s, 0.04);
        assert!((pi - 2.0).abs() < 1e-15);
        assert!((ad[(0, 0)] - (4.0 + 2.0 * 0.2)).abs() < 1e-15);
        assert!((sd[(0, 0)] - (0.25 + 0.2 / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn identity_covariance() {
        let resc = RescalingDiag::new(2, 2, 0.0, 0.0);
        let post = EmvgPosterior::new(Mat::zeros(2, 2), SymEig::identity(2), SymEig::identity(2), resc, 1.0).unwrap();
        assert_eq!(post.materialize_covariance().unwrap(), Mat::identity(4));
        let mvg = MvgPosterior::new(Mat::zeros(2, 2), &Mat::identity(2), &Mat::identity(2), 0.0, 1.0).unwrap();
        assert!(mvg.materialize_covariance().unwrap().max_abs_diff(&Mat::identity(4)) < 1e-15);
    }

    #[test]
    fn emvg_with_kronecker_grid_equals_mvg() {
        let mut r = rng(6);
        for _ in 0..10 {
            let a = random_psd(&mut r, 2).add_diag(0.1);
            let s = random_psd(&mut r, 3).add_diag(0.1);
            let mut stats = KronStats::from_factors(a.clone(), s.clone()).unwrap();
            stats.refresh_eig().unwrap();
            let mut resc = RescalingDiag::new(2, 3, 0.0, 0.0);
            resc.r = kfac_eigen_rescaling(&stats).unwrap();
            let (ea, es) = stats.eigs().unwrap();
            let emvg = EmvgPosterior::new(Mat::zeros(2, 3), ea.clone(), es.clone(), resc, 0.3).unwrap();
            let mvg = MvgPosterior::from_damped_factors(Mat::zeros(2, 3), a, s, 0.3).unwrap();
            let ce = emvg.materialize_covariance().unwrap();
            let cm = mvg.materialize_covariance().unwrap();
            assert!(ce.max_abs_diff(&cm) < 1e-10 * cm.max_abs().max(1.0));
        }
    }

    #[test]
    fn materialized_covariances_are_psd() {
        let mut r = rng(7);
        for _ in 0..10 {
            let emvg = random_emvg(&mut r, 3, 2, 0.05, 0.2);
            let mvg = MvgPosterior::new(
                random_mat(&mut r, 3, 2),
                &random_psd(&mut r, 3),
                &random_psd(&mut r, 2),
                0.05,
                0.2,
            )
            .unwrap();
            for cov in [
                emvg.materialize_covariance().unwrap(),
                mvg.materialize_covariance().unwrap(),
            ] {
                assert!(linalg::sym_eig_raw(&cov).unwrap().min_eigval() >= -1e-10);
            }
        }
    }

    #[test]
    fn kl_trivial_values() {
        let resc = RescalingDiag::new(2, 2, 1.0, 0.0);
        // d = 2 / (1 + 1) = 1 = η
        let post = EmvgPosterior::new(Mat::zeros(2, 2), SymEig::identity(2), SymEig::identity(2), resc, 2.0).unwrap();
        assert!(post.kl_to_spherical_prior(1.0).unwrap().abs() < 1e-15);

        let ffg = FfgPosterior::new(Mat::filled(1, 1, 1.0), Mat::zeros(1, 1)).unwrap();
        assert!((ffg.kl_to_spherical_prior(1.0).unwrap() - 0.5).abs() < 1e-15);

        let ffg = FfgPosterior::from_variance(Mat::zeros(2, 3), &Mat::filled(2, 3, 0.5)).unwrap();
        assert!(ffg.kl_to_spherical_prior(0.5).unwrap().abs() < 1e-14);
        assert!(ffg.kl_to_spherical_prior(0.0).is_err());
    }

    #[test]
    fn kl_matches_dense_for_all_families() {
        let mut r = rng(8);
        for _ in 0..10 {
            let eta = 0.5 + r.gen::<f64>();
            let emvg = random_emvg(&mut r, 2, 2, 0.1, 0.4);
            let mvg = MvgPosterior::new(
                random_mat(&mut r, 2, 3),
                &random_psd(&mut r, 2),
                &random_psd(&mut r, 3),
                0.1,
                0.4,
            )
            .unwrap();
            let ffg = FfgPosterior::new(random_mat(&mut r, 3, 2), random_mat(&mut r, 3, 2).scale(0.3)).unwrap();
            let check = |kl: f64, mean: &Mat, cov: Mat| {
                let dense = oracle::kl_to_spherical(&linalg::vec(mean), &cov, eta).unwrap();
                assert!((kl - dense).abs() < 1e-8, "closed {kl} dense {dense}");
            };
            check(
                emvg.kl_to_spherical_prior(eta).unwrap(),
                &emvg.mean,
                emvg.materialize_covariance().unwrap(),
            );
            check(
                mvg.kl_to_spherical_prior(eta).unwrap(),
                &mvg.mean,
                mvg.materialize_covariance().unwrap(),
            );
            check(
                ffg.kl_to_spherical_prior(eta).unwrap(),
                &ffg.mean,
                ffg.materialize_covariance().unwrap(),
            );
        }
    }

    fn sampled_covariance<P: VariationalPosterior>(post: &P, r: &mut ChaCha8Rng, n: usize) -> Mat {
        let samples: Vec<Vec<f64>> = (0..n).map(|_| linalg::vec(&post.sample(r).unwrap())).collect();
        empirical_covariance(&samples)
    }

    #[test]
    fn emvg_sampling_covariance() {
        let mut r = rng(9);
        for layout in [SamplingLayout::Generic(2, 2), SamplingLayout::Decoupled2x3] {
            let post = fixtures::resolvable(&mut r, |r| fixtures::random_emvg(r, layout, 0.2, 0.5)).unwrap();
            let reference = post.materialize_covariance().unwrap();
            let est = sampled_covariance(&post, &mut r, 200_000);
            let err = max_relative_error_above(&est, &reference, 0.01);
            assert!(err < 0.05, "{layout:?}: relative error {err}");
        }
        let post = fixtures::random_emvg(&mut r, SamplingLayout::Generic(2, 3), 0.2, 0.5).unwrap();
        let reference = post.materialize_covariance().unwrap();
        let est = sampled_covariance(&post, &mut r, 200_000);
        assert!(max_covariance_z_score(&est, &reference, 200_000) < 5.0);
    }

    #[test]
    fn mvg_sampling_covariance() {
        let mut r = rng(10);
        for layout in [SamplingLayout::Generic(2, 2), SamplingLayout::Decoupled2x3] {
            let post = fixtures::resolvable(&mut r, |r| fixtures::random_mvg(r, layout, 0.2, 0.5)).unwrap();
            let reference = post.materialize_covariance().unwrap();
            let est = sampled_covariance(&post, &mut r, 200_000);
            let err = max_relative_error_above(&est, &reference, 0.01);
            assert!(err < 0.05, "{layout:?}: relative error {err}");
        }
    }

    #[test]
    fn size_guard() {
        let ffg = FfgPosterior::new(Mat::zeros(50, 50), Mat::zeros(50, 50)).unwrap();
        assert!(matches!(ffg.materialize_covariance(), Err(Error::SizeGuard { .. })));
    }
}
