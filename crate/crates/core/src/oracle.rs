//! Dense reference routes used by the verification suite and tests.
//!
//! Everything here works on fully materialized matrices: explicit Kronecker
//! products, Gauss-Jordan inverses, Cholesky log-determinants. None of it goes
//! through the factored code paths it is used to check.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Upper bound on the side of a matrix the dense routes will materialize.
pub const DENSE_LIMIT: usize = 2000;

pub fn random_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn random_mat<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `G Gᵀ` for a standard-normal `d × d` matrix `G`.
pub fn random_psd<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Mat {
    let g = random_mat(rng, d, d);
    g.matmul_t(&g).symmetrize()
}

/// Orthogonal matrix from modified Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Mat {
    loop {
        let g = random_mat(rng, d, d);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut ok = true;
        for j in 0..d {
            let mut v = g.col(j);
            for _ in 0..2 {
                for q in &cols {
                    let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                    for (vi, qi) in v.iter_mut().zip(q) {
                        *vi -= dot * qi;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
        if ok {
            return Mat::from_fn(d, d, |i, j| cols[j][i]);
        }
    }
}

/// Explicit Kronecker product `B ⊗ A`.
pub fn kron(b: &Mat, a: &Mat) -> Mat {
    let (ar, ac) = a.shape();
    Mat::from_fn(b.rows() * ar, b.cols() * ac, |i, j| {
        b[(i / ar, j / ac)] * a[(i % ar, j % ac)]
    })
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(m: &Mat) -> Result<Mat> {
    let n = m.rows();
    if n != m.cols() {
        return Err(Error::dims("oracle::inverse", "square", format!("{:?}", m.shape())));
    }
    if n > DENSE_LIMIT {
        return Err(Error::SizeGuard {
            size: n,
            limit: DENSE_LIMIT,
        });
    }
    let mut a = m.clone();
    let mut inv = Mat::identity(n);
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if a[(r, col)].abs() > a[(piv, col)].abs() {
                piv = r;
            }
        }
        let pv = a[(piv, col)];
        if pv.abs() < 1e-300 {
            return Err(Error::Singular(pv));
        }
        if piv != col {
            for j in 0..n {
                let t = a[(col, j)];
                a[(col, j)] = a[(piv, j)];
                a[(piv, j)] = t;
                let t = inv[(col, j)];
                inv[(col, j)] = inv[(piv, j)];
                inv[(piv, j)] = t;
            }
        }
        for j in 0..n {
            a[(col, j)] /= pv;
            inv[(col, j)] /= pv;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[(r, col)];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[(r, j)] -= f * a[(col, j)];
                inv[(r, j)] -= f * inv[(col, j)];
            }
        }
    }
    Ok(inv)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(m: &Mat) -> Result<Mat> {
    let n = m.rows();
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Singular(s));
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

pub fn log_det_spd(m: &Mat) -> Result<f64> {
    let l = cholesky(&m.symmetrize())?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Log-density of `N(mean, cov)` at `x`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], cov: &Mat) -> Result<f64> {
    let k = x.len();
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let prec = inverse(cov)?;
    let quad: f64 = diff.iter().zip(prec.matvec(&diff)).map(|(a, b)| a * b).sum();
    Ok(-0.5 * (quad + log_det_spd(cov)? + k as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// `KL(N(mean, cov) ‖ N(0, η I))` from a materialized covariance.
pub fn kl_to_spherical(mean: &[f64], cov: &Mat, eta: f64) -> Result<f64> {
    let k = mean.len() as f64;
    let sq: f64 = mean.iter().map(|m| m * m).sum();
    Ok(0.5 * (cov.trace() / eta + sq / eta - k + k * eta.ln() - log_det_spd(cov)?))
}

/// Sample covariance of row vectors around their empirical mean.
pub fn empirical_covariance(samples: &[Vec<f64>]) -> Mat {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut cov = Mat::zeros(d, d);
    for s in samples {
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += di * (s[j] - mean[j]);
            }
        }
    }
    cov.scale(1.0 / (n - 1.0))
}

/// Largest relative deviation among entries whose reference magnitude is at
/// least `floor · max|reference|`.
pub fn max_relative_error_above(estimate: &Mat, reference: &Mat, floor: f64) -> f64 {
    let cutoff = floor * reference.max_abs();
    estimate
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .filter(|(_, r)| r.abs() > cutoff)
        .map(|(e, r)| ((e - r) / r).abs())
        .fold(0.0, f64::max)
}

/// Whether every entry above `floor · max|Σ|` has correlation magnitude at
/// least `min_corr`, so its Monte-Carlo relative error is controlled.
///
/// An entry with correlation `ρ` estimated from `n` samples has relative
/// standard error about `√(1 + ρ²) / (|ρ| √n)`.
pub fn covariance_resolvable(cov: &Mat, floor: f64, min_corr: f64) -> bool {
    let cutoff = floor * cov.max_abs();
    let sd: Vec<f64> = cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    (0..cov.rows()).all(|i| {
        (0..cov.cols()).all(|j| {
            let c = cov[(i, j)];
            c.abs() <= cutoff || c.abs() >= min_corr * sd[i] * sd[j]
        })
    })
}

/// Largest `|estimate − reference| / SE` where `SE² = (Σ_ii Σ_jj + Σ_ij²) / n`
/// is the Gaussian sampling variance of a covariance entry.
pub fn max_covariance_z_score(estimate: &Mat, reference: &Mat, samples: usize) -> f64 {
    let n = samples as f64;
    let mut worst = 0.0f64;
    for i in 0..reference.rows() {
        for j in 0..reference.cols() {
            let r = reference[(i, j)];
            let se = ((reference[(i, i)] * reference[(j, j)] + r * r) / n).sqrt();
            if se > 0.0 {
                worst = worst.max((estimate[(i, j)] - r).abs() / se);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inverse_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let m = random_psd(&mut r, 6).add_diag(0.5);
        let inv = inverse(&m).unwrap();
        assert!(m.matmul(&inv).max_abs_diff(&Mat::identity(6)) < 1e-10);
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let q = random_orthogonal(&mut r, 5);
        assert!(q.t_matmul(&q).max_abs_diff(&Mat::identity(5)) < 1e-12);
    }

    #[test]
    fn kron_layout() {
        let b = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let a = Mat::from_rows(&[vec![0.0, 5.0], vec![6.0, 7.0]]).unwrap();
        let k = kron(&b, &a);
        assert_eq!(k.row(0), &[0.0, 5.0, 0.0, 10.0]);
        assert_eq!(k.row(3), &[18.0, 21.0, 24.0, 28.0]);
    }

    #[test]
    fn gaussian_log_density_scalar() {
        let cov = Mat::filled(1, 1, 4.0);
        let lp = gaussian_log_density(&[3.0], &[1.0], &cov).unwrap();
        let expected = -0.5 * ((2.0 * std::f64::consts::PI * 4.0).ln() + 1.0);
        assert!((lp - expected).abs() < 1e-14);
    }
}
