//! Seeded random problem instances shared by the verification suite, the
//! tests and the examples.

use rand::Rng;

use crate::error::Result;
use crate::fisher::{KronStats, RescalingDiag};
use crate::linalg::Mat;
use crate::oracle::{self, covariance_resolvable};
use crate::posterior::{EmvgPosterior, MvgPosterior, VariationalPosterior};

/// Entries below this fraction of `max|Σ|` are not compared.
pub const COVARIANCE_FLOOR: f64 = 0.01;
/// Minimum correlation of every compared entry in a sampling fixture.
pub const MIN_RESOLVABLE_CORR: f64 = 0.15;

const MAX_FIXTURE_ATTEMPTS: usize = 10_000;

/// Layout of a sampling fixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingLayout {
    /// Dense random factors of the given shape.
    Generic(usize, usize),
    /// 2 × 3 layer whose last output column is decoupled from the other two.
    Decoupled2x3,
}

impl SamplingLayout {
    pub fn shape(&self) -> (usize, usize) {
        match *self {
            SamplingLayout::Generic(n, p) => (n, p),
            SamplingLayout::Decoupled2x3 => (2, 3),
        }
    }
}

fn column_factor<R: Rng + ?Sized>(rng: &mut R, layout: SamplingLayout) -> Mat {
    match layout {
        SamplingLayout::Generic(_, p) => oracle::random_psd(rng, p).add_diag(0.05),
        SamplingLayout::Decoupled2x3 => {
            let block = oracle::random_psd(rng, 2).add_diag(0.05);
            let last: f64 = 0.2 + rng.gen::<f64>() * 2.0;
            Mat::from_fn(3, 3, |i, j| match (i, j) {
                (2, 2) => last,
                (2, _) | (_, 2) => 0.0,
                _ => block[(i, j)],
            })
        }
    }
}

/// Random EMVG posterior with positive re-scaling grid.
pub fn random_emvg<R: Rng + ?Sized>(
    rng: &mut R,
    layout: SamplingLayout,
    gamma_in: f64,
    scale: f64,
) -> Result<EmvgPosterior> {
    let (n, p) = layout.shape();
    let mut stats = KronStats::from_factors(oracle::random_psd(rng, n).add_diag(0.05), column_factor(rng, layout))?;
    stats.refresh_eig()?;
    let mut resc = RescalingDiag::new(n, p, gamma_in, 0.0);
    resc.r = oracle::random_mat(rng, n, p).map(|v| v * v + 0.05);
    let (ea, es) = stats.eigs()?;
    EmvgPosterior::new(oracle::random_mat(rng, n, p), ea.clone(), es.clone(), resc, scale)
}

/// Random MVG posterior with π-split intrinsic damping.
pub fn random_mvg<R: Rng + ?Sized>(
    rng: &mut R,
    layout: SamplingLayout,
    gamma_in: f64,
    scale: f64,
) -> Result<MvgPosterior> {
    let (n, p) = layout.shape();
    let a = oracle::random_psd(rng, n).add_diag(0.05);
    let s = column_factor(rng, layout);
    MvgPosterior::new(oracle::random_mat(rng, n, p), &a, &s, gamma_in, scale)
}

/// Draws fixtures until every compared covariance entry is resolvable at the
/// Monte-Carlo sample sizes used for covariance checks.
///
/// Acceptance depends only on the materialized covariance, never on samples.
pub fn resolvable<P, R, F>(rng: &mut R, mut draw: F) -> Result<P>
where
    P: VariationalPosterior,
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Result<P>,
{
    let mut last = None;
    for _ in 0..MAX_FIXTURE_ATTEMPTS {
        let post = draw(rng)?;
        let cov = post.materialize_covariance()?;
        if covariance_resolvable(&cov, COVARIANCE_FLOOR, MIN_RESOLVABLE_CORR) {
            return Ok(post);
        }
        last = Some(post);
    }
    log::warn!("no resolvable sampling fixture after {MAX_FIXTURE_ATTEMPTS} draws");
    Ok(last.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decoupled_layout_has_exact_zero_blocks() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let post = random_emvg(&mut r, SamplingLayout::Decoupled2x3, 0.2, 0.5).unwrap();
        let cov = post.materialize_covariance().unwrap();
        // vec index i + 2j: column 2 occupies indices 4 and 5
        for i in 0..4 {
            for j in 4..6 {
                assert_eq!(cov[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn resolvable_fixtures_exist() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for layout in [SamplingLayout::Generic(2, 2), SamplingLayout::Decoupled2x3] {
            let post = resolvable(&mut r, |r| random_emvg(r, layout, 0.2, 0.5)).unwrap();
            let cov = post.materialize_covariance().unwrap();
            assert!(covariance_resolvable(&cov, COVARIANCE_FLOOR, MIN_RESOLVABLE_CORR));
            let post = resolvable(&mut r, |r| random_mvg(r, layout, 0.2, 0.5)).unwrap();
            let cov = post.materialize_covariance().unwrap();
            assert!(covariance_resolvable(&cov, COVARIANCE_FLOOR, MIN_RESOLVABLE_CORR));
        }
    }
}
