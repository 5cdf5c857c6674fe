//! Kronecker-factored Fisher statistics: the running factors `A = E[a aᵀ]`
//! and `S = E[g gᵀ]`, their eigenbases, the eigenbasis re-scaling diagonal
//! `R`, and a dense Fisher oracle for checking all of them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, SymEig};
use crate::nn::{self, GaussianNoiseModel, LayerState, Network, Targets};
use crate::oracle::DENSE_LIMIT;

/// Which labels the per-example gradients in the Fisher estimate use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherSampling {
    /// Dataset labels.
    #[default]
    Empirical,
    /// One label per input drawn from the model's predictive distribution.
    Model,
}

impl FromStr for FisherSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(FisherSampling::Empirical),
            "model" => Ok(FisherSampling::Model),
            other => Err(Error::config(
                "fisher_sampling",
                format!("expected `empirical` or `model`, got `{other}`"),
            )),
        }
    }
}

impl fmt::Display for FisherSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FisherSampling::Empirical => "empirical",
            FisherSampling::Model => "model",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KronStats {
    /// `(n+1) × (n+1)` input second moment.
    pub a: Mat,
    /// `p × p` pre-activation gradient second moment.
    pub s: Mat,
    eig_a: Option<SymEig>,
    eig_s: Option<SymEig>,
    updates: u64,
    eig_age: u64,
}

impl KronStats {
    /// Identity factors, no eigendecomposition yet.
    pub fn new(rows: usize, cols: usize) -> Self {
        KronStats {
            a: Mat::identity(rows),
            s: Mat::identity(cols),
            eig_a: None,
            eig_s: None,
            updates: 0,
            eig_age: 0,
        }
    }

    pub fn from_factors(a: Mat, s: Mat) -> Result<Self> {
        if a.rows() != a.cols() || s.rows() != s.cols() {
            return Err(Error::dims("KronStats::from_factors", "square factors", "non-square"));
        }
        Ok(KronStats {
            a,
            s,
            eig_a: None,
            eig_s: None,
            updates: 0,
            eig_age: 0,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.a.rows(), self.s.rows())
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Statistics updates since the last eigendecomposition.
    pub fn eig_age(&self) -> u64 {
        self.eig_age
    }

    pub fn eig_a(&self) -> Result<&SymEig> {
        self.eig_a.as_ref().ok_or(Error::MissingEigen("A"))
    }

    pub fn eig_s(&self) -> Result<&SymEig> {
        self.eig_s.as_ref().ok_or(Error::MissingEigen("S"))
    }

    pub fn eigs(&self) -> Result<(&SymEig, &SymEig)> {
        Ok((self.eig_a()?, self.eig_s()?))
    }

    pub fn refresh_eig(&mut self) -> Result<()> {
        let ea = linalg::sym_eig(&self.a)?;
        let es = linalg::sym_eig(&self.s)?;
        self.eig_a = Some(ea);
        self.eig_s = Some(es);
        self.eig_age = 0;
        Ok(())
    }

    /// Installs externally computed eigenbases (used by tests and oracles).
    pub fn set_eigs(&mut self, eig_a: SymEig, eig_s: SymEig) -> Result<()> {
        if eig_a.dim() != self.a.rows() || eig_s.dim() != self.s.rows() {
            return Err(Error::dims(
                "KronStats::set_eigs",
                format!("{:?}", self.shape()),
                format!("({}, {})", eig_a.dim(), eig_s.dim()),
            ));
        }
        self.eig_a = Some(eig_a);
        self.eig_s = Some(eig_s);
        self.eig_age = 0;
        Ok(())
    }
}

fn check_rate(name: &str, rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {rate}")));
    }
    Ok(())
}

/// Exponential moving average update of `A` and `S` from the layer caches.
pub fn update_kron_stats(stats: &mut KronStats, layer: &LayerState, rate: f64) -> Result<()> {
    check_rate("stats rate", rate)?;
    let (a, g) = layer.fresh_caches()?;
    if (a.cols(), g.cols()) != stats.shape() {
        return Err(Error::dims(
            "update_kron_stats",
            format!("{:?}", stats.shape()),
            format!("({}, {})", a.cols(), g.cols()),
        ));
    }
    let inv_batch = 1.0 / a.rows() as f64;
    let batch_a = a.t_matmul(a).scale(inv_batch);
    let batch_s = g.t_matmul(g).scale(inv_batch);
    stats.a = stats.a.scale(1.0 - rate).add(&batch_a.scale(rate)).symmetrize();
    stats.s = stats.s.scale(1.0 - rate).add(&batch_s.scale(rate)).symmetrize();
    stats.a.ensure_finite("Kronecker factor A")?;
    stats.s.ensure_finite("Kronecker factor S")?;
    stats.updates += 1;
    stats.eig_age += 1;
    Ok(())
}

/// Per-eigendirection second moments `R`, stored as an `(n+1) × p` grid in
/// unvec layout, plus the intrinsic and extrinsic damping terms.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RescalingDiag {
    pub r: Mat,
    pub gamma_in: f64,
    pub gamma_ex: f64,
}

impl RescalingDiag {
    /// Grid of ones.
    pub fn new(rows: usize, cols: usize, gamma_in: f64, gamma_ex: f64) -> Self {
        RescalingDiag {
            r: Mat::filled(rows, cols, 1.0),
            gamma_in,
            gamma_ex,
        }
    }

    pub fn total_damping(&self) -> f64 {
        self.gamma_in + self.gamma_ex
    }

    /// `r + γ_in`
    pub fn intrinsic_damped(&self) -> Mat {
        self.r.map(|v| v + self.gamma_in)
    }

    /// `r + γ_in + γ_ex`
    pub fn total_damped(&self) -> Mat {
        let g = self.total_damping();
        self.r.map(|v| v + g)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.r.as_slice().iter().all(|&v| v >= 0.0)
    }
}

/// EMA update of `R` with per-example gradients projected onto the current
/// Kronecker eigenbasis.
///
/// With `G_i = a_i g_iᵀ`, the projection `Q_Aᵀ G_i Q_S` is the outer product
/// of `Q_Aᵀ a_i` and `Q_Sᵀ g_i`, so its element-wise square is the outer
/// product of their squares.
pub fn update_rescaling(
    resc: &mut RescalingDiag,
    stats: &KronStats,
    layer: &LayerState,
    rate: f64,
    max_eig_age: u64,
) -> Result<()> {
    check_rate("re-scaling rate", rate)?;
    let (eig_a, eig_s) = stats.eigs()?;
    if stats.eig_age() > max_eig_age {
        return Err(Error::StaleEigenbasis {
            age: stats.eig_age(),
            limit: max_eig_age,
        });
    }
    let (a, g) = layer.fresh_caches()?;
    if resc.r.shape() != (a.cols(), g.cols()) {
        return Err(Error::dims(
            "update_rescaling",
            format!("{:?}", resc.r.shape()),
            format!("({}, {})", a.cols(), g.cols()),
        ));
    }
    let pa = a.matmul(&eig_a.basis).map(|v| v * v);
    let pg = g.matmul(&eig_s.basis).map(|v| v * v);
    let batch_r = pa.t_matmul(&pg).scale(1.0 / a.rows() as f64);
    resc.r = resc.r.scale(1.0 - rate).add(&batch_r.scale(rate));
    resc.r.ensure_finite("re-scaling diagonal")
}

/// The K-FAC re-scaling grid `Λ_A Λ_Sᵀ`, i.e. `unvec(diag(Λ_S ⊗ Λ_A))`.
pub fn kfac_eigen_rescaling(stats: &KronStats) -> Result<Mat> {
    let (ea, es) = stats.eigs()?;
    Ok(Mat::outer(&ea.eigvals, &es.eigvals))
}

/// Overwrites `R` with the K-FAC eigenvalue grid.
pub fn reinit_rescaling(resc: &mut RescalingDiag, stats: &KronStats) -> Result<()> {
    let grid = kfac_eigen_rescaling(stats)?;
    if grid.shape() != resc.r.shape() {
        return Err(Error::dims(
            "reinit_rescaling",
            format!("{:?}", resc.r.shape()),
            format!("{:?}", grid.shape()),
        ));
    }
    resc.r = grid;
    Ok(())
}

/// Dense per-layer Fisher `E[vec(∇_W log p) vec(∇_W log p)ᵀ]` over a batch.
pub fn exact_fisher_oracle<R: Rng + ?Sized>(
    net: &mut Network,
    x: &Mat,
    targets: &Targets,
    noise: Option<&GaussianNoiseModel>,
    sampling: FisherSampling,
    rng: &mut R,
) -> Result<Vec<Mat>> {
    for &(r, c) in &net.weight_shapes() {
        if r * c > DENSE_LIMIT {
            return Err(Error::SizeGuard {
                size: r * c,
                limit: DENSE_LIMIT,
            });
        }
    }
    let preds = net.forward(x)?;
    let labels = match sampling {
        FisherSampling::Empirical => targets.clone(),
        FisherSampling::Model => nn::sample_model_targets(net.task(), &preds, noise, rng)?,
    };
    let og = nn::output_grad(net.task(), &preds, &labels, noise)?;
    net.backward(&og)?;
    let batch = x.rows();
    net.layers()
        .iter()
        .map(|layer| {
            let (r, c) = layer.weights().shape();
            let mut f = Mat::zeros(r * c, r * c);
            for i in 0..batch {
                let g = linalg::vec(&layer.per_example_grad(i)?);
                for (p, gp) in g.iter().enumerate() {
                    if *gp == 0.0 {
                        continue;
                    }
                    let row = f.row_mut(p);
                    for (q, gq) in g.iter().enumerate() {
                        row[q] += gp * gq / batch as f64;
                    }
                }
            }
            Ok(f)
        })
        .collect()
}
