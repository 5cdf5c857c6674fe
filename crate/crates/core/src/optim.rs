//! Training loops for the Kronecker-factored natural-gradient family and the
//! Bayes-by-Backprop baseline.
//!
//! | kind          | weights used in the pass      | preconditioner                        |
//! |---------------|-------------------------------|---------------------------------------|
//! | `kfac`        | mean                          | `(A^γ)⁻¹ V (S^γ)⁻¹`, π-split damping   |
//! | `ekfac`       | mean                          | `Q_A[(Q_Aᵀ V Q_S) ⊘ (r + γ)]Q_Sᵀ`      |
//! | `noisy-kfac`  | sample from the MVG posterior | as `kfac`, `V` includes `−γ_in W`      |
//! | `noisy-ekfac` | sample from the EMVG posterior| as `ekfac`, `V` includes `−γ_in W`     |
//! | `bbb`         | reparameterized FFG sample    | none (plain gradient ascent)           |
//!
//! All updates ascend the log-likelihood; there is no momentum.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{self, FisherSampling, KronStats, RescalingDiag};
use crate::linalg::{self, Mat, SymEig};
use crate::nn::{self, GaussianNoiseModel, Network, Targets, Task};
use crate::posterior::{
    pi_damped_factors, EmvgPosterior, FfgPosterior, MvgPosterior, VariationalPosterior, LOG_SIGMA_MIN,
};

const MAX_STEP_HALVINGS: usize = 30;
const NOISE_STREAM: u64 = 0x6e6f_6973_795f_7277;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "kfac")]
    Kfac,
    #[serde(rename = "ekfac")]
    Ekfac,
    #[serde(rename = "noisy-kfac")]
    NoisyKfac,
    #[serde(rename = "noisy-ekfac")]
    NoisyEkfac,
    #[serde(rename = "bbb")]
    Bbb,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Kfac,
        OptimizerKind::Ekfac,
        OptimizerKind::NoisyKfac,
        OptimizerKind::NoisyEkfac,
        OptimizerKind::Bbb,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Kfac => "kfac",
            OptimizerKind::Ekfac => "ekfac",
            OptimizerKind::NoisyKfac => "noisy-kfac",
            OptimizerKind::NoisyEkfac => "noisy-ekfac",
            OptimizerKind::Bbb => "bbb",
        }
    }

    pub fn is_noisy(&self) -> bool {
        matches!(
            self,
            OptimizerKind::NoisyKfac | OptimizerKind::NoisyEkfac | OptimizerKind::Bbb
        )
    }

    fn uses_eigen_rescaling(&self) -> bool {
        matches!(self, OptimizerKind::Ekfac | OptimizerKind::NoisyEkfac)
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::config(
                "optimizer",
                format!("unknown optimizer `{s}` (expected kfac, ekfac, noisy-kfac, noisy-ekfac or bbb)"),
            )
        })
    }
}

/// How the Kronecker factors start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsInit {
    /// `A = I`, `S = I`, `R = 1`.
    #[default]
    Identity,
    /// One-shot `A`, `S`, `R` from a forward/backward pass over the first
    /// mini-batch at the initial mean weights.
    Data,
}

impl FromStr for StatsInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(StatsInit::Identity),
            "data" => Ok(StatsInit::Data),
            other => Err(Error::config(
                "stats_init",
                format!("expected `identity` or `data`, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// Step size.
    pub alpha: f64,
    /// EMA rate for `A` and `S`.
    pub beta: f64,
    /// EMA rate for `R`.
    pub omega: f64,
    /// KL weight.
    pub lambda: f64,
    /// Prior variance.
    pub eta: f64,
    /// Extrinsic damping.
    pub gamma_ex: f64,
    pub t_stats: u64,
    pub t_scale: u64,
    pub t_eig: u64,
    /// Re-initialize `R` with the K-FAC eigenvalue grid every this many steps.
    pub t_reinit: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub fisher_sampling: FisherSampling,
    /// Factor applied to `alpha` for the second half of training.
    pub lr_decay: f64,
    pub stats_init: StatsInit,
    /// Initial log standard deviation for BBB.
    pub bbb_init_log_sigma: f64,
    pub noise_prior_shape: f64,
    pub noise_prior_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::NoisyEkfac,
            alpha: 0.01,
            beta: 0.001,
            omega: 0.01,
            lambda: 1.0,
            eta: 1.0,
            gamma_ex: 1e-3,
            t_stats: 1,
            t_scale: 1,
            t_eig: 5,
            t_reinit: 50,
            batch_size: 10,
            epochs: 40,
            seed: 0,
            fisher_sampling: FisherSampling::Empirical,
            lr_decay: 0.1,
            stats_init: StatsInit::Identity,
            bbb_init_log_sigma: -3.0,
            noise_prior_shape: 6.0,
            noise_prior_rate: 6.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::config(name, format!("must lie in (0, 1], got {v}")))
            }
        };
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(name, format!("must be positive, got {v}")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("beta", self.beta)?;
        unit("omega", self.omega)?;
        positive("lambda", self.lambda)?;
        positive("eta", self.eta)?;
        if !(self.gamma_ex >= 0.0 && self.gamma_ex.is_finite()) {
            return Err(Error::config(
                "gamma_ex",
                format!("must be non-negative, got {}", self.gamma_ex),
            ));
        }
        for (name, v) in [
            ("t_stats", self.t_stats),
            ("t_scale", self.t_scale),
            ("t_eig", self.t_eig),
            ("t_reinit", self.t_reinit),
        ] {
            if v < 1 {
                return Err(Error::config(name, "interval must be at least 1"));
            }
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(
                "lr_decay",
                format!("must lie in (0, 1], got {}", self.lr_decay),
            ));
        }
        positive("noise_prior_shape", self.noise_prior_shape)?;
        positive("noise_prior_rate", self.noise_prior_rate)?;
        if !self.bbb_init_log_sigma.is_finite() {
            return Err(Error::config("bbb_init_log_sigma", "must be finite"));
        }
        Ok(())
    }

    /// `γ_in = λ / (N η)`.
    pub fn intrinsic_damping(&self, n_train: usize) -> f64 {
        self.lambda / (n_train as f64 * self.eta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    /// `ll_term − kl_term`.
    pub elbo: f64,
    /// Single-sample estimate of `E_q[log p(D | w)]` scaled from the batch.
    pub ll_term: f64,
    /// `λ Σ_l KL(q_l ‖ p)`; zero for point estimates.
    pub kl_term: f64,
    /// Frobenius norm of `∇_W log p` per layer.
    pub grad_norms: Vec<f64>,
}

/// Quantities from the most recent update, kept for inspection and tests.
#[derive(Clone, Debug, Default)]
pub struct StepTrace {
    /// Sampled (or mean) weights used in the pass.
    pub weights: Vec<Mat>,
    /// `∇_W log p` at those weights (batch mean).
    pub grads: Vec<Mat>,
    /// `V_l`, the vector that was preconditioned.
    pub v: Vec<Mat>,
    /// Preconditioned direction per layer.
    pub direction: Vec<Mat>,
    /// Step size actually applied.
    pub alpha: f64,
}

/// Per-layer optimizer state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerOptState {
    pub mean: Mat,
    pub stats: KronStats,
    pub resc: RescalingDiag,
    /// Damped inverses `(A^γ)⁻¹`, `(S^γ)⁻¹` (K-FAC family).
    pub a_inv: Mat,
    pub s_inv: Mat,
    /// Sampling distribution for noisy K-FAC, refreshed with the inverses.
    pub mvg: Option<MvgPosterior>,
    /// BBB log standard deviations.
    pub log_sigma: Option<Mat>,
}

/// `Q_A [(Q_Aᵀ V Q_S) ⊘ r_damped] Q_Sᵀ`
pub fn ekfac_direction(eig_a: &SymEig, eig_s: &SymEig, r_damped: &Mat, v: &Mat) -> Result<Mat> {
    let projected = linalg::project_to_eigenbasis(&eig_a.basis, &eig_s.basis, v)?;
    if projected.shape() != r_damped.shape() {
        return Err(Error::dims(
            "ekfac_direction",
            format!("{:?}", projected.shape()),
            format!("{:?}", r_damped.shape()),
        ));
    }
    let scaled = projected.zip_map(r_damped, |c, r| c / r);
    linalg::project_from_eigenbasis(&eig_a.basis, &eig_s.basis, &scaled)
}

/// `(A^γ)⁻¹ V (S^γ)⁻¹`
pub fn kfac_direction(a_inv: &Mat, s_inv: &Mat, v: &Mat) -> Mat {
    a_inv.matmul(v).matmul(s_inv)
}

/// Inverses of the π-split damped factors `A + π√γ I`, `S + √γ/π I`.
pub fn damped_inverses(a: &Mat, s: &Mat, damping: f64) -> Result<(Mat, Mat)> {
    let (ad, sd, _) = pi_damped_factors(a, s, damping);
    Ok((inverse_psd(&ad)?, inverse_psd(&sd)?))
}

fn inverse_psd(m: &Mat) -> Result<Mat> {
    let e = linalg::sym_eig_raw(m)?;
    if e.min_eigval().is_nan() || e.min_eigval() <= 0.0 {
        return Err(Error::Singular(e.min_eigval()));
    }
    Ok(e.spectral_map(|l| 1.0 / l))
}

/// One layer's posterior, as used for sampling and the KL term.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum LayerPosterior {
    Point { mean: Mat },
    Emvg(EmvgPosterior),
    Mvg(MvgPosterior),
    Ffg(FfgPosterior),
}

impl LayerPosterior {
    pub fn mean(&self) -> &Mat {
        match self {
            LayerPosterior::Point { mean } => mean,
            LayerPosterior::Emvg(p) => &p.mean,
            LayerPosterior::Mvg(p) => &p.mean,
            LayerPosterior::Ffg(p) => &p.mean,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Mat> {
        match self {
            LayerPosterior::Point { mean } => Ok(mean.clone()),
            LayerPosterior::Emvg(p) => p.sample(rng),
            LayerPosterior::Mvg(p) => p.sample(rng),
            LayerPosterior::Ffg(p) => p.sample(rng),
        }
    }

    pub fn kl_to_spherical_prior(&self, eta: f64) -> Result<f64> {
        match self {
            LayerPosterior::Point { .. } => Ok(0.0),
            LayerPosterior::Emvg(p) => p.kl_to_spherical_prior(eta),
            LayerPosterior::Mvg(p) => p.kl_to_spherical_prior(eta),
            LayerPosterior::Ffg(p) => p.kl_to_spherical_prior(eta),
        }
    }

    /// Marginal variance of every weight.
    pub fn marginal_variances(&self) -> Result<Mat> {
        // diag(Q D Qᵀ) for Q = Q_S ⊗ Q_A is (Q_A ⊙ Q_A) D (Q_S ⊙ Q_S)ᵀ in grid form
        let rotate = |qa: &Mat, qs: &Mat, d: &Mat| {
            let sq = |q: &Mat| q.map(|v| v * v);
            sq(qa).matmul(d).matmul_t(&sq(qs))
        };
        match self {
            LayerPosterior::Point { mean } => Ok(Mat::zeros(mean.rows(), mean.cols())),
            LayerPosterior::Emvg(p) => Ok(rotate(&p.eig_a.basis, &p.eig_s.basis, &p.variance_grid()?)),
            LayerPosterior::Mvg(p) => Ok(rotate(&p.row_eig().basis, &p.col_eig().basis, &p.variance_grid())),
            LayerPosterior::Ffg(p) => Ok(p.variance()),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            LayerPosterior::Point { .. } => "point",
            LayerPosterior::Emvg(_) => "emvg",
            LayerPosterior::Mvg(_) => "mvg",
            LayerPosterior::Ffg(_) => "ffg",
        }
    }
}

/// Posterior over all layers of a network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelPosterior {
    pub task: Task,
    pub layers: Vec<LayerPosterior>,
    pub noise: GaussianNoiseModel,
    pub eta: f64,
    pub lambda: f64,
}

impl ModelPosterior {
    pub fn mean_weights(&self) -> Vec<Mat> {
        self.layers.iter().map(|l| l.mean().clone()).collect()
    }

    pub fn sample_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Mat>> {
        self.layers.iter().map(|l| l.sample(rng)).collect()
    }

    /// `Σ_l KL(q_l ‖ N(0, η I))`, without the `λ` weight.
    pub fn kl(&self) -> Result<f64> {
        self.layers.iter().map(|l| l.kl_to_spherical_prior(self.eta)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub elbo: f64,
    pub ll_term: f64,
    pub kl_term: f64,
    /// Monte-Carlo standard error of `ll_term` (zero for one sample).
    pub ll_std_err: f64,
}

/// `E_q[log p(D | w)] − λ KL(q ‖ p)` with `n_mc` posterior samples over the
/// full data set.
pub fn estimate_elbo<R: Rng + ?Sized>(
    post: &ModelPosterior,
    x: &Mat,
    y: &Targets,
    n_mc: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    if n_mc < 1 {
        return Err(Error::InvalidArgument("n_mc must be at least 1".into()));
    }
    let mut lls = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let w = post.sample_weights(rng)?;
        let refs: Vec<&Mat> = w.iter().collect();
        let preds = nn::predict_with(&refs, x)?;
        let noise = (post.task == Task::Regression).then_some(&post.noise);
        lls.push(nn::log_likelihood(post.task, &preds, y, noise)?.iter().sum::<f64>());
    }
    let mean = lls.iter().sum::<f64>() / n_mc as f64;
    let std_err = if n_mc > 1 {
        let var = lls.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_mc - 1) as f64;
        (var / n_mc as f64).sqrt()
    } else {
        0.0
    };
    let kl_term = post.lambda * post.kl()?;
    Ok(ElboEstimate {
        elbo: mean - kl_term,
        ll_term: mean,
        kl_term,
        ll_std_err: std_err,
    })
}

/// Per-datum BBB objective `mean_batch log p(y | x, μ + σ ⊙ ε) − (λ/N) Σ KL`
/// and its gradient with respect to `(μ, log σ)` for fixed noise `ε`.
#[allow(clippy::too_many_arguments)]
pub fn bbb_objective_and_grad(
    net: &mut Network,
    posts: &[FfgPosterior],
    eps: &[Mat],
    x: &Mat,
    y: &Targets,
    noise: &GaussianNoiseModel,
    kl_scale: f64,
    eta: f64,
) -> Result<(f64, Vec<(Mat, Mat)>)> {
    let weights: Vec<Mat> = posts.iter().zip(eps).map(|(p, e)| p.reparameterize(e)).collect();
    net.set_weights(&weights)?;
    let preds = net.forward(x)?;
    let noise = (net.task() == Task::Regression).then_some(noise);
    let ll = nn::log_likelihood(net.task(), &preds, y, noise)?;
    let og = nn::output_grad(net.task(), &preds, y, noise)?;
    let grads = net.backward(&og)?;
    let mut kl = 0.0;
    let mut out = Vec::with_capacity(posts.len());
    for ((p, e), g) in posts.iter().zip(eps).zip(&grads) {
        kl += p.kl_to_spherical_prior(eta)?;
        let sigma = p.sigma();
        let var = p.variance();
        let g_mu = g.sub(&p.mean.scale(kl_scale / eta));
        let g_rho = g
            .hadamard(e)
            .hadamard(&sigma)
            .sub(&var.map(|v| kl_scale * (v / eta - 1.0)));
        out.push((g_mu, g_rho));
    }
    let objective = ll.iter().sum::<f64>() / ll.len() as f64 - kl_scale * kl;
    Ok((objective, out))
}

/// Training state for one optimizer on one data set.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    net: Network,
    layers: Vec<LayerOptState>,
    noise: GaussianNoiseModel,
    x: Mat,
    y: Targets,
    gamma_in: f64,
    k: u64,
    iters_per_epoch: u64,
    order: Vec<usize>,
    cursor: usize,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    trace: StepTrace,
}

impl Trainer {
    /// Builds a trainer whose initial means are the network's current weights.
    pub fn new(cfg: TrainConfig, net: Network, x: Mat, y: Targets) -> Result<Self> {
        cfg.validate()?;
        if x.rows() != y.len() || x.rows() == 0 {
            return Err(Error::dims("Trainer::new", format!("{} targets", x.rows()), y.len()));
        }
        if x.cols() != net.input_dim() {
            return Err(Error::dims("Trainer::new", net.input_dim(), x.cols()));
        }
        let n = x.rows();
        let noisy = cfg.optimizer.is_noisy() && cfg.optimizer != OptimizerKind::Bbb;
        let gamma_in = if noisy { cfg.intrinsic_damping(n) } else { 0.0 };
        let noise = GaussianNoiseModel::new(cfg.noise_prior_shape, cfg.noise_prior_rate)?;
        let layers = net
            .weights()
            .into_iter()
            .map(|w| {
                let (rows, cols) = w.shape();
                let mut stats = KronStats::new(rows, cols);
                stats.refresh_eig()?;
                let log_sigma =
                    (cfg.optimizer == OptimizerKind::Bbb).then(|| Mat::filled(rows, cols, cfg.bbb_init_log_sigma));
                Ok(LayerOptState {
                    mean: w,
                    stats,
                    resc: RescalingDiag::new(rows, cols, gamma_in, cfg.gamma_ex),
                    a_inv: Mat::identity(rows),
                    s_inv: Mat::identity(cols),
                    mvg: None,
                    log_sigma,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let iters_per_epoch = n.div_ceil(cfg.batch_size) as u64;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        noise_rng.set_stream(NOISE_STREAM);
        let mut trainer = Trainer {
            data_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            noise_rng,
            order: (0..n).collect(),
            cursor: n,
            cfg,
            net,
            layers,
            noise,
            x,
            y,
            gamma_in,
            k: 0,
            iters_per_epoch,
            trace: StepTrace::default(),
        };
        if trainer.cfg.stats_init == StatsInit::Data {
            trainer.init_stats_from_data()?;
        }
        for l in 0..trainer.layers.len() {
            trainer.refresh_kfac_inverses(l)?;
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> u64 {
        self.k
    }

    pub fn total_iterations(&self) -> u64 {
        self.iters_per_epoch * self.cfg.epochs as u64
    }

    pub fn iterations_per_epoch(&self) -> u64 {
        self.iters_per_epoch
    }

    pub fn gamma_in(&self) -> f64 {
        self.gamma_in
    }

    pub fn noise(&self) -> &GaussianNoiseModel {
        &self.noise
    }

    pub fn layers(&self) -> &[LayerOptState] {
        &self.layers
    }

    /// Mutable layer state, for experiments that pin parts of the state.
    pub fn layers_mut(&mut self) -> &mut [LayerOptState] {
        &mut self.layers
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn last_step(&self) -> &StepTrace {
        &self.trace
    }

    pub fn training_data(&self) -> (&Mat, &Targets) {
        (&self.x, &self.y)
    }

    pub fn mean_weights(&self) -> Vec<Mat> {
        self.layers.iter().map(|l| l.mean.clone()).collect()
    }

    /// `λ / N`, the posterior covariance scale.
    pub fn posterior_scale(&self) -> f64 {
        self.cfg.lambda / self.x.rows() as f64
    }

    fn noise_for_task(&self) -> Option<&GaussianNoiseModel> {
        (self.net.task() == Task::Regression).then_some(&self.noise)
    }

    fn current_alpha(&self) -> f64 {
        if 2 * self.k > self.total_iterations() {
            self.cfg.alpha * self.cfg.lr_decay
        } else {
            self.cfg.alpha
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.order.len();
        if self.cursor >= n {
            use rand::seq::SliceRandom;
            self.order.shuffle(&mut self.data_rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.cfg.batch_size).min(n);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    fn layer_posterior(&self, l: usize) -> Result<LayerPosterior> {
        let st = &self.layers[l];
        let scale = self.posterior_scale();
        Ok(match self.cfg.optimizer {
            OptimizerKind::Kfac | OptimizerKind::Ekfac => LayerPosterior::Point { mean: st.mean.clone() },
            OptimizerKind::NoisyEkfac => {
                let (ea, es) = st.stats.eigs()?;
                LayerPosterior::Emvg(EmvgPosterior::new(
                    st.mean.clone(),
                    ea.clone(),
                    es.clone(),
                    st.resc.clone(),
                    scale,
                )?)
            }
            OptimizerKind::NoisyKfac => {
                let mut mvg = st
                    .mvg
                    .clone()
                    .ok_or(Error::MissingEigen("noisy K-FAC sampling factors"))?;
                mvg.mean = st.mean.clone();
                LayerPosterior::Mvg(mvg)
            }
            OptimizerKind::Bbb => LayerPosterior::Ffg(FfgPosterior::new(
                st.mean.clone(),
                st.log_sigma.clone().expect("bbb state has log sigma"),
            )?),
        })
    }

    /// Snapshot of the current variational posterior (or point estimate).
    pub fn posterior(&self) -> Result<ModelPosterior> {
        Ok(ModelPosterior {
            task: self.net.task(),
            layers: (0..self.layers.len())
                .map(|l| self.layer_posterior(l))
                .collect::<Result<_>>()?,
            noise: self.noise,
            eta: self.cfg.eta,
            lambda: self.cfg.lambda,
        })
    }

    fn refresh_kfac_inverses(&mut self, l: usize) -> Result<()> {
        if !matches!(self.cfg.optimizer, OptimizerKind::Kfac | OptimizerKind::NoisyKfac) {
            return Ok(());
        }
        let damping = self.gamma_in + self.cfg.gamma_ex;
        let scale = self.posterior_scale();
        let st = &mut self.layers[l];
        let (a_inv, s_inv) = damped_inverses(&st.stats.a, &st.stats.s, damping)?;
        st.a_inv = a_inv;
        st.s_inv = s_inv;
        if self.cfg.optimizer == OptimizerKind::NoisyKfac {
            st.mvg = Some(MvgPosterior::new(
                st.mean.clone(),
                &st.stats.a,
                &st.stats.s,
                self.gamma_in,
                scale,
            )?);
        }
        Ok(())
    }

    fn init_stats_from_data(&mut self) -> Result<()> {
        let n = self.x.rows();
        let idx: Vec<usize> = (0..self.cfg.batch_size.min(n)).collect();
        let xb = self.x.select_rows(&idx);
        let yb = self.y.select(&idx);
        self.net.set_weights(&self.mean_weights())?;
        let preds = self.net.forward(&xb)?;
        self.backward_for_stats(&preds, &yb)?;
        for (st, layer) in self.layers.iter_mut().zip(self.net.layers()) {
            fisher::update_kron_stats(&mut st.stats, layer, 1.0)?;
            st.stats.refresh_eig()?;
            if self.cfg.optimizer.uses_eigen_rescaling() {
                fisher::update_rescaling(&mut st.resc, &st.stats, layer, 1.0, 0)?;
            }
        }
        Ok(())
    }

    /// Backward pass whose caches feed the Fisher statistics.
    fn backward_for_stats(&mut self, preds: &Mat, yb: &Targets) -> Result<Vec<Mat>> {
        let task = self.net.task();
        let noise = self.noise_for_task().copied();
        let labels = match self.cfg.fisher_sampling {
            FisherSampling::Empirical => yb.clone(),
            FisherSampling::Model => nn::sample_model_targets(task, preds, noise.as_ref(), &mut self.noise_rng)?,
        };
        let og = nn::output_grad(task, preds, &labels, noise.as_ref())?;
        self.net.backward(&og)
    }

    fn sample_weights(&mut self) -> Result<(Vec<Mat>, Vec<Mat>)> {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut eps = Vec::new();
        for l in 0..self.layers.len() {
            match self.layer_posterior(l)? {
                LayerPosterior::Ffg(p) => {
                    let (w, e) = p.sample_with_noise(&mut self.noise_rng);
                    weights.push(w);
                    eps.push(e);
                }
                post => weights.push(post.sample(&mut self.noise_rng)?),
            }
        }
        Ok((weights, eps))
    }

    /// One optimizer iteration on the next mini-batch.
    pub fn step(&mut self) -> Result<StepReport> {
        self.k += 1;
        let k = self.k;
        let batch = self.next_batch();
        let xb = self.x.select_rows(&batch);
        let yb = self.y.select(&batch);
        let alpha = self.current_alpha();
        let n_train = self.x.rows() as f64;
        let task = self.net.task();

        // sample weights, then the pass at those weights
        let (weights, eps) = self.sample_weights()?;
        self.net.set_weights(&weights)?;
        let preds = self.net.forward(&xb)?;
        let noise = self.noise_for_task().copied();
        let ll_batch = nn::log_likelihood(task, &preds, &yb, noise.as_ref())?;
        let ll_term = n_train * ll_batch.iter().sum::<f64>() / ll_batch.len() as f64;

        let grads = if self.cfg.optimizer == OptimizerKind::Bbb {
            self.bbb_update(&xb, &yb, &eps, alpha)?
        } else {
            let grads = if self.cfg.fisher_sampling == FisherSampling::Model {
                self.backward_for_stats(&preds, &yb)?;
                self.update_curvature(k)?;
                let og = nn::output_grad(task, &preds, &yb, noise.as_ref())?;
                self.net.backward(&og)?
            } else {
                let grads = self.backward_for_stats(&preds, &yb)?;
                self.update_curvature(k)?;
                grads
            };
            self.natural_gradient_update(&weights, &grads, alpha)?;
            grads
        };

        if task == Task::Regression && k.is_multiple_of(self.iters_per_epoch) {
            self.update_noise()?;
        }

        let kl_term = if self.cfg.optimizer.is_noisy() {
            self.cfg.lambda * self.posterior()?.kl()?
        } else {
            0.0
        };
        let report = StepReport {
            iteration: k,
            elbo: ll_term - kl_term,
            ll_term,
            kl_term,
            grad_norms: grads.iter().map(Mat::frobenius_norm).collect(),
        };
        if !(report.elbo.is_finite() && report.grad_norms.iter().all(|g| g.is_finite())) {
            return Err(Error::NonFinite(format!("step report at iteration {k}")));
        }
        Ok(report)
    }

    /// Statistics, re-scaling, eigenbasis and re-initialization updates, in
    /// that order, each on its own interval.
    fn update_curvature(&mut self, k: u64) -> Result<()> {
        let cfg = &self.cfg;
        let eigen = cfg.optimizer.uses_eigen_rescaling();
        for (l, layer) in self.net.layers().iter().enumerate() {
            let st = &mut self.layers[l];
            if k.is_multiple_of(cfg.t_stats) {
                fisher::update_kron_stats(&mut st.stats, layer, cfg.beta)?;
            }
            if eigen && k.is_multiple_of(cfg.t_scale) {
                fisher::update_rescaling(&mut st.resc, &st.stats, layer, cfg.omega, cfg.t_eig)?;
            }
            if eigen {
                let refreshed = k.is_multiple_of(cfg.t_eig);
                if refreshed {
                    st.stats.refresh_eig()?;
                }
                if k.is_multiple_of(cfg.t_reinit) {
                    if !refreshed {
                        st.stats.refresh_eig()?;
                    }
                    fisher::reinit_rescaling(&mut st.resc, &st.stats)?;
                }
            }
        }
        if !eigen && k.is_multiple_of(self.cfg.t_eig) {
            for l in 0..self.layers.len() {
                self.refresh_kfac_inverses(l)?;
            }
        }
        Ok(())
    }

    fn natural_gradient_update(&mut self, weights: &[Mat], grads: &[Mat], alpha: f64) -> Result<()> {
        let eigen = self.cfg.optimizer.uses_eigen_rescaling();
        let mut vs = Vec::with_capacity(grads.len());
        let mut dirs = Vec::with_capacity(grads.len());
        for (l, (g, w)) in grads.iter().zip(weights).enumerate() {
            let v = if self.gamma_in > 0.0 {
                g.sub(&w.scale(self.gamma_in))
            } else {
                g.clone()
            };
            let st = &self.layers[l];
            let dir = if eigen {
                let (ea, es) = st.stats.eigs()?;
                ekfac_direction(ea, es, &st.resc.total_damped(), &v)?
            } else {
                kfac_direction(&st.a_inv, &st.s_inv, &v)
            };
            dir.ensure_finite(&format!("update direction of layer {l} at iteration {}", self.k))?;
            vs.push(v);
            dirs.push(dir);
        }
        let applied = self.apply_guarded(alpha, |st, l, a| st.mean.axpy(a, &dirs[l]))?;
        self.trace = StepTrace {
            weights: weights.to_vec(),
            grads: grads.to_vec(),
            v: vs,
            direction: dirs,
            alpha: applied,
        };
        Ok(())
    }

    /// Applies `update` with step size `alpha`, halving it until every mean
    /// stays finite.
    fn apply_guarded(&mut self, alpha: f64, update: impl Fn(&mut LayerOptState, usize, f64)) -> Result<f64> {
        let saved = self.layers.clone();
        let mut a = alpha;
        for attempt in 0..=MAX_STEP_HALVINGS {
            for (l, st) in self.layers.iter_mut().enumerate() {
                update(st, l, a);
            }
            let finite = self
                .layers
                .iter()
                .all(|st| st.mean.is_finite() && st.log_sigma.as_ref().is_none_or(Mat::is_finite));
            if finite {
                return Ok(a);
            }
            self.layers.clone_from(&saved);
            log::warn!(
                "non-finite parameters at iteration {} (attempt {attempt}); halving step size to {}",
                self.k,
                a * 0.5
            );
            a *= 0.5;
        }
        Err(Error::NonFinite(format!("parameters at iteration {}", self.k)))
    }

    fn bbb_update(&mut self, xb: &Mat, yb: &Targets, eps: &[Mat], alpha: f64) -> Result<Vec<Mat>> {
        let posts: Vec<FfgPosterior> = self
            .layers
            .iter()
            .map(|st| FfgPosterior::new(st.mean.clone(), st.log_sigma.clone().expect("bbb state")))
            .collect::<Result<_>>()?;
        let kl_scale = self.cfg.lambda / self.x.rows() as f64;
        let noise = self.noise;
        let (_, grads) = bbb_objective_and_grad(&mut self.net, &posts, eps, xb, yb, &noise, kl_scale, self.cfg.eta)?;
        let weights: Vec<Mat> = posts.iter().zip(eps).map(|(p, e)| p.reparameterize(e)).collect();
        let applied = self.apply_guarded(alpha, |st, l, a| {
            st.mean.axpy(a, &grads[l].0);
            let rho = st.log_sigma.as_mut().expect("bbb state");
            rho.axpy(a, &grads[l].1);
            *rho = rho.map(|r| r.max(LOG_SIGMA_MIN));
        })?;
        self.trace = StepTrace {
            weights,
            grads: Vec::new(),
            v: grads.iter().map(|g| g.0.clone()).collect(),
            direction: grads.iter().map(|g| g.0.clone()).collect(),
            alpha: applied,
        };
        // report gradients of the expected log-likelihood only
        let net_grads = self
            .net
            .layers()
            .iter()
            .map(|layer| {
                let (a, g) = layer.fresh_caches()?;
                Ok(a.t_matmul(g).scale(1.0 / a.rows() as f64))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(net_grads)
    }

    /// Conjugate noise-precision update from posterior-mean training residuals.
    pub fn update_noise(&mut self) -> Result<()> {
        let w = self.mean_weights();
        let refs: Vec<&Mat> = w.iter().collect();
        let preds = nn::predict_with(&refs, &self.x)?;
        let Targets::Real(y) = &self.y else {
            return Ok(());
        };
        let residuals: Vec<f64> = y.sub(&preds).into_vec();
        self.noise = nn::update_noise_precision(&self.noise, &residuals)?;
        Ok(())
    }

    /// Runs every remaining iteration, handing each report to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepReport)) -> Result<()> {
        while self.k < self.total_iterations() {
            let report = self.step()?;
            on_step(&report);
        }
        Ok(())
    }

    /// ELBO of the current posterior on the training data.
    pub fn estimate_elbo<R: Rng + ?Sized>(&self, n_mc: usize, rng: &mut R) -> Result<ElboEstimate> {
        estimate_elbo(&self.posterior()?, &self.x, &self.y, n_mc, rng)
    }
}
