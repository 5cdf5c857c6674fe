//! Fully-connected ReLU network with hand-written backpropagation.
//!
//! Each layer stores its weights as an `(n+1) × p` matrix whose last row is
//! the bias, and caches the homogeneous inputs `a` and the pre-activation
//! gradients `∇_s log p` from the most recent pass. The Kronecker statistics
//! are built from exactly these caches.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

/// Regression targets (one row per example) or class labels.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Real(Mat),
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(m) => m.rows(),
            Targets::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Real(m) => Targets::Real(m.select_rows(idx)),
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerState {
    weights: Mat,
    inputs: Mat,
    preacts: Mat,
    grads: Mat,
    forward_pass: u64,
    backward_pass: u64,
}

impl LayerState {
    pub fn new(weights: Mat) -> Self {
        LayerState {
            weights,
            inputs: Mat::zeros(0, 0),
            preacts: Mat::zeros(0, 0),
            grads: Mat::zeros(0, 0),
            forward_pass: 0,
            backward_pass: 0,
        }
    }

    /// Input width `n`, not counting the homogeneous coordinate.
    pub fn fan_in(&self) -> usize {
        self.weights.rows() - 1
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    /// Cached inputs `batch × (n+1)` with the trailing column of ones.
    pub fn activations(&self) -> Result<&Mat> {
        if self.forward_pass == 0 {
            return Err(Error::StaleCache("layer activations read before forward".into()));
        }
        Ok(&self.inputs)
    }

    /// Cached pre-activation gradients `batch × p` from the latest backward pass.
    pub fn preact_grads(&self) -> Result<&Mat> {
        if self.backward_pass == 0 || self.backward_pass != self.forward_pass {
            return Err(Error::StaleCache(
                "pre-activation gradients do not belong to the latest forward pass".into(),
            ));
        }
        Ok(&self.grads)
    }

    /// Both caches, checked to come from the same pass.
    pub fn fresh_caches(&self) -> Result<(&Mat, &Mat)> {
        let g = self.preact_grads()?;
        Ok((&self.inputs, g))
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.rows()
    }

    /// `a_i g_iᵀ` for example `i` of the cached batch.
    pub fn per_example_grad(&self, i: usize) -> Result<Mat> {
        let (a, g) = self.fresh_caches()?;
        Ok(Mat::outer(a.row(i), g.row(i)))
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<LayerState>,
    activation: Activation,
    task: Task,
    pass: u64,
}

impl Network {
    /// Builds a network from explicit weight matrices.
    pub fn from_weights(weights: Vec<Mat>, task: Task) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (l, w) in weights.iter().enumerate() {
            if w.rows() < 1 {
                return Err(Error::InvalidArgument(format!("layer {l} has no rows")));
            }
        }
        for pair in weights.windows(2) {
            if pair[0].cols() + 1 != pair[1].rows() {
                return Err(Error::dims(
                    "Network::from_weights",
                    format!("{} rows", pair[0].cols() + 1),
                    format!("{} rows", pair[1].rows()),
                ));
            }
        }
        Ok(Network {
            layers: weights.into_iter().map(LayerState::new).collect(),
            activation: Activation::Relu,
            task,
            pass: 0,
        })
    }

    /// Random initialization: weights `N(0, 1/fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], task: Task, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidArgument("need at least input and output sizes".into()));
        }
        let weights = sizes
            .windows(2)
            .map(|w| {
                let (n, p) = (w[0], w[1]);
                let std = (1.0 / n.max(1) as f64).sqrt();
                Mat::from_fn(n + 1, p, |i, _| {
                    if i == n {
                        0.0
                    } else {
                        std * rng.sample::<f64, _>(StandardNormal)
                    }
                })
            })
            .collect();
        Network::from_weights(weights, task)
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn weights(&self) -> Vec<Mat> {
        self.layers.iter().map(|l| l.weights.clone()).collect()
    }

    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weights.shape()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    /// Replaces all weights; invalidates the caches.
    pub fn set_weights(&mut self, weights: &[Mat]) -> Result<()> {
        if weights.len() != self.layers.len() {
            return Err(Error::dims("set_weights", self.layers.len(), weights.len()));
        }
        for (layer, w) in self.layers.iter().zip(weights) {
            if layer.weights.shape() != w.shape() {
                return Err(Error::dims(
                    "set_weights",
                    format!("{:?}", layer.weights.shape()),
                    format!("{:?}", w.shape()),
                ));
            }
        }
        for (layer, w) in self.layers.iter_mut().zip(weights) {
            layer.weights.clone_from(w);
            layer.forward_pass = 0;
            layer.backward_pass = 0;
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.input_dim() {
            return Err(Error::dims("forward", self.input_dim(), x.cols()));
        }
        self.pass += 1;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let a = h.append_column(1.0);
            let s = a.matmul(&layer.weights);
            layer.inputs = a;
            layer.forward_pass = self.pass;
            h = if l == last { s.clone() } else { s.map(relu) };
            layer.preacts = s;
        }
        Ok(h)
    }

    /// Forward pass that leaves the caches untouched.
    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        predict_with(&self.weights_ref(), x)
    }

    fn weights_ref(&self) -> Vec<&Mat> {
        self.layers.iter().map(|l| &l.weights).collect()
    }

    /// Backpropagates `∂ log p / ∂ output` (one row per example) and returns
    /// the batch-mean gradient `∇_W log p` for every layer.
    pub fn backward(&mut self, output_grad: &Mat) -> Result<Vec<Mat>> {
        if self.pass == 0 || self.layers.iter().any(|l| l.forward_pass != self.pass) {
            return Err(Error::StaleCache("backward called before forward".into()));
        }
        let batch = self.layers[0].inputs.rows();
        if output_grad.shape() != (batch, self.output_dim()) {
            return Err(Error::dims(
                "backward",
                format!("{}x{}", batch, self.output_dim()),
                format!("{:?}", output_grad.shape()),
            ));
        }
        let inv_batch = 1.0 / batch as f64;
        let mut grads = vec![Mat::zeros(0, 0); self.layers.len()];
        let mut g = output_grad.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &mut self.layers[l];
            grads[l] = layer.inputs.t_matmul(&g).scale(inv_batch);
            let next = if l > 0 {
                let n = layer.fan_in();
                let gh = g.matmul_t(&layer.weights.top_rows(n));
                Some(gh)
            } else {
                None
            };
            layer.grads = g;
            layer.backward_pass = self.pass;
            if let Some(gh) = next {
                g = gh.zip_map(&self.layers[l - 1].preacts, |d, s| if s > 0.0 { d } else { 0.0 });
            } else {
                break;
            }
        }
        Ok(grads)
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Forward pass with explicit weights.
pub fn predict_with(weights: &[&Mat], x: &Mat) -> Result<Mat> {
    let mut h = x.clone();
    let last = weights.len() - 1;
    for (l, w) in weights.iter().enumerate() {
        if h.cols() + 1 != w.rows() {
            return Err(Error::dims("predict", w.rows() - 1, h.cols()));
        }
        let s = h.append_column(1.0).matmul(w);
        h = if l == last { s } else { s.map(relu) };
    }
    Ok(h)
}

/// Gamma model for the Gaussian likelihood precision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianNoiseModel {
    pub prior_shape: f64,
    pub prior_rate: f64,
    pub shape: f64,
    pub rate: f64,
}

impl Default for GaussianNoiseModel {
    fn default() -> Self {
        GaussianNoiseModel::new(6.0, 6.0).expect("positive prior")
    }
}

impl GaussianNoiseModel {
    /// Posterior initialized at the prior.
    pub fn new(a0: f64, b0: f64) -> Result<Self> {
        if !(a0 > 0.0 && b0 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma prior needs a0, b0 > 0 (got {a0}, {b0})"
            )));
        }
        Ok(GaussianNoiseModel {
            prior_shape: a0,
            prior_rate: b0,
            shape: a0,
            rate: b0,
        })
    }

    /// Fixed precision `τ`, expressed as a posterior with mean `τ`.
    pub fn fixed(precision: f64) -> Self {
        GaussianNoiseModel {
            prior_shape: 1.0,
            prior_rate: 1.0 / precision,
            shape: 1.0,
            rate: 1.0 / precision,
        }
    }

    /// `E[γ] = shape / rate`.
    pub fn precision(&self) -> f64 {
        self.shape / self.rate
    }
}

/// Conjugate update from the full set of training residuals.
pub fn update_noise_precision(noise: &GaussianNoiseModel, residuals: &[f64]) -> Result<GaussianNoiseModel> {
    if residuals.is_empty() {
        return Err(Error::InvalidArgument("no residuals for noise-precision update".into()));
    }
    let sq: f64 = residuals.iter().map(|r| r * r).sum();
    Ok(GaussianNoiseModel {
        shape: noise.prior_shape + residuals.len() as f64 / 2.0,
        rate: noise.prior_rate + 0.5 * sq,
        ..*noise
    })
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn check_targets(preds: &Mat, targets: &Targets) -> Result<()> {
    if preds.rows() != targets.len() {
        return Err(Error::dims("log_likelihood", preds.rows(), targets.len()));
    }
    match targets {
        Targets::Real(y) if y.shape() != preds.shape() => Err(Error::dims(
            "log_likelihood",
            format!("{:?}", preds.shape()),
            format!("{:?}", y.shape()),
        )),
        Targets::Labels(l) => {
            for &label in l {
                if label >= preds.cols() {
                    return Err(Error::InvalidLabel {
                        label,
                        classes: preds.cols(),
                    });
                }
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Per-example `log p(y | x, w)`.
pub fn log_likelihood(
    task: Task,
    preds: &Mat,
    targets: &Targets,
    noise: Option<&GaussianNoiseModel>,
) -> Result<Vec<f64>> {
    check_targets(preds, targets)?;
    match (task, targets) {
        (Task::Regression, Targets::Real(y)) => {
            let noise =
                noise.ok_or_else(|| Error::InvalidArgument("regression likelihood needs a noise model".into()))?;
            let tau = noise.precision();
            Ok((0..preds.rows())
                .map(|i| {
                    preds
                        .row(i)
                        .iter()
                        .zip(y.row(i))
                        .map(|(p, t)| 0.5 * (tau.ln() - LN_2PI) - 0.5 * tau * (t - p) * (t - p))
                        .sum()
                })
                .collect())
        }
        (Task::Classification, Targets::Labels(l)) => {
            Ok((0..preds.rows()).map(|i| log_softmax(preds.row(i))[l[i]]).collect())
        }
        _ => Err(Error::InvalidArgument("targets do not match the task".into())),
    }
}

/// `∂ log p(y | x, w) / ∂ output` per example.
pub fn output_grad(task: Task, preds: &Mat, targets: &Targets, noise: Option<&GaussianNoiseModel>) -> Result<Mat> {
    check_targets(preds, targets)?;
    match (task, targets) {
        (Task::Regression, Targets::Real(y)) => {
            let tau = noise
                .ok_or_else(|| Error::InvalidArgument("regression gradient needs a noise model".into()))?
                .precision();
            Ok(y.sub(preds).scale(tau))
        }
        (Task::Classification, Targets::Labels(l)) => {
            let mut g = Mat::zeros(preds.rows(), preds.cols());
            for i in 0..preds.rows() {
                let lp = log_softmax(preds.row(i));
                for (j, v) in lp.iter().enumerate() {
                    g[(i, j)] = if j == l[i] { 1.0 } else { 0.0 } - v.exp();
                }
            }
            Ok(g)
        }
        _ => Err(Error::InvalidArgument("targets do not match the task".into())),
    }
}

/// Draws one target per input from the model's predictive distribution.
pub fn sample_model_targets<R: Rng + ?Sized>(
    task: Task,
    preds: &Mat,
    noise: Option<&GaussianNoiseModel>,
    rng: &mut R,
) -> Result<Targets> {
    match task {
        Task::Regression => {
            let tau = noise
                .ok_or_else(|| Error::InvalidArgument("regression sampling needs a noise model".into()))?
                .precision();
            let dist = Normal::new(0.0, 1.0 / tau.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            Ok(Targets::Real(preds.map(|p| p + dist.sample(rng))))
        }
        Task::Classification => {
            let labels = (0..preds.rows())
                .map(|i| {
                    let probs: Vec<f64> = log_softmax(preds.row(i)).iter().map(|v| v.exp()).collect();
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    for (j, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            return j;
                        }
                    }
                    probs.len() - 1
                })
                .collect();
            Ok(Targets::Labels(labels))
        }
    }
}
