//! Stacked LSTM trunk with an optional input batch-norm layer and an
//! optional softmax speaker head.
//!
//! The embedding of a window is the top layer's hidden state after the
//! last frame. Gradients are computed by exact backpropagation through
//! time; see [`loss`] for the two training objectives.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureWindow;
use crate::Scalar;

pub mod batchnorm;
pub mod checkpoint;
pub mod loss;
mod lstm;

pub use batchnorm::{BatchNorm, BatchStats};
pub use loss::{
    contrastive_loss, contrastive_loss_grad, pair_cost, pair_distance, softmax_loss, softmax_loss_grad, LossGrad,
    PairBatch, TrialPair,
};

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("non-finite activation in forward pass")]
    NonFiniteActivation,
    #[error("speaker index {index} out of range for {len} speakers")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("cached forward pass is stale: parameters changed since it was computed")]
    StaleCache,
    #[error("model has no softmax head")]
    MissingHead,
    #[error("batch normalization needs at least 2 windows in training mode, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LstmConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            input_dim: 40,
            hidden_dim: 300,
            num_layers: 2,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(NetworkError::InvalidConfig(format!(
                "all dimensions must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Impostor pairs closer than this are penalized.
    pub margin: f64,
    /// Coefficient of the squared L2 penalty on trunk weight matrices.
    pub lambda: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            lambda: 1e-4,
        }
    }
}

/// Batch norm uses batch statistics in `Train` and running statistics in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One LSTM layer. Gate blocks are stacked in the order input, forget,
/// output, candidate along the first axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<T> {
    /// 4H x input
    pub w_ih: Array2<T>,
    /// 4H x H
    pub w_hh: Array2<T>,
    /// 4H
    pub bias: Array1<T>,
}

impl<T: Scalar> LstmLayer<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Array2::zeros((4 * hidden, input)),
            w_hh: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.ncols()
    }
}

/// Linear classifier over embeddings, one row per development speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead<T> {
    /// speakers x H
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> SoftmaxHead<T> {
    pub fn zeros(num_speakers: usize, hidden: usize) -> Self {
        Self {
            weights: Array2::zeros((num_speakers, hidden)),
            bias: Array1::zeros(num_speakers),
        }
    }

    pub fn num_speakers(&self) -> usize {
        self.weights.nrows()
    }

    pub fn logits(&self, embeddings: &Array2<T>) -> Array2<T> {
        embeddings.dot(&self.weights.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel<T> {
    config: LstmConfig,
    layers: Vec<LstmLayer<T>>,
    input_norm: Option<BatchNorm<T>>,
    head: Option<SoftmaxHead<T>>,
    generation: u64,
}

impl<T: Scalar> LstmModel<T> {
    /// All parameters zero.
    pub fn zeros(config: LstmConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let layers = (0..config.num_layers)
            .map(|l| {
                let input = if l == 0 { config.input_dim } else { config.hidden_dim };
                LstmLayer::zeros(input, config.hidden_dim)
            })
            .collect();
        Ok(Self {
            config,
            layers,
            input_norm: None,
            head: None,
            generation: 0,
        })
    }

    /// Uniform(-k, k) with k = 1/sqrt(hidden); forget-gate bias set to 1.
    pub fn new<R: Rng + ?Sized>(config: LstmConfig, rng: &mut R) -> Result<Self, NetworkError> {
        let mut model = Self::zeros(config)?;
        let k = 1.0 / (config.hidden_dim as f64).sqrt();
        let h = config.hidden_dim;
        for layer in &mut model.layers {
            for v in layer
                .w_ih
                .iter_mut()
                .chain(layer.w_hh.iter_mut())
                .chain(layer.bias.iter_mut())
            {
                *v = T::of(rng.gen_range(-k..k));
            }
            layer.bias.slice_mut(ndarray::s![h..2 * h]).fill(T::one());
        }
        Ok(model)
    }

    pub fn config(&self) -> &LstmConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LstmLayer<T>] {
        &self.layers
    }

    pub fn input_norm(&self) -> Option<&BatchNorm<T>> {
        self.input_norm.as_ref()
    }

    pub fn head(&self) -> Option<&SoftmaxHead<T>> {
        self.head.as_ref()
    }

    /// Bumped by every mutation; cached forward passes record it.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn layers_mut(&mut self) -> &mut [LstmLayer<T>] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn input_norm_mut(&mut self) -> Option<&mut BatchNorm<T>> {
        self.generation += 1;
        self.input_norm.as_mut()
    }

    pub fn set_input_norm(&mut self, norm: Option<BatchNorm<T>>) -> Result<(), NetworkError> {
        if let Some(n) = &norm {
            if n.dim() != self.config.input_dim {
                return Err(NetworkError::ShapeMismatch {
                    expected: format!("{} channels", self.config.input_dim),
                    found: format!("{} channels", n.dim()),
                });
            }
        }
        self.generation += 1;
        self.input_norm = norm;
        Ok(())
    }

    pub fn set_head(&mut self, head: Option<SoftmaxHead<T>>) -> Result<(), NetworkError> {
        if let Some(h) = &head {
            if h.weights.ncols() != self.config.hidden_dim || h.bias.len() != h.weights.nrows() {
                return Err(NetworkError::ShapeMismatch {
                    expected: format!("N x {}", self.config.hidden_dim),
                    found: format!("{:?}", h.weights.dim()),
                });
            }
        }
        self.generation += 1;
        self.head = head;
        Ok(())
    }

    /// Attaches a randomly initialized head with one row per speaker.
    pub fn init_head<R: Rng + ?Sized>(&mut self, num_speakers: usize, rng: &mut R) {
        let k = 1.0 / (self.config.hidden_dim as f64).sqrt();
        let mut head = SoftmaxHead::zeros(num_speakers, self.config.hidden_dim);
        head.weights.mapv_inplace(|_| T::of(rng.gen_range(-k..k)));
        self.generation += 1;
        self.head = Some(head);
    }

    /// Trainable parameters in a fixed order: per layer `w_ih`, `w_hh`,
    /// `bias`; then batch-norm scale and shift; then head weights and bias.
    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for l in &self.layers {
            out.push(l.w_ih.as_slice().expect("standard layout"));
            out.push(l.w_hh.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        if let Some(n) = &self.input_norm {
            out.push(n.gamma.as_slice().expect("standard layout"));
            out.push(n.beta.as_slice().expect("standard layout"));
        }
        if let Some(h) = &self.head {
            out.push(h.weights.as_slice().expect("standard layout"));
            out.push(h.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.generation += 1;
        let mut out: Vec<&mut [T]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.w_ih.as_slice_mut().expect("standard layout"));
            out.push(l.w_hh.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        if let Some(n) = &mut self.input_norm {
            out.push(n.gamma.as_slice_mut().expect("standard layout"));
            out.push(n.beta.as_slice_mut().expect("standard layout"));
        }
        if let Some(h) = &mut self.head {
            out.push(h.weights.as_slice_mut().expect("standard layout"));
            out.push(h.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Sum of squares of the trunk weight matrices (biases excluded).
    pub fn trunk_weight_sq_norm(&self) -> T {
        self.layers
            .iter()
            .map(|l| l.w_ih.iter().chain(l.w_hh.iter()).map(|&w| w * w).sum::<T>())
            .sum()
    }

    fn check_window(&self, x: &FeatureWindow<T>, steps: usize) -> Result<(), NetworkError> {
        let (t, c) = x.values.dim();
        if c != self.config.input_dim || t != steps || t == 0 {
            return Err(NetworkError::ShapeMismatch {
                expected: format!("{steps} x {}", self.config.input_dim),
                found: format!("{t} x {c}"),
            });
        }
        Ok(())
    }

    /// Forward pass over a batch of equal-length windows, keeping every
    /// activation needed by [`LstmModel::backward`].
    pub fn forward(&self, xs: &[&FeatureWindow<T>], mode: Mode) -> Result<ForwardPass<T>, NetworkError> {
        let first = xs.first().ok_or(NetworkError::EmptyBatch)?;
        let steps = first.num_frames();
        for x in xs {
            self.check_window(x, steps)?;
        }
        let batch = xs.len();
        let time_major: Vec<Array2<T>> = (0..steps)
            .map(|t| {
                let mut m = Array2::zeros((batch, self.config.input_dim));
                for (b, x) in xs.iter().enumerate() {
                    m.row_mut(b).assign(&x.values.row(t));
                }
                m
            })
            .collect();

        let (mut inputs, norm) = match &self.input_norm {
            Some(bn) => {
                let (ys, cache, stats) = bn.forward(&time_major, mode)?;
                (ys, Some((cache, stats)))
            }
            None => (time_major, None),
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let cache = lstm::forward(layer, inputs);
            inputs = cache.hiddens.clone();
            layers.push(cache);
        }
        let embeddings = layers
            .last()
            .and_then(|c| c.hiddens.last())
            .cloned()
            .expect("at least one layer and one step");
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(NetworkError::NonFiniteActivation);
        }
        let (norm_cache, norm_stats) = match norm {
            Some((c, s)) => (Some(c), s),
            None => (None, None),
        };
        Ok(ForwardPass {
            generation: self.generation,
            embeddings,
            layers,
            norm_cache,
            norm_stats,
        })
    }

    /// Backpropagates a gradient on the embeddings (batch x H) through the
    /// trunk. Head gradients are left at zero.
    pub fn backward(&self, pass: &ForwardPass<T>, d_embed: &Array2<T>) -> Result<Gradients<T>, NetworkError> {
        if pass.generation != self.generation {
            return Err(NetworkError::StaleCache);
        }
        if d_embed.dim() != pass.embeddings.dim() {
            return Err(NetworkError::ShapeMismatch {
                expected: format!("{:?}", pass.embeddings.dim()),
                found: format!("{:?}", d_embed.dim()),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let steps = pass.layers[0].hiddens.len();
        let mut dh_ext: Vec<Option<Array2<T>>> = vec![None; steps];
        dh_ext[steps - 1] = Some(d_embed.clone());
        for (l, (layer, cache)) in self.layers.iter().zip(&pass.layers).enumerate().rev() {
            let dxs = lstm::backward(layer, cache, &dh_ext, &mut grads.layers[l]);
            dh_ext = dxs.into_iter().map(Some).collect();
        }
        if let (Some(bn), Some(cache)) = (&self.input_norm, &pass.norm_cache) {
            let dys: Vec<Array2<T>> = dh_ext.into_iter().map(|d| d.expect("filled")).collect();
            let (dgamma, dbeta, _) = bn.backward(cache, &dys);
            grads.input_norm = Some((dgamma, dbeta));
        }
        Ok(grads)
    }

    /// Embeddings with running batch-norm statistics, one row per window.
    pub fn embed_batch(&self, xs: &[&FeatureWindow<T>]) -> Result<Array2<T>, NetworkError> {
        Ok(self.forward(xs, Mode::Eval)?.embeddings)
    }

    pub fn embed(&self, x: &FeatureWindow<T>) -> Result<Array1<T>, NetworkError> {
        Ok(self.embed_batch(&[x])?.row(0).to_owned())
    }
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    generation: u64,
    /// batch x H, the top layer's final hidden state.
    pub embeddings: Array2<T>,
    layers: Vec<lstm::LayerCache<T>>,
    norm_cache: Option<batchnorm::NormCache<T>>,
    /// Batch statistics when batch norm ran in training mode.
    pub norm_stats: Option<BatchStats<T>>,
}

/// Gradients laid out like the model's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LstmLayer<T>>,
    pub input_norm: Option<(Array1<T>, Array1<T>)>,
    pub head: Option<SoftmaxHead<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &LstmModel<T>) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LstmLayer::zeros(l.input_dim(), l.hidden_dim()))
                .collect(),
            input_norm: model
                .input_norm
                .as_ref()
                .map(|n| (Array1::zeros(n.dim()), Array1::zeros(n.dim()))),
            head: model
                .head
                .as_ref()
                .map(|h| SoftmaxHead::zeros(h.num_speakers(), h.weights.ncols())),
        }
    }

    /// Same order as [`LstmModel::params`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for l in &self.layers {
            out.push(l.w_ih.as_slice().expect("standard layout"));
            out.push(l.w_hh.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        if let Some((g, b)) = &self.input_norm {
            out.push(g.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        if let Some(h) = &self.head {
            out.push(h.weights.as_slice().expect("standard layout"));
            out.push(h.bias.as_slice().expect("standard layout"));
        }
        out
    }

    /// Flattened copy in parameter order.
    pub fn flatten(&self) -> Vec<T> {
        self.slices().into_iter().flat_map(|s| s.iter().copied()).collect()
    }

    /// Adds `2 * lambda * w` to every trunk weight-matrix gradient.
    pub fn add_weight_decay(&mut self, model: &LstmModel<T>, lambda: T) {
        let two_lambda = lambda + lambda;
        for (g, l) in self.layers.iter_mut().zip(&model.layers) {
            g.w_ih.scaled_add(two_lambda, &l.w_ih);
            g.w_hh.scaled_add(two_lambda, &l.w_hh);
        }
    }
}
