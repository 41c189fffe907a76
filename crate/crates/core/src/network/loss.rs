//! Softmax speaker-classification loss and siamese contrastive loss.

use ndarray::{Array1, Array2, Axis, Zip};

use super::{BatchStats, ContrastiveConfig, Gradients, LstmModel, Mode, NetworkError};
use crate::features::FeatureWindow;
use crate::Scalar;

/// Guards the distance denominator when two embeddings coincide.
pub const DISTANCE_EPS: f64 = 1e-12;

/// Two windows and a label: `genuine` is Y = 1 (same speaker).
#[derive(Debug, Clone)]
pub struct TrialPair<T> {
    pub first: FeatureWindow<T>,
    pub second: FeatureWindow<T>,
    pub genuine: bool,
}

pub type PairBatch<T> = [TrialPair<T>];

/// Loss value, gradients, and by-products of one batch.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grads: Gradients<T>,
    pub norm_stats: Option<BatchStats<T>>,
    /// Per-pair distances (contrastive only).
    pub distances: Vec<T>,
}

/// Numerically stable `-log softmax(logits)[index]`.
pub fn cross_entropy<T: Scalar>(logits: ndarray::ArrayView1<T>, index: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
    lse - logits[index]
}

pub fn softmax<T: Scalar>(logits: ndarray::ArrayView1<T>) -> Array1<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e = logits.mapv(|x| (x - max).exp());
    let z = e.sum();
    e / z
}

fn head_of<T: Scalar>(model: &LstmModel<T>) -> Result<&super::SoftmaxHead<T>, NetworkError> {
    model.head().ok_or(NetworkError::MissingHead)
}

/// Cross-entropy of one window against its speaker index, evaluation mode.
pub fn softmax_loss<T: Scalar>(model: &LstmModel<T>, x: &FeatureWindow<T>, speaker: usize) -> Result<T, NetworkError> {
    let head = head_of(model)?;
    if speaker >= head.num_speakers() {
        return Err(NetworkError::IndexOutOfRange {
            index: speaker,
            len: head.num_speakers(),
        });
    }
    let emb = model.embed_batch(&[x])?;
    let logits = head.logits(&emb);
    Ok(cross_entropy(logits.row(0), speaker))
}

/// Mean cross-entropy over a batch with gradients for trunk, input norm and head.
pub fn softmax_loss_grad<T: Scalar>(
    model: &LstmModel<T>,
    xs: &[&FeatureWindow<T>],
    speakers: &[usize],
    mode: Mode,
) -> Result<LossGrad<T>, NetworkError> {
    let head = head_of(model)?;
    if xs.is_empty() {
        return Err(NetworkError::EmptyBatch);
    }
    if let Some(&bad) = speakers.iter().find(|&&s| s >= head.num_speakers()) {
        return Err(NetworkError::IndexOutOfRange {
            index: bad,
            len: head.num_speakers(),
        });
    }
    let pass = model.forward(xs, mode)?;
    let logits = head.logits(&pass.embeddings);
    let n = T::of_usize(xs.len());
    let mut loss = T::zero();
    let mut dlogits = Array2::<T>::zeros(logits.raw_dim());
    for (b, &s) in speakers.iter().enumerate() {
        loss += cross_entropy(logits.row(b), s);
        let p = softmax(logits.row(b));
        let mut row = dlogits.row_mut(b);
        row.assign(&(p / n));
        row[s] -= T::one() / n;
    }
    let d_embed = dlogits.dot(&head.weights);
    let mut grads = model.backward(&pass, &d_embed)?;
    if let Some(hg) = grads.head.as_mut() {
        hg.weights = dlogits.t().dot(&pass.embeddings);
        hg.bias = dlogits.sum_axis(Axis(0));
    }
    Ok(LossGrad {
        loss: loss / n,
        grads,
        norm_stats: pass.norm_stats,
        distances: Vec::new(),
    })
}

/// Per-pair contrastive cost: `D^2 / 2` for genuine pairs and
/// `max(0, margin - D)^2 / 2` for impostors.
pub fn pair_cost<T: Scalar>(distance: T, genuine: bool, margin: T) -> T {
    let half = T::of(0.5);
    if genuine {
        half * distance * distance
    } else {
        let gap = (margin - distance).max(T::zero());
        half * gap * gap
    }
}

/// Derivative of [`pair_cost`] with respect to the distance; zero at and
/// beyond the margin.
pub fn pair_cost_slope<T: Scalar>(distance: T, genuine: bool, margin: T) -> T {
    if genuine {
        distance
    } else if distance < margin {
        distance - margin
    } else {
        T::zero()
    }
}

fn euclidean<T: Scalar>(a: ndarray::ArrayView1<T>, b: ndarray::ArrayView1<T>) -> T {
    Zip::from(a)
        .and(b)
        .fold(T::zero(), |acc, &x, &y| acc + (x - y) * (x - y))
        .sqrt()
}

/// Euclidean distance between the two windows' embeddings under shared
/// weights (evaluation mode).
pub fn pair_distance<T: Scalar>(
    model: &LstmModel<T>,
    x1: &FeatureWindow<T>,
    x2: &FeatureWindow<T>,
) -> Result<T, NetworkError> {
    let emb = model.embed_batch(&[x1, x2])?;
    Ok(euclidean(emb.row(0), emb.row(1)))
}

fn pair_forward<T: Scalar>(
    model: &LstmModel<T>,
    batch: &PairBatch<T>,
    mode: Mode,
) -> Result<(super::ForwardPass<T>, Vec<T>), NetworkError> {
    if batch.is_empty() {
        return Err(NetworkError::EmptyBatch);
    }
    let windows: Vec<&FeatureWindow<T>> = batch
        .iter()
        .map(|p| &p.first)
        .chain(batch.iter().map(|p| &p.second))
        .collect();
    let pass = model.forward(&windows, mode)?;
    let n = batch.len();
    let distances = (0..n)
        .map(|j| euclidean(pass.embeddings.row(j), pass.embeddings.row(n + j)))
        .collect();
    Ok((pass, distances))
}

/// Mean pair cost over the batch plus `lambda * sum(w^2)` over trunk weights.
pub fn contrastive_loss<T: Scalar>(
    model: &LstmModel<T>,
    batch: &PairBatch<T>,
    cfg: &ContrastiveConfig,
    mode: Mode,
) -> Result<T, NetworkError> {
    let (_, distances) = pair_forward(model, batch, mode)?;
    Ok(contrastive_value(model, batch, &distances, cfg))
}

fn contrastive_value<T: Scalar>(
    model: &LstmModel<T>,
    batch: &PairBatch<T>,
    distances: &[T],
    cfg: &ContrastiveConfig,
) -> T {
    let margin = T::of(cfg.margin);
    let data: T = batch
        .iter()
        .zip(distances)
        .map(|(p, &d)| pair_cost(d, p.genuine, margin))
        .sum::<T>()
        / T::of_usize(batch.len());
    data + T::of(cfg.lambda) * model.trunk_weight_sq_norm()
}

pub fn contrastive_loss_grad<T: Scalar>(
    model: &LstmModel<T>,
    batch: &PairBatch<T>,
    cfg: &ContrastiveConfig,
    mode: Mode,
) -> Result<LossGrad<T>, NetworkError> {
    let (pass, distances) = pair_forward(model, batch, mode)?;
    let n = batch.len();
    let nf = T::of_usize(n);
    let margin = T::of(cfg.margin);
    let eps = T::of(DISTANCE_EPS);
    let mut d_embed = Array2::<T>::zeros(pass.embeddings.raw_dim());
    for (j, (pair, &d)) in batch.iter().zip(&distances).enumerate() {
        let slope = pair_cost_slope(d, pair.genuine, margin);
        if slope == T::zero() {
            continue;
        }
        let diff = &pass.embeddings.row(j) - &pass.embeddings.row(n + j);
        let g = diff * (slope / d.max(eps) / nf);
        d_embed.row_mut(j).assign(&g);
        d_embed.row_mut(n + j).assign(&(-g));
    }
    let mut grads = model.backward(&pass, &d_embed)?;
    grads.add_weight_decay(model, T::of(cfg.lambda));
    Ok(LossGrad {
        loss: contrastive_value(model, batch, &distances, cfg),
        grads,
        norm_stats: pass.norm_stats,
        distances,
    })
}
