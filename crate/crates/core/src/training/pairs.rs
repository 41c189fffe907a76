//! Impostor-pair filtering against the spread of genuine distances.
//!
//! With the model frozen, every candidate pair is scored. The largest and
//! smallest genuine distances set a threshold
//! `th = th0 * |max_gen / min_gen|`, and impostor pairs farther apart than
//! `max_gen + th` are dropped; everything else is fed to training.

use ndarray::Array2;

use super::TrainError;
use crate::features::FeatureWindow;
use crate::network::{LstmModel, NetworkError};
use crate::Scalar;

/// Guards `min_gen` in the ratio when a genuine pair has zero distance.
pub const MIN_GEN_EPS: f64 = 1e-9;

/// Indices of two crops in the epoch's crop list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairRef {
    pub first: usize,
    pub second: usize,
}

#[derive(Debug, Clone)]
pub struct PairPool<T> {
    pub genuine: Vec<PairRef>,
    pub impostor: Vec<PairRef>,
    pub genuine_distances: Vec<T>,
    pub impostor_distances: Vec<T>,
}

impl<T: Scalar> PairPool<T> {
    /// Scores every pair with the model held fixed (evaluation mode).
    pub fn evaluate(
        model: &LstmModel<T>,
        crops: &[FeatureWindow<T>],
        genuine: Vec<PairRef>,
        impostor: Vec<PairRef>,
    ) -> Result<Self, NetworkError> {
        let refs: Vec<&FeatureWindow<T>> = crops.iter().collect();
        let mut emb = Array2::zeros((0, model.config().hidden_dim));
        for chunk in refs.chunks(256) {
            emb.append(ndarray::Axis(0), model.embed_batch(chunk)?.view())
                .expect("matching width");
        }
        let dist = |p: &PairRef| {
            let d = &emb.row(p.first) - &emb.row(p.second);
            d.mapv(|v| v * v).sum().sqrt()
        };
        Ok(Self {
            genuine_distances: genuine.iter().map(dist).collect(),
            impostor_distances: impostor.iter().map(dist).collect(),
            genuine,
            impostor,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T> {
    pub max_gen: T,
    pub min_gen: T,
    pub threshold: T,
    /// Impostor indices fed to training, in pool order.
    pub kept_impostors: Vec<usize>,
    pub discarded_impostors: Vec<usize>,
}

impl<T: Scalar> Selection<T> {
    pub fn discard_rate(&self) -> f64 {
        let total = self.kept_impostors.len() + self.discarded_impostors.len();
        if total == 0 {
            0.0
        } else {
            self.discarded_impostors.len() as f64 / total as f64
        }
    }
}

/// Applies the threshold rule to precomputed distances. Genuine pairs are
/// never dropped.
pub fn select_pairs<T: Scalar>(genuine: &[T], impostor: &[T], th0: T) -> Result<Selection<T>, TrainError> {
    if genuine.is_empty() {
        return Err(TrainError::NoGenuinePairs);
    }
    let max_gen = genuine.iter().copied().fold(T::neg_infinity(), T::max);
    let min_gen = genuine.iter().copied().fold(T::infinity(), T::min);
    let threshold = th0 * (max_gen / min_gen.max(T::of(MIN_GEN_EPS))).abs();
    let cutoff = max_gen + threshold;
    let (discarded_impostors, kept_impostors): (Vec<usize>, Vec<usize>) =
        (0..impostor.len()).partition(|&i| impostor[i] > cutoff);
    Ok(Selection {
        max_gen,
        min_gen,
        threshold,
        kept_impostors,
        discarded_impostors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let s = select_pairs(&[1.0, 2.0], &[2.5, 10.0], 0.5).unwrap();
        assert_eq!(s.threshold, 1.0);
        assert_eq!(s.kept_impostors, vec![0]);
        assert_eq!(s.discarded_impostors, vec![1]);
        assert_eq!(s.discard_rate(), 0.5);
    }

    #[test]
    fn nothing_discarded_below_max_gen() {
        let s = select_pairs(&[0.5, 3.0], &[0.1, 2.9, 3.0], 0.2).unwrap();
        assert!(s.discarded_impostors.is_empty());
    }

    #[test]
    fn zero_min_gen_is_guarded() {
        let s = select_pairs(&[0.0f64, 2.0], &[5.0, 1e12], 0.5).unwrap();
        assert!(s.threshold.is_finite());
        assert_eq!(s.threshold, 0.5 * 2.0 / 1e-9);
        assert_eq!(s.kept_impostors, vec![0]);
        // all-zero genuine distances give a zero threshold
        let s = select_pairs(&[0.0, 0.0], &[0.0, 0.1], 0.5).unwrap();
        assert_eq!(s.threshold, 0.0);
        assert_eq!(s.kept_impostors, vec![0]);
    }

    #[test]
    fn infinite_th0_keeps_everything() {
        let s = select_pairs(&[1.0, 2.0], &[1e300, 3.0], f64::INFINITY).unwrap();
        assert_eq!(s.kept_impostors, vec![0, 1]);
    }

    #[test]
    fn needs_genuine_pairs() {
        assert!(matches!(
            select_pairs::<f64>(&[], &[1.0], 1.0),
            Err(TrainError::NoGenuinePairs)
        ));
    }
}
