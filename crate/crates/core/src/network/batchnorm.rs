//! Per-coefficient batch normalization of the input features, pooled over
//! the batch and time axes.

use ndarray::{Array1, Array2, Axis, Zip};

use super::{Mode, NetworkError};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    /// Weight kept on the old running statistics at each update.
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Array1<T>,
    /// Biased (population) variance.
    pub var: Array1<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache<T> {
    xhat: Vec<Array2<T>>,
    inv_std: Array1<T>,
    mode: Mode,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: 0.99,
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Mean and variance per channel over every row of every step.
    pub fn batch_stats(xs: &[Array2<T>]) -> BatchStats<T> {
        let dim = xs[0].ncols();
        let count = T::of_usize(xs.iter().map(|x| x.nrows()).sum());
        let mut mean = Array1::<T>::zeros(dim);
        for x in xs {
            mean += &x.sum_axis(Axis(0));
        }
        mean.mapv_inplace(|v| v / count);
        let mut var = Array1::<T>::zeros(dim);
        for x in xs {
            var += &(x - &mean).mapv(|v| v * v).sum_axis(Axis(0));
        }
        var.mapv_inplace(|v| v / count);
        BatchStats { mean, var }
    }

    /// Time-major input: one `batch x dim` matrix per step.
    #[allow(clippy::type_complexity)]
    pub(crate) fn forward(
        &self,
        xs: &[Array2<T>],
        mode: Mode,
    ) -> Result<(Vec<Array2<T>>, NormCache<T>, Option<BatchStats<T>>), NetworkError> {
        let batch = xs[0].nrows();
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if batch < 2 {
                    return Err(NetworkError::BatchTooSmall(batch));
                }
                let stats = Self::batch_stats(xs);
                (stats.mean.clone(), stats.var.clone(), Some(stats))
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone(), None),
        };
        let eps = T::of(self.eps);
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat: Vec<Array2<T>> = xs.iter().map(|x| (x - &mean) * &inv_std).collect();
        let ys = xhat.iter().map(|xh| xh * &self.gamma + &self.beta).collect();
        Ok((ys, NormCache { xhat, inv_std, mode }, stats))
    }

    /// Returns (d gamma, d beta, d input).
    pub(crate) fn backward(&self, cache: &NormCache<T>, dys: &[Array2<T>]) -> (Array1<T>, Array1<T>, Vec<Array2<T>>) {
        let dim = self.dim();
        let mut dgamma = Array1::<T>::zeros(dim);
        let mut dbeta = Array1::<T>::zeros(dim);
        for (dy, xh) in dys.iter().zip(&cache.xhat) {
            dgamma += &(dy * xh).sum_axis(Axis(0));
            dbeta += &dy.sum_axis(Axis(0));
        }
        let dxs = match cache.mode {
            Mode::Eval => dys.iter().map(|dy| dy * &self.gamma * &cache.inv_std).collect(),
            Mode::Train => {
                // dx = inv_std / m * (m dxhat - sum dxhat - xhat sum(dxhat xhat)),
                // with dxhat = dy * gamma, sum dxhat = gamma dbeta and
                // sum(dxhat xhat) = gamma dgamma.
                let m = T::of_usize(dys.iter().map(|d| d.nrows()).sum());
                let sum_dxhat = &self.gamma * &dbeta;
                let sum_dxhat_xhat = &self.gamma * &dgamma;
                dys.iter()
                    .zip(&cache.xhat)
                    .map(|(dy, xh)| {
                        let mut dx = Array2::zeros(dy.raw_dim());
                        Zip::indexed(&mut dx).and(dy).and(xh).for_each(|(_, c), d, &dy, &xh| {
                            let dxhat = dy * self.gamma[c];
                            *d = cache.inv_std[c] / m * (m * dxhat - sum_dxhat[c] - xh * sum_dxhat_xhat[c]);
                        });
                        dx
                    })
                    .collect()
            }
        };
        (dgamma, dbeta, dxs)
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let keep = T::of(self.momentum);
        let take = T::one() - keep;
        Zip::from(&mut self.running_mean)
            .and(&stats.mean)
            .for_each(|r, &b| *r = keep * *r + take * b);
        Zip::from(&mut self.running_var)
            .and(&stats.var)
            .for_each(|r, &b| *r = keep * *r + take * b);
    }

    /// Normalizes time-major input; exposed for the training wrapper and tests.
    pub fn apply(&self, xs: &[Array2<T>], mode: Mode) -> Result<(Vec<Array2<T>>, Option<BatchStats<T>>), NetworkError> {
        let (ys, _, stats) = self.forward(xs, mode)?;
        Ok((ys, stats))
    }

    /// Gradient of `sum(dys * forward(xs))` with respect to gamma, beta and
    /// the input.
    #[allow(clippy::type_complexity)]
    pub fn input_gradient(
        &self,
        xs: &[Array2<T>],
        dys: &[Array2<T>],
        mode: Mode,
    ) -> Result<(Array1<T>, Array1<T>, Vec<Array2<T>>), NetworkError> {
        let (_, cache, _) = self.forward(xs, mode)?;
        Ok(self.backward(&cache, dys))
    }
}
