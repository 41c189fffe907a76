//! GMM-UBM baseline: a diagonal-covariance universal background model
//! trained by EM, mean-only MAP adaptation per speaker, and average
//! log-likelihood-ratio scoring.

use std::io::Read as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

const MAGIC: &[u8; 6] = b"SVGMM1";
const CHUNK: usize = 1024;
/// Absolute lower bound on the variance floor, for constant dimensions.
const MIN_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("need at least {needed} frames, have {have}")]
    TooFewFrames { have: usize, needed: usize },
    #[error("component {0} lost all its frames after re-seeding")]
    DegenerateCluster(usize),
    #[error("no adaptation frames")]
    NoAdaptationData,
    #[error("no test frames")]
    EmptyTest,
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("not a GMM checkpoint")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint has trailing bytes")]
    Trailing,
    #[error("checkpoint parameters invalid: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UbmConfig {
    pub num_components: usize,
    pub max_iterations: usize,
    /// Stop once the per-frame log-likelihood gains less than this.
    pub tolerance: f64,
    pub kmeans_iterations: usize,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub floor_fraction: f64,
    pub seed: u64,
}

impl Default for UbmConfig {
    fn default() -> Self {
        Self {
            num_components: 64,
            max_iterations: 100,
            tolerance: 1e-5,
            kmeans_iterations: 10,
            floor_fraction: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub relevance_factor: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { relevance_factor: 16.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel<T> {
    pub weights: Array1<T>,
    /// K x D.
    pub means: Array2<T>,
    /// K x D diagonal variances.
    pub variances: Array2<T>,
    /// Per-dimension variance floor.
    pub floor: Array1<T>,
}

/// Sufficient statistics accumulated in the E-step.
struct Stats<T> {
    n: Array1<T>,
    sx: Array2<T>,
    sxx: Array2<T>,
    ll: f64,
}

impl<T: Scalar> Stats<T> {
    fn zeros(k: usize, d: usize) -> Self {
        Self {
            n: Array1::zeros(k),
            sx: Array2::zeros((k, d)),
            sxx: Array2::zeros((k, d)),
            ll: 0.0,
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.n += &other.n;
        self.sx += &other.sx;
        self.sxx += &other.sxx;
        self.ll += other.ll;
        self
    }
}

fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

impl<T: Scalar> GmmModel<T> {
    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Checks the simplex, floor and finiteness invariants.
    pub fn validate(&self) -> Result<(), GmmError> {
        let (k, d) = self.means.dim();
        if self.weights.len() != k || self.variances.dim() != (k, d) || self.floor.len() != d || k == 0 {
            return Err(GmmError::Invalid("inconsistent shapes".into()));
        }
        let sum: f64 = self.weights.iter().map(|w| w.to_f64_lossy()).sum();
        if (sum - 1.0).abs() > 1e-6 || self.weights.iter().any(|&w| w < T::zero()) {
            return Err(GmmError::Invalid(format!("weights sum to {sum}")));
        }
        let finite = |a: &Array2<T>| a.iter().all(|v| v.is_finite());
        if !self.weights.iter().all(|v| v.is_finite()) || !finite(&self.means) || !finite(&self.variances) {
            return Err(GmmError::Invalid("non-finite parameter".into()));
        }
        for row in self.variances.rows() {
            if row.iter().zip(&self.floor).any(|(&v, &f)| !(v > T::zero()) || v < f) {
                return Err(GmmError::Invalid("variance below floor".into()));
            }
        }
        Ok(())
    }

    /// Per-component constant: ln w_k - 0.5 * sum_d ln(2 pi var_kd).
    fn log_consts(&self) -> Array1<T> {
        let two_pi = T::of(2.0 * std::f64::consts::PI);
        Array1::from_shape_fn(self.num_components(), |k| {
            self.weights[k].ln() - T::of(0.5) * self.variances.row(k).iter().map(|&v| (two_pi * v).ln()).sum::<T>()
        })
    }

    fn joint_log(&self, consts: &Array1<T>, x: ArrayView1<T>, out: &mut [T]) {
        for (k, o) in out.iter_mut().enumerate() {
            let q = self
                .means
                .row(k)
                .iter()
                .zip(self.variances.row(k))
                .zip(x)
                .map(|((&m, &v), &xi)| (xi - m) * (xi - m) / v)
                .sum::<T>();
            *o = consts[k] - T::of(0.5) * q;
        }
    }

    /// Per-component log of `w_k N(x | k)` for every frame, N x K.
    pub fn component_log_densities(&self, frames: &Array2<T>) -> Array2<T> {
        let consts = self.log_consts();
        let mut out = Array2::zeros((frames.nrows(), self.num_components()));
        for (x, mut o) in frames.rows().into_iter().zip(out.rows_mut()) {
            self.joint_log(&consts, x, o.as_slice_mut().expect("contiguous"));
        }
        out
    }

    /// `log p(x_t)` per frame.
    pub fn frame_log_likelihoods(&self, frames: &Array2<T>) -> Array1<T> {
        self.component_log_densities(frames)
            .rows()
            .into_iter()
            .map(|r| log_sum_exp(r.as_slice().expect("contiguous")))
            .collect()
    }

    /// Mean per-frame log-likelihood.
    pub fn mean_log_likelihood(&self, frames: &Array2<T>) -> f64 {
        let ll = self.frame_log_likelihoods(frames);
        ll.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / ll.len().max(1) as f64
    }

    /// Component responsibilities, N x K; each row sums to one.
    pub fn posteriors(&self, frames: &Array2<T>) -> Array2<T> {
        let mut lp = self.component_log_densities(frames);
        for mut row in lp.rows_mut() {
            let norm = log_sum_exp(row.as_slice().expect("contiguous"));
            row.mapv_inplace(|v| (v - norm).exp());
        }
        lp
    }

    fn accumulate(&self, frames: &Array2<T>, second_order: bool) -> Stats<T> {
        let (k, d) = self.means.dim();
        let consts = self.log_consts();
        let starts: Vec<usize> = (0..frames.nrows()).step_by(CHUNK).collect();
        let partial: Vec<Stats<T>> = starts
            .into_par_iter()
            .map(|s0| {
                let chunk = frames.slice(ndarray::s![s0..(s0 + CHUNK).min(frames.nrows()), ..]);
                let mut s = Stats::zeros(k, d);
                let mut lp = vec![T::zero(); k];
                for x in chunk.rows() {
                    self.joint_log(&consts, x, &mut lp);
                    let norm = log_sum_exp(&lp);
                    s.ll += norm.to_f64_lossy();
                    for (c, &l) in lp.iter().enumerate() {
                        let g = (l - norm).exp();
                        if g == T::zero() {
                            continue;
                        }
                        s.n[c] += g;
                        for j in 0..d {
                            let v = x[j];
                            s.sx[[c, j]] += g * v;
                            if second_order {
                                s.sxx[[c, j]] += g * v * v;
                            }
                        }
                    }
                }
                s
            })
            .collect();
        partial.into_iter().fold(Stats::zeros(k, d), Stats::merge)
    }

    fn check_dim(&self, frames: &Array2<T>) -> Result<(), GmmError> {
        if frames.ncols() != self.dim() {
            return Err(GmmError::ShapeMismatch {
                expected: format!("{} columns", self.dim()),
                found: format!("{} columns", frames.ncols()),
            });
        }
        Ok(())
    }
}

/// Per-dimension mean and population variance.
fn moments<T: Scalar>(frames: &Array2<T>) -> (Array1<T>, Array1<T>) {
    let mean = frames.mean_axis(Axis(0)).expect("nonempty");
    let var = frames.var_axis(Axis(0), T::zero());
    (mean, var)
}

fn sq_dist<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations. Returns centroids and
/// the assignment of every frame.
fn kmeans<T: Scalar, R: Rng + ?Sized>(
    frames: &Array2<T>,
    k: usize,
    iterations: usize,
    rng: &mut R,
) -> (Array2<T>, Vec<usize>) {
    let n = frames.nrows();
    let mut centers = Array2::zeros((k, frames.ncols()));
    centers.row_mut(0).assign(&frames.row(rng.gen_range(0..n)));
    let mut best: Vec<f64> = frames
        .rows()
        .into_iter()
        .map(|x| sq_dist(x, centers.row(0)).to_f64_lossy())
        .collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if u < b {
                    idx = i;
                    break;
                }
                u -= b;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).assign(&frames.row(pick));
        for (b, x) in best.iter_mut().zip(frames.rows()) {
            *b = b.min(sq_dist(x, centers.row(c)).to_f64_lossy());
        }
    }
    let assign = |centers: &Array2<T>| -> Vec<usize> {
        (0..frames.nrows())
            .into_par_iter()
            .map(|i| {
                let x = frames.row(i);
                (0..k)
                    .map(|c| (c, sq_dist(x, centers.row(c))))
                    .fold((0, T::infinity()), |a, b| if b.1 < a.1 { b } else { a })
                    .0
            })
            .collect()
    };
    let mut labels = assign(&centers);
    for _ in 0..iterations {
        let mut sums = Array2::<T>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (x, &l) in frames.rows().into_iter().zip(&labels) {
            let mut row = sums.row_mut(l);
            row += &x;
            counts[l] += 1;
        }
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / T::of_usize(n)));
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    (centers, labels)
}

/// Result of UBM training.
#[derive(Debug, Clone)]
pub struct UbmFit<T> {
    pub model: GmmModel<T>,
    /// Mean per-frame log-likelihood after initialization and after each
    /// EM update.
    pub log_likelihoods: Vec<f64>,
    /// Whether a degenerate component forced one re-seed.
    pub reseeded: bool,
}

fn initial_model<T: Scalar>(
    frames: &Array2<T>,
    centers: Array2<T>,
    labels: &[usize],
    floor: &Array1<T>,
) -> GmmModel<T> {
    let (k, d) = centers.dim();
    let n = frames.nrows();
    let mut counts = vec![0usize; k];
    let mut sxx = Array2::<T>::zeros((k, d));
    for (x, &l) in frames.rows().into_iter().zip(labels) {
        counts[l] += 1;
        for j in 0..d {
            let dv = x[j] - centers[[l, j]];
            sxx[[l, j]] += dv * dv;
        }
    }
    let (_, global_var) = moments(frames);
    let mut variances = Array2::zeros((k, d));
    for c in 0..k {
        for j in 0..d {
            let v = if counts[c] > 1 {
                sxx[[c, j]] / T::of_usize(counts[c])
            } else {
                global_var[j]
            };
            variances[[c, j]] = v.max(floor[j]);
        }
    }
    // empty k-means clusters still get a small share so EM can use them
    let weights = Array1::from_shape_fn(k, |c| {
        T::of_usize(counts[c].max(1)) / T::of_usize(n + counts.iter().filter(|&&c| c == 0).count())
    });
    GmmModel {
        weights,
        means: centers,
        variances,
        floor: floor.clone(),
    }
}

fn m_step<T: Scalar>(stats: &Stats<T>, n: usize, floor: &Array1<T>) -> Option<GmmModel<T>> {
    let (k, d) = stats.sx.dim();
    let tiny = T::of(1e-10) * T::of_usize(n);
    if stats.n.iter().any(|&nk| !(nk > tiny)) {
        return None;
    }
    let weights = stats.n.mapv(|nk| nk / T::of_usize(n));
    let mut means = Array2::zeros((k, d));
    let mut variances = Array2::zeros((k, d));
    for c in 0..k {
        let nk = stats.n[c];
        for j in 0..d {
            let m = stats.sx[[c, j]] / nk;
            means[[c, j]] = m;
            variances[[c, j]] = (stats.sxx[[c, j]] / nk - m * m).max(floor[j]);
        }
    }
    Some(GmmModel {
        weights,
        means,
        variances,
        floor: floor.clone(),
    })
}

/// Trains a UBM on pooled frames (N x D). Requires `N >= 10 K`.
pub fn train_ubm<T: Scalar>(frames: &Array2<T>, cfg: &UbmConfig) -> Result<UbmFit<T>, GmmError> {
    let k = cfg.num_components;
    if k == 0 || !(cfg.tolerance >= 0.0) || !(cfg.floor_fraction > 0.0) {
        return Err(GmmError::InvalidConfig(
            "num_components must be positive, tolerance non-negative and floor_fraction positive".into(),
        ));
    }
    let n = frames.nrows();
    if n < 10 * k || frames.ncols() == 0 {
        return Err(GmmError::TooFewFrames {
            have: n,
            needed: 10 * k,
        });
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(GmmError::InvalidConfig("non-finite frame value".into()));
    }
    let (_, global_var) = moments(frames);
    let floor = global_var.mapv(|v| (v * T::of(cfg.floor_fraction)).max(T::of(MIN_FLOOR)));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reseeded = false;
    'restart: loop {
        let (centers, labels) = kmeans(frames, k, cfg.kmeans_iterations, &mut rng);
        let mut model = initial_model(frames, centers, &labels, &floor);
        let mut history = Vec::new();
        let mut stats = model.accumulate(frames, true);
        history.push(stats.ll / n as f64);
        for _ in 0..cfg.max_iterations {
            let Some(next) = m_step(&stats, n, &floor) else {
                if reseeded {
                    let c = stats
                        .n
                        .iter()
                        .position(|&v| !(v > T::of(1e-10) * T::of_usize(n)))
                        .unwrap_or(0);
                    return Err(GmmError::DegenerateCluster(c));
                }
                reseeded = true;
                continue 'restart;
            };
            model = next;
            stats = model.accumulate(frames, true);
            let ll = stats.ll / n as f64;
            let gain = ll - history.last().copied().unwrap_or(f64::NEG_INFINITY);
            history.push(ll);
            if gain < cfg.tolerance {
                break;
            }
        }
        return Ok(UbmFit {
            model,
            log_likelihoods: history,
            reseeded,
        });
    }
}

/// Mean-only MAP adaptation of `ubm` towards a speaker's frames.
pub fn map_adapt<T: Scalar>(ubm: &GmmModel<T>, frames: &Array2<T>, cfg: &MapConfig) -> Result<GmmModel<T>, GmmError> {
    if frames.nrows() == 0 {
        return Err(GmmError::NoAdaptationData);
    }
    if !(cfg.relevance_factor >= 0.0) {
        return Err(GmmError::InvalidConfig("relevance_factor must be non-negative".into()));
    }
    ubm.check_dim(frames)?;
    let stats = ubm.accumulate(frames, false);
    let r = T::of(cfg.relevance_factor);
    let mut adapted = ubm.clone();
    for c in 0..ubm.num_components() {
        let nk = stats.n[c];
        if !(nk > T::zero()) {
            continue;
        }
        let alpha = nk / (nk + r);
        for j in 0..ubm.dim() {
            let ex = stats.sx[[c, j]] / nk;
            adapted.means[[c, j]] = alpha * ex + (T::one() - alpha) * ubm.means[[c, j]];
        }
    }
    Ok(adapted)
}

/// `(1/T) sum_t [log p(x_t | speaker) - log p(x_t | ubm)]`.
pub fn llr_score<T: Scalar>(ubm: &GmmModel<T>, speaker: &GmmModel<T>, frames: &Array2<T>) -> Result<T, GmmError> {
    if frames.nrows() == 0 {
        return Err(GmmError::EmptyTest);
    }
    if ubm.means.dim() != speaker.means.dim() {
        return Err(GmmError::ShapeMismatch {
            expected: format!("{:?}", ubm.means.dim()),
            found: format!("{:?}", speaker.means.dim()),
        });
    }
    ubm.check_dim(frames)?;
    let s = speaker.frame_log_likelihoods(frames);
    let u = ubm.frame_log_likelihoods(frames);
    Ok((&s - &u).sum() / T::of_usize(frames.nrows()))
}

/// Draws frames from the mixture, for synthetic checks.
pub fn sample<T: Scalar, R: Rng + ?Sized>(model: &GmmModel<T>, n: usize, rng: &mut R) -> Array2<T> {
    use rand_distr::{Distribution, StandardNormal};
    let d = model.dim();
    let mut out = Array2::zeros((n, d));
    for mut row in out.rows_mut() {
        let mut u = rng.gen::<f64>();
        let mut c = model.num_components() - 1;
        for (k, w) in model.weights.iter().enumerate() {
            let w = w.to_f64_lossy();
            if u < w {
                c = k;
                break;
            }
            u -= w;
        }
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            row[j] = model.means[[c, j]] + model.variances[[c, j]].sqrt() * T::of(z);
        }
    }
    out
}

/// Serializes as magic, K, D, floors, weights, means, variances (f64 LE),
/// followed by the 32-byte feature configuration digest.
pub fn encode<T: Scalar>(model: &GmmModel<T>, feature_digest: &str) -> Result<Vec<u8>, GmmError> {
    let digest = hex::decode(feature_digest)
        .ok()
        .filter(|d| d.len() == 32)
        .ok_or_else(|| GmmError::Invalid(format!("bad feature digest {feature_digest:?}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(model.num_components() as u32).to_le_bytes());
    out.extend_from_slice(&(model.dim() as u32).to_le_bytes());
    for v in model
        .floor
        .iter()
        .chain(model.weights.iter())
        .chain(model.means.iter())
        .chain(model.variances.iter())
    {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Inverse of [`encode`]; returns the model and its feature digest.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(GmmModel<T>, String), GmmError> {
    let mut r = bytes;
    let mut take = |n: usize| -> Result<&[u8], GmmError> {
        if r.len() < n {
            return Err(GmmError::Truncated);
        }
        let (head, rest) = r.split_at(n);
        r = rest;
        Ok(head)
    };
    if take(MAGIC.len()).map_err(|_| GmmError::BadMagic)? != MAGIC {
        return Err(GmmError::BadMagic);
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let k = u32_at(take(4)?);
    let d = u32_at(take(4)?);
    let count = k
        .checked_mul(d)
        .and_then(|kd| kd.checked_mul(2))
        .and_then(|v| v.checked_add(d + k))
        .ok_or(GmmError::Truncated)?;
    let raw = take(count.checked_mul(8).ok_or(GmmError::Truncated)?)?;
    let vals: Vec<T> = raw
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    let digest = hex::encode(take(32)?);
    if !r.is_empty() {
        return Err(GmmError::Trailing);
    }
    let floor = Array1::from(vals[..d].to_vec());
    let weights = Array1::from(vals[d..d + k].to_vec());
    let means = Array2::from_shape_vec((k, d), vals[d + k..d + k + k * d].to_vec()).expect("sized");
    let variances = Array2::from_shape_vec((k, d), vals[d + k + k * d..].to_vec()).expect("sized");
    let model = GmmModel {
        weights,
        means,
        variances,
        floor,
    };
    model.validate()?;
    Ok((model, digest))
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, model: &GmmModel<T>, feature_digest: &str) -> Result<(), GmmError> {
    let path = path.as_ref();
    let bytes = encode(model, feature_digest)?;
    std::fs::write(path, bytes).map_err(|source| GmmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(GmmModel<T>, String), GmmError> {
    let path = path.as_ref();
    let io = |source| GmmError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn two_clusters(n: usize, seed: u64) -> Array2<f64> {
        // 30% around (-5, -5), 70% around (5, 5), unit variance
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((n, 2), |(i, _)| {
            let c = if i < n * 3 / 10 { -5.0 } else { 5.0 };
            c + z.sample(&mut rng)
        })
    }

    fn cfg(k: usize) -> UbmConfig {
        UbmConfig {
            num_components: k,
            ..UbmConfig::default()
        }
    }

    #[test]
    fn single_component_is_sample_moments() {
        let x = two_clusters(500, 1);
        let fit = train_ubm(&x, &cfg(1)).unwrap();
        let n = x.nrows() as f64;
        for j in 0..2 {
            let col = x.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!((fit.model.means[[0, j]] - mean).abs() < 1e-9);
            assert!((fit.model.variances[[0, j]] - var).abs() < 1e-9);
        }
        assert_eq!(fit.model.weights[0], 1.0);
    }

    #[test]
    fn recovers_two_clusters() {
        let x = two_clusters(2000, 2);
        let fit = train_ubm(&x, &cfg(2)).unwrap();
        let m = &fit.model;
        let (lo, hi) = if m.means[[0, 0]] < m.means[[1, 0]] {
            (0, 1)
        } else {
            (1, 0)
        };
        for j in 0..2 {
            assert!((m.means[[lo, j]] + 5.0).abs() < 0.1, "{:?}", m.means);
            assert!((m.means[[hi, j]] - 5.0).abs() < 0.1, "{:?}", m.means);
        }
        assert!((m.weights[lo] - 0.3).abs() < 0.05);
        assert!((m.weights[hi] - 0.7).abs() < 0.05);
    }

    #[test]
    fn em_is_monotone() {
        for seed in 0..3 {
            let x = two_clusters(1500, 10 + seed);
            let fit = train_ubm(&x, &UbmConfig { seed, ..cfg(5) }).unwrap();
            for w in fit.log_likelihoods.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "{:?}", fit.log_likelihoods);
            }
            fit.model.validate().unwrap();
        }
    }

    #[test]
    fn too_few_frames() {
        let x = two_clusters(79, 0);
        assert!(matches!(
            train_ubm(&x, &cfg(8)),
            Err(GmmError::TooFewFrames { have: 79, needed: 80 })
        ));
    }

    #[test]
    fn posteriors_sum_to_one() {
        let x = two_clusters(400, 3);
        let fit = train_ubm(&x, &cfg(3)).unwrap();
        for row in fit.model.posteriors(&x).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn map_limits() {
        let x = two_clusters(600, 4);
        let ubm = train_ubm(&x, &cfg(2)).unwrap().model;
        let spk = x.slice(ndarray::s![..50, ..]).to_owned();
        let same = map_adapt(
            &ubm,
            &spk,
            &MapConfig {
                relevance_factor: f64::INFINITY,
            },
        )
        .unwrap();
        assert!(same.means.iter().zip(&ubm.means).all(|(a, b)| (a - b).abs() <= 1e-9));
        // r = 0: each occupied component moves to its posterior mean
        let free = map_adapt(&ubm, &spk, &MapConfig { relevance_factor: 0.0 }).unwrap();
        let post = ubm.posteriors(&spk);
        for c in 0..2 {
            let nk: f64 = post.column(c).sum();
            if nk > 1e-6 {
                let ex = post.column(c).dot(&spk.column(0)) / nk;
                assert!((free.means[[c, 0]] - ex).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn map_hand_computed() {
        let ubm = GmmModel {
            weights: Array1::from(vec![1.0]),
            means: Array2::from_elem((1, 1), 0.0),
            variances: Array2::from_elem((1, 1), 1.0),
            floor: Array1::from(vec![1e-3]),
        };
        let x = Array2::from_shape_vec((2, 1), vec![1.0, 3.0]).unwrap();
        let out = map_adapt(&ubm, &x, &MapConfig { relevance_factor: 16.0 }).unwrap();
        // n = 2, E[x] = 2, alpha = 2/18
        assert!((out.means[[0, 0]] - 2.0 * 2.0 / 18.0f64).abs() < 1e-12);
        assert_eq!(out.variances, ubm.variances);
    }

    #[test]
    fn empty_component_unchanged() {
        let ubm = GmmModel {
            weights: Array1::from(vec![0.5, 0.5]),
            means: Array2::from_shape_vec((2, 1), vec![0.0, 1000.0]).unwrap(),
            variances: Array2::from_elem((2, 1), 1.0),
            floor: Array1::from(vec![1e-3]),
        };
        let x = Array2::from_shape_vec((2, 1), vec![0.5, -0.5]).unwrap();
        let out = map_adapt(&ubm, &x, &MapConfig::default()).unwrap();
        assert_eq!(out.means[[1, 0]], 1000.0);
        assert!(map_adapt(&ubm, &Array2::zeros((0, 1)), &MapConfig::default()).is_err());
    }

    #[test]
    fn llr_closed_form() {
        let g = |m: f64, v: f64| GmmModel {
            weights: Array1::from(vec![1.0]),
            means: Array2::from_elem((1, 1), m),
            variances: Array2::from_elem((1, 1), v),
            floor: Array1::from(vec![1e-3]),
        };
        let ubm = g(0.0, 2.0);
        let spk = g(1.0, 2.0);
        let x = Array2::from_elem((1, 1), 0.7);
        let expected = -((0.7f64 - 1.0).powi(2)) / 4.0 + 0.7f64.powi(2) / 4.0;
        assert!((llr_score(&ubm, &spk, &x).unwrap() - expected).abs() < 1e-12);
        assert_eq!(llr_score(&ubm, &ubm, &x).unwrap(), 0.0);
        assert!(matches!(
            llr_score(&ubm, &spk, &Array2::zeros((0, 1))),
            Err(GmmError::EmptyTest)
        ));
    }

    #[test]
    fn llr_order_invariant_and_discriminative() {
        let x = two_clusters(1000, 5);
        let ubm = train_ubm(&x, &cfg(4)).unwrap().model;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Normal::new(0.0, 1.0).unwrap();
        let a = Array2::from_shape_fn((200, 2), |(_, j)| if j == 0 { 4.0 } else { 6.0 } + z.sample(&mut rng));
        let spk_a = map_adapt(&ubm, &a, &MapConfig::default()).unwrap();
        let test_a = sample(&spk_a, 100, &mut rng);
        let test_b = Array2::from_shape_fn((100, 2), |(_, j)| if j == 0 { 6.0 } else { 4.0 } + z.sample(&mut rng));
        let sa = llr_score(&ubm, &spk_a, &test_a).unwrap();
        assert!(sa > llr_score(&ubm, &spk_a, &test_b).unwrap());
        let mut rev = test_a.clone();
        rev.invert_axis(Axis(0));
        assert!((llr_score(&ubm, &spk_a, &rev).unwrap() - sa).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let x = two_clusters(300, 6);
        let m = train_ubm(&x, &cfg(3)).unwrap().model;
        let digest = "ab".repeat(32);
        let bytes = encode(&m, &digest).unwrap();
        let (back, d) = decode::<f64>(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(d, digest);
        assert!(matches!(decode::<f64>(b"NOTGMM"), Err(GmmError::BadMagic)));
        assert!(matches!(
            decode::<f64>(&bytes[..bytes.len() - 1]),
            Err(GmmError::Truncated)
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode::<f64>(&long), Err(GmmError::Trailing)));
    }
}
