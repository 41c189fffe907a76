//! Two-phase training: softmax pretraining over random crops, then siamese
//! fine-tuning with the contrastive loss on a filtered pair pool.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{random_crop, UtteranceSet};
use crate::features::{FeatureError, FeatureWindow};
use crate::network::{
    contrastive_loss_grad, softmax_loss_grad, BatchNorm, ContrastiveConfig, LstmModel, Mode, NetworkError, TrialPair,
};
use crate::Scalar;

mod optim;
pub mod pairs;

pub use optim::Sgd;
pub use pairs::{select_pairs, PairPool, PairRef, Selection};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("pair pool has no genuine pairs")]
    NoGenuinePairs,
    #[error("selection discarded every impostor, including ones inside the margin (max_gen {max_gen}, threshold {threshold})")]
    NoPairsSurvive { max_gen: f64, threshold: f64 },
    #[error("no training data: {0}")]
    NoData(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Windows per step in pretraining, pairs per step in fine-tuning.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub crop_duration_s: f64,
    /// Random crops drawn from each utterance per epoch.
    pub crops_per_utterance: usize,
    pub pair_selection: bool,
    pub th0: f64,
    pub batchnorm: bool,
    /// Cap on genuine pairs per epoch; sampled without replacement above it.
    pub max_genuine_pairs: usize,
    pub max_grad_norm: Option<f64>,
    pub contrastive: ContrastiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            crop_duration_s: 1.0,
            crops_per_utterance: 4,
            pair_selection: true,
            th0: 0.5,
            batchnorm: true,
            max_genuine_pairs: 512,
            max_grad_norm: Some(5.0),
            contrastive: ContrastiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, finetune: bool) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 || (finetune && self.batch_size < 2) {
            return bad("batch_size must be >= 2 for fine-tuning and >= 1 otherwise");
        }
        if self.crop_duration_s <= 0.0 {
            return bad("crop_duration_s must be positive");
        }
        if self.crops_per_utterance == 0 {
            return bad("crops_per_utterance must be positive");
        }
        if self.pair_selection && !(self.th0 > 0.0) {
            return bad("th0 must be positive when pair selection is on");
        }
        if !(self.contrastive.margin > 0.0) || !(self.contrastive.lambda >= 0.0) {
            return bad("margin must be positive and lambda non-negative");
        }
        Ok(())
    }

    fn optimizer<T: Scalar>(&self) -> Sgd<T> {
        Sgd::new(
            T::of(self.learning_rate),
            T::of(self.momentum),
            self.max_grad_norm.map(T::of),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub genuine_mean_distance: Option<f64>,
    pub impostor_mean_distance: Option<f64>,
    pub discard_rate: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,phase,loss,genuine_mean_D,impostor_mean_D,discard_rate";

pub fn log_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            l.epoch,
            l.phase,
            l.loss,
            opt(l.genuine_mean_distance),
            opt(l.impostor_mean_distance),
            opt(l.discard_rate)
        );
    }
    out
}

/// Normalizes a batch of windows with the model's input batch norm. In
/// training mode the running statistics are updated afterwards.
pub fn batch_normalize<T: Scalar>(
    windows: &[FeatureWindow<T>],
    norm: &mut BatchNorm<T>,
    mode: Mode,
) -> Result<Vec<FeatureWindow<T>>, NetworkError> {
    let first = windows.first().ok_or(NetworkError::EmptyBatch)?;
    let (steps, dim) = first.values.dim();
    let time_major: Vec<Array2<T>> = (0..steps)
        .map(|t| {
            let mut m = Array2::zeros((windows.len(), dim));
            for (b, w) in windows.iter().enumerate() {
                m.row_mut(b).assign(&w.values.row(t));
            }
            m
        })
        .collect();
    let (ys, stats) = norm.apply(&time_major, mode)?;
    if let Some(stats) = stats {
        norm.update_running(&stats);
    }
    Ok(windows
        .iter()
        .enumerate()
        .map(|(b, w)| FeatureWindow {
            values: Array2::from_shape_fn((steps, dim), |(t, c)| ys[t][[b, c]]),
            duration_s: w.duration_s,
        })
        .collect())
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Softmax pretraining. Attaches a head sized to the speaker count (and an
/// input batch norm when enabled) if the model lacks them.
pub fn pretrain<T: Scalar>(
    model: &mut LstmModel<T>,
    data: &UtteranceSet<T>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate(false)?;
    if data.is_empty() {
        return Err(TrainError::NoData("empty development set".into()));
    }
    let speakers = data.speakers();
    let labels: Vec<usize> = data
        .utterances
        .iter()
        .map(|u| speakers.iter().position(|s| s == &u.speaker).expect("listed"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if model.head().map(|h| h.num_speakers()) != Some(speakers.len()) {
        model.init_head(speakers.len(), &mut rng);
    }
    if cfg.batchnorm && model.input_norm().is_none() {
        model.set_input_norm(Some(BatchNorm::new(model.config().input_dim)))?;
    }
    let frames = data.frames_for(cfg.crop_duration_s);
    let mut opt = cfg.optimizer::<T>();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len())
            .flat_map(|i| std::iter::repeat_n(i, cfg.crops_per_utterance))
            .collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in batches(&order, cfg.batch_size, model.input_norm().is_some()) {
            let windows = batch
                .iter()
                .map(|&i| {
                    random_crop(
                        &data.utterances[i],
                        cfg.crop_duration_s,
                        data.sample_rate,
                        frames,
                        &mut rng,
                    )
                    .map(|(_, w)| w)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&FeatureWindow<T>> = windows.iter().collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let out = softmax_loss_grad(model, &refs, &ys, Mode::Train)?;
            total += out.loss.to_f64_lossy() * batch.len() as f64;
            count += batch.len();
            apply_step(model, &mut opt, &out.grads, out.norm_stats.as_ref());
        }
        logs.push(EpochLog {
            epoch,
            phase: Phase::Pretrain,
            loss: if count > 0 { total / count as f64 } else { f64::NAN },
            genuine_mean_distance: None,
            impostor_mean_distance: None,
            discard_rate: None,
        });
    }
    Ok(logs)
}

fn apply_step<T: Scalar>(
    model: &mut LstmModel<T>,
    opt: &mut Sgd<T>,
    grads: &crate::network::Gradients<T>,
    stats: Option<&crate::network::BatchStats<T>>,
) {
    opt.step(model, grads);
    if let (Some(stats), Some(bn)) = (stats, model.input_norm_mut()) {
        bn.update_running(stats);
    }
}

/// Splits into batches; with batch norm a trailing singleton is folded into
/// the previous batch.
fn batches<I: Copy>(items: &[I], size: usize, need_pairs: bool) -> Vec<Vec<I>> {
    let mut out: Vec<Vec<I>> = items.chunks(size).map(|c| c.to_vec()).collect();
    if need_pairs && out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out.retain(|b| !(need_pairs && b.len() < 2));
    out
}

/// Draws the epoch's crops and candidate pairs: every same-speaker pair of
/// crops from distinct utterances (capped at `max_genuine_pairs`) plus as
/// many uniformly drawn cross-speaker pairs.
pub fn sample_pool<T: Scalar, R: Rng + ?Sized>(
    data: &UtteranceSet<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Vec<FeatureWindow<T>>, Vec<PairRef>, Vec<PairRef>), TrainError> {
    let frames = data.frames_for(cfg.crop_duration_s);
    let mut crops = Vec::new();
    let mut owner = Vec::new();
    for (i, u) in data.utterances.iter().enumerate() {
        for _ in 0..cfg.crops_per_utterance {
            crops.push(random_crop(u, cfg.crop_duration_s, data.sample_rate, frames, rng)?.1);
            owner.push(i);
        }
    }
    let speaker = |c: usize| &data.utterances[owner[c]].speaker;
    let mut genuine = Vec::new();
    for a in 0..crops.len() {
        for b in a + 1..crops.len() {
            if owner[a] != owner[b] && speaker(a) == speaker(b) {
                genuine.push(PairRef { first: a, second: b });
            }
        }
    }
    if genuine.is_empty() {
        return Err(TrainError::NoGenuinePairs);
    }
    if genuine.len() > cfg.max_genuine_pairs {
        genuine = genuine.choose_multiple(rng, cfg.max_genuine_pairs).copied().collect();
    }
    let mut impostor = Vec::with_capacity(genuine.len());
    if data.speakers().len() < 2 {
        return Err(TrainError::NoData("fine-tuning needs at least two speakers".into()));
    }
    while impostor.len() < genuine.len() {
        let a = rng.gen_range(0..crops.len());
        let b = rng.gen_range(0..crops.len());
        if speaker(a) != speaker(b) {
            impostor.push(PairRef { first: a, second: b });
        }
    }
    Ok((crops, genuine, impostor))
}

/// Siamese fine-tuning with the contrastive loss. The softmax head is
/// dropped first.
pub fn finetune<T: Scalar>(
    model: &mut LstmModel<T>,
    data: &UtteranceSet<T>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate(true)?;
    if data.is_empty() {
        return Err(TrainError::NoData("empty development set".into()));
    }
    model.set_head(None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f17e);
    let mut opt = cfg.optimizer::<T>();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (crops, genuine, impostor) = sample_pool(data, cfg, &mut rng)?;
        let pool = PairPool::evaluate(model, &crops, genuine, impostor)?;
        let (kept, discard_rate) = if cfg.pair_selection {
            let sel = select_pairs(&pool.genuine_distances, &pool.impostor_distances, T::of(cfg.th0))?;
            // only an error when the filter dropped impostors that still carried loss
            let margin = T::of(cfg.contrastive.margin);
            if sel.kept_impostors.is_empty()
                && sel
                    .discarded_impostors
                    .iter()
                    .any(|&i| pool.impostor_distances[i] < margin)
            {
                return Err(TrainError::NoPairsSurvive {
                    max_gen: sel.max_gen.to_f64_lossy(),
                    threshold: sel.threshold.to_f64_lossy(),
                });
            }
            let rate = sel.discard_rate();
            (sel.kept_impostors, rate)
        } else {
            ((0..pool.impostor.len()).collect(), 0.0)
        };
        let mut pairs: Vec<(PairRef, bool)> = pool.genuine.iter().map(|&p| (p, true)).collect();
        pairs.extend(kept.iter().map(|&i| (pool.impostor[i], false)));
        pairs.shuffle(&mut rng);

        let mut total = 0.0;
        let mut count = 0usize;
        for batch in pairs.chunks(cfg.batch_size) {
            let trial: Vec<TrialPair<T>> = batch
                .iter()
                .map(|&(p, genuine)| TrialPair {
                    first: crops[p.first].clone(),
                    second: crops[p.second].clone(),
                    genuine,
                })
                .collect();
            let out = contrastive_loss_grad(model, &trial, &cfg.contrastive, Mode::Train)?;
            total += out.loss.to_f64_lossy() * batch.len() as f64;
            count += batch.len();
            apply_step(model, &mut opt, &out.grads, out.norm_stats.as_ref());
        }
        let to_f64 = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>();
        logs.push(EpochLog {
            epoch,
            phase: Phase::Finetune,
            loss: if count > 0 { total / count as f64 } else { f64::NAN },
            genuine_mean_distance: mean(&to_f64(&pool.genuine_distances)),
            impostor_mean_distance: mean(&to_f64(&pool.impostor_distances)),
            discard_rate: Some(discard_rate),
        });
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batching_folds_singletons() {
        let items: Vec<usize> = (0..9).collect();
        let b = batches(&items, 4, true);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&items, 4, false);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 4, 1]);
        assert!(batches(&[1usize], 4, true).is_empty());
    }

    #[test]
    fn csv_layout() {
        let logs = vec![
            EpochLog {
                epoch: 1,
                phase: Phase::Pretrain,
                loss: 1.5,
                genuine_mean_distance: None,
                impostor_mean_distance: None,
                discard_rate: None,
            },
            EpochLog {
                epoch: 1,
                phase: Phase::Finetune,
                loss: 0.25,
                genuine_mean_distance: Some(0.5),
                impostor_mean_distance: Some(2.0),
                discard_rate: Some(0.1),
            },
        ];
        assert_eq!(
            log_csv(&logs),
            "epoch,phase,loss,genuine_mean_D,impostor_mean_D,discard_rate\n1,pretrain,1.5,,,\n1,finetune,0.25,0.5,2,0.1\n"
        );
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate(true).is_ok());
        assert!(TrainConfig { batch_size: 1, ..ok }.validate(true).is_err());
        assert!(TrainConfig { batch_size: 1, ..ok }.validate(false).is_ok());
        assert!(TrainConfig { th0: 0.0, ..ok }.validate(true).is_err());
        assert!(TrainConfig {
            th0: 0.0,
            pair_selection: false,
            ..ok
        }
        .validate(true)
        .is_ok());
        assert!(TrainConfig {
            learning_rate: -1.0,
            ..ok
        }
        .validate(true)
        .is_err());
    }
}
