#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sv_core::corpus::{prepare, UtteranceSet};
use sv_core::features::{FeatureExtractor, FeatureWindow};
use sv_core::network::{BatchNorm, LstmModel, TrialPair};
use sv_core::{FeatureConfig, LstmConfig, SynthConfig, VadConfig};

pub fn tiny_model(seed: u64, input: usize, hidden: usize, batchnorm: bool, head: Option<usize>) -> LstmModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = LstmModel::new(
        LstmConfig {
            input_dim: input,
            hidden_dim: hidden,
            num_layers: 2,
        },
        &mut rng,
    )
    .unwrap();
    if batchnorm {
        let mut bn = BatchNorm::new(input);
        bn.gamma.mapv_inplace(|_| rng.gen_range(0.5..1.5));
        bn.beta.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        m.set_input_norm(Some(bn)).unwrap();
    }
    if let Some(n) = head {
        m.init_head(n, &mut rng);
    }
    m
}

pub fn random_window<R: Rng>(rng: &mut R, frames: usize, dim: usize) -> FeatureWindow<f64> {
    FeatureWindow {
        values: Array2::from_shape_fn((frames, dim), |_| rng.gen_range(-1.5..1.5)),
        duration_s: frames as f64 / 100.0,
    }
}

pub fn random_pairs<R: Rng>(rng: &mut R, n: usize, frames: usize, dim: usize) -> Vec<TrialPair<f64>> {
    (0..n)
        .map(|i| TrialPair {
            first: random_window(rng, frames, dim),
            second: random_window(rng, frames, dim),
            genuine: i % 2 == 0,
        })
        .collect()
}

/// Maximum relative error between an analytic gradient and central
/// differences of `loss` over every parameter of `model`.
pub fn max_fd_error(
    model: &mut LstmModel<f64>,
    analytic: &[f64],
    step: f64,
    loss: impl Fn(&LstmModel<f64>) -> f64,
) -> (f64, usize) {
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    assert_eq!(sizes.iter().sum::<usize>(), analytic.len());
    let mut worst = 0.0f64;
    let mut flat = 0;
    let mut checked = 0;
    for (slot, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = model.params()[slot][i];
            model.params_mut()[slot][i] = orig + step;
            let up = loss(model);
            model.params_mut()[slot][i] = orig - step;
            let down = loss(model);
            model.params_mut()[slot][i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            flat += 1;
            checked += 1;
        }
    }
    (worst, checked)
}

/// An in-memory synthetic corpus, without touching the file system.
pub fn synthetic_set(
    cfg: &SynthConfig,
    features: FeatureConfig,
    per_speaker: std::ops::Range<usize>,
) -> UtteranceSet<f64> {
    let ex = FeatureExtractor::<f64>::new(features, cfg.sample_rate).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut utterances = Vec::new();
    for s in 0..cfg.num_speakers {
        for u in 0..cfg.utterances_per_speaker {
            let w = sv_core::synth::utterance(cfg, s, &mut rng);
            if per_speaker.contains(&u) {
                utterances.push(
                    prepare(
                        &ex,
                        &VadConfig::default(),
                        format!("{}/{u}.wav", cfg.speaker_id(s)).into(),
                        cfg.speaker_id(s),
                        &w,
                    )
                    .unwrap(),
                );
            }
        }
    }
    UtteranceSet {
        utterances,
        feature_config: features,
        sample_rate: cfg.sample_rate,
    }
}

/// A small, quick corpus for training-loop tests.
pub fn small_synth() -> SynthConfig {
    SynthConfig {
        num_speakers: 3,
        utterances_per_speaker: 4,
        num_dev: 2,
        num_enroll: 1,
        duration_s: 0.8,
        ..SynthConfig::default()
    }
}

pub fn small_features() -> FeatureConfig {
    FeatureConfig {
        num_filters: 12,
        num_ceps: 12,
        ..FeatureConfig::default()
    }
}
