//! Utterances loaded from a manifest: VAD-trimmed and turned into raw
//! (unnormalized) per-frame coefficients, ready to be cropped into windows.

use std::path::PathBuf;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::audio::{apply_vad, load_wav, AudioError, Manifest, Split, VadConfig, Waveform};
use crate::features::{normalize, window_from_rows, FeatureConfig, FeatureError, FeatureExtractor, FeatureWindow};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Audio {
        path: PathBuf,
        #[source]
        source: AudioError,
    },
    #[error("{path}: {source}")]
    Feature {
        path: PathBuf,
        #[source]
        source: FeatureError,
    },
}

#[derive(Debug, Clone)]
pub struct Utterance<T> {
    pub path: PathBuf,
    pub speaker: String,
    /// Post-VAD sample count.
    pub num_samples: usize,
    /// Raw coefficients of the whole post-VAD utterance, frames x coeffs.
    pub features: Array2<T>,
}

impl<T: Scalar> Utterance<T> {
    pub fn duration_s(&self, sample_rate: u32) -> f64 {
        self.num_samples as f64 / sample_rate as f64
    }
}

/// A set of utterances sharing one front-end configuration.
#[derive(Debug, Clone)]
pub struct UtteranceSet<T> {
    pub utterances: Vec<Utterance<T>>,
    pub feature_config: FeatureConfig,
    pub sample_rate: u32,
}

impl<T: Scalar> UtteranceSet<T> {
    /// Speakers in first-appearance order.
    pub fn speakers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for u in &self.utterances {
            if !out.contains(&u.speaker) {
                out.push(u.speaker.clone());
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn frames_for(&self, duration_s: f64) -> usize {
        self.feature_config.frames_for(duration_s, self.sample_rate)
    }

    pub fn find(&self, path: &std::path::Path) -> Option<&Utterance<T>> {
        self.utterances.iter().find(|u| u.path == path)
    }

    pub fn subset(&self, keep: impl Fn(&Utterance<T>) -> bool) -> Self {
        Self {
            utterances: self.utterances.iter().filter(|u| keep(u)).cloned().collect(),
            feature_config: self.feature_config,
            sample_rate: self.sample_rate,
        }
    }
}

/// Checks that `utt` holds at least `duration_s` of speech.
pub fn check_length<T: Scalar>(
    utt: &Utterance<T>,
    duration_s: f64,
    sample_rate: u32,
    frames: usize,
) -> Result<(), FeatureError> {
    let needed = (duration_s * sample_rate as f64).round() as usize;
    if utt.num_samples < needed || utt.features.nrows() < frames {
        return Err(FeatureError::UtteranceTooShort {
            have: utt.num_samples,
            needed,
        });
    }
    Ok(())
}

/// The normalized window over the first `duration_s` seconds.
pub fn leading_window<T: Scalar>(
    utt: &Utterance<T>,
    duration_s: f64,
    sample_rate: u32,
    frames: usize,
) -> Result<FeatureWindow<T>, FeatureError> {
    check_length(utt, duration_s, sample_rate, frames)?;
    window_from_rows(&utt.features, 0, frames, duration_s)
}

/// Back-to-back windows covering as much of the utterance as fits.
pub fn tiled_windows<T: Scalar>(
    utt: &Utterance<T>,
    duration_s: f64,
    sample_rate: u32,
    frames: usize,
) -> Result<Vec<FeatureWindow<T>>, FeatureError> {
    check_length(utt, duration_s, sample_rate, frames)?;
    (0..utt.features.nrows() / frames)
        .map(|k| window_from_rows(&utt.features, k * frames, frames, duration_s))
        .collect()
}

/// Uniformly random contiguous crop, returned with its starting frame.
pub fn random_crop<T: Scalar, R: Rng + ?Sized>(
    utt: &Utterance<T>,
    duration_s: f64,
    sample_rate: u32,
    frames: usize,
    rng: &mut R,
) -> Result<(usize, FeatureWindow<T>), FeatureError> {
    check_length(utt, duration_s, sample_rate, frames)?;
    let start = rng.gen_range(0..=utt.features.nrows() - frames);
    Ok((start, window_from_rows(&utt.features, start, frames, duration_s)?))
}

/// Stacks normalized frames from every utterance: whole utterances when
/// `duration_s` is `None`, otherwise back-to-back windows of that length
/// (utterances too short for one window are skipped).
pub fn pooled_frames<T: Scalar>(set: &UtteranceSet<T>, duration_s: Option<f64>) -> Result<Array2<T>, FeatureError> {
    let mut out = Array2::zeros((0, set.feature_config.num_coeffs()));
    for u in &set.utterances {
        match duration_s {
            None => out
                .append(ndarray::Axis(0), normalize(&u.features)?.view())
                .expect("matching width"),
            Some(d) => {
                let frames = set.frames_for(d);
                if check_length(u, d, set.sample_rate, frames).is_err() {
                    continue;
                }
                for w in tiled_windows(u, d, set.sample_rate, frames)? {
                    out.append(ndarray::Axis(0), w.values.view()).expect("matching width");
                }
            }
        }
    }
    Ok(out)
}

/// Turns one waveform into an utterance record.
pub fn prepare<T: Scalar>(
    extractor: &FeatureExtractor<T>,
    vad: &VadConfig,
    path: PathBuf,
    speaker: String,
    wave: &Waveform<T>,
) -> Result<Utterance<T>, CorpusError> {
    if wave.sample_rate != extractor.sample_rate() {
        return Err(CorpusError::Audio {
            path,
            source: AudioError::SampleRateMismatch {
                found: wave.sample_rate,
                expected: extractor.sample_rate(),
            },
        });
    }
    let trimmed = match apply_vad(wave, vad) {
        Ok(t) => t,
        Err(source) => return Err(CorpusError::Audio { path, source }),
    };
    let features = match extractor.coefficients(&trimmed) {
        Ok(f) => f,
        Err(source) => return Err(CorpusError::Feature { path, source }),
    };
    Ok(Utterance {
        path,
        speaker,
        num_samples: trimmed.len(),
        features,
    })
}

/// Loads every manifest entry of the given splits. Failures are returned
/// alongside the successes, in manifest order.
pub fn load_manifest<T: Scalar>(
    manifest: &Manifest,
    splits: &[Split],
    feature_config: FeatureConfig,
    vad: &VadConfig,
    sample_rate: u32,
) -> Result<(UtteranceSet<T>, Vec<CorpusError>), FeatureError> {
    let extractor = FeatureExtractor::<T>::new(feature_config, sample_rate)?;
    let entries: Vec<_> = manifest.entries.iter().filter(|e| splits.contains(&e.split)).collect();
    let results: Vec<Result<Utterance<T>, CorpusError>> = entries
        .par_iter()
        .map(|e| {
            let wave = load_wav::<T>(&e.path).map_err(|source| CorpusError::Audio {
                path: e.path.clone(),
                source,
            })?;
            prepare(&extractor, vad, e.path.clone(), e.speaker_id.clone(), &wave)
        })
        .collect();
    let mut utterances = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(u) => utterances.push(u),
            Err(e) => failures.push(e),
        }
    }
    Ok((
        UtteranceSet {
            utterances,
            feature_config,
            sample_rate,
        },
        failures,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn utt(frames: usize) -> Utterance<f64> {
        Utterance {
            path: "u.wav".into(),
            speaker: "s".into(),
            num_samples: frames * 160,
            features: Array2::from_shape_fn((frames, 4), |(t, c)| (t * 4 + c) as f64),
        }
    }

    #[test]
    fn exact_length_crop_is_whole_window() {
        let u = utt(100);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let (start, w) = random_crop(&u, 1.0, 16000, 100, &mut rng).unwrap();
            assert_eq!(start, 0);
            assert_eq!(w, leading_window(&u, 1.0, 16000, 100).unwrap());
        }
    }

    #[test]
    fn crops_are_seed_deterministic() {
        let u = utt(300);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| random_crop(&u, 1.0, 16000, 100, &mut rng).unwrap().0)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // 201 valid starts; each bin is Binomial(10^4, 1/201)
        let u = utt(300);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let mut hist = vec![0usize; 201];
        for _ in 0..draws {
            hist[random_crop(&u, 1.0, 16000, 100, &mut rng).unwrap().0] += 1;
        }
        let p = 1.0 / 201.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        // Bonferroni over 201 bins: 4 sigma keeps the family-wise false alarm rate below 1.3%
        for (i, &c) in hist.iter().enumerate() {
            assert!((c as f64 - mean).abs() <= 4.0 * sd, "bin {i}: {c}");
        }
        let within_3sd = hist.iter().filter(|&&c| (c as f64 - mean).abs() <= 3.0 * sd).count();
        assert!(within_3sd >= 198, "{within_3sd} of 201 bins within 3 sigma");
    }

    #[test]
    fn too_short_rejected() {
        let u = utt(50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            random_crop(&u, 1.0, 16000, 100, &mut rng),
            Err(FeatureError::UtteranceTooShort { .. })
        ));
        assert_eq!(tiled_windows(&utt(250), 1.0, 16000, 100).unwrap().len(), 2);
    }
}
