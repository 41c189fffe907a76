//! Synthetic multi-speaker corpus.
//!
//! Every speaker cycles through the same four tone-complex "states"; what
//! differs is the cyclic order (and so the direction) of the states, the
//! speaking rhythm (state duration), and a small multiplicative shift of
//! all tone frequencies. A bag-of-frames model can only exploit the shift,
//! while a sequence model can also use order and rhythm.
//!
//! Each utterance starts with a stretch of digital silence and carries
//! white noise at a fixed SNR.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{write_wav, AudioError, Manifest, ManifestEntry, Split, Waveform};
use crate::eval::{exhaustive_trials, trials_to_text, Trial};

/// Tone frequencies (Hz) and amplitudes of the shared states.
const STATES: [[(f64, f64); 3]; 4] = [
    [(400.0, 1.0), (1200.0, 0.5), (2600.0, 0.25)],
    [(700.0, 1.0), (1100.0, 0.5), (2400.0, 0.25)],
    [(300.0, 1.0), (2200.0, 0.5), (3000.0, 0.25)],
    [(600.0, 1.0), (1700.0, 0.5), (2800.0, 0.25)],
];

/// The six cyclic orders of four states.
const ORDERS: [[usize; 4]; 6] = [
    [0, 1, 2, 3],
    [0, 3, 2, 1],
    [0, 2, 1, 3],
    [0, 3, 1, 2],
    [0, 1, 3, 2],
    [0, 2, 3, 1],
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub num_dev: usize,
    pub num_enroll: usize,
    pub duration_s: f64,
    pub leading_silence_s: f64,
    pub snr_db: f64,
    /// Relative frequency shift between adjacent speakers.
    pub frequency_shift: f64,
    /// Shortest state duration; each speaker adds `rhythm_step_s`.
    pub base_state_s: f64,
    pub rhythm_step_s: f64,
    /// Relative per-segment jitter of the state duration.
    pub jitter: f64,
    /// Noise-only gap after each state, as a fraction of the state
    /// duration. Gaps longer than the analysis window keep any frame from
    /// straddling two states.
    pub gap_fraction: f64,
    /// When false every speaker uses the same order, rhythm and
    /// frequencies, so speakers are indistinguishable.
    pub distinct: bool,
    pub seed: u64,
    pub sample_rate: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_speakers: 5,
            utterances_per_speaker: 20,
            num_dev: 10,
            num_enroll: 5,
            duration_s: 3.0,
            leading_silence_s: 0.1,
            snr_db: 20.0,
            frequency_shift: 0.01,
            base_state_s: 0.08,
            rhythm_step_s: 0.03,
            jitter: 0.15,
            gap_fraction: 0.35,
            distinct: true,
            seed: 7,
            sample_rate: crate::SAMPLE_RATE,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.num_speakers == 0 || self.num_speakers > ORDERS.len() {
            return bad("num_speakers must be between 1 and 6");
        }
        if self.num_dev + self.num_enroll >= self.utterances_per_speaker || self.num_enroll == 0 {
            return bad("need at least one enroll and one eval utterance per speaker");
        }
        if !(self.duration_s > 0.0) || !(self.leading_silence_s >= 0.0) || !(self.base_state_s > 0.0) {
            return bad("durations must be positive");
        }
        if !(0.0..1.0).contains(&self.jitter) || self.rhythm_step_s < 0.0 || !(self.gap_fraction >= 0.0) {
            return bad("jitter must be in [0, 1), rhythm_step_s and gap_fraction non-negative");
        }
        Ok(())
    }

    pub fn speaker_id(&self, s: usize) -> String {
        format!("spk{s:02}")
    }

    fn split_of(&self, u: usize) -> Split {
        if u < self.num_dev {
            Split::Dev
        } else if u < self.num_dev + self.num_enroll {
            Split::Enroll
        } else {
            Split::Eval
        }
    }
}

/// One utterance of speaker `s`.
pub fn utterance<R: Rng + ?Sized>(cfg: &SynthConfig, s: usize, rng: &mut R) -> Waveform<f64> {
    let rate = cfg.sample_rate as f64;
    let k = if cfg.distinct { s } else { 0 };
    let order = ORDERS[k];
    let shift = 1.0 + cfg.frequency_shift * (k as f64 - (cfg.num_speakers as f64 - 1.0) / 2.0);
    let state_s = cfg.base_state_s + cfg.rhythm_step_s * k as f64;

    let silence = (cfg.leading_silence_s * rate).round() as usize;
    let voiced = (cfg.duration_s * rate).round() as usize;
    let mut signal = Vec::with_capacity(voiced);
    let mut pos = rng.gen_range(0..order.len());
    let mut phases: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    // first segment starts part-way through
    let mut remaining = (state_s * rate * rng.gen_range(0.1..1.0)).round().max(1.0) as usize;
    while signal.len() < voiced {
        let tones = STATES[order[pos]];
        for _ in 0..remaining.min(voiced - signal.len()) {
            let mut v = 0.0;
            for (ph, &(f, a)) in phases.iter_mut().zip(&tones) {
                v += a * ph.sin();
                *ph += 2.0 * PI * f * shift / rate;
            }
            signal.push(v);
        }
        let gap = (state_s * cfg.gap_fraction * rate).round() as usize;
        signal.extend(std::iter::repeat_n(0.0, gap.min(voiced - signal.len())));
        pos = (pos + 1) % order.len();
        let jitter = 1.0 + rng.gen_range(-cfg.jitter..=cfg.jitter);
        remaining = (state_s * jitter * rate).round().max(1.0) as usize;
        for ph in &mut phases {
            *ph = ph.rem_euclid(2.0 * PI);
        }
    }
    let power = signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64;
    let noise = Normal::new(0.0, (power / 10f64.powf(cfg.snr_db / 10.0)).sqrt()).expect("finite sigma");
    for v in &mut signal {
        *v += noise.sample(rng);
    }
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = rng.gen_range(0.2..0.6) / peak;
    let mut samples = vec![0.0; silence];
    samples.extend(signal.iter().map(|v| v * gain));
    Waveform::new(samples, cfg.sample_rate)
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest_path: PathBuf,
    pub trials_path: PathBuf,
    pub manifest: Manifest,
    pub trials: Vec<Trial>,
}

/// Writes WAV files, `manifest.tsv` (relative paths) and `trials.tsv`
/// (every enrolled speaker against every eval utterance) under `dir`.
pub fn generate(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    let mut lines = String::new();
    for s in 0..cfg.num_speakers {
        let spk = cfg.speaker_id(s);
        std::fs::create_dir_all(dir.join(&spk)).map_err(io(&dir.join(&spk)))?;
        for u in 0..cfg.utterances_per_speaker {
            let rel = PathBuf::from(&spk).join(format!("{spk}_{u:03}.wav"));
            let path = dir.join(&rel);
            write_wav(&path, &utterance(cfg, s, &mut rng))?;
            let split = cfg.split_of(u);
            lines.push_str(&format!("{}\t{}\t{}\n", rel.display(), spk, split));
            entries.push(ManifestEntry {
                path,
                speaker_id: spk.clone(),
                split,
            });
        }
    }
    let manifest_path = dir.join("manifest.tsv");
    std::fs::write(&manifest_path, lines).map_err(io(&manifest_path))?;
    let manifest = Manifest { entries };
    let trials = exhaustive_trials(&manifest);
    let rel_trials: Vec<Trial> = trials
        .iter()
        .map(|t| Trial {
            test_path: t
                .test_path
                .strip_prefix(dir)
                .map(Path::to_path_buf)
                .unwrap_or_else(|_| t.test_path.clone()),
            ..t.clone()
        })
        .collect();
    let trials_path = dir.join("trials.tsv");
    std::fs::write(&trials_path, trials_to_text(&rel_trials)).map_err(io(&trials_path))?;
    Ok(SynthCorpus {
        manifest_path,
        trials_path,
        manifest,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utterance_layout() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = utterance(&cfg, 2, &mut rng);
        assert_eq!(w.len(), 1600 + 48000);
        assert!(w.samples[..1600].iter().all(|&v| v == 0.0));
        let peak = w.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak > 0.19 && peak < 0.61);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            num_speakers: 2,
            utterances_per_speaker: 4,
            num_dev: 2,
            num_enroll: 1,
            duration_s: 0.3,
            ..SynthConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = generate(a.path(), &cfg).unwrap();
        generate(b.path(), &cfg).unwrap();
        assert_eq!(ca.manifest.entries.len(), 8);
        assert_eq!(ca.trials.len(), 2 * 2);
        for e in &ca.manifest.entries {
            let rel = e.path.strip_prefix(a.path()).unwrap();
            assert_eq!(
                std::fs::read(&e.path).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap()
            );
        }
        let m = crate::audio::resolve_manifest(&ca.manifest_path, None).unwrap();
        assert_eq!(m.entries, ca.manifest.entries);
        let t = crate::eval::read_trials(&ca.trials_path).unwrap();
        assert_eq!(t, ca.trials);
    }

    #[test]
    fn rejects_bad_split() {
        let cfg = SynthConfig {
            num_dev: 15,
            num_enroll: 5,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
