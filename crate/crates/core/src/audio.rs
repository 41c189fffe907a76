//! Audio loading, energy VAD and dataset manifests.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("unsupported encoding in {path}: {reason} (need mono 16-bit PCM)")]
    UnsupportedEncoding { path: PathBuf, reason: String },
    #[error("no audio samples in {0}")]
    EmptyAudio(PathBuf),
    #[error("every frame is below the VAD threshold")]
    AllSilent,
    #[error("sample rate {found} Hz, expected {expected} Hz")]
    SampleRateMismatch { found: u32, expected: u32 },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}:{line}: {reason}")]
    ParseError { path: PathBuf, line: usize, reason: String },
    #[error("{path}:{line}: duplicate utterance path {utterance}")]
    DuplicatePath {
        path: PathBuf,
        line: usize,
        utterance: String,
    },
    #[error("speaker {0} has a single dev utterance; genuine pairs need at least two")]
    SpeakerWithSingleDevUtterance(String),
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Mono audio with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: T) -> Self {
        Self {
            samples: self.samples.iter().map(|&s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Reads a RIFF/WAVE file holding mono 16-bit PCM.
pub fn load_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<Waveform<T>, AudioError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    // the file is fully in memory, so any read failure is a structural one
    let reader = hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(|e| malformed(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            reason: format!("{:?} {}-bit", spec.sample_format, spec.bits_per_sample),
        });
    }
    if spec.channels != 1 {
        return Err(AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            reason: format!("{} channels", spec.channels),
        });
    }
    let scale = T::of(1.0 / 32768.0);
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| T::of(v as f64) * scale))
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| malformed(path, e))?;
    if samples.is_empty() {
        return Err(AudioError::EmptyAudio(path.to_path_buf()));
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes mono 16-bit PCM, rounding to the nearest quantization step.
pub fn write_wav<T: Scalar>(path: impl AsRef<Path>, w: &Waveform<T>) -> Result<(), AudioError> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in &w.samples {
        writer
            .write_sample(quantize(s.to_f64_lossy()))
            .map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn map_hound(path: &Path, e: hound::Error) -> AudioError {
    match e {
        hound::Error::IoError(source) => AudioError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => malformed(path, other),
    }
}

fn malformed(path: &Path, e: hound::Error) -> AudioError {
    let path = path.to_path_buf();
    match e {
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path,
            reason: "format not supported".into(),
        },
        other => AudioError::MalformedHeader {
            path,
            reason: other.to_string(),
        },
    }
}

/// Energy VAD over consecutive hop-sized blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VadConfig {
    /// Blocks more than this many dB below the loudest block are dropped.
    pub threshold_db: f64,
    /// Block length; the feature hop.
    pub block_ms: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            threshold_db: 30.0,
            block_ms: 10.0,
        }
    }
}

impl VadConfig {
    pub fn block_len(&self, sample_rate: u32) -> usize {
        ((self.block_ms * sample_rate as f64 / 1000.0).round() as usize).max(1)
    }
}

/// Mean power of each block in dB; digital silence is `-inf`.
pub fn block_energies_db<T: Scalar>(w: &Waveform<T>, cfg: &VadConfig) -> Vec<f64> {
    let block = cfg.block_len(w.sample_rate);
    w.samples
        .chunks(block)
        .map(|c| {
            let power = c
                .iter()
                .map(|&s| {
                    let s = s.to_f64_lossy();
                    s * s
                })
                .sum::<f64>()
                / c.len() as f64;
            10.0 * power.log10()
        })
        .collect()
}

/// Which blocks survive VAD. Errors with `AllSilent` when none do.
pub fn vad_mask<T: Scalar>(w: &Waveform<T>, cfg: &VadConfig) -> Result<Vec<bool>, AudioError> {
    let energies = block_energies_db(w, cfg);
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(AudioError::AllSilent);
    }
    let floor = max - cfg.threshold_db;
    Ok(energies.iter().map(|&e| e >= floor).collect())
}

/// Removes low-energy blocks and concatenates the survivors in order.
pub fn apply_vad<T: Scalar>(w: &Waveform<T>, cfg: &VadConfig) -> Result<Waveform<T>, AudioError> {
    let mask = vad_mask(w, cfg)?;
    let block = cfg.block_len(w.sample_rate);
    let samples: Vec<T> = w
        .samples
        .chunks(block)
        .zip(&mask)
        .filter(|(_, &keep)| keep)
        .flat_map(|(c, _)| c.iter().copied())
        .collect();
    if samples.is_empty() {
        return Err(AudioError::AllSilent);
    }
    Ok(Waveform::new(samples, w.sample_rate))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Dev,
    Enroll,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Dev => "dev",
            Split::Enroll => "enroll",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dev" => Ok(Split::Dev),
            "enroll" => Ok(Split::Enroll),
            "eval" => Ok(Split::Eval),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub speaker_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Speakers of a split in first-appearance order.
    pub fn speakers(&self, split: Split) -> Vec<String> {
        let mut seen = HashSet::new();
        self.split(split)
            .filter(|e| seen.insert(e.speaker_id.clone()))
            .map(|e| e.speaker_id.clone())
            .collect()
    }

    pub fn find(&self, path: &Path) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.path == path)
    }

    /// Serializes back to the tab-separated line format.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.path.display(), e.speaker_id, e.split))
            .collect()
    }
}

/// Reads a manifest file. Relative utterance paths are resolved against the
/// manifest's directory.
pub fn resolve_manifest(path: impl AsRef<Path>, filter_prefix: Option<&str>) -> Result<Manifest, ManifestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_manifest(&text, path, base, filter_prefix)
}

pub fn parse_manifest(
    text: &str,
    source: &Path,
    base: &Path,
    filter_prefix: Option<&str>,
) -> Result<Manifest, ManifestError> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let parse_err = |reason: String| ManifestError::ParseError {
            path: source.to_path_buf(),
            line,
            reason,
        };
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let (utt, speaker, split) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
        if utt.is_empty() {
            return Err(parse_err("empty utterance path".into()));
        }
        if speaker.is_empty() {
            return Err(parse_err("empty speaker id".into()));
        }
        let mut split: Split = split.parse().map_err(parse_err)?;
        if let Some(prefix) = filter_prefix {
            split = if speaker.starts_with(prefix) {
                // explicit enrollment lines stay enrollment data
                if split == Split::Enroll {
                    Split::Enroll
                } else {
                    Split::Eval
                }
            } else {
                Split::Dev
            };
        }
        let utt_path = {
            let p = Path::new(utt);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        if !seen.insert(utt_path.clone()) {
            return Err(ManifestError::DuplicatePath {
                path: source.to_path_buf(),
                line,
                utterance: utt.to_string(),
            });
        }
        entries.push(ManifestEntry {
            path: utt_path,
            speaker_id: speaker.to_string(),
            split,
        });
    }
    let mut dev_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.split == Split::Dev) {
        *dev_counts.entry(&e.speaker_id).or_default() += 1;
    }
    if let Some((spk, _)) = dev_counts.iter().find(|(_, &n)| n < 2) {
        return Err(ManifestError::SpeakerWithSingleDevUtterance(spk.to_string()));
    }
    Ok(Manifest { entries })
}
