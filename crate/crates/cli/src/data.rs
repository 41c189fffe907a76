//! Loading utterances from audio or from a feature cache directory.

use std::path::{Component, Path, PathBuf};

use anyhow::Context;
use sv_core::audio::{AudioError, Manifest, ManifestEntry, Split};
use sv_core::corpus::{load_manifest, CorpusError, Utterance, UtteranceSet};
use sv_core::features::cache::{self, CacheError};
use sv_core::features::FeatureError;
use sv_core::{FeatureConfig, Scalar, VadConfig, SAMPLE_RATE};

pub const CACHE_EXT: &str = "svfeat";

/// One utterance that could not be loaded.
#[derive(Debug)]
pub struct ItemFailure {
    pub path: PathBuf,
    pub kind: &'static str,
    pub message: String,
}

impl std::fmt::Display for ItemFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {} ({})", self.path.display(), self.kind, self.message)
    }
}

pub fn audio_kind(e: &AudioError) -> &'static str {
    match e {
        AudioError::MalformedHeader { .. } => "MalformedHeader",
        AudioError::UnsupportedEncoding { .. } => "UnsupportedEncoding",
        AudioError::EmptyAudio(_) => "EmptyAudio",
        AudioError::AllSilent => "AllSilent",
        AudioError::SampleRateMismatch { .. } => "SampleRateMismatch",
        AudioError::Io { .. } => "Io",
    }
}

fn feature_kind(e: &FeatureError) -> &'static str {
    match e {
        FeatureError::UtteranceTooShort { .. } => "UtteranceTooShort",
        _ => "FeatureError",
    }
}

impl From<CorpusError> for ItemFailure {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Audio { path, source } => ItemFailure {
                path,
                kind: audio_kind(&source),
                message: source.to_string(),
            },
            CorpusError::Feature { path, source } => ItemFailure {
                path,
                kind: feature_kind(&source),
                message: source.to_string(),
            },
        }
    }
}

/// Cache file of an utterance: its path relative to the manifest
/// directory, mirrored under `cache_dir`.
pub fn cache_path(cache_dir: &Path, manifest_dir: &Path, utterance: &Path) -> PathBuf {
    let rel: PathBuf = match utterance.strip_prefix(manifest_dir) {
        Ok(r) => r.to_path_buf(),
        Err(_) => utterance
            .components()
            .filter(|c| matches!(c, Component::Normal(_)))
            .collect(),
    };
    cache_dir.join(rel).with_extension(CACHE_EXT)
}

fn from_cache<T: Scalar>(
    entry: &ManifestEntry,
    path: &Path,
    features: &FeatureConfig,
) -> anyhow::Result<Result<Utterance<T>, ItemFailure>> {
    match cache::read::<T>(path, &features.digest()) {
        Ok(m) => Ok(Ok(Utterance {
            path: entry.path.clone(),
            speaker: entry.speaker_id.clone(),
            num_samples: m.nrows() * features.hop_len(SAMPLE_RATE),
            features: m,
        })),
        Err(e @ CacheError::DigestMismatch { .. }) => {
            Err(anyhow::Error::new(e).context(format!("DigestMismatch in {}", path.display())))
        }
        Err(e) => Ok(Err(ItemFailure {
            path: entry.path.clone(),
            kind: "CacheError",
            message: format!("{}: {e}", path.display()),
        })),
    }
}

pub struct Source<'a> {
    pub manifest: &'a Manifest,
    pub manifest_dir: &'a Path,
    pub cache_dir: Option<&'a Path>,
}

/// Loads the given splits. Per-utterance failures are returned; a cache
/// written under a different feature config is a hard error.
pub fn load_set<T: Scalar>(
    src: &Source<'_>,
    splits: &[Split],
    features: FeatureConfig,
    vad: &VadConfig,
) -> anyhow::Result<(UtteranceSet<T>, Vec<ItemFailure>)> {
    match src.cache_dir {
        None => {
            let (set, failures) = load_manifest::<T>(src.manifest, splits, features, vad, SAMPLE_RATE)?;
            Ok((set, failures.into_iter().map(ItemFailure::from).collect()))
        }
        Some(dir) => {
            features.validate(SAMPLE_RATE)?;
            let mut utterances = Vec::new();
            let mut failures = Vec::new();
            for e in src.manifest.entries.iter().filter(|e| splits.contains(&e.split)) {
                match from_cache(e, &cache_path(dir, src.manifest_dir, &e.path), &features)? {
                    Ok(u) => utterances.push(u),
                    Err(f) => failures.push(f),
                }
            }
            Ok((
                UtteranceSet {
                    utterances,
                    feature_config: features,
                    sample_rate: SAMPLE_RATE,
                },
                failures,
            ))
        }
    }
}

pub fn report(failures: &[ItemFailure]) {
    for f in failures {
        eprintln!("error: {f}");
    }
}

pub fn read_manifest(path: &Path, eval_prefix: Option<&str>) -> anyhow::Result<(Manifest, PathBuf)> {
    let manifest =
        sv_core::resolve_manifest(path, eval_prefix).with_context(|| format!("loading manifest {}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
    Ok((manifest, dir))
}
