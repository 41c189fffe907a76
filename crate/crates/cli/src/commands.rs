use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sv_core::audio::{load_wav, Split};
use sv_core::corpus::{leading_window, pooled_frames, prepare, Utterance, UtteranceSet};
use sv_core::eval::{
    self, enrollment_windows, evaluate_protocol, exhaustive_trials, read_trials, scores_csv, sweep_csv, GmmSystem,
    LstmSystem, ProtocolResult, SpeakerModel, Trial,
};
use sv_core::features::{cache, FeatureExtractor};
use sv_core::gmm::{self, GmmModel};
use sv_core::network::checkpoint;
use sv_core::network::LstmModel;
use sv_core::training::{self, log_csv, EpochLog, Phase};
use sv_core::{FeatureConfig, LstmConfig, Scalar, TrainConfig, SAMPLE_RATE};
use thiserror::Error;

use crate::config::RunConfig;
use crate::data::{audio_kind, cache_path, load_set, read_manifest, report, ItemFailure, Source};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SPEAKERS_FILE: &str = "speakers.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const UBM_FILE: &str = "ubm.gmm";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("DigestMismatch: {what} was built with feature config {found}, the run config gives {expected}")]
    DigestMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("speaker {0} not found in {1}")]
    UnknownSpeaker(String, PathBuf),
    #[error("nothing loaded: every utterance failed")]
    NothingLoaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum System {
    Lstm,
    Gmm,
}

impl System {
    fn features(self, cfg: &RunConfig) -> FeatureConfig {
        match self {
            System::Lstm => cfg.features,
            System::Gmm => cfg.gmm.features,
        }
    }
}

/// Count of per-item failures; the process exits nonzero when positive.
pub type Failures = usize;

fn check_digest(what: &Path, found: &str, features: &FeatureConfig) -> Result<(), CliError> {
    let expected = features.digest();
    if found != expected {
        return Err(CliError::DigestMismatch {
            what: what.display().to_string(),
            expected,
            found: found.to_string(),
        });
    }
    Ok(())
}

fn load_checkpoint<T: Scalar>(path: &Path, cfg: &RunConfig) -> anyhow::Result<LstmModel<T>> {
    let ckpt = checkpoint::load::<T>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    check_digest(path, &ckpt.feature_digest, &cfg.features)?;
    Ok(ckpt.model)
}

fn load_gmm<T: Scalar>(path: &Path, features: &FeatureConfig) -> anyhow::Result<GmmModel<T>> {
    let (model, digest) = gmm::load::<T>(path).with_context(|| format!("loading GMM {}", path.display()))?;
    check_digest(path, &digest, features)?;
    Ok(model)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load<T: Scalar>(
    manifest: &Path,
    cache_dir: Option<&Path>,
    splits: &[Split],
    features: FeatureConfig,
    cfg: &RunConfig,
) -> anyhow::Result<(sv_core::Manifest, UtteranceSet<T>, Failures)> {
    let (m, dir) = read_manifest(manifest, cfg.eval_prefix.as_deref())?;
    let src = Source {
        manifest: &m,
        manifest_dir: &dir,
        cache_dir,
    };
    let (set, failures) = load_set::<T>(&src, splits, features, &cfg.vad)?;
    report(&failures);
    if set.is_empty() {
        return Err(CliError::NothingLoaded.into());
    }
    Ok((m, set, failures.len()))
}

/// One cache file per manifest entry.
pub fn extract<T: Scalar>(cfg: &RunConfig, manifest: &Path, out: &Path, system: System) -> anyhow::Result<Failures> {
    let (m, dir) = read_manifest(manifest, cfg.eval_prefix.as_deref())?;
    let features = system.features(cfg);
    let extractor = FeatureExtractor::<T>::new(features, SAMPLE_RATE)?;
    let digest = features.digest();
    cfg.echo(out)?;
    let mut failures = Vec::new();
    let (mut total, mut kept) = (0usize, 0usize);
    for e in &m.entries {
        let wave = match load_wav::<T>(&e.path) {
            Ok(w) => w,
            Err(err) => {
                failures.push(ItemFailure {
                    path: e.path.clone(),
                    kind: audio_kind(&err),
                    message: err.to_string(),
                });
                continue;
            }
        };
        total += wave.len();
        match prepare(&extractor, &cfg.vad, e.path.clone(), e.speaker_id.clone(), &wave) {
            Ok(u) => {
                kept += u.num_samples;
                let path = cache_path(out, &dir, &e.path);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
                }
                cache::write(&path, &digest, &u.features).with_context(|| format!("writing {}", path.display()))?;
            }
            Err(err) => failures.push(err.into()),
        }
    }
    report(&failures);
    let rejected = if total > 0 {
        1.0 - kept as f64 / total as f64
    } else {
        0.0
    };
    println!(
        "extracted {}/{} utterances, {} failed, VAD rejected {:.1}% of samples",
        m.entries.len() - failures.len(),
        m.entries.len(),
        failures.len(),
        100.0 * rejected
    );
    Ok(failures.len())
}

fn metadata(cfg: &RunConfig, phase: Phase, train: &TrainConfig) -> serde_json::Value {
    json!({
        "tool": "sv",
        "version": env!("CARGO_PKG_VERSION"),
        "phase": phase,
        "seed": cfg.seed,
        "train": train,
        "features": cfg.features,
    })
}

fn save_training<T: Scalar>(
    cfg: &RunConfig,
    out: &Path,
    model: &LstmModel<T>,
    logs: &[EpochLog],
    phase: Phase,
    train: &TrainConfig,
) -> anyhow::Result<()> {
    let path = out.join(CHECKPOINT_FILE);
    checkpoint::save(&path, model, &cfg.features.digest(), &metadata(cfg, phase, train))
        .with_context(|| format!("writing {}", path.display()))?;
    write(&out.join(TRAIN_LOG_FILE), log_csv(logs))?;
    if let Some(last) = logs.last() {
        print!("{}", log_csv(std::slice::from_ref(last)));
    }
    Ok(())
}

pub fn initial_model<T: Scalar>(cfg: &RunConfig) -> anyhow::Result<LstmModel<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(0));
    let config = LstmConfig {
        input_dim: cfg.features.num_coeffs(),
        hidden_dim: cfg.network.hidden_dim,
        num_layers: cfg.network.num_layers,
    };
    Ok(LstmModel::new(config, &mut rng)?)
}

pub fn pretrain<T: Scalar>(
    cfg: &RunConfig,
    manifest: &Path,
    cache_dir: Option<&Path>,
    out: &Path,
) -> anyhow::Result<Failures> {
    cfg.echo(out)?;
    let (_, set, failures) = load::<T>(manifest, cache_dir, &[Split::Dev], cfg.features, cfg)?;
    let mut model = initial_model::<T>(cfg)?;
    let logs = training::pretrain(&mut model, &set, &cfg.pretrain)?;
    save_training(cfg, out, &model, &logs, Phase::Pretrain, &cfg.pretrain)?;
    Ok(failures)
}

pub fn finetune<T: Scalar>(
    cfg: &RunConfig,
    manifest: &Path,
    cache_dir: Option<&Path>,
    checkpoint: &Path,
    out: &Path,
) -> anyhow::Result<Failures> {
    cfg.echo(out)?;
    let mut model = load_checkpoint::<T>(checkpoint, cfg)?;
    let (_, set, failures) = load::<T>(manifest, cache_dir, &[Split::Dev], cfg.features, cfg)?;
    let logs = training::finetune(&mut model, &set, &cfg.finetune)?;
    save_training(cfg, out, &model, &logs, Phase::Finetune, &cfg.finetune)?;
    Ok(failures)
}

fn speaker_utterances<'a, T>(set: &'a UtteranceSet<T>, speaker: &str) -> Vec<&'a Utterance<T>> {
    set.utterances.iter().filter(|u| u.speaker == speaker).collect()
}

fn to_f64<T: Scalar>(m: SpeakerModel<T>) -> SpeakerModel<f64> {
    SpeakerModel {
        speaker_id: m.speaker_id,
        dvector: m.dvector.mapv(|v| v.to_f64_lossy()),
        num_enroll_utterances: m.num_enroll_utterances,
        normalized: m.normalized,
    }
}

/// Writes d-vectors of every enroll-split speaker (or just `only`).
pub fn enroll<T: Scalar>(
    cfg: &RunConfig,
    manifest: &Path,
    cache_dir: Option<&Path>,
    checkpoint: &Path,
    only: Option<&str>,
    out: &Path,
) -> anyhow::Result<Failures> {
    cfg.echo(out)?;
    let model = load_checkpoint::<T>(checkpoint, cfg)?;
    let (m, set, mut failures) = load::<T>(manifest, cache_dir, &[Split::Enroll], cfg.features, cfg)?;
    let mut speakers = m.speakers(Split::Enroll);
    if let Some(s) = only {
        if !speakers.iter().any(|x| x == s) {
            return Err(CliError::UnknownSpeaker(s.to_string(), manifest.to_path_buf()).into());
        }
        speakers.retain(|x| x == s);
    }
    let mut models = Vec::new();
    for spk in &speakers {
        let windows = enrollment_windows(&speaker_utterances(&set, spk), &set, cfg.eval.duration_s)?;
        match eval::enroll(&model, &windows, spk, cfg.eval.normalize_dvector) {
            Ok(sm) => models.push(to_f64(sm)),
            Err(e) => {
                eprintln!("error: {e}");
                failures += 1;
            }
        }
    }
    write(&out.join(SPEAKERS_FILE), serde_json::to_string_pretty(&models)?)?;
    println!("enrolled {} of {} speakers", models.len(), speakers.len());
    Ok(failures)
}

pub enum VerifyTarget<'a> {
    Lstm {
        checkpoint: &'a Path,
        speakers: &'a Path,
        speaker: &'a str,
    },
    Gmm {
        ubm: &'a Path,
        speaker_model: &'a Path,
    },
}

fn test_window<T: Scalar>(
    cfg: &RunConfig,
    features: FeatureConfig,
    wav: &Path,
) -> anyhow::Result<sv_core::features::FeatureWindow<T>> {
    let extractor = FeatureExtractor::<T>::new(features, SAMPLE_RATE)?;
    let wave = load_wav::<T>(wav)?;
    let utt = prepare(&extractor, &cfg.vad, wav.to_path_buf(), String::new(), &wave)?;
    let d = cfg.eval.duration_s;
    Ok(leading_window(
        &utt,
        d,
        SAMPLE_RATE,
        features.frames_for(d, SAMPLE_RATE),
    )?)
}

/// Scores one test file against one claimed speaker.
pub fn verify<T: Scalar>(
    cfg: &RunConfig,
    target: VerifyTarget<'_>,
    wav: &Path,
    threshold: f64,
) -> anyhow::Result<Failures> {
    let score = match target {
        VerifyTarget::Lstm {
            checkpoint,
            speakers,
            speaker,
        } => {
            let model = load_checkpoint::<T>(checkpoint, cfg)?;
            let text = std::fs::read_to_string(speakers).with_context(|| format!("reading {}", speakers.display()))?;
            let all: Vec<SpeakerModel<f64>> = serde_json::from_str(&text)?;
            let sm = all
                .into_iter()
                .find(|s| s.speaker_id == speaker)
                .ok_or_else(|| CliError::UnknownSpeaker(speaker.to_string(), speakers.to_path_buf()))?;
            let sm = SpeakerModel {
                speaker_id: sm.speaker_id,
                dvector: sm.dvector.mapv(T::of),
                num_enroll_utterances: sm.num_enroll_utterances,
                normalized: sm.normalized,
            };
            let w = test_window::<T>(cfg, cfg.features, wav)?;
            eval::score(&model, &sm, &w)?.to_f64_lossy()
        }
        VerifyTarget::Gmm { ubm, speaker_model } => {
            let ubm = load_gmm::<T>(ubm, &cfg.gmm.features)?;
            let spk = load_gmm::<T>(speaker_model, &cfg.gmm.features)?;
            let w = test_window::<T>(cfg, cfg.gmm.features, wav)?;
            gmm::llr_score(&ubm, &spk, &w.values)?.to_f64_lossy()
        }
    };
    let decision = if score >= threshold { "accept" } else { "reject" };
    println!("score={score} decision={decision}");
    Ok(0)
}

fn trial_list(trials: Option<&Path>, manifest: &sv_core::Manifest) -> anyhow::Result<Vec<Trial>> {
    match trials {
        Some(p) => Ok(read_trials(p)?),
        None => Ok(exhaustive_trials(manifest)),
    }
}

fn protocol<T: Scalar>(
    cfg: &RunConfig,
    system: System,
    model: &Path,
    m: &sv_core::Manifest,
    set: &UtteranceSet<T>,
    trials: &[Trial],
    duration_s: f64,
) -> anyhow::Result<ProtocolResult> {
    Ok(match system {
        System::Lstm => {
            let model = load_checkpoint::<T>(model, cfg)?;
            let sys = LstmSystem {
                model: &model,
                normalize: cfg.eval.normalize_dvector,
            };
            evaluate_protocol(&sys, set, m, trials, duration_s)?
        }
        System::Gmm => {
            let ubm = load_gmm::<T>(model, &cfg.gmm.features)?;
            let sys = GmmSystem {
                ubm: &ubm,
                map: cfg.gmm.map,
            };
            evaluate_protocol(&sys, set, m, trials, duration_s)?
        }
    })
}

fn report_skipped(r: &ProtocolResult) {
    for s in &r.skipped {
        eprintln!(
            "skipped: {} vs {}: {}",
            s.trial.claimed_speaker,
            s.trial.test_path.display(),
            s.reason
        );
    }
}

pub struct EvaluateArgs<'a> {
    pub system: System,
    pub model: &'a Path,
    pub manifest: &'a Path,
    pub trials: Option<&'a Path>,
    pub cache_dir: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn evaluate<T: Scalar>(cfg: &RunConfig, a: EvaluateArgs<'_>) -> anyhow::Result<Failures> {
    cfg.echo(a.out)?;
    let features = a.system.features(cfg);
    // digest check before loading audio
    match a.system {
        System::Lstm => drop(load_checkpoint::<T>(a.model, cfg)?),
        System::Gmm => drop(load_gmm::<T>(a.model, &features)?),
    }
    let (m, set, failures) = load::<T>(a.manifest, a.cache_dir, &[Split::Enroll, Split::Eval], features, cfg)?;
    let trials = trial_list(a.trials, &m)?;
    let r = protocol(cfg, a.system, a.model, &m, &set, &trials, cfg.eval.duration_s)?;
    report_skipped(&r);
    write(&a.out.join(SCORES_FILE), scores_csv(&r.scores))?;
    println!("EER={}", r.eer.eer);
    eprintln!(
        "threshold={} targets={} nontargets={} skipped={}",
        r.eer.threshold,
        r.eer.num_target,
        r.eer.num_nontarget,
        r.skipped.len()
    );
    Ok(failures)
}

pub struct SweepArgs<'a> {
    pub system: System,
    pub manifest: &'a Path,
    pub trials: Option<&'a Path>,
    pub cache_dir: Option<&'a Path>,
    pub durations: &'a [f64],
    pub out: &'a Path,
}

/// Trains and evaluates one system per duration; development, enrollment
/// and test segments all share that duration.
pub fn sweep_duration<T: Scalar>(cfg: &RunConfig, a: SweepArgs<'_>) -> anyhow::Result<Failures> {
    if a.durations.is_empty() {
        bail!("no durations given");
    }
    cfg.echo(a.out)?;
    let features = a.system.features(cfg);
    let (m, set, failures) = load::<T>(
        a.manifest,
        a.cache_dir,
        &[Split::Dev, Split::Enroll, Split::Eval],
        features,
        cfg,
    )?;
    let dev = set.subset(|u| m.find(&u.path).is_some_and(|e| e.split == Split::Dev));
    let test = set.subset(|u| m.find(&u.path).is_some_and(|e| e.split != Split::Dev));
    let trials = trial_list(a.trials, &m)?;
    let rows = eval::duration_sweep(a.durations, |d| -> anyhow::Result<_> {
        let dir = a.out.join(format!("duration_{d}"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let model_path = match a.system {
            System::Lstm => {
                let mut model = initial_model::<T>(cfg)?;
                let pre = TrainConfig {
                    crop_duration_s: d,
                    ..cfg.pretrain
                };
                let fine = TrainConfig {
                    crop_duration_s: d,
                    ..cfg.finetune
                };
                let mut logs = training::pretrain(&mut model, &dev, &pre)?;
                logs.extend(training::finetune(&mut model, &dev, &fine)?);
                let path = dir.join(CHECKPOINT_FILE);
                checkpoint::save(
                    &path,
                    &model,
                    &cfg.features.digest(),
                    &metadata(cfg, Phase::Finetune, &fine),
                )?;
                write(&dir.join(TRAIN_LOG_FILE), log_csv(&logs))?;
                path
            }
            System::Gmm => {
                let fit = gmm::train_ubm(&pooled_frames(&dev, Some(d))?, &cfg.gmm.ubm)?;
                let path = dir.join(UBM_FILE);
                gmm::save(&path, &fit.model, &features.digest())?;
                path
            }
        };
        let r = protocol(cfg, a.system, &model_path, &m, &test, &trials, d)?;
        report_skipped(&r);
        write(&dir.join(SCORES_FILE), scores_csv(&r.scores))?;
        Ok(r.eer)
    })?;
    let csv = sweep_csv(&rows);
    write(&a.out.join(SWEEP_FILE), &csv)?;
    print!("{csv}");
    Ok(failures)
}

pub fn train_ubm<T: Scalar>(
    cfg: &RunConfig,
    manifest: &Path,
    cache_dir: Option<&Path>,
    out: &Path,
) -> anyhow::Result<Failures> {
    cfg.echo(out)?;
    let (_, set, failures) = load::<T>(manifest, cache_dir, &[Split::Dev], cfg.gmm.features, cfg)?;
    let frames = pooled_frames(&set, cfg.gmm.window_s)?;
    let fit = gmm::train_ubm(&frames, &cfg.gmm.ubm)?;
    gmm::save(out.join(UBM_FILE), &fit.model, &cfg.gmm.features.digest())?;
    println!(
        "trained {}-component UBM on {} frames: mean log-likelihood {} after {} EM iterations{}",
        fit.model.num_components(),
        frames.nrows(),
        fit.log_likelihoods.last().copied().unwrap_or(f64::NAN),
        fit.log_likelihoods.len().saturating_sub(1),
        if fit.reseeded { " (re-seeded once)" } else { "" }
    );
    Ok(failures)
}

pub fn adapt_speaker<T: Scalar>(
    cfg: &RunConfig,
    ubm: &Path,
    manifest: &Path,
    cache_dir: Option<&Path>,
    speaker: &str,
    out: &Path,
) -> anyhow::Result<Failures> {
    cfg.echo(out)?;
    let ubm = load_gmm::<T>(ubm, &cfg.gmm.features)?;
    let (_, set, failures) = load::<T>(manifest, cache_dir, &[Split::Enroll], cfg.gmm.features, cfg)?;
    let utts = speaker_utterances(&set, speaker);
    if utts.is_empty() {
        return Err(CliError::UnknownSpeaker(speaker.to_string(), manifest.to_path_buf()).into());
    }
    let sys = GmmSystem {
        ubm: &ubm,
        map: cfg.gmm.map,
    };
    let model = sv_core::eval::ScoringSystem::enroll(&sys, speaker, &utts, &set, cfg.eval.duration_s)?;
    let path = out.join(format!("{speaker}.gmm"));
    gmm::save(&path, &model, &cfg.gmm.features.digest())?;
    println!("adapted {} from {} utterances", path.display(), utts.len());
    Ok(failures)
}

pub fn synth_corpus(cfg: &RunConfig, out: &Path) -> anyhow::Result<Failures> {
    let corpus = sv_core::synth::generate(out, &cfg.synth)?;
    cfg.echo(out)?;
    println!(
        "wrote {} utterances, manifest {}, trials {} ({} trials)",
        corpus.manifest.entries.len(),
        corpus.manifest_path.display(),
        corpus.trials_path.display(),
        corpus.trials.len()
    );
    Ok(0)
}
