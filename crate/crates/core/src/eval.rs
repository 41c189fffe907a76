//! Enrollment by averaging embeddings, trial scoring, equal error rate and
//! the utterance-duration sweep.

use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{Manifest, Split};
use crate::corpus::{leading_window, tiled_windows, Utterance, UtteranceSet};
use crate::features::{FeatureError, FeatureWindow};
use crate::gmm::{llr_score, map_adapt, GmmError, GmmModel, MapConfig};
use crate::network::{LstmModel, NetworkError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("score lists must both be nonempty (targets {targets}, nontargets {nontargets})")]
    EmptyScoreList { targets: usize, nontargets: usize },
    #[error("no enrollment data for speaker {0}")]
    NoEnrollmentData(String),
    #[error("claimed speaker {0} has no enrollment utterances")]
    MissingEnrollment(String),
    #[error("test utterance {0} is not in the loaded set")]
    UnknownUtterance(PathBuf),
    #[error("{source_name}:{line}: {reason}")]
    TrialParse {
        source_name: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A d-vector: the mean embedding of a speaker's enrollment segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerModel<T> {
    pub speaker_id: String,
    pub dvector: Array1<T>,
    pub num_enroll_utterances: usize,
    /// Whether embeddings were L2-normalized before averaging.
    #[serde(default)]
    pub normalized: bool,
}

fn l2_normalize<T: Scalar>(v: Array1<T>) -> Array1<T> {
    let n = v.dot(&v).sqrt();
    if n > T::zero() {
        v / n
    } else {
        v
    }
}

/// Averages the embeddings of `windows`. With `normalize`, each embedding
/// is scaled to unit length first.
pub fn enroll<T: Scalar>(
    model: &LstmModel<T>,
    windows: &[FeatureWindow<T>],
    speaker_id: &str,
    normalize: bool,
) -> Result<SpeakerModel<T>, EvalError> {
    if windows.is_empty() {
        return Err(EvalError::NoEnrollmentData(speaker_id.to_string()));
    }
    let mut sum = Array1::zeros(model.config().hidden_dim);
    for chunk in windows.chunks(256) {
        let refs: Vec<&FeatureWindow<T>> = chunk.iter().collect();
        for e in model.embed_batch(&refs)?.rows() {
            let e = e.to_owned();
            sum += &if normalize { l2_normalize(e) } else { e };
        }
    }
    Ok(SpeakerModel {
        speaker_id: speaker_id.to_string(),
        dvector: sum / T::of_usize(windows.len()),
        num_enroll_utterances: windows.len(),
        normalized: normalize,
    })
}

/// Negative Euclidean distance between an embedding and a d-vector.
pub fn score_embedding<T: Scalar>(speaker: &SpeakerModel<T>, embedding: &Array1<T>) -> T {
    let e = if speaker.normalized {
        l2_normalize(embedding.clone())
    } else {
        embedding.clone()
    };
    let d = &e - &speaker.dvector;
    -d.dot(&d).sqrt()
}

pub fn score<T: Scalar>(
    model: &LstmModel<T>,
    speaker: &SpeakerModel<T>,
    test: &FeatureWindow<T>,
) -> Result<T, EvalError> {
    let e = model.embed(test)?;
    if e.len() != speaker.dvector.len() {
        return Err(NetworkError::ShapeMismatch {
            expected: format!("d-vector of {}", e.len()),
            found: format!("{}", speaker.dvector.len()),
        }
        .into());
    }
    Ok(score_embedding(speaker, &e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    /// Threshold at which FRR first reaches FAR (the largest score when
    /// that happens only above every score).
    pub threshold: f64,
    pub num_target: usize,
    pub num_nontarget: usize,
}

/// Equal error rate. Thresholds sweep the sorted unique scores plus
/// infinity; a score equal to the threshold is accepted. The crossing is
/// linearly interpolated between the last point with FRR < FAR and the
/// first with FRR >= FAR.
pub fn compute_eer(targets: &[f64], nontargets: &[f64]) -> Result<EerResult, EvalError> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(EvalError::EmptyScoreList {
            targets: targets.len(),
            nontargets: nontargets.len(),
        });
    }
    let mut tgt = targets.to_vec();
    let mut non = nontargets.to_vec();
    tgt.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = tgt.iter().chain(&non).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all.push(f64::INFINITY);

    let nt = tgt.len() as i128;
    let nn = non.len() as i128;
    // m: targets below t (rejected); a: nontargets below t
    let (mut m, mut a) = (0usize, 0usize);
    let mut prev: Option<(i128, i128, f64)> = None;
    for &t in &all {
        while m < tgt.len() && tgt[m] < t {
            m += 1;
        }
        while a < non.len() && non[a] < t {
            a += 1;
        }
        let m_i = m as i128;
        let n_i = nn - a as i128; // accepted nontargets
                                  // sign of FRR - FAR, scaled by nt * nn
        let d = m_i * nn - n_i * nt;
        if d >= 0 {
            let (eer, threshold) = match prev {
                None => (m_i as f64 / nt as f64, t),
                Some((m_p, d_p, t_p)) => {
                    // FRR at the crossing: (m_p d_c - m_c d_p) / (nt (d_c - d_p))
                    let num = m_p * d - m_i * d_p;
                    let den = nt * (d - d_p);
                    (num as f64 / den as f64, if t.is_finite() { t } else { t_p })
                }
            };
            return Ok(EerResult {
                eer,
                threshold,
                num_target: tgt.len(),
                num_nontarget: non.len(),
            });
        }
        prev = Some((m_i, d, t));
    }
    unreachable!("FRR reaches 1 at the infinite threshold")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Target,
    Nontarget,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub claimed_speaker: String,
    pub test_path: PathBuf,
    pub label: Label,
}

/// Parses `claimed_speaker<TAB>test_path<TAB>target|nontarget` lines.
/// Relative paths are resolved against `base`.
pub fn parse_trials(text: &str, source_name: &str, base: &Path) -> Result<Vec<Trial>, EvalError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| EvalError::TrialParse {
            source_name: source_name.to_string(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let label = match fields[2] {
            "target" => Label::Target,
            "nontarget" => Label::Nontarget,
            other => return Err(err(format!("unknown label {other:?}"))),
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(err("empty field".into()));
        }
        let p = Path::new(fields[1]);
        out.push(Trial {
            claimed_speaker: fields[0].to_string(),
            test_path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            label,
        });
    }
    Ok(out)
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>, EvalError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_trials(&text, &path.display().to_string(), base)
}

pub fn trials_to_text(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        let _ = writeln!(out, "{}\t{}\t{}", t.claimed_speaker, t.test_path.display(), t.label);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub claimed_speaker: String,
    pub test_path: PathBuf,
    pub score: f64,
    pub label: Label,
}

pub fn scores_csv(scores: &[TrialScore]) -> String {
    let mut out = String::from("claimed_speaker,test_path,score,label\n");
    for s in scores {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            s.claimed_speaker,
            s.test_path.display(),
            s.score,
            s.label
        );
    }
    out
}

/// A verification system: builds speaker models from enrollment
/// utterances and scores test utterances against them.
pub trait ScoringSystem<T: Scalar>: Sync {
    type Model: Send + Sync;

    fn enroll(
        &self,
        speaker: &str,
        utterances: &[&Utterance<T>],
        set: &UtteranceSet<T>,
        duration_s: f64,
    ) -> Result<Self::Model, EvalError>;

    fn score(
        &self,
        model: &Self::Model,
        test: &Utterance<T>,
        set: &UtteranceSet<T>,
        duration_s: f64,
    ) -> Result<f64, EvalError>;
}

/// Enrollment windows: every utterance is cut into back-to-back windows of
/// the evaluation duration; utterances shorter than one window are skipped.
pub fn enrollment_windows<T: Scalar>(
    utterances: &[&Utterance<T>],
    set: &UtteranceSet<T>,
    duration_s: f64,
) -> Result<Vec<FeatureWindow<T>>, EvalError> {
    let frames = set.frames_for(duration_s);
    let mut out = Vec::new();
    for u in utterances {
        match tiled_windows(u, duration_s, set.sample_rate, frames) {
            Ok(ws) => out.extend(ws),
            Err(FeatureError::UtteranceTooShort { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// The LSTM d-vector system; tests are scored on their leading window.
pub struct LstmSystem<'a, T> {
    pub model: &'a LstmModel<T>,
    pub normalize: bool,
}

impl<T: Scalar> ScoringSystem<T> for LstmSystem<'_, T> {
    type Model = SpeakerModel<T>;

    fn enroll(
        &self,
        speaker: &str,
        utterances: &[&Utterance<T>],
        set: &UtteranceSet<T>,
        duration_s: f64,
    ) -> Result<SpeakerModel<T>, EvalError> {
        let windows = enrollment_windows(utterances, set, duration_s)?;
        enroll(self.model, &windows, speaker, self.normalize)
    }

    fn score(
        &self,
        model: &SpeakerModel<T>,
        test: &Utterance<T>,
        set: &UtteranceSet<T>,
        duration_s: f64,
    ) -> Result<f64, EvalError> {
        let w = leading_window(test, duration_s, set.sample_rate, set.frames_for(duration_s))?;
        Ok(score(self.model, model, &w)?.to_f64_lossy())
    }
}

/// The GMM-UBM system: speaker models are MAP-adapted on the enrollment
/// windows' frames and tests scored by average LLR over the leading window.
pub struct GmmSystem<'a, T> {
    pub ubm: &'a GmmModel<T>,
    pub map: MapConfig,
}

impl<T: Scalar> ScoringSystem<T> for GmmSystem<'_, T> {
    type Model = GmmModel<T>;

    fn enroll(
        &self,
        speaker: &str,
        utterances: &[&Utterance<T>],
        set: &UtteranceSet<T>,
        duration_s: f64,
    ) -> Result<GmmModel<T>, EvalError> {
        let windows = enrollment_windows(utterances, set, duration_s)?;
        if windows.is_empty() {
            return Err(EvalError::NoEnrollmentData(speaker.to_string()));
        }
        let views: Vec<_> = windows.iter().map(|w| w.values.view()).collect();
        let frames = ndarray::concatenate(ndarray::Axis(0), &views).expect("matching width");
        Ok(map_adapt(self.ubm, &frames, &self.map)?)
    }

    fn score(
        &self,
        model: &GmmModel<T>,
        test: &Utterance<T>,
        set: &UtteranceSet<T>,
        duration_s: f64,
    ) -> Result<f64, EvalError> {
        let w = leading_window(test, duration_s, set.sample_rate, set.frames_for(duration_s))?;
        Ok(llr_score(self.ubm, model, &w.values)?.to_f64_lossy())
    }
}

#[derive(Debug, Clone)]
pub struct SkippedTrial {
    pub trial: Trial,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ProtocolResult {
    pub eer: EerResult,
    /// Scored trials, in trial-list order.
    pub scores: Vec<TrialScore>,
    pub skipped: Vec<SkippedTrial>,
}

fn lexical(p: &Path) -> Vec<Component<'_>> {
    p.components().filter(|c| !matches!(c, Component::CurDir)).collect()
}

fn find_utterance<'a, T: Scalar>(set: &'a UtteranceSet<T>, path: &Path) -> Option<&'a Utterance<T>> {
    set.find(path)
        .or_else(|| set.utterances.iter().find(|u| lexical(&u.path) == lexical(path)))
}

/// Enrolls every claimed speaker from the manifest's enroll split, scores
/// each trial at `duration_s`, and computes the EER. Trials whose test
/// utterance is missing or too short are skipped and reported.
pub fn evaluate_protocol<T: Scalar, S: ScoringSystem<T>>(
    system: &S,
    set: &UtteranceSet<T>,
    manifest: &Manifest,
    trials: &[Trial],
    duration_s: f64,
) -> Result<ProtocolResult, EvalError> {
    let mut speakers: Vec<&str> = Vec::new();
    for t in trials {
        if !speakers.contains(&t.claimed_speaker.as_str()) {
            speakers.push(&t.claimed_speaker);
        }
    }
    let models = speakers
        .par_iter()
        .map(|&spk| {
            let utts: Vec<&Utterance<T>> = manifest
                .split(Split::Enroll)
                .filter(|e| e.speaker_id == spk)
                .filter_map(|e| find_utterance(set, &e.path))
                .collect();
            if utts.is_empty() {
                return Err(EvalError::MissingEnrollment(spk.to_string()));
            }
            system.enroll(spk, &utts, set, duration_s)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let results: Vec<Result<f64, EvalError>> = trials
        .par_iter()
        .map(|t| {
            let idx = speakers
                .iter()
                .position(|s| *s == t.claimed_speaker)
                .expect("collected above");
            let utt =
                find_utterance(set, &t.test_path).ok_or_else(|| EvalError::UnknownUtterance(t.test_path.clone()))?;
            system.score(&models[idx], utt, set, duration_s)
        })
        .collect();

    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for (t, r) in trials.iter().zip(results) {
        match r {
            Ok(score) => scores.push(TrialScore {
                claimed_speaker: t.claimed_speaker.clone(),
                test_path: t.test_path.clone(),
                score,
                label: t.label,
            }),
            Err(e @ (EvalError::Feature(FeatureError::UtteranceTooShort { .. }) | EvalError::UnknownUtterance(_))) => {
                skipped.push(SkippedTrial {
                    trial: t.clone(),
                    reason: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        }
    }
    let pick = |l: Label| {
        scores
            .iter()
            .filter(|s| s.label == l)
            .map(|s| s.score)
            .collect::<Vec<_>>()
    };
    let eer = compute_eer(&pick(Label::Target), &pick(Label::Nontarget))?;
    Ok(ProtocolResult { eer, scores, skipped })
}

/// Every pairing of an enrolled speaker with every eval-split utterance.
pub fn exhaustive_trials(manifest: &Manifest) -> Vec<Trial> {
    let enrolled = manifest.speakers(Split::Enroll);
    let mut out = Vec::new();
    for spk in &enrolled {
        for e in manifest.split(Split::Eval) {
            out.push(Trial {
                claimed_speaker: spk.clone(),
                test_path: e.path.clone(),
                label: if &e.speaker_id == spk {
                    Label::Target
                } else {
                    Label::Nontarget
                },
            });
        }
    }
    out
}

/// Runs `run` once per duration and collects the EERs.
pub fn duration_sweep<E>(
    durations: &[f64],
    mut run: impl FnMut(f64) -> Result<EerResult, E>,
) -> Result<Vec<(f64, EerResult)>, E> {
    durations.iter().map(|&d| run(d).map(|r| (d, r))).collect()
}

pub fn sweep_csv(rows: &[(f64, EerResult)]) -> String {
    let mut out = String::from("duration_s,eer\n");
    for (d, r) in rows {
        let _ = writeln!(out, "{d},{}", r.eer);
    }
    out
}

/// Mean over dimensions of the per-dimension variance of embeddings of
/// several crops of one utterance.
pub fn crop_embedding_variance<T: Scalar>(model: &LstmModel<T>, crops: &[FeatureWindow<T>]) -> Result<f64, EvalError> {
    let refs: Vec<&FeatureWindow<T>> = crops.iter().collect();
    let e = model.embed_batch(&refs)?;
    let var = e.var_axis(ndarray::Axis(0), T::zero());
    Ok(var.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / var.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LstmConfig;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eer_basic_cases() {
        let r = compute_eer(&[1.0, 2.0, 3.0], &[-3.0, -2.0, -1.0]).unwrap();
        assert_eq!(r.eer.to_bits(), 0.0f64.to_bits());
        assert_eq!((r.num_target, r.num_nontarget), (3, 3));
        let r = compute_eer(&[0.1, 0.5, 0.5, 0.9], &[0.5, 0.9, 0.1, 0.5]).unwrap();
        assert_eq!(r.eer, 0.5);
        assert_eq!(compute_eer(&[1.0], &[0.0]).unwrap().eer, 0.0);
        assert_eq!(compute_eer(&[0.0], &[1.0]).unwrap().eer, 1.0);
        assert!(matches!(
            compute_eer(&[], &[1.0]),
            Err(EvalError::EmptyScoreList { .. })
        ));
    }

    #[test]
    fn eer_ties_count_as_accepts() {
        // one target and one nontarget, both 0.5: indistinguishable
        assert_eq!(compute_eer(&[0.5], &[0.5]).unwrap().eer, 0.5);
    }

    fn tiny() -> LstmModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        LstmModel::new(
            LstmConfig {
                input_dim: 3,
                hidden_dim: 4,
                num_layers: 2,
            },
            &mut rng,
        )
        .unwrap()
    }

    fn window(seed: u64) -> FeatureWindow<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        FeatureWindow {
            values: Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0)),
            duration_s: 0.06,
        }
    }

    #[test]
    fn enroll_is_the_mean() {
        let m = tiny();
        let (a, b) = (window(1), window(2));
        let one = enroll(&m, std::slice::from_ref(&a), "s", false).unwrap();
        assert_eq!(one.dvector, m.embed(&a).unwrap());
        let twice = enroll(&m, &[a.clone(), a.clone()], "s", false).unwrap();
        assert!(twice
            .dvector
            .iter()
            .zip(&one.dvector)
            .all(|(x, y)| (x - y).abs() < 1e-15));
        let both = enroll(&m, &[a.clone(), b.clone()], "s", false).unwrap();
        let expect = (m.embed(&a).unwrap() + m.embed(&b).unwrap()) / 2.0;
        assert!(both.dvector.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));
        let swapped = enroll(&m, &[b, a], "s", false).unwrap();
        assert!(both
            .dvector
            .iter()
            .zip(&swapped.dvector)
            .all(|(x, y)| (x - y).abs() < 1e-15));
        assert!(matches!(
            enroll(&m, &[], "s", false),
            Err(EvalError::NoEnrollmentData(_))
        ));
    }

    #[test]
    fn scores_are_negative_distances() {
        let m = tiny();
        let (a, b) = (window(4), window(5));
        let spk = enroll(&m, std::slice::from_ref(&a), "s", false).unwrap();
        assert_eq!(score(&m, &spk, &a).unwrap(), 0.0);
        let s = score(&m, &spk, &b).unwrap();
        assert!(s <= 0.0);
        let d = crate::network::pair_distance(&m, &a, &b).unwrap();
        assert!((s + d).abs() < 1e-12);
        let unit = enroll(&m, std::slice::from_ref(&a), "s", true).unwrap();
        assert!((unit.dvector.dot(&unit.dvector) - 1.0).abs() < 1e-12);
        assert!(score(&m, &unit, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn trial_file_parsing() {
        let text = "# comment\nA\tx/a.wav\ttarget\nB\t/abs/b.wav\tnontarget\n\n";
        let t = parse_trials(text, "t", Path::new("/base")).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].test_path, PathBuf::from("/base/x/a.wav"));
        assert_eq!(t[1].test_path, PathBuf::from("/abs/b.wav"));
        assert_eq!(t[1].label, Label::Nontarget);
        assert!(matches!(
            parse_trials("A\tb.wav\tmaybe\n", "t", Path::new(".")),
            Err(EvalError::TrialParse { line: 1, .. })
        ));
        assert!(parse_trials("A\tb.wav\n", "t", Path::new(".")).is_err());
        assert_eq!(parse_trials(&trials_to_text(&t), "t", Path::new("/")).unwrap(), t);
    }

    #[test]
    fn csv_outputs() {
        let s = vec![TrialScore {
            claimed_speaker: "A".into(),
            test_path: "a.wav".into(),
            score: -0.5,
            label: Label::Target,
        }];
        assert_eq!(
            scores_csv(&s),
            "claimed_speaker,test_path,score,label\nA,a.wav,-0.5,target\n"
        );
        let r = EerResult {
            eer: 0.25,
            threshold: 0.0,
            num_target: 1,
            num_nontarget: 1,
        };
        let rows = duration_sweep(&[1.0, 2.0], |_| Ok::<_, ()>(r)).unwrap();
        assert_eq!(sweep_csv(&rows), "duration_s,eer\n1,0.25\n2,0.25\n");
    }
}
