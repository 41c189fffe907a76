mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sv_core::{Scalar, TrainConfig};

use commands::{EvaluateArgs, Failures, SweepArgs, System, VerifyTarget};
use config::{Precision, RunConfig};

#[derive(Parser)]
#[command(
    name = "sv",
    version,
    about = "Text-independent speaker verification with a siamese LSTM"
)]
struct Cli {
    /// TOML run config; unknown keys are rejected.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Falls back to the config file, then SV_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Manifest speakers with this id prefix become eval speakers, the
    /// rest dev.
    #[arg(long, global = true, value_name = "PREFIX")]
    eval_prefix: Option<String>,
    /// Read features from this cache directory instead of audio.
    #[arg(long, global = true, value_name = "DIR")]
    feature_cache: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    th0: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    no_pair_selection: bool,
    #[arg(long)]
    no_batchnorm: bool,
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.th0 {
            t.th0 = v;
        }
        if let Some(v) = self.margin {
            t.contrastive.margin = v;
        }
        if let Some(v) = self.lambda {
            t.contrastive.lambda = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            t.momentum = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if self.no_pair_selection {
            t.pair_selection = false;
        }
        if self.no_batchnorm {
            t.batchnorm = false;
        }
    }
}

#[derive(Args)]
struct EvalFlags {
    /// Enrollment and test window length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// L2-normalize embeddings before averaging and scoring.
    #[arg(long)]
    normalize_dvector: bool,
}

impl EvalFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = self.duration {
            cfg.eval.duration_s = d;
        }
        if self.normalize_dvector {
            cfg.eval.normalize_dvector = true;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write one feature cache file per manifest entry.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "lstm")]
        system: System,
    },
    /// Softmax pretraining on the dev split.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training crop length in seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Siamese fine-tuning of a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        duration: Option<f64>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Build d-vectors for enroll-split speakers.
    Enroll {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        speaker: Option<String>,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Score one test file against one claimed speaker.
    Verify {
        #[arg(long, value_enum, default_value = "lstm")]
        system: System,
        /// LSTM checkpoint, or the UBM for `--system gmm`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// d-vectors written by `enroll`.
        #[arg(long, required_if_eq("system", "lstm"))]
        speakers: Option<PathBuf>,
        #[arg(long, required_if_eq("system", "lstm"))]
        speaker: Option<String>,
        /// Adapted model written by `adapt-speaker`.
        #[arg(long, required_if_eq("system", "gmm"))]
        speaker_model: Option<PathBuf>,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        threshold: f64,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Run a trial list and report the equal error rate.
    Evaluate {
        #[arg(long, value_enum, default_value = "lstm")]
        system: System,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to every enrolled speaker against every eval utterance.
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Train and evaluate at each duration; writes `duration_s,eer`.
    SweepDuration {
        #[arg(long, value_enum, default_value = "lstm")]
        system: System,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        durations: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        normalize_dvector: bool,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train the GMM universal background model on the dev split.
    TrainUbm {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        components: Option<usize>,
        /// Train on back-to-back windows of this many seconds.
        #[arg(long)]
        window: Option<f64>,
    },
    /// MAP-adapt the UBM to one enroll-split speaker.
    AdaptSpeaker {
        #[arg(long)]
        ubm: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        speaker: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        relevance: Option<f64>,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Generate the synthetic multi-speaker corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run<T: Scalar>(cli: &Cli, mut cfg: RunConfig) -> anyhow::Result<Failures> {
    let cache = cli.feature_cache.as_deref();
    match &cli.command {
        Command::Extract { manifest, out, system } => commands::extract::<T>(&cfg, manifest, out, *system),
        Command::Pretrain {
            manifest,
            out,
            duration,
            train,
        } => {
            train.apply(&mut cfg.pretrain);
            if let Some(d) = duration {
                cfg.pretrain.crop_duration_s = *d;
            }
            commands::pretrain::<T>(&cfg, manifest, cache, out)
        }
        Command::Finetune {
            manifest,
            checkpoint,
            out,
            duration,
            train,
        } => {
            train.apply(&mut cfg.finetune);
            if let Some(d) = duration {
                cfg.finetune.crop_duration_s = *d;
            }
            commands::finetune::<T>(&cfg, manifest, cache, checkpoint, out)
        }
        Command::Enroll {
            manifest,
            checkpoint,
            out,
            speaker,
            eval,
        } => {
            eval.apply(&mut cfg);
            commands::enroll::<T>(&cfg, manifest, cache, checkpoint, speaker.as_deref(), out)
        }
        Command::Verify {
            system,
            checkpoint,
            speakers,
            speaker,
            speaker_model,
            wav,
            threshold,
            eval,
        } => {
            eval.apply(&mut cfg);
            let target = match system {
                System::Lstm => VerifyTarget::Lstm {
                    checkpoint,
                    speakers: speakers.as_deref().expect("required by clap"),
                    speaker: speaker.as_deref().expect("required by clap"),
                },
                System::Gmm => VerifyTarget::Gmm {
                    ubm: checkpoint,
                    speaker_model: speaker_model.as_deref().expect("required by clap"),
                },
            };
            commands::verify::<T>(&cfg, target, wav, *threshold)
        }
        Command::Evaluate {
            system,
            checkpoint,
            manifest,
            trials,
            out,
            eval,
        } => {
            eval.apply(&mut cfg);
            commands::evaluate::<T>(
                &cfg,
                EvaluateArgs {
                    system: *system,
                    model: checkpoint,
                    manifest,
                    trials: trials.as_deref(),
                    cache_dir: cache,
                    out,
                },
            )
        }
        Command::SweepDuration {
            system,
            manifest,
            trials,
            durations,
            out,
            normalize_dvector,
            train,
        } => {
            train.apply(&mut cfg.pretrain);
            train.apply(&mut cfg.finetune);
            cfg.eval.normalize_dvector |= normalize_dvector;
            commands::sweep_duration::<T>(
                &cfg,
                SweepArgs {
                    system: *system,
                    manifest,
                    trials: trials.as_deref(),
                    cache_dir: cache,
                    durations,
                    out,
                },
            )
        }
        Command::TrainUbm {
            manifest,
            out,
            components,
            window,
        } => {
            if let Some(k) = components {
                cfg.gmm.ubm.num_components = *k;
            }
            if window.is_some() {
                cfg.gmm.window_s = *window;
            }
            commands::train_ubm::<T>(&cfg, manifest, cache, out)
        }
        Command::AdaptSpeaker {
            ubm,
            manifest,
            speaker,
            out,
            relevance,
            eval,
        } => {
            eval.apply(&mut cfg);
            if let Some(r) = relevance {
                cfg.gmm.map.relevance_factor = *r;
            }
            commands::adapt_speaker::<T>(&cfg, ubm, manifest, cache, speaker, out)
        }
        Command::SynthCorpus { out } => {
            if let Some(s) = cli.seed {
                cfg.synth.seed = s;
            }
            commands::synth_corpus(&cfg, out)
        }
    }
}

fn main_inner(cli: &Cli) -> anyhow::Result<Failures> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    if cli.eval_prefix.is_some() {
        cfg.eval_prefix.clone_from(&cli.eval_prefix);
    }
    let env = std::env::var("SV_SEED").ok();
    cfg.resolve_seed(cli.seed, env.as_deref())?;
    match cfg.precision {
        Precision::F32 => run::<f32>(cli, cfg),
        Precision::F64 => run::<f64>(cli, cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} item(s) failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
