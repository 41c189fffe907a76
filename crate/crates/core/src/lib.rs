//! Text-independent speaker verification.
//!
//! The pipeline: 16 kHz PCM audio is trimmed by an energy VAD, turned into
//! normalized log mel filterbank windows (100 frames x 40 coefficients per
//! second), embedded by a two-layer LSTM trunk, and compared as d-vectors.
//! The trunk is pretrained with a softmax speaker classifier and fine-tuned
//! as a siamese network with a contrastive loss, using a distance threshold
//! to drop impostor pairs that are already far outside the genuine range.
//! A GMM-UBM system with MAP-adapted speaker models is included as a
//! baseline, and everything is scored by equal error rate.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the element type.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod audio;
pub mod corpus;
pub mod eval;
pub mod features;
pub mod gmm;
pub mod network;
mod scalar;
pub mod synth;
pub mod training;

pub use scalar::Scalar;

pub use audio::{apply_vad, load_wav, resolve_manifest, write_wav, Manifest, Split, VadConfig, Waveform};
pub use eval::{compute_eer, EerResult};
pub use features::{extract_window, FeatureConfig, FeatureMode};
pub use gmm::{MapConfig, UbmConfig};
pub use network::{ContrastiveConfig, LstmConfig, Mode};
pub use synth::SynthConfig;
pub use training::TrainConfig;

pub type FeatureWindow32 = features::FeatureWindow<f32>;
pub type FeatureWindow64 = features::FeatureWindow<f64>;
pub type LstmModel32 = network::LstmModel<f32>;
pub type LstmModel64 = network::LstmModel<f64>;
pub type GmmModel32 = gmm::GmmModel<f32>;
pub type GmmModel64 = gmm::GmmModel<f64>;
pub type SpeakerModel32 = eval::SpeakerModel<f32>;
pub type SpeakerModel64 = eval::SpeakerModel<f64>;

/// Sample rate every waveform in a run must share.
pub const SAMPLE_RATE: u32 = 16_000;
