//! Run configuration: a TOML file with one section per module, overridden
//! by command-line flags and echoed into every output directory.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sv_core::{FeatureConfig, MapConfig, SynthConfig, TrainConfig, UbmConfig, VadConfig};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub hidden_dim: usize,
    pub num_layers: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            hidden_dim: 300,
            num_layers: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Length of enrollment windows and test windows.
    pub duration_s: f64,
    pub normalize_dvector: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            duration_s: 1.0,
            normalize_dvector: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmSection {
    /// When set, the UBM is trained on back-to-back windows of this length
    /// instead of whole utterances.
    pub window_s: Option<f64>,
    pub features: FeatureConfig,
    pub ubm: UbmConfig,
    pub map: MapConfig,
}

impl Default for GmmSection {
    fn default() -> Self {
        Self {
            window_s: None,
            features: FeatureConfig::mfcc(),
            ubm: UbmConfig::default(),
            map: MapConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives model initialization and every training stream.
    pub seed: Option<u64>,
    pub precision: Precision,
    /// Speakers whose id starts with this are eval speakers, the rest dev;
    /// explicit enroll lines are kept.
    pub eval_prefix: Option<String>,
    pub features: FeatureConfig,
    pub vad: VadConfig,
    pub network: NetworkSection,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalSection,
    pub gmm: GmmSection,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            precision: Precision::F64,
            eval_prefix: None,
            features: FeatureConfig::default(),
            vad: VadConfig::default(),
            network: NetworkSection::default(),
            pretrain: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                learning_rate: 0.0025,
                ..TrainConfig::default()
            },
            eval: EvalSection::default(),
            gmm: GmmSection::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Picks the seed (flag, then config file, then `SV_SEED`, then 0) and
    /// copies it into every section that draws random numbers.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> anyhow::Result<u64> {
        let env = env
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .with_context(|| format!("SV_SEED={s:?} is not an integer"))
            })
            .transpose()?;
        let seed = flag.or(self.seed).or(env).unwrap_or(0);
        self.seed = Some(seed);
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.gmm.ubm.seed = seed;
        Ok(seed)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the resolved config, headed by the tool version.
    pub fn echo(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = format!("# sv {}\n{}", env!("CARGO_PKG_VERSION"), self.to_toml()?);
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.resolve_seed(Some(3), None).unwrap();
        cfg.gmm.window_s = Some(1.0);
        cfg.finetune.th0 = f64::INFINITY;
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[pretrain]\nlearning_rat = 0.1").is_err());
        let cfg: RunConfig = toml::from_str("[network]\nhidden_dim = 8").unwrap();
        assert_eq!(cfg.network.hidden_dim, 8);
        assert_eq!(cfg.network.num_layers, 2);
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolve_seed(None, Some("9")).unwrap(), 9);
        assert_eq!(cfg.gmm.ubm.seed, 9);
        let mut cfg = RunConfig {
            seed: Some(4),
            ..RunConfig::default()
        };
        assert_eq!(cfg.resolve_seed(None, Some("9")).unwrap(), 4);
        assert_eq!(cfg.resolve_seed(Some(5), Some("9")).unwrap(), 5);
        assert!(RunConfig::default().resolve_seed(None, Some("x")).is_err());
        assert_eq!(RunConfig::default().resolve_seed(None, None).unwrap(), 0);
    }
}
