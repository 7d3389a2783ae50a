//! Experiment configuration, read from a versioned TOML file.
//!
//! ```toml
//! version = 1
//! seed = 1
//! output_dir = "runs/lenet"
//! phases = ["baseline", "ssl", "compact", "finetune"]
//!
//! [network]
//! preset = "lenet"            # or: input_shape = [1, 28, 28] plus [[network.layers]]
//!
//! [dataset]
//! format = "mnist"            # or "cifar10"
//! path = "data/mnist"
//! train_limit = 10000         # optional: first N samples only
//!
//! [train]                     # baseline phase
//! learning_rate = 0.01
//! momentum = 0.9
//! weight_decay = 0.0005
//! batch_size = 64
//! epochs = 5
//! lr_schedule = [[3, 0.1]]    # from zero-based epoch 3 on, rate × 0.1
//!
//! [ssl_train]                 # optional; defaults to [train]
//! [finetune]                  # optional; defaults to [train]
//!
//! [ssl]
//! zero_threshold = 1e-4
//! [[ssl.schemes]]
//! kind = "filter_wise"
//! strength = 0.003
//! layers = "default"          # all | conv | fc | { named = ["conv1"] }
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sslkit_core::network::{presets, LayerSpec, Shape3, TrainConfig};
use sslkit_core::ssl::SslConfig;

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Baseline,
    Ssl,
    Compact,
    Finetune,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Baseline, Phase::Ssl, Phase::Compact, Phase::Finetune];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Ssl => "ssl",
            Phase::Compact => "compact",
            Phase::Finetune => "finetune",
        }
    }

    pub fn previous(self) -> Option<Phase> {
        match self {
            Phase::Baseline => None,
            Phase::Ssl => Some(Phase::Baseline),
            Phase::Compact => Some(Phase::Ssl),
            Phase::Finetune => Some(Phase::Compact),
        }
    }

    pub fn checkpoint_name(self) -> String {
        format!("{}.ckpt", self.as_str())
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Shape3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
}

impl NetworkConfig {
    pub fn preset(name: &str) -> Self {
        Self {
            preset: Some(name.into()),
            ..Self::default()
        }
    }

    pub fn resolve(&self) -> Result<(Shape3, Vec<LayerSpec>)> {
        match (&self.preset, &self.layers) {
            (Some(name), None) => {
                if self.input_shape.is_some() {
                    return Err(CliError::Config("network: input_shape only applies to explicit layers".into()));
                }
                presets::by_name(name).ok_or_else(|| {
                    CliError::Config(format!(
                        "network: unknown preset {name:?} (lenet, mlp, mini-resnet, convnet)"
                    ))
                })
            }
            (None, Some(layers)) => {
                let shape = self
                    .input_shape
                    .ok_or_else(|| CliError::Config("network: explicit layers need input_shape".into()))?;
                Ok((shape, layers.clone()))
            }
            _ => Err(CliError::Config("network: give exactly one of preset or layers".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Mnist,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub format: DatasetFormat,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub phases: Vec<Phase>,
    pub network: NetworkConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssl_train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssl: Option<SslConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.phases.is_empty() {
            return Err(CliError::Config("phases must not be empty".into()));
        }
        if self.phases.windows(2).any(|p| p[0] >= p[1]) {
            return Err(CliError::Config(
                "phases must be in order baseline < ssl < compact < finetune, each at most once".into(),
            ));
        }
        let needs_ssl = self.phases.iter().any(|p| matches!(p, Phase::Ssl | Phase::Compact));
        match &self.ssl {
            Some(ssl) => ssl.validate()?,
            None if needs_ssl => {
                return Err(CliError::Config("the ssl and compact phases need an [ssl] section".into()))
            }
            None => {}
        }
        for (what, t) in [
            ("train", Some(&self.train)),
            ("ssl_train", self.ssl_train.as_ref()),
            ("finetune", self.finetune.as_ref()),
        ] {
            if let Some(t) = t {
                t.validate().map_err(|e| CliError::Config(format!("{what}: {e}")))?;
            }
        }
        self.network.resolve()?;
        Ok(())
    }

    pub fn phase_train(&self, phase: Phase) -> &TrainConfig {
        match phase {
            Phase::Ssl => self.ssl_train.as_ref().unwrap_or(&self.train),
            Phase::Finetune => self.finetune.as_ref().unwrap_or(&self.train),
            _ => &self.train,
        }
    }

    pub fn ssl_config(&self) -> Result<&SslConfig> {
        self.ssl
            .as_ref()
            .ok_or_else(|| CliError::Config("this phase needs an [ssl] section".into()))
    }

    /// Identifies everything that determines the checkpoint `phase` writes.
    pub fn fingerprint(&self, phase: Phase) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            phase: Phase,
            seed: u64,
            network: &'a NetworkConfig,
            dataset: &'a DatasetConfig,
            train: &'a TrainConfig,
            #[serde(skip_serializing_if = "Option::is_none")]
            ssl_train: Option<&'a TrainConfig>,
            #[serde(skip_serializing_if = "Option::is_none")]
            finetune: Option<&'a TrainConfig>,
            #[serde(skip_serializing_if = "Option::is_none")]
            ssl: Option<&'a SslConfig>,
        }
        let key = Key {
            phase,
            seed: self.seed,
            network: &self.network,
            dataset: &self.dataset,
            train: &self.train,
            ssl_train: (phase >= Phase::Ssl).then(|| self.phase_train(Phase::Ssl)),
            finetune: (phase >= Phase::Finetune).then(|| self.phase_train(Phase::Finetune)),
            ssl: if phase >= Phase::Ssl { self.ssl.as_ref() } else { None },
        };
        let text = toml::to_string(&key).expect("fingerprint key serializes");
        format!("{:016x}", fnv1a(text.as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}
