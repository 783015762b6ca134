//! TOML configuration shared by the CLI and the examples.
//!
//! ```toml
//! [channel]
//! bandwidth_hz = 180e3
//! tx_power_dbm = 23.0
//!
//! [reputation]
//! sigma = 0.5
//!
//! [policy]
//! embed_dim = 128
//!
//! [train]
//! epochs = 10
//! lr_schedule = { kind = "decay", lr = 1e-3, factor = 0.96 }
//!
//! [experiment]
//! miner_counts = [9, 19]
//! ```
//!
//! Every section and field is optional. Decibel quantities carry `_db` or
//! `_dbm` suffixes and are converted to linear units once, on load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiment::ExperimentSpec;
use crate::network::{ChannelConfig, ChannelParams};
use crate::policy::PolicyConfig;
use crate::reputation::ReputationParams;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub channel: ChannelConfig,
    pub reputation: ReputationParams,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSpec,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            channel: ChannelConfig::default(),
            reputation: ReputationParams::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::desk(),
            experiment: ExperimentSpec::default(),
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Config::from_toml_str(&text)
    }

    /// Loads `path` if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Config::default()), Config::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.to_params()?;
        self.reputation.validate()?;
        self.policy.validate()?;
        self.train_config().validate()?;
        self.experiment.validate()
    }

    pub fn channel_params(&self) -> Result<ChannelParams> {
        self.channel.to_params()
    }

    /// Training settings with the shared policy and reputation sections.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            sigma: self.reputation.sigma,
            policy: self.policy.clone(),
            reputation: self.reputation,
            ..self.train.clone()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.experiment.seed = seed;
        self
    }

    /// Short content hash of the effective configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        short_hash(&json)
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Short hash of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(short_hash(&std::fs::read(path)?))
}
