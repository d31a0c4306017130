//! Run configuration. One TOML file drives every subcommand; each section
//! maps to a struct below and omitted keys fall back to the defaults, so an
//! empty file is a valid full configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{WarpModelCfg, PYRAMID_LEVELS};
use crate::synth::SynthConfig;
use crate::types::LossWeights;
use crate::{Error, Result};

/// Name of the environment variable supplying a default seed when the
/// config file and command line leave it unset.
pub const SEED_ENV: &str = "TRYON_SEED";

/// How warping supervision treats the preserved region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Never truncate: every pixel is supervised.
    None,
    /// Always truncate: preserved pixels never carry gradient.
    Gt,
    /// Decide per sample from the measured style ratio.
    Dgt,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Gt => "gt",
            Strategy::Dgt => "dgt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Strategy::None),
            "gt" => Ok(Strategy::Gt),
            "dgt" => Ok(Strategy::Dgt),
            other => Err(Error::InvalidArg(format!(
                "unknown strategy {other:?} (expected none, gt, or dgt)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels per pyramid level, finest first.
    pub channels: [usize; PYRAMID_LEVELS],
    /// Hidden width of the flow and parsing heads.
    pub head_hidden: usize,
    pub corr_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let base = WarpModelCfg::default();
        ModelConfig {
            channels: base.channels,
            head_hidden: base.head_hidden,
            corr_radius: base.corr_radius,
        }
    }
}

impl ModelConfig {
    /// Expand to a full warp-model shape; `global` collapses the three
    /// per-part flows into a single shared one.
    pub fn warp_cfg(&self, global: bool) -> WarpModelCfg {
        WarpModelCfg {
            channels: self.channels,
            head_hidden: self.head_hidden,
            corr_radius: self.corr_radius,
            parts: if global { 1 } else { 3 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidArg("model.channels must all be >= 1".into()));
        }
        if self.head_hidden == 0 {
            return Err(Error::InvalidArg("model.head_hidden must be >= 1".into()));
        }
        if self.corr_radius == 0 {
            return Err(Error::InvalidArg("model.corr_radius must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer step budget for the warping stage.
    pub steps_warp: usize,
    /// Optimizer step budget for the generator stage.
    pub steps_gen: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays to zero on a cosine over the step budget.
    pub lr: f64,
    /// Gradient-norm clip ceiling.
    pub clip: f64,
    pub seed: u64,
    pub strategy: Strategy,
    /// Trailing fraction of the dataset held out for validation.
    pub val_fraction: f64,
    /// Run validation every this many steps (and once at the end).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps_warp: 15_000,
            steps_gen: 10_000,
            batch_size: 8,
            lr: 1e-4,
            clip: 10.0,
            seed: 7,
            strategy: Strategy::Dgt,
            val_fraction: 0.1,
            val_every: 2_500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArg("train.batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArg(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return Err(Error::InvalidArg(format!(
                "train.clip must be positive, got {}",
                self.clip
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArg(format!(
                "train.val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.val_every == 0 {
            return Err(Error::InvalidArg("train.val_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::format(origin.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::MissingFile(path.display().to_string()));
        }
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Seed from the environment, if set. A set-but-unparsable value is an
/// error rather than a silent fallback.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => parse_env_seed(&raw).map(Some),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::InvalidArg(format!("{SEED_ENV}: {e}"))),
    }
}

fn parse_env_seed(raw: &str) -> Result<u64> {
    raw.trim()
        .parse::<u64>()
        .map_err(|_| Error::InvalidArg(format!("{SEED_ENV} must be an unsigned integer, got {raw:?}")))
}
