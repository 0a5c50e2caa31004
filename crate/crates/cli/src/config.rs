//! Run configuration: defaults, overlaid by an optional TOML file, overlaid
//! by command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stpretrain::losses::{LossWeights, DEFAULT_TEMPERATURE};
use stpretrain::scene::SceneConfig;
use stpretrain::train::{BatchConfig, ModelConfig, DEFAULT_LEARNING_RATE};
use stpretrain::vote::DEFAULT_SIGMA;

/// Seed of the scene used when `pretrain` is not given a scene directory.
pub const BUNDLED_SCENE_SEED: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub tau: f64,
    pub weights: LossWeights,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: DEFAULT_LEARNING_RATE,
            tau: DEFAULT_TEMPERATURE,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoteSection {
    pub sigma: f64,
}

impl Default for VoteSection {
    fn default() -> Self {
        Self { sigma: DEFAULT_SIGMA }
    }
}

/// Simulated per-point predictions written next to each generated frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionSection {
    /// Fraction of points whose predicted peak is a wrong class.
    pub noise: f64,
    /// Probability mass on the predicted class.
    pub confidence: f64,
}

impl Default for PredictionSection {
    fn default() -> Self {
        Self {
            noise: 0.2,
            confidence: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for parameter init and anything else random in the command.
    pub seed: u64,
    /// Seed of the generated scene.
    pub scene_seed: u64,
    pub scene: SceneConfig,
    pub batch: BatchConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub vote: VoteSection,
    pub predictions: PredictionSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scene_seed: BUNDLED_SCENE_SEED,
            scene: SceneConfig::default(),
            batch: BatchConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            vote: VoteSection::default(),
            predictions: PredictionSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Flags shared by several subcommands; `None` leaves the file/default value.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct Overrides {
    /// Random seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the synthetic scene
    #[arg(long)]
    pub scene_seed: Option<u64>,
    /// Number of scans in a generated scene
    #[arg(long)]
    pub frames: Option<usize>,
    /// Sweeps merged into the dense keyframe cloud
    #[arg(long)]
    pub sweeps: Option<usize>,
    /// Seconds between the keyframe and its temporal neighbors
    #[arg(long)]
    pub timespan: Option<f64>,
    /// Contrastive temperature
    #[arg(long)]
    pub tau: Option<f64>,
    /// Voting radius in meters
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Label-noise rate of simulated predictions
    #[arg(long)]
    pub score_noise: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.scene_seed {
            cfg.scene_seed = v;
        }
        if let Some(v) = self.frames {
            cfg.scene.frames = v;
        }
        if let Some(v) = self.sweeps {
            cfg.batch.sweeps = v;
        }
        if let Some(v) = self.timespan {
            cfg.batch.timespan = v;
        }
        if let Some(v) = self.tau {
            cfg.train.tau = v;
        }
        if let Some(v) = self.sigma {
            cfg.vote.sigma = v;
        }
        if let Some(v) = self.score_noise {
            cfg.predictions.noise = v;
        }
    }
}
