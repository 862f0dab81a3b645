use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::hksl::HierarchyConfig;
use crate::models::ModelDims;
use crate::sac::SacConfig;

/// Study variants. Exactly one is active per run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// No representation loss; the critic ensemble stays.
    NoRepr,
    /// Every level skips one step.
    AllN1,
    /// No communication managers.
    NoC,
    /// One encoder shared by all levels.
    SharedEncoder,
    /// A single level with skip 1.
    H1,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoRepr,
        Ablation::AllN1,
        Ablation::NoC,
        Ablation::SharedEncoder,
        Ablation::H1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoRepr => "no_repr",
            Ablation::AllN1 => "all_n1",
            Ablation::NoC => "no_c",
            Ablation::SharedEncoder => "shared_encoder",
            Ablation::H1 => "h1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Agent steps (environment interactions).
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Random-action steps before the first update.
    pub initial_steps: u64,
    pub batch_size: usize,
    /// Replay capacity in transitions.
    pub replay_capacity: usize,
    /// Replicate padding used by the crop augmentation.
    pub image_pad: usize,
    pub ablation: Ablation,
    pub env: EnvConfig,
    pub hierarchy: HierarchyConfig,
    pub model: ModelDims,
    pub sac: SacConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 10_000,
            eval_every: 1_000,
            eval_episodes: 10,
            initial_steps: 500,
            batch_size: 32,
            replay_capacity: 20_000,
            image_pad: 4,
            ablation: Ablation::Full,
            env: EnvConfig::default(),
            hierarchy: HierarchyConfig::default(),
            model: ModelDims::default(),
            sac: SacConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.hierarchy.validate()?;
        self.model.validate()?;
        self.sac.validate()?;
        if self.total_steps == 0 || self.eval_every == 0 || !self.total_steps.is_multiple_of(self.eval_every) {
            return Err(Error::Config(format!(
                "eval_every ({}) must be positive and divide total_steps ({})",
                self.eval_every, self.total_steps
            )));
        }
        if self.eval_episodes == 0 || self.batch_size == 0 {
            return Err(Error::Config("eval_episodes and batch_size must be positive".into()));
        }
        if self.image_pad >= self.env.grid {
            return Err(Error::Config("image_pad must be smaller than the frame side".into()));
        }
        if self.model.grid != self.env.grid {
            return Err(Error::Config(format!(
                "model.grid ({}) must equal env.grid ({})",
                self.model.grid, self.env.grid
            )));
        }
        if self.model.action_dim != self.env.action_dim() {
            return Err(Error::Config(format!(
                "model.action_dim must be {}",
                self.env.action_dim()
            )));
        }
        if self.model.channels != 3 * crate::envs::FRAME_STACK {
            return Err(Error::Config(format!(
                "model.channels must be {}",
                3 * crate::envs::FRAME_STACK
            )));
        }
        if self.env.episode_length <= self.hierarchy.k {
            return Err(Error::Config(format!(
                "episode_length ({}) must exceed the trajectory length k ({})",
                self.env.episode_length, self.hierarchy.k
            )));
        }
        let h = &self.hierarchy;
        let switches = [
            self.ablation != Ablation::Full,
            h.no_c,
            h.shared_encoder,
            h.all_n1,
        ];
        if switches.iter().filter(|s| **s).count() > 1 {
            return Err(Error::Config(
                "ablation switches are mutually exclusive: set at most one of ablation, \
                 hierarchy.no_c, hierarchy.shared_encoder, hierarchy.all_n1"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Hierarchy after applying the ablation.
    pub fn effective_hierarchy(&self) -> HierarchyConfig {
        let mut h = self.hierarchy.clone();
        match self.ablation {
            Ablation::Full | Ablation::NoRepr => {}
            Ablation::AllN1 => h.all_n1 = true,
            Ablation::NoC => h.no_c = true,
            Ablation::SharedEncoder => h.shared_encoder = true,
            Ablation::H1 => h.n = vec![1],
        }
        h
    }

    /// Whether the representation loss is optimized.
    pub fn representation_loss(&self) -> bool {
        self.ablation != Ablation::NoRepr
    }

    /// Hex SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
