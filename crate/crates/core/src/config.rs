//! Run configuration: environment geometry, reward weights, PPO
//! hyperparameters, and the root seed from which all random streams derive.
//!
//! Configs are loaded from JSON. Unknown keys are rejected so typos in
//! ablation sweeps fail loudly, and missing required fields produce a schema
//! error naming the field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Geometry and timing of synthetic duplex episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Number of distinct source symbols.
    pub source_vocab: usize,
    /// Extra target symbols usable as second tokens of two-token
    /// translations. Target vocabulary size is `source_vocab + tail_vocab`.
    pub tail_vocab: usize,
    /// Inclusive range of semantic units per episode.
    pub units_min: usize,
    pub units_max: usize,
    /// Inclusive range of source tokens per unit.
    pub unit_tokens_min: usize,
    pub unit_tokens_max: usize,
    /// Source tokens per chunk. Units may straddle chunk boundaries, which
    /// is what makes the wait/emit decision nontrivial.
    pub chunk_tokens: usize,
    /// Synthetic duration of one source token, seconds.
    pub source_token_secs: f64,
    /// Synthetic duration of one emitted target token, seconds.
    pub target_token_secs: f64,
    /// Seed of the shared symbol-to-translation table.
    pub lexicon_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            source_vocab: 10,
            tail_vocab: 4,
            units_min: 2,
            units_max: 5,
            unit_tokens_min: 2,
            unit_tokens_max: 5,
            chunk_tokens: 2,
            source_token_secs: 0.25,
            target_token_secs: 0.2,
            lexicon_seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn target_vocab(&self) -> usize {
        self.source_vocab + self.tail_vocab
    }

    pub fn source_token_ms(&self) -> u64 {
        secs_to_ms(self.source_token_secs)
    }

    pub fn target_token_ms(&self) -> u64 {
        secs_to_ms(self.target_token_secs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_vocab == 0 {
            return Err(Error::Config("env.source_vocab must be positive".into()));
        }
        if self.chunk_tokens == 0 {
            return Err(Error::Config("env.chunk_tokens must be positive".into()));
        }
        if self.units_min == 0 || self.units_min > self.units_max {
            return Err(Error::Config(format!(
                "env.units range [{}, {}] is invalid",
                self.units_min, self.units_max
            )));
        }
        if self.unit_tokens_min == 0 || self.unit_tokens_min > self.unit_tokens_max {
            return Err(Error::Config(format!(
                "env.unit_tokens range [{}, {}] is invalid",
                self.unit_tokens_min, self.unit_tokens_max
            )));
        }
        for (name, secs) in [
            ("env.source_token_secs", self.source_token_secs),
            ("env.target_token_secs", self.target_token_secs),
        ] {
            if !(secs > 0.0) || !secs.is_finite() {
                return Err(Error::Config(format!("{name} must be a positive number")));
            }
            let ms = secs * 1000.0;
            if (ms - ms.round()).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "{name} must be a whole number of milliseconds, got {secs}"
                )));
            }
        }
        Ok(())
    }
}

fn secs_to_ms(secs: f64) -> u64 {
    (secs * 1000.0).round() as u64
}

/// Where the sequence-level reward lands on the token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiTurnPlacement {
    /// Whole sequence reward on the final token of the final chunk.
    Terminal,
    /// Sequence reward divided evenly over every sampled token.
    Spread,
}

/// Which reward streams the second training stage feeds the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTwoStreams {
    /// Per-chunk streams plus the sequence-level stream.
    Combined,
    /// Sequence-level stream only.
    MultiOnly,
}

/// Weights and constants of the reward system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Weight of the listen/detection reward (applies when the reference is
    /// silent at a chunk).
    pub w_listen: f64,
    /// Weight of the speak/initiative reward.
    pub w_speak: f64,
    /// Weight of the per-chunk translation quality reward.
    pub w_quality: f64,
    /// Weight of the time-compliance reward.
    pub w_compliance: f64,
    /// Weight of the format-consistency reward.
    pub w_format: f64,
    /// Weight of the sequence-level lagging reward.
    pub w_lagging: f64,
    /// Weight of the sequence-level quality reward.
    pub w_seq_quality: f64,
    /// Slope constant of the time-compliance penalty; must be positive.
    pub compliance_slope: f64,
    /// Maximum acceptable mean wait, in chunks; the lagging reward never
    /// rewards waiting less than this.
    pub lagging_floor: f64,
    /// Regex an emission's serialized form must match for the format reward.
    pub pattern: String,
    /// Streams with standard deviation at or below this are centered only.
    pub normalization_epsilon: f64,
    /// Placement of the sequence-level reward on the token grid.
    pub multi_turn_placement: MultiTurnPlacement,
}

/// Serialized form of an empty (listening) emission.
pub const WAIT_MARKER: &str = "\u{27e8}wait\u{27e9}";
/// Opening marker of a non-empty emission.
pub const EMIT_OPEN_MARKER: &str = "\u{27e8}emit\u{27e9}";
/// Closing marker of a non-empty emission.
pub const EMIT_CLOSE_MARKER: &str = "\u{27e8}/emit\u{27e9}";

/// Default pattern: exactly a wait marker, or an emit span with at least one
/// token between the markers.
pub fn default_emission_pattern() -> String {
    format!(r"^(?:{WAIT_MARKER}|{EMIT_OPEN_MARKER}(?: \S+)+ {EMIT_CLOSE_MARKER})$")
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_listen: 1.0,
            w_speak: 0.3,
            w_quality: 1.0,
            w_compliance: 0.3,
            w_format: 0.2,
            w_lagging: 1.0,
            w_seq_quality: 2.0,
            compliance_slope: 1.0,
            lagging_floor: 0.25,
            pattern: default_emission_pattern(),
            normalization_epsilon: 1e-8,
            multi_turn_placement: MultiTurnPlacement::Terminal,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("rewards.w_listen", self.w_listen),
            ("rewards.w_speak", self.w_speak),
            ("rewards.w_quality", self.w_quality),
            ("rewards.w_compliance", self.w_compliance),
            ("rewards.w_format", self.w_format),
            ("rewards.w_lagging", self.w_lagging),
            ("rewards.w_seq_quality", self.w_seq_quality),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {w}"
                )));
            }
        }
        if !(self.compliance_slope > 0.0) {
            return Err(Error::Config(
                "rewards.compliance_slope must be positive".into(),
            ));
        }
        if !(self.lagging_floor > 0.0) {
            return Err(Error::Config(
                "rewards.lagging_floor must be positive".into(),
            ));
        }
        if !(self.normalization_epsilon > 0.0) {
            return Err(Error::Config(
                "rewards.normalization_epsilon must be positive".into(),
            ));
        }
        regex::Regex::new(&self.pattern)
            .map_err(|e| Error::Config(format!("rewards.pattern does not compile: {e}")))?;
        Ok(())
    }

    pub fn compiled_pattern(&self) -> Result<regex::Regex> {
        regex::Regex::new(&self.pattern)
            .map_err(|e| Error::Config(format!("rewards.pattern does not compile: {e}")))
    }
}

/// Policy architecture and warm-start schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Width of the shared hidden layer.
    pub hidden_width: usize,
    /// Cap on sampled actions per chunk, including markers. Emissions
    /// truncated by the cap lack a closing marker and fail the format check.
    pub max_emission_len: usize,
    /// Half-width of the uniform weight initialization.
    pub init_scale: f64,
    /// Full-batch optimizer steps of likelihood training on reference
    /// trajectories before any reinforcement learning.
    pub warm_start_steps: usize,
    /// Episodes in the warm-start training set.
    pub warm_start_episodes: usize,
    pub warm_start_learning_rate: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden_width: 24,
            max_emission_len: 12,
            init_scale: 0.1,
            warm_start_steps: 700,
            warm_start_episodes: 48,
            warm_start_learning_rate: 0.01,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::Config("policy.hidden_width must be positive".into()));
        }
        if self.max_emission_len == 0 {
            return Err(Error::Config(
                "policy.max_emission_len must be positive".into(),
            ));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::Config("policy.init_scale must be positive".into()));
        }
        if self.warm_start_episodes == 0 {
            return Err(Error::Config(
                "policy.warm_start_episodes must be positive".into(),
            ));
        }
        if !(self.warm_start_learning_rate > 0.0) {
            return Err(Error::Config(
                "policy.warm_start_learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// PPO optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    /// Discount over the flattened token sequence, in (0, 1].
    pub gamma: f64,
    /// GAE mixing parameter, in [0, 1].
    pub gae_lambda: f64,
    /// Surrogate clip radius, positive.
    pub clip_epsilon: f64,
    /// Initial KL penalty coefficient.
    pub beta_init: f64,
    /// Proportional gain of the KL controller; 0 disables adaptation.
    pub beta_gain: f64,
    /// Target per-token KL divergence from the reference policy.
    pub kl_target: f64,
    pub learning_rate: f64,
    /// Gradient passes over each collected batch.
    pub epochs_per_batch: usize,
    /// Episodes per rollout batch; at least 2 so streams can be normalized.
    pub episodes_per_batch: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Weight of the squared-error value loss in the combined objective.
    pub value_loss_weight: f64,
    /// Optional global gradient-norm clip; absent means no clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Reward streams used by stage 2.
    pub stage_two_streams: StageTwoStreams,
    /// Greedy evaluation on the validation set every this many steps.
    pub eval_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            beta_init: 0.05,
            beta_gain: 0.1,
            kl_target: 0.05,
            learning_rate: 0.003,
            epochs_per_batch: 4,
            episodes_per_batch: 16,
            stage1_steps: 150,
            stage2_steps: 300,
            value_loss_weight: 0.5,
            grad_clip: None,
            stage_two_streams: StageTwoStreams::Combined,
            eval_every: 1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("ppo.gamma must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("ppo.gae_lambda must lie in [0, 1]".into()));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::Config("ppo.clip_epsilon must be positive".into()));
        }
        if !(self.beta_init >= 0.0) || !self.beta_init.is_finite() {
            return Err(Error::Config("ppo.beta_init must be non-negative".into()));
        }
        if !(self.beta_gain >= 0.0) || !self.beta_gain.is_finite() {
            return Err(Error::Config("ppo.beta_gain must be non-negative".into()));
        }
        if !(self.kl_target > 0.0) {
            return Err(Error::Config("ppo.kl_target must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("ppo.learning_rate must be positive".into()));
        }
        if self.epochs_per_batch == 0 {
            return Err(Error::Config("ppo.epochs_per_batch must be positive".into()));
        }
        if self.episodes_per_batch < 2 {
            return Err(Error::Config(
                "ppo.episodes_per_batch must be at least 2 (reward normalization)".into(),
            ));
        }
        if !(self.value_loss_weight >= 0.0) {
            return Err(Error::Config(
                "ppo.value_loss_weight must be non-negative".into(),
            ));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) {
                return Err(Error::Config("ppo.grad_clip must be positive".into()));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::Config("ppo.eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Ablation suite selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    RewardHack,
    TwoStage,
}

impl std::str::FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reward_hack" => Ok(AblationSuite::RewardHack),
            "two_stage" => Ok(AblationSuite::TwoStage),
            other => Err(Error::Config(format!(
                "unknown ablation suite '{other}' (expected reward_hack or two_stage)"
            ))),
        }
    }
}

/// Ablation runner settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Update steps per arm.
    pub arm_steps: usize,
    /// Episodes in the shared held-out evaluation set.
    pub eval_episodes: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            arm_steps: 300,
            eval_episodes: 64,
        }
    }
}

/// Top-level run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every random stream is a named substream of it.
    pub seed: u64,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub rewards: RewardConfig,
    pub ppo: PpoConfig,
    /// Fixed validation set size for per-step evaluation.
    pub validation_episodes: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub ablation: Option<AblationConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvConfig::default(),
            policy: PolicyConfig::default(),
            rewards: RewardConfig::default(),
            ppo: PpoConfig::default(),
            validation_episodes: 16,
            out_dir: None,
            ablation: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.policy.validate()?;
        self.rewards.validate()?;
        self.ppo.validate()?;
        if self.validation_episodes == 0 {
            return Err(Error::Config("validation_episodes must be positive".into()));
        }
        if let Some(ab) = &self.ablation {
            if ab.eval_episodes == 0 {
                return Err(Error::Config("ablation.eval_episodes must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of the canonical serialized config, for the reproducibility
    /// manifest.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Named random substreams derived from one root seed. Substreams keep
/// ablation arms and pipeline phases independent: changing how many draws
/// one phase makes never perturbs another.
pub fn substream_seed(root: u64, label: &str, index: u64) -> u64 {
    // FNV-1a over the label, then splitmix64 finalization over the mix.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = root ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_zero_vocab() {
        let mut cfg = RunConfig::default();
        cfg.env.source_vocab = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_zero_chunk_len() {
        let mut cfg = RunConfig::default();
        cfg.env.chunk_tokens = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_unknown_keys() {
        let mut v: serde_json::Value =
            serde_json::to_value(RunConfig::default()).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("tpyo".into(), serde_json::json!(1));
        let err = serde_json::from_value::<RunConfig>(v).unwrap_err();
        assert!(err.to_string().contains("tpyo"));
    }

    #[test]
    fn missing_field_error_names_the_field() {
        let err = serde_json::from_str::<RunConfig>("{\"seed\": 3}").unwrap_err();
        assert!(err.to_string().contains("env"), "got: {err}");
    }

    #[test]
    fn substreams_differ_by_label_and_index() {
        let a = substream_seed(7, "rollout", 0);
        let b = substream_seed(7, "rollout", 1);
        let c = substream_seed(7, "init", 0);
        let d = substream_seed(8, "rollout", 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a, substream_seed(7, "rollout", 0));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.content_hash(), cfg.content_hash());
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(cfg.content_hash(), other.content_hash());
    }

    #[test]
    fn default_pattern_compiles() {
        RewardConfig::default().compiled_pattern().unwrap();
    }
}
