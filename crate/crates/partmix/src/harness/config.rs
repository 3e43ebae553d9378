//! Experiment configuration: JSON in, validated, hashed, resolved back out.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

fn err(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub num_parts: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { feat_dim: 16, num_parts: 6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    /// Part slots replaced per mixed sample (B).
    pub num_mixed_parts: usize,
    /// Candidate pool caps before mining (U, Q).
    pub pos_pool_cap: usize,
    pub neg_pool_cap: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig { num_mixed_parts: 2, pos_pool_cap: 16, neg_pool_cap: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    /// U′ and Q′.
    pub num_positives: usize,
    pub num_negatives: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { num_positives: 2, num_negatives: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub center_margin: f64,
    pub lambda_sid: f64,
    pub lambda_ml: f64,
    pub lambda_aid: f64,
    pub lambda_cont: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        LossConfig {
            temperature: 0.1,
            center_margin: 1.0,
            lambda_sid: w.lambda_sid,
            lambda_ml: w.lambda_ml,
            lambda_aid: w.lambda_aid,
            lambda_cont: w.lambda_cont,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_sid: self.lambda_sid,
            lambda_ml: self.lambda_ml,
            lambda_aid: self.lambda_aid,
            lambda_cont: self.lambda_cont,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    /// Epochs (1-based, counted from warm-up start) after which the rate is
    /// multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub ema_momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 3.5e-4,
            decay_epochs: vec![25, 35],
            decay_factor: 0.1,
            ema_momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { warmup_epochs: 5, total_epochs: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub identities_per_batch: usize,
    pub images_per_identity: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig { identities_per_batch: 16, images_per_identity: 8 }
    }
}

/// The closed set of training regularizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    Partmix,
    PartmixNoMining,
    IntraOnly,
    InterOnly,
    Mixup,
    ManifoldMixup,
    Cutmix,
}

impl Default for Regularizer {
    fn default() -> Self {
        Regularizer::None
    }
}

impl Regularizer {
    pub const ALL: [Regularizer; 8] = [
        Regularizer::None,
        Regularizer::Partmix,
        Regularizer::PartmixNoMining,
        Regularizer::IntraOnly,
        Regularizer::InterOnly,
        Regularizer::Mixup,
        Regularizer::ManifoldMixup,
        Regularizer::Cutmix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Partmix => "partmix",
            Regularizer::PartmixNoMining => "partmix_no_mining",
            Regularizer::IntraOnly => "intra_only",
            Regularizer::InterOnly => "inter_only",
            Regularizer::Mixup => "mixup",
            Regularizer::ManifoldMixup => "manifold_mixup",
            Regularizer::Cutmix => "cutmix",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Regularizer::ALL
            .into_iter()
            .find(|r| r.name() == name)
            .ok_or_else(|| err("regularizer", format!("unknown regularizer `{name}`")))
    }

    /// PartMix-family regularizers synthesize descriptor-space samples.
    pub fn uses_part_mixing(self) -> bool {
        matches!(
            self,
            Regularizer::Partmix
                | Regularizer::PartmixNoMining
                | Regularizer::IntraOnly
                | Regularizer::InterOnly
        )
    }
}

pub const CONFIG_VERSION: u32 = 1;

/// Everything one run needs. Unknown JSON keys are rejected; missing
/// sections fall back to desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub mix: MixConfig,
    #[serde(default)]
    pub mining: MiningConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub batch: BatchConfig,
    #[serde(default)]
    pub regularizer: Regularizer,
    #[serde(default)]
    pub persist_dataset: bool,
    #[serde(default)]
    pub dataset_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            mix: MixConfig::default(),
            mining: MiningConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            batch: BatchConfig::default(),
            regularizer: Regularizer::default(),
            persist_dataset: false,
            dataset_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| err("<root>", format!("failed to parse config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(err("version", format!("expected {CONFIG_VERSION}, got {}", self.version)));
        }
        self.dataset.validate()?;
        if self.model.feat_dim < 1 {
            return Err(err("model.feat_dim", "must be at least 1"));
        }
        if self.model.num_parts < 1 {
            return Err(err("model.num_parts", "must be at least 1"));
        }
        if self.mix.num_mixed_parts > self.model.num_parts {
            return Err(err(
                "mix.num_mixed_parts",
                format!(
                    "B = {} exceeds the part count M = {}",
                    self.mix.num_mixed_parts, self.model.num_parts
                ),
            ));
        }
        if self.mix.pos_pool_cap < 1 || self.mix.neg_pool_cap < 1 {
            return Err(err("mix.pos_pool_cap", "pool caps must be at least 1"));
        }
        if self.mining.num_positives < 1 || self.mining.num_negatives < 1 {
            return Err(err("mining.num_positives", "mining quotas must be at least 1"));
        }
        if self.loss.temperature <= 0.0 || !self.loss.temperature.is_finite() {
            return Err(err("loss.temperature", "must be positive"));
        }
        if self.loss.center_margin < 0.0 || !self.loss.center_margin.is_finite() {
            return Err(err("loss.center_margin", "must be finite and non-negative"));
        }
        self.loss.weights().validate()?;
        if self.optim.learning_rate <= 0.0 || !self.optim.learning_rate.is_finite() {
            return Err(err("optim.learning_rate", "must be positive"));
        }
        if !(0.0 < self.optim.decay_factor && self.optim.decay_factor <= 1.0) {
            return Err(err("optim.decay_factor", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.optim.ema_momentum) {
            return Err(err("optim.ema_momentum", "must lie in [0, 1)"));
        }
        if self.schedule.warmup_epochs > self.schedule.total_epochs {
            return Err(err(
                "schedule.warmup_epochs",
                format!(
                    "warm-up {} exceeds total {}",
                    self.schedule.warmup_epochs, self.schedule.total_epochs
                ),
            ));
        }
        if self.batch.identities_per_batch < 1 {
            return Err(err("batch.identities_per_batch", "must be at least 1"));
        }
        if self.batch.images_per_identity < 2 || self.batch.images_per_identity % 2 != 0 {
            return Err(err("batch.images_per_identity", "must be even and at least 2"));
        }
        if self.batch.identities_per_batch > self.dataset.num_train_ids {
            return Err(err(
                "batch.identities_per_batch",
                "cannot exceed the number of training identities",
            ));
        }
        if self.batch.images_per_identity / 2 > self.dataset.images_per_id_per_modality {
            return Err(err(
                "batch.images_per_identity",
                "needs more images per identity per modality than the dataset holds",
            ));
        }
        Ok(())
    }

    /// SHA-256 of the resolved JSON form, stable across round-trips.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"version": 1, "bogus_key": true}"#;
        assert!(ExperimentConfig::from_json(json).is_err());
    }

    #[test]
    fn missing_version_rejected() {
        assert!(ExperimentConfig::from_json("{}").is_err());
    }

    #[test]
    fn field_paths_in_errors() {
        let mut config = ExperimentConfig::default();
        config.schedule.warmup_epochs = 99;
        match config.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "schedule.warmup_epochs"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn b_bounded_by_m() {
        let mut config = ExperimentConfig::default();
        config.mix.num_mixed_parts = 7;
        assert!(config.validate().is_err());
    }

    #[test]
    fn hash_stable_across_roundtrip() {
        let config = ExperimentConfig::default();
        let reparsed = ExperimentConfig::from_json(&config.to_json()).unwrap();
        assert_eq!(config.hash(), reparsed.hash());
        assert_eq!(config, reparsed);
    }

    #[test]
    fn hash_sensitive_to_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn regularizer_names_roundtrip() {
        for r in Regularizer::ALL {
            assert_eq!(Regularizer::parse(r.name()).unwrap(), r);
        }
        assert!(Regularizer::parse("dropout").is_err());
        let parsed: Regularizer = serde_json::from_str("\"partmix_no_mining\"").unwrap();
        assert_eq!(parsed, Regularizer::PartmixNoMining);
    }
}
