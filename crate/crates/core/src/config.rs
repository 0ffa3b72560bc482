//! Flat TOML run configuration with defaults and `DUALTEACH_*` environment
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{check_masking_order, AugmentationSpec};
use crate::corpus::SyntheticSpec;
use crate::encoder::{EncoderConfig, MlmConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::MseDivisor;
use crate::optim::AdamWConfig;
use crate::pipeline::{ScoringConfig, SelectionMetric, StrategyKind, TrainingConfig};
use crate::seed::{derive_seed, tags};

pub const ENV_PREFIX: &str = "DUALTEACH_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub strategy: StrategyKind,

    pub data: DataSource,
    /// Manifest of a JSONL dataset; required when `data = "jsonl"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_manifest: Option<PathBuf>,
    pub synthetic_labeled: usize,
    pub synthetic_unlabeled: usize,
    pub synthetic_dev: usize,
    pub synthetic_test: usize,
    pub synthetic_classes: usize,
    pub synthetic_vocab: usize,
    pub synthetic_annotators: usize,
    pub synthetic_noise: f64,
    pub synthetic_keyword_rate: f64,
    pub synthetic_confusion_rate: f64,

    pub rho_u: f64,
    pub rho_l: f64,
    pub k: usize,

    pub beta_ce: f64,
    pub beta_scl: f64,
    pub beta_mse: f64,
    pub tau: f64,
    pub normalize_embeddings: bool,
    pub hard_label_ce: bool,

    pub gamma: f64,
    pub alpha: f64,
    pub iterations: usize,

    pub teacher_epochs: usize,
    pub masked_epochs: usize,
    pub teacher_batch_size: usize,
    pub teacher_lr: f64,
    pub student_epochs: usize,
    pub student_batch_size: usize,
    pub student_lr: f64,
    pub weight_decay: f64,
    pub selection_metric: SelectionMetric,
    pub student_head_from_gold: bool,

    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_min_count: usize,

    pub pretrain_epochs: usize,
    pub pretrain_mask_prob: f64,
    pub pretrain_batch_size: usize,
    pub pretrain_lr: f64,

    pub mse_divisor: MseDivisor,
    /// Worker threads; 0 uses the rayon default.
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 13,
            strategy: StrategyKind::Ours,
            data: DataSource::Synthetic,
            data_manifest: None,
            synthetic_labeled: 1000,
            synthetic_unlabeled: 3000,
            synthetic_dev: 300,
            synthetic_test: 300,
            synthetic_classes: 3,
            synthetic_vocab: 300,
            synthetic_annotators: 15,
            synthetic_noise: 0.25,
            synthetic_keyword_rate: 0.2,
            synthetic_confusion_rate: 0.1,
            rho_u: 0.15,
            rho_l: 0.25,
            k: 6,
            beta_ce: 1e-2,
            beta_scl: 1e-3,
            beta_mse: 1.0,
            tau: 1.0,
            normalize_embeddings: false,
            hard_label_ce: false,
            gamma: 0.5,
            alpha: 0.5,
            iterations: 5,
            teacher_epochs: 10,
            masked_epochs: 5,
            teacher_batch_size: 16,
            teacher_lr: 1e-3,
            student_epochs: 5,
            student_batch_size: 128,
            student_lr: 1e-3,
            weight_decay: 0.01,
            selection_metric: SelectionMetric::Accuracy,
            student_head_from_gold: false,
            hidden: 64,
            layers: 2,
            heads: 2,
            ffn: 128,
            max_len: 256,
            vocab_min_count: 1,
            pretrain_epochs: 0,
            pretrain_mask_prob: 0.15,
            pretrain_batch_size: 32,
            pretrain_lr: 1e-3,
            mse_divisor: MseDivisor::Classes,
            threads: 0,
        }
    }
}

/// Keys accepted in a config file, in declaration order.
pub fn known_keys() -> Vec<String> {
    let config = PipelineConfig {
        data_manifest: Some(PathBuf::new()),
        ..PipelineConfig::default()
    };
    match toml::Table::try_from(&config) {
        Ok(table) => table.keys().cloned().collect(),
        Err(_) => Vec::new(),
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.data == DataSource::Jsonl && self.data_manifest.is_none() {
            return fail("missing required key `data_manifest` for data = \"jsonl\"");
        }
        if self.data == DataSource::Synthetic {
            self.synthetic_spec().validate()?;
            if self.synthetic_labeled == 0 || self.synthetic_dev == 0 {
                return fail("synthetic_labeled and synthetic_dev must be positive");
            }
        }
        for (name, rho) in [("rho_u", self.rho_u), ("rho_l", self.rho_l)] {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Config(format!("{name} must lie in [0,1]")));
            }
        }
        if self.k < 1 {
            return fail("k must be at least 1");
        }
        self.loss_weights().validate()?;
        self.scoring().validate()?;
        self.teacher_training(self.teacher_epochs).validate()?;
        self.student_training().validate()?;
        if self.student_epochs < 1 {
            return fail("student_epochs must be at least 1");
        }
        self.encoder_config(100).validate()?;
        if !(0.0..=1.0).contains(&self.pretrain_mask_prob) {
            return fail("pretrain_mask_prob must lie in [0,1]");
        }
        if self.pretrain_batch_size < 1 || self.pretrain_lr <= 0.0 {
            return fail("pretrain_batch_size and pretrain_lr must be positive");
        }
        Ok(())
    }

    /// Non-fatal configuration issues.
    pub fn warnings(&self) -> Vec<String> {
        check_masking_order(self.rho_l, self.rho_u).into_iter().collect()
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_instances: self.synthetic_labeled,
            n_unlabeled: self.synthetic_unlabeled,
            n_dev: self.synthetic_dev,
            n_test: self.synthetic_test,
            n_classes: self.synthetic_classes,
            vocab_size: self.synthetic_vocab,
            annotators_per_instance: self.synthetic_annotators,
            annotator_noise: self.synthetic_noise,
            keyword_rate: self.synthetic_keyword_rate,
            confusion_rate: self.synthetic_confusion_rate,
            seed: derive_seed(self.seed, tags::DATA),
        }
    }

    pub fn unlabeled_augmentation(&self) -> AugmentationSpec {
        AugmentationSpec {
            replacement_prob: self.rho_u,
            copies_per_instance: self.k,
            seed: derive_seed(self.seed, tags::AUGMENT_UNLABELED),
        }
    }

    pub fn labeled_augmentation(&self) -> AugmentationSpec {
        AugmentationSpec {
            replacement_prob: self.rho_l,
            copies_per_instance: self.k,
            seed: derive_seed(self.seed, tags::AUGMENT_LABELED),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta_ce: self.beta_ce,
            beta_scl: self.beta_scl,
            beta_mse: self.beta_mse,
            tau: self.tau,
            normalize_embeddings: self.normalize_embeddings,
            hard_label_ce: self.hard_label_ce,
        }
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            gamma: self.gamma,
            alpha: self.alpha,
            iterations: self.iterations,
        }
    }

    pub fn teacher_training(&self, epochs: usize) -> TrainingConfig {
        TrainingConfig {
            epochs,
            batch_size: self.teacher_batch_size,
            learning_rate: self.teacher_lr,
            weight_decay: self.weight_decay,
            selection: self.selection_metric,
        }
    }

    pub fn student_training(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.student_epochs,
            batch_size: self.student_batch_size,
            learning_rate: self.student_lr,
            weight_decay: self.weight_decay,
            selection: self.selection_metric,
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_len: self.max_len,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
        }
    }

    pub fn mlm_config(&self) -> MlmConfig {
        MlmConfig {
            epochs: self.pretrain_epochs,
            mask_prob: self.pretrain_mask_prob,
            batch_size: self.pretrain_batch_size,
            optimizer: AdamWConfig::new(self.pretrain_lr, self.weight_decay),
            seed: derive_seed(self.seed, tags::PRETRAIN),
        }
    }

    /// TOML snapshot that reproduces this configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses config text, applying overrides from `env` for every known key
/// (`DUALTEACH_GAMMA=0.7` overrides `gamma`).
pub fn parse_config_with_env(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<PipelineConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    for key in known_keys() {
        let var = format!("{ENV_PREFIX}{}", key.to_uppercase());
        if let Some(raw) = env(&var) {
            table.insert(key.clone(), env_value(&raw));
        }
    }
    let config: PipelineConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Environment values are read as TOML literals, falling back to strings.
fn env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn parse_config_str(text: &str) -> Result<PipelineConfig> {
    parse_config_with_env(text, |_| None)
}

/// Reads a config file with overrides from the process environment.
pub fn parse_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    parse_config_with_env(&text, |k| std::env::var(k).ok())
}
