//! The lab's configuration file: one TOML document with a section per
//! subsystem. Every key has a default, so partial files (or none at all)
//! work; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::prefix::Strategy;
use crate::attack::semantic::SearchParams;
use crate::harness::corpus::{PrefixCorpusSpec, SemanticCorpusSpec};
use crate::harness::experiment::{
    AnalyzerConfig, Defense, DefenseEvalConfig, PrefixExperimentConfig, Regime,
    SemanticExperimentConfig,
};
use crate::model::TemplateSpec;
use crate::node::{CacheMode, DefenseConfig, NodeConfig};
use crate::prefix_cache::PrefixCacheConfig;
use crate::semantic_cache::SemanticCacheConfig;
use crate::timing::TimingParams;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported config_version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeSection {
    pub cache_mode: CacheMode,
    pub rate_limit_rpm: u32,
}

impl Default for NodeSection {
    fn default() -> Self {
        NodeSection {
            cache_mode: CacheMode::Prefix,
            rate_limit_rpm: 5_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefixAttackSection {
    pub victims: usize,
    pub strategies: Vec<Strategy>,
    pub regimes: Vec<Regime>,
}

impl Default for PrefixAttackSection {
    fn default() -> Self {
        PrefixAttackSection {
            victims: 200,
            strategies: Strategy::ALL.to_vec(),
            regimes: vec![Regime::Ideal, Regime::All],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticAttackSection {
    pub victims_per_category: usize,
    pub probe_budgets: Vec<usize>,
    pub target_leaves: usize,
    pub classifier_reps: usize,
}

impl Default for SemanticAttackSection {
    fn default() -> Self {
        SemanticAttackSection {
            victims_per_category: 30,
            probe_budgets: vec![50, 200, 500],
            target_leaves: 13,
            classifier_reps: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseEvalSection {
    pub victims: usize,
    pub strategy: Strategy,
    pub defenses: Vec<Defense>,
    pub delay_sigma_multiplier: f64,
}

impl Default for DefenseEvalSection {
    fn default() -> Self {
        DefenseEvalSection {
            victims: 50,
            strategy: Strategy::NaiveBayes,
            defenses: Defense::ALL.to_vec(),
            delay_sigma_multiplier: 5.0,
        }
    }
}

/// The whole lab configuration. Sections map one-to-one onto subsystem
/// config structs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub config_version: ConfigVersion,
    pub seed: u64,
    pub experiment_id: String,
    pub node: NodeSection,
    pub prefix_cache: PrefixCacheConfig,
    pub semantic_cache: SemanticCacheConfig,
    pub timing: TimingParams,
    pub defenses: DefenseConfig,
    pub template: TemplateSpec,
    pub prefix_corpus: PrefixCorpusSpec,
    pub semantic_corpus: SemanticCorpusSpec,
    pub analyzer: AnalyzerConfig,
    pub prefix_attack: PrefixAttackSection,
    pub semantic_attack: SemanticAttackSection,
    pub defense_eval: DefenseEvalSection,
    pub search: SearchParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfigVersion(pub u32);

impl Default for ConfigVersion {
    fn default() -> Self {
        ConfigVersion(CONFIG_VERSION)
    }
}

impl LabConfig {
    pub fn from_toml(text: &str) -> Result<LabConfig, ConfigError> {
        let cfg: LabConfig = toml::from_str(text)?;
        if cfg.config_version.0 != CONFIG_VERSION {
            return Err(ConfigError::Version {
                found: cfg.config_version.0,
                expected: CONFIG_VERSION,
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<LabConfig, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Assembles the serving-node config for a given cache mode.
    pub fn node_config(&self, cache_mode: CacheMode) -> NodeConfig {
        NodeConfig {
            cache_mode,
            prefix: self.prefix_cache.clone(),
            semantic: self.semantic_cache.clone(),
            timing: self.timing,
            rate_limit_rpm: self.node.rate_limit_rpm,
            defenses: self.defenses,
            debug_enabled: false,
        }
    }

    pub fn prefix_experiment(&self) -> PrefixExperimentConfig {
        PrefixExperimentConfig {
            id: if self.experiment_id.is_empty() {
                "prefix".to_string()
            } else {
                self.experiment_id.clone()
            },
            seed: self.seed,
            victims: self.prefix_attack.victims,
            strategies: self.prefix_attack.strategies.clone(),
            regimes: self.prefix_attack.regimes.clone(),
            corpus: self.prefix_corpus.clone(),
            template: self.template.clone(),
            node: self.node_config(CacheMode::Prefix),
            analyzer: self.analyzer,
            use_debug_judge: false,
        }
    }

    pub fn semantic_experiment(&self) -> SemanticExperimentConfig {
        SemanticExperimentConfig {
            id: if self.experiment_id.is_empty() {
                "semantic".to_string()
            } else {
                self.experiment_id.clone()
            },
            seed: self.seed,
            victims_per_category: self.semantic_attack.victims_per_category,
            probe_budgets: self.semantic_attack.probe_budgets.clone(),
            target_leaves: self.semantic_attack.target_leaves,
            search: self.search,
            corpus: self.semantic_corpus.clone(),
            node: self.node_config(CacheMode::Semantic),
            classifier_reps: self.semantic_attack.classifier_reps,
        }
    }

    pub fn defense_eval(&self) -> DefenseEvalConfig {
        let mut base = self.prefix_experiment();
        base.id = if self.experiment_id.is_empty() {
            "defend".to_string()
        } else {
            self.experiment_id.clone()
        };
        base.victims = self.defense_eval.victims;
        base.strategies = vec![self.defense_eval.strategy];
        base.regimes = vec![Regime::All];
        DefenseEvalConfig {
            base,
            defenses: self.defense_eval.defenses.clone(),
            delay_sigma_multiplier: self.defense_eval.delay_sigma_multiplier,
        }
    }
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            config_version: ConfigVersion::default(),
            seed: 7,
            experiment_id: String::new(),
            node: NodeSection::default(),
            prefix_cache: PrefixCacheConfig::default(),
            semantic_cache: SemanticCacheConfig::default(),
            timing: TimingParams::default(),
            defenses: DefenseConfig::default(),
            template: TemplateSpec::default(),
            prefix_corpus: PrefixCorpusSpec::default(),
            semantic_corpus: SemanticCorpusSpec::default(),
            analyzer: AnalyzerConfig::default(),
            prefix_attack: PrefixAttackSection::default(),
            semantic_attack: SemanticAttackSection::default(),
            defense_eval: DefenseEvalSection::default(),
            search: SearchParams::default(),
        }
    }
}
