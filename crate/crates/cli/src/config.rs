//! TOML run configuration. Every section and key is optional; command-line
//! flags override whatever the file sets.

use std::fmt;
use std::path::{Path, PathBuf};

use featurefool::attack::{AttackConfig, AttackVideoSelector, MapKind, Variant};
use featurefool::defenses::{PatternConfig, ShuffleParams};
use featurefool::harness::{CampaignOptions, DatasetSpec, Method};
use featurefool::net3d::TrainConfig;
use featurefool::vidcore::PerturbationBudget;
use serde::Deserialize;

/// A problem with the configuration rather than with the run itself.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data: DatasetSpec,
    pub external: Option<ExternalSection>,
    pub train: TrainConfig,
    pub models: ModelsSection,
    pub attack: AttackSection,
    pub shuffle: ShuffleParams,
    pub pattern: PatternConfig,
    pub analysis: AnalysisSection,
}

/// Frame-directory dataset used by `campaign` instead of the synthetic one.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSection {
    pub root: PathBuf,
    /// CSV of `dir,label` lines relative to `root`.
    pub list: PathBuf,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsSection {
    pub victim: Option<PathBuf>,
    /// Feature-map model; the victim checkpoint when unset.
    pub source: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub method: Method,
    pub variant: Variant,
    pub map_kind: MapKind,
    pub alpha: f32,
    pub epsilon: f32,
    pub layer: Option<usize>,
    pub class: Option<usize>,
    pub selector: AttackVideoSelector,
    pub seed: u64,
    pub max_clips: Option<usize>,
    pub alphas: Vec<f32>,
}

impl Default for AttackSection {
    fn default() -> Self {
        let b = PerturbationBudget::default();
        Self {
            method: Method::Featurefool,
            variant: Variant::MaxFlow,
            map_kind: MapKind::GuidedBackprop,
            alpha: b.alpha,
            epsilon: b.epsilon,
            layer: None,
            class: None,
            selector: AttackVideoSelector::Random,
            seed: 0,
            max_clips: None,
            alphas: vec![0.1, 0.4, 0.8, 1.0],
        }
    }
}

impl AttackSection {
    pub fn attack_config(&self) -> anyhow::Result<AttackConfig> {
        let budget = PerturbationBudget::new(self.alpha, self.epsilon).map_err(|e| config_err(e.to_string()))?;
        Ok(AttackConfig {
            budget,
            variant: self.variant,
            map_kind: self.map_kind,
            layer: self.layer,
            class: self.class,
            seed: self.seed,
        })
    }

    pub fn campaign_options(&self) -> anyhow::Result<CampaignOptions> {
        Ok(CampaignOptions {
            method: self.method,
            attack: self.attack_config()?,
            selector: self.selector,
            seed: self.seed,
            max_clips: self.max_clips,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub levels: usize,
    pub max_clips: Option<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { levels: 5, max_clips: None }
    }
}

pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let cfg: FileConfig = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    cfg.data.validate().map_err(|e| config_err(format!("[data]: {e}")))?;
    Ok(cfg)
}
