//! The run configuration file: a versioned, strictly-validated JSON schema
//! merging scene, trigger, poison, training, and defence settings, plus the
//! canonical digest that names run directories and ties metrics to the
//! exact configuration that produced them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::advgen::{AdvObjective, PerturbationSpec};
use crate::attack::{PoisonConfig, PoisonMode, SceneSpec, TriggerPlacement, TriggerSpec};
use crate::defense::{AdvSource, DefenseConfig, SelectionStrategy};
use crate::detector::TrainHparams;
use crate::margin::SurrogateConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub paths: PathsSection,
    pub scene: SceneSection,
    pub trigger: TriggerSection,
    pub poison: PoisonSection,
    pub train: TrainSection,
    pub defense: DefenseSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: String,
    pub out_root: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    pub min_box: usize,
    pub max_box: usize,
    pub train_images: usize,
    pub test_images: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSection {
    pub size: usize,
    /// RGB bytes, e.g. [0, 0, 255] for the default blue.
    pub color: [u8; 3],
    pub placement: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonSection {
    pub ratio: f64,
    pub mode: PoisonMode,
    pub rma_target_class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    /// Attack-side loss weight on poisoned samples.
    pub poison_emphasis: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    pub lambda: f64,
    pub tau: f64,
    pub beta: f64,
    pub zeta: f64,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub objective: AdvObjective,
    pub selection: SelectionStrategy,
    pub use_def_loss: bool,
    pub freeze_backbone: bool,
    pub adv_source: AdvSource,
    pub fws_iou: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub nms_iou: f64,
    /// Fraction of the clean training set handed to the defender.
    pub subset_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: 1,
            seed: 7,
            paths: PathsSection {
                data_dir: "data/main".into(),
                out_root: "runs".into(),
            },
            scene: SceneSection {
                image_size: 64,
                min_objects: 1,
                max_objects: 4,
                num_classes: 4,
                min_box: 12,
                max_box: 28,
                train_images: 500,
                test_images: 150,
            },
            trigger: TriggerSection {
                size: 4,
                color: [0, 0, 255],
                placement: "center".into(),
            },
            poison: PoisonSection {
                ratio: 0.05,
                mode: PoisonMode::Rma,
                rma_target_class: 0,
            },
            train: TrainSection {
                epochs: 50,
                batch_size: 16,
                learning_rate: 0.05,
                lr_decay: 0.97,
                momentum: 0.9,
                poison_emphasis: 6.0,
            },
            defense: DefenseSection {
                lambda: 0.1,
                tau: 0.25,
                beta: 1.0,
                zeta: 1e-8,
                epsilon: 8.0 / 255.0,
                step_size: 2.0 / 255.0,
                steps: 30,
                objective: AdvObjective::Sbm,
                selection: SelectionStrategy::Fws,
                use_def_loss: true,
                freeze_backbone: true,
                adv_source: AdvSource::Original,
                fws_iou: 0.60,
                epochs: 30,
                batch_size: 16,
                learning_rate: 1e-3,
                momentum: 0.9,
                nms_iou: 0.5,
                subset_fraction: 0.05,
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let des = &mut serde_json::Deserializer::from_slice(&raw);
        let cfg: RunConfig =
            serde_path_to_error::deserialize(des).map_err(|e| ConfigError::Schema {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != 1 {
            return Err(ConfigError::Invalid(format!(
                "unsupported config version {}",
                self.version
            )));
        }
        if self.scene.image_size != 64 {
            return Err(ConfigError::Invalid(
                "image_size must be 64 for the tiny detector".into(),
            ));
        }
        if self.scene.num_classes < 2 {
            return Err(ConfigError::Invalid("need at least 2 classes".into()));
        }
        if self.scene.min_objects < 1 || self.scene.max_objects < self.scene.min_objects {
            return Err(ConfigError::Invalid("bad object count range".into()));
        }
        if self.trigger.placement != "center" {
            return Err(ConfigError::Invalid(format!(
                "unsupported trigger placement `{}`",
                self.trigger.placement
            )));
        }
        if self.trigger.size == 0 || self.trigger.size as f64 > self.scene.min_box as f64 {
            return Err(ConfigError::Invalid(
                "trigger must fit the smallest object".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.poison.ratio) {
            return Err(ConfigError::Invalid("poison ratio outside [0,1]".into()));
        }
        if self.poison.rma_target_class >= self.scene.num_classes {
            return Err(ConfigError::Invalid("rma_target_class out of range".into()));
        }
        if !(0.0 < self.defense.subset_fraction && self.defense.subset_fraction <= 1.0) {
            return Err(ConfigError::Invalid("subset_fraction outside (0,1]".into()));
        }
        self.defense_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Canonical JSON of the parsed config (stable field order, no
    /// whitespace).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Lowercase-hex SHA-256 of the canonical form.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.canonical_json().as_bytes());
        let mut out = String::with_capacity(64);
        for byte in hash {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            image_size: self.scene.image_size,
            min_objects: self.scene.min_objects,
            max_objects: self.scene.max_objects,
            num_classes: self.scene.num_classes,
            min_box: self.scene.min_box,
            max_box: self.scene.max_box,
            seed: self.seed,
        }
    }

    /// The held-out test distribution uses an independent stream derived
    /// from the run seed.
    pub fn test_scene_spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed ^ 0x7e57_da7a_5e7 ,
            ..self.scene_spec()
        }
    }

    pub fn trigger_spec(&self) -> TriggerSpec {
        TriggerSpec {
            size: self.trigger.size,
            color: [
                self.trigger.color[0] as f64 / 255.0,
                self.trigger.color[1] as f64 / 255.0,
                self.trigger.color[2] as f64 / 255.0,
            ],
            placement: TriggerPlacement::Center,
        }
    }

    pub fn poison_config(&self) -> PoisonConfig {
        PoisonConfig {
            ratio: self.poison.ratio,
            mode: self.poison.mode,
            rma_target_class: self.poison.rma_target_class,
        }
    }

    pub fn train_hparams(&self) -> TrainHparams {
        TrainHparams {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            lr_decay: self.train.lr_decay,
            momentum: self.train.momentum,
            augment: true,
            poison_emphasis: self.train.poison_emphasis,
            seed: self.seed ^ 0x7ea1_0001,
        }
    }

    pub fn defense_config(&self) -> DefenseConfig {
        let d = &self.defense;
        DefenseConfig {
            lambda: d.lambda,
            surrogate: SurrogateConfig {
                tau: d.tau,
                beta: d.beta,
                zeta: d.zeta,
            },
            perturbation: PerturbationSpec {
                epsilon: d.epsilon,
                steps: d.steps,
                step_size: d.step_size,
                objective: d.objective,
            },
            selection: d.selection,
            use_def_loss: d.use_def_loss,
            freeze_backbone: d.freeze_backbone,
            adv_source: d.adv_source,
            fws_iou: d.fws_iou,
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            nms_iou: d.nms_iou,
            seed: self.seed ^ 0xdef0_0002,
        }
    }
}

/// Everything `metrics.json` records for one finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsFile {
    pub mode: String,
    pub asr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tdr: Option<f64>,
    pub rmap: f64,
    pub map50_clean: f64,
    pub pre_mitigation_map: f64,
    pub config_digest: String,
    pub seed: u64,
    pub run: RunLabel,
}

/// Grouping labels the plotting command reads back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLabel {
    pub method: String,
    pub selection: String,
    pub def_loss: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_digests_stably() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, &json).unwrap();
        let loaded = RunConfig::load(&p).unwrap();
        assert_eq!(loaded.digest(), cfg.digest());
        assert_eq!(cfg.digest().len(), 64);
        assert!(cfg.digest().chars().all(|c| c.is_ascii_hexdigit()));

        // a changed field changes the digest
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(other.digest(), cfg.digest());
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        let mut v: serde_json::Value =
            serde_json::to_value(RunConfig::default()).unwrap();
        v["defense"]["typo_key"] = serde_json::json!(1);
        std::fs::write(&p, serde_json::to_vec(&v).unwrap()).unwrap();
        match RunConfig::load(&p) {
            Err(ConfigError::Schema { path, .. }) => assert!(path.contains("defense")),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn semantic_validation() {
        let mut cfg = RunConfig::default();
        cfg.trigger.size = 40;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.poison.rma_target_class = 99;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.defense.tau = 1.5;
        assert!(cfg.validate().is_err());
    }
}
