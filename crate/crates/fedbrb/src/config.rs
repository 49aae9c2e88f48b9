//! Experiment configuration: a TOML file with sections for the experiment
//! grid, data, federation, training and output, plus CLI overrides with
//! precedence flags > config > defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::AggregationPolicy;
use crate::federation::{
    FederationConfig, FederationError, LrSchedule, Setting, SizeDistribution, SplitSpec,
};
use crate::neural::{ModelArch, NeuralError, TrainConfig};
use crate::partition::SchemeKind;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse config {path}: {source}")]
    Parse { path: String, source: Box<toml::de::Error> },
    #[error("invalid value for {key}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("missing file for {key}: {path}")]
    MissingPath { key: String, path: String },
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Scheme names: heterofl, fedrolex, fedbrb, feddropout.
    pub schemes: Vec<String>,
    pub distributions: Vec<String>,
    pub setting: Setting,
    pub rounds: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            seeds: vec![1, 2, 3],
            schemes: vec!["heterofl".into(), "fedrolex".into(), "fedbrb".into()],
            distributions: vec!["a0-e1".into()],
            setting: Setting::Dynamic,
            rounds: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// "mnist" (IDX files) or "synthetic" (Gaussian clusters).
    pub source: String,
    pub images: PathBuf,
    pub labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Cap on training examples after a seeded shuffle (0 = all).
    pub subset: usize,
    /// Cap on test examples after a seeded shuffle (0 = all).
    pub test_subset: usize,
    pub shuffle_seed: u64,
    pub normalize_mean: f64,
    pub normalize_std: f64,
    /// "iid" or "noniid".
    pub split: String,
    pub labels_per_client: usize,
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_dim: usize,
    pub synthetic_separation: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "mnist".into(),
            images: "data/mnist-8k/train-images-idx3-ubyte".into(),
            labels: "data/mnist-8k/train-labels-idx1-ubyte".into(),
            test_images: "data/mnist-8k/t2k-images-idx3-ubyte".into(),
            test_labels: "data/mnist-8k/t2k-labels-idx1-ubyte".into(),
            subset: 8000,
            test_subset: 0,
            shuffle_seed: 0,
            normalize_mean: 0.1307,
            normalize_std: 0.3081,
            split: "noniid".into(),
            labels_per_client: 2,
            synthetic_classes: 4,
            synthetic_per_class: 60,
            synthetic_test_per_class: 20,
            synthetic_dim: 8,
            synthetic_separation: 6.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub num_clients: usize,
    pub selected_fraction: f64,
    pub beta: f64,
    pub sample_weighting: bool,
    /// Drop the smallest support ratio at aggregation (ablation).
    pub exclude_small: bool,
    /// Also run fedbrb with broadcast disabled (ablation comparison).
    pub broadcast_ablation: bool,
    pub eval_every: u64,
    pub eval_subset: usize,
    /// "desk_cnn" or "dense".
    pub arch: String,
    /// Hidden widths for the "dense" arch.
    pub hidden: Vec<usize>,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            num_clients: 20,
            selected_fraction: 0.2,
            beta: 0.5,
            sample_weighting: false,
            exclude_small: false,
            broadcast_ablation: false,
            eval_every: 5,
            eval_subset: 500,
            arch: "desk_cnn".into(),
            hidden: vec![16, 16],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_interval: u64,
    pub decay_factor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            local_epochs: 2,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_interval: 40,
            decay_factor: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "runs/out".into() }
    }
}

/// CLI overrides; flags beat config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub scheme: Option<String>,
    pub distribution: Option<String>,
    pub beta: Option<f64>,
    pub setting: Option<String>,
    pub exclude_small: bool,
    pub no_broadcast: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|source| {
            ConfigError::Parse { path: path.display().to_string(), source: Box::new(source) }
        })?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) -> Result<(), ConfigError> {
        if let Some(out) = &ov.out {
            self.output.dir = out.clone();
        }
        if !ov.seeds.is_empty() {
            self.experiment.seeds = ov.seeds.clone();
        }
        if let Some(scheme) = &ov.scheme {
            self.experiment.schemes = vec![scheme.clone()];
        }
        if let Some(distribution) = &ov.distribution {
            self.experiment.distributions = vec![distribution.clone()];
        }
        if let Some(beta) = ov.beta {
            self.federation.beta = beta;
        }
        if let Some(setting) = &ov.setting {
            self.experiment.setting = match setting.as_str() {
                "dynamic" => Setting::Dynamic,
                "fixed" => Setting::Fixed,
                other => {
                    return Err(ConfigError::Invalid {
                        key: "setting".into(),
                        reason: format!("'{other}' is not dynamic|fixed"),
                    })
                }
            };
        }
        if ov.exclude_small {
            self.federation.exclude_small = true;
        }
        if ov.no_broadcast {
            self.federation.broadcast_ablation = true;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, reason: String| ConfigError::Invalid { key: key.into(), reason };
        if self.experiment.seeds.is_empty() {
            return Err(invalid("experiment.seeds", "seed list must be non-empty".into()));
        }
        if self.experiment.schemes.is_empty() {
            return Err(invalid("experiment.schemes", "need at least one scheme".into()));
        }
        for s in &self.experiment.schemes {
            parse_scheme(s)?;
        }
        if self.experiment.distributions.is_empty() {
            return Err(invalid("experiment.distributions", "need at least one".into()));
        }
        for d in &self.experiment.distributions {
            SizeDistribution::parse(d)?;
        }
        match self.data.source.as_str() {
            "mnist" => {
                for (key, path) in [
                    ("data.images", &self.data.images),
                    ("data.labels", &self.data.labels),
                    ("data.test_images", &self.data.test_images),
                    ("data.test_labels", &self.data.test_labels),
                ] {
                    if !path.exists() {
                        return Err(ConfigError::MissingPath {
                            key: key.into(),
                            path: path.display().to_string(),
                        });
                    }
                }
            }
            "synthetic" => {
                if self.data.synthetic_classes < 2 {
                    return Err(invalid("data.synthetic_classes", "need >= 2 classes".into()));
                }
            }
            other => {
                return Err(invalid("data.source", format!("'{other}' is not mnist|synthetic")))
            }
        }
        match self.data.split.as_str() {
            "iid" => {}
            "noniid" => {
                if self.data.labels_per_client == 0 {
                    return Err(invalid("data.labels_per_client", "must be >= 1".into()));
                }
            }
            other => return Err(invalid("data.split", format!("'{other}' is not iid|noniid"))),
        }
        if !(self.federation.selected_fraction > 0.0 && self.federation.selected_fraction <= 1.0) {
            return Err(invalid("federation.selected_fraction", "must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.federation.beta) {
            return Err(invalid("federation.beta", "must be in [0, 1)".into()));
        }
        if self.federation.num_clients == 0 {
            return Err(invalid("federation.num_clients", "must be >= 1".into()));
        }
        if self.federation.eval_every == 0 {
            return Err(invalid("federation.eval_every", "must be >= 1".into()));
        }
        match self.federation.arch.as_str() {
            "desk_cnn" | "dense" => {}
            other => {
                return Err(invalid("federation.arch", format!("'{other}' is not desk_cnn|dense")))
            }
        }
        if self.train.learning_rate <= 0.0 {
            return Err(invalid("train.learning_rate", "must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(invalid("train.momentum", "must be in [0, 1)".into()));
        }
        if self.train.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be >= 1".into()));
        }
        if self.train.decay_interval == 0 {
            return Err(invalid("train.decay_interval", "must be >= 1".into()));
        }
        if !(self.train.decay_factor > 0.0 && self.train.decay_factor <= 1.0) {
            return Err(invalid("train.decay_factor", "must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Builds the model architecture this experiment trains.
    pub fn build_arch(&self) -> Result<ModelArch, ConfigError> {
        match self.federation.arch.as_str() {
            "desk_cnn" => Ok(ModelArch::desk_cnn()),
            "dense" => {
                let (input_dim, classes) = match self.data.source.as_str() {
                    "synthetic" => (self.data.synthetic_dim, self.data.synthetic_classes),
                    _ => (28 * 28, 10),
                };
                Ok(ModelArch::dense_chain(input_dim, &self.federation.hidden, classes)?)
            }
            other => Err(ConfigError::Invalid {
                key: "federation.arch".into(),
                reason: format!("'{other}' is not desk_cnn|dense"),
            }),
        }
    }

    /// Assembles the per-run federation config for one grid cell.
    pub fn build_federation_config(
        &self,
        scheme: SchemeKind,
        distribution: &str,
        seed: u64,
        broadcast_enabled: bool,
    ) -> Result<FederationConfig, ConfigError> {
        let distribution = SizeDistribution::parse(distribution)?;
        let mut policy = if broadcast_enabled && scheme == SchemeKind::BlockRolling {
            AggregationPolicy::weighted_broadcast(self.federation.beta)
        } else {
            AggregationPolicy::plain()
        };
        policy.sample_weighting = self.federation.sample_weighting;
        if self.federation.exclude_small {
            policy.exclude_ratios.insert(distribution.min_ratio());
        }
        Ok(FederationConfig {
            arch: self.build_arch()?,
            num_clients: self.federation.num_clients,
            selected_fraction: self.federation.selected_fraction,
            rounds: self.experiment.rounds,
            distribution,
            setting: self.experiment.setting,
            scheme,
            policy,
            train: TrainConfig {
                learning_rate: self.train.learning_rate,
                momentum: self.train.momentum,
                weight_decay: self.train.weight_decay,
                batch_size: self.train.batch_size,
                local_epochs: self.train.local_epochs,
            },
            lr_schedule: LrSchedule {
                decay_interval: self.train.decay_interval,
                decay_factor: self.train.decay_factor,
            },
            split: match self.data.split.as_str() {
                "iid" => SplitSpec::Iid,
                _ => SplitSpec::NonIid { labels_per_client: self.data.labels_per_client },
            },
            seed,
            eval_every: self.federation.eval_every,
            eval_subset: self.federation.eval_subset,
        })
    }

    /// Effective config serialized back to TOML for the output directory.
    pub fn echo_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

pub fn parse_scheme(name: &str) -> Result<SchemeKind, ConfigError> {
    match name {
        "heterofl" => Ok(SchemeKind::Fixed),
        "fedrolex" => Ok(SchemeKind::Rolling),
        "fedbrb" => Ok(SchemeKind::BlockRolling),
        "feddropout" => Ok(SchemeKind::Random),
        other => Err(ConfigError::Invalid {
            key: "experiment.schemes".into(),
            reason: format!("'{other}' is not heterofl|fedrolex|fedbrb|feddropout"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.echo_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn minimal_synthetic_config_parses() {
        let text = r#"
            [experiment]
            seeds = [7]
            schemes = ["fedbrb"]
            distributions = ["a0-b1"]
            rounds = 2

            [data]
            source = "synthetic"
            split = "iid"

            [federation]
            arch = "dense"
            hidden = [8, 8]
        "#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.experiment.rounds, 2);
        assert_eq!(cfg.federation.hidden, vec![8, 8]);
        // untouched sections keep defaults
        assert_eq!(cfg.train.batch_size, 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[experiment]\nrounds = 2\nnonsense = 1\n";
        assert!(toml::from_str::<ExperimentConfig>(text).is_err());
    }

    #[test]
    fn validation_names_offending_keys() {
        let mut cfg: ExperimentConfig = toml::from_str("[data]\nsource = \"synthetic\"\n").unwrap();
        cfg.federation.selected_fraction = 1.5;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("federation.selected_fraction"), "{err}");

        cfg.federation.selected_fraction = 0.2;
        cfg.experiment.schemes = vec!["bogus".into()];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn overrides_beat_config() {
        let mut cfg: ExperimentConfig = toml::from_str("[data]\nsource = \"synthetic\"\n").unwrap();
        let ov = Overrides {
            out: Some("elsewhere".into()),
            seeds: vec![42],
            scheme: Some("fedrolex".into()),
            distribution: Some("a0-c1".into()),
            beta: Some(0.25),
            setting: Some("fixed".into()),
            exclude_small: true,
            no_broadcast: true,
        };
        cfg.apply_overrides(&ov).unwrap();
        assert_eq!(cfg.output.dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.experiment.seeds, vec![42]);
        assert_eq!(cfg.experiment.schemes, vec!["fedrolex".to_string()]);
        assert_eq!(cfg.experiment.distributions, vec!["a0-c1".to_string()]);
        assert_eq!(cfg.federation.beta, 0.25);
        assert_eq!(cfg.experiment.setting, Setting::Fixed);
        assert!(cfg.federation.exclude_small);
        assert!(cfg.federation.broadcast_ablation);
    }

    #[test]
    fn exclude_small_lands_in_policy() {
        let mut cfg: ExperimentConfig = toml::from_str("[data]\nsource = \"synthetic\"\n").unwrap();
        cfg.federation.exclude_small = true;
        let fed =
            cfg.build_federation_config(SchemeKind::BlockRolling, "a0-c1-e1", 1, true).unwrap();
        let e = crate::partition::Ratio::from_letter('e').unwrap();
        assert!(fed.policy.exclude_ratios.contains(&e));
        assert!(fed.policy.broadcast_enabled);
    }
}
