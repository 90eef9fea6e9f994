//! TOML experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::WarmObjective;
use crate::error::{Result, WacError};
use crate::metrics::{DscConvention, EmptyConvention};
use crate::model::ModelSpec;
use crate::optimizer::{hex, BaselineMode, TrainConfig};
use crate::synth::{MixtureSpec, SubsetMode, Track};

pub const SCHEMA_VERSION: u32 = 1;

/// Where the projection ball sits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterSpec {
    Zero,
    /// The generator's planted parameter.
    #[default]
    Planted,
    /// The planted direction rescaled to the given norm.
    ShrunkPlanted(f64),
    /// Full-batch descent from zero on a fixed mixture of the losses.
    WarmStart {
        #[serde(default)]
        objective: WarmObjective,
        iterations: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    pub gamma: f64,
    #[serde(default)]
    pub center: CenterSpec,
}

/// Starting parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    /// The projection center, or zero without a projection.
    #[default]
    Center,
    Zero,
    /// Gaussian entries with this standard deviation, seeded by the training seed.
    Random(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrRule {
    /// Use `train.eta_theta` and `train.eta_beta` as given.
    #[default]
    Fixed,
    /// Equal step sizes from the horizon, radius and estimated constants.
    Recommended,
}

fn default_probes() -> usize {
    16
}
fn default_holdout_volumes() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Training subset protocol.
    #[serde(default)]
    pub subset: SubsetMode,
    #[serde(default)]
    pub subset_seed: u64,
    #[serde(default)]
    pub dsc: DscConvention,
    #[serde(default)]
    pub hd95: EmptyConvention,
    /// Volumes in the held-out, fully labelled evaluation set.
    #[serde(default = "default_holdout_volumes")]
    pub holdout_volumes: usize,
    /// Seed of the held-out set; defaults to the mixture seed plus 1000.
    #[serde(default)]
    pub holdout_seed: Option<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            subset: SubsetMode::Full,
            subset_seed: 0,
            dsc: DscConvention::Corrected,
            hd95: EmptyConvention::Zero,
            holdout_volumes: default_holdout_volumes(),
            holdout_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub t_values: Vec<u64>,
    pub seeds: Vec<u64>,
}

fn default_output_dir() -> String {
    "runs".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mixture: MixtureSpec,
    /// Defaults to the planted model on the planted track.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    pub train: TrainConfig,
    #[serde(default)]
    pub projection: Option<ProjectionConfig>,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub lr_rule: LrRule,
    /// Random boundary points of the ball used when estimating constants.
    #[serde(default = "default_probes")]
    pub lr_probes: usize,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    /// Methods trained by `train` and tabulated by `compare`; defaults to `train.mode`.
    #[serde(default)]
    pub modes: Vec<BaselineMode>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    /// Load the training set from this file instead of generating it.
    #[serde(default)]
    pub data: Option<String>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| WacError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WacError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            WacError::Config(m) => WacError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| WacError::Config(e.to_string()))
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        match (&self.model, self.mixture.track) {
            (Some(m), _) => Ok(m.clone()),
            (None, Track::Planted) => Ok(self.mixture.planted_model()),
            (None, Track::Geometric) => Err(WacError::Config(
                "[model] is required on the geometric track".into(),
            )),
        }
    }

    pub fn modes(&self) -> Vec<BaselineMode> {
        if self.modes.is_empty() {
            vec![self.train.mode]
        } else {
            self.modes.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: WacError| WacError::Config(e.to_string());
        if self.schema_version != SCHEMA_VERSION {
            return Err(WacError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.mixture.validate().map_err(cfg_err)?;
        let model = self.model_spec()?;
        model.validate().map_err(cfg_err)?;
        if model.height != self.mixture.height || model.width != self.mixture.width {
            return Err(WacError::Config("model grid does not match mixture grid".into()));
        }
        if model.num_classes != self.mixture.num_classes {
            return Err(WacError::Config(
                "model.num_classes does not match mixture.num_classes".into(),
            ));
        }
        self.train.validate().map_err(cfg_err)?;
        for m in &self.modes {
            let mut t = self.train.clone();
            t.mode = *m;
            t.validate().map_err(cfg_err)?;
        }
        if let Some(p) = &self.projection {
            if !(p.gamma > 0.0) || !p.gamma.is_finite() {
                return Err(WacError::Config("projection.gamma must be > 0".into()));
            }
            if matches!(p.center, CenterSpec::Planted | CenterSpec::ShrunkPlanted(_))
                && self.mixture.track != Track::Planted
            {
                return Err(WacError::Config(
                    "a planted projection center needs the planted track".into(),
                ));
            }
        }
        if self.lr_rule == LrRule::Recommended && self.projection.is_none() {
            return Err(WacError::Config(
                "lr_rule = \"recommended\" needs a [projection] radius".into(),
            ));
        }
        if self.eval.holdout_volumes == 0 {
            return Err(WacError::Config("eval.holdout_volumes must be >= 1".into()));
        }
        if let Some(s) = &self.sweep {
            if s.t_values.is_empty() || s.seeds.is_empty() || s.t_values.contains(&0) {
                return Err(WacError::Config(
                    "sweep needs non-empty t_values (all > 0) and seeds".into(),
                ));
            }
        }
        Ok(())
    }

    /// Apply a `--seed` override to both the generator and the training RNG.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.mixture.seed = seed;
        c.train.seed = seed;
        c
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml_string()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
schema_version = 1

[mixture]
xi = 0.3
track = "planted"
num_volumes = 4
slices_per_volume = 5
height = 4
width = 4
num_classes = 3
margin_boost = 3.0

[train]
eta_theta = 0.01
eta_beta = 0.01
iterations = 100

[projection]
gamma = 2.0
center = { shrunk_planted = 1.5 }
"#;

    #[test]
    fn parses_example() {
        let c = ExperimentConfig::from_toml_str(EXAMPLE).unwrap();
        assert_eq!(c.projection.as_ref().unwrap().center, CenterSpec::ShrunkPlanted(1.5));
        assert_eq!(c.modes(), vec![BaselineMode::AdaWac]);
        assert_eq!(c.model_spec().unwrap().num_classes, 3);
    }

    #[test]
    fn unknown_key_is_named() {
        let bad = EXAMPLE.replace("iterations = 100", "iterations = 100\nlearning_rate = 3");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn wrong_schema_rejected() {
        let bad = EXAMPLE.replace("schema_version = 1", "schema_version = 7");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&bad),
            Err(WacError::Config(_))
        ));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::from_toml_str(EXAMPLE).unwrap();
        let again = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash().unwrap(), again.hash().unwrap());
    }
}
