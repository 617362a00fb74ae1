//! Run configuration: a TOML file plus command-line overrides.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Validation collects all problems and reports them together before any
//! output is written.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tmt_core::data::synth::SynthSpec;
use tmt_core::experiment::ExperimentConfig;
use tmt_core::model::train::{EvalConfig, TrainConfig};
use tmt_core::model::{InputGeometry, ModelConfig};

use crate::error::{AppError, Result};

/// Where training tracklets come from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated from `synth`.
    #[default]
    Synthetic,
    /// A directory of feature-cube files (see [`crate::cubes`]).
    Cubes { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Held-out evaluation after every `eval_every`-th epoch (0 = last only).
    pub eval_every: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic,
            synth: SynthSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            eval_every: 1,
            out_dir: PathBuf::from("runs/latest"),
        }
    }
}

/// Command-line overrides, applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub frames: Option<usize>,
    pub depth_self: Option<usize>,
    pub depth_cross: Option<usize>,
    pub hi_res: bool,
    pub literal_pool_sum: bool,
    pub literal_self_ffn: bool,
    pub literal_cross_ffn: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads `path`, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| AppError::io(p, e))?;
                Self::from_toml(&text).map_err(|e| AppError::Validation(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable as TOML")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.synth.seed = s;
            self.train.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(t) = o.frames {
            self.model.frames = t;
        }
        if let Some(d) = o.depth_self {
            self.model.depth_self = d;
        }
        if let Some(d) = o.depth_cross {
            self.model.depth_cross = d;
        }
        if o.hi_res {
            set_hi_res(self, true);
        }
        self.model.literal_pool_sum |= o.literal_pool_sum;
        self.model.literal_self_ffn |= o.literal_self_ffn;
        self.model.literal_cross_ffn |= o.literal_cross_ffn;
    }

    /// The core experiment settings.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            synth: self.synth.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            eval: self.eval,
            eval_every: self.eval_every,
        }
    }

    /// Every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        match &self.data {
            DataSource::Synthetic => self.experiment().problems(),
            DataSource::Cubes { dir } => {
                let mut out = self.model.problems();
                out.extend(self.train.problems());
                if self.eval.max_rank == 0 {
                    out.push("eval.max_rank must be ≥ 1".into());
                }
                if !matches!(self.model.input, InputGeometry::Cubes { .. }) {
                    out.push("data.kind = \"cubes\" requires model.input.kind = \"cubes\"".into());
                }
                if dir.as_os_str().is_empty() {
                    out.push("data.dir must not be empty".into());
                }
                out
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(AppError::Validation(format!(
                "invalid configuration:\n  - {}",
                p.join("\n  - ")
            )))
        }
    }
}

/// Switches both the model input and the synthetic images to the
/// double-resolution geometry (or back).
pub fn set_hi_res(cfg: &mut RunConfig, hi_res: bool) {
    if let InputGeometry::Images { .. } = cfg.model.input {
        let g = InputGeometry::images(hi_res);
        cfg.model.input = g;
        if let InputGeometry::Images { height, width } = g {
            cfg.synth.image_height = height;
            cfg.synth.image_width = width;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn defaults_follow_the_reference_recipe() {
        let c = RunConfig::default();
        assert_eq!((c.model.frames, c.model.depth_self, c.model.depth_cross), (8, 2, 2));
        assert_eq!((c.train.lr_decay_factor, c.train.lr_decay_period_epochs), (10.0, 15));
    }

    #[test]
    fn toml_round_trips() {
        let mut c = RunConfig::default();
        c.data = DataSource::Cubes { dir: "cubes".into() };
        c.model.input = InputGeometry::Cubes { height: 2, width: 2 };
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_toml("[model]\nframs = 3\n").is_err());
    }

    #[test]
    fn all_problems_are_reported_together() {
        let mut c = RunConfig::default();
        c.model.frames = 0;
        c.train.lr = -1.0;
        c.synth.num_identities = 0;
        let p = c.problems();
        assert!(p.len() >= 3, "{p:?}");
    }

    #[test]
    fn overrides_apply() {
        let mut c = RunConfig::default();
        c.apply(&Overrides {
            seed: Some(3),
            epochs: Some(0),
            frames: Some(6),
            hi_res: true,
            literal_pool_sum: true,
            ..Overrides::default()
        });
        assert_eq!((c.synth.seed, c.train.seed, c.train.epochs, c.model.frames), (3, 3, 0, 6));
        assert_eq!((c.synth.image_height, c.synth.image_width), (64, 32));
        assert!(c.model.literal_pool_sum);
        c.validate().unwrap();
    }
}
