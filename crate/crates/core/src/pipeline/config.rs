//! Run configuration: a flat `key = value` text file with `#` comments,
//! overridable from the command line.

use std::path::{Path, PathBuf};

use crate::denoiser::{ModelConfig, Optimizer, TrainConfig};
use crate::error::{Error, Result};
use crate::guidance::{EditConfig, FusionMode};
use crate::pipeline::dataset::{DatasetConfig, ShapeClass, Texture};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub edit: EditConfig,
    pub checkpoint: PathBuf,
    /// Directory of `<word>.txt` sentence banks; the bundled banks when unset.
    pub banks: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sched = NoiseSchedule::default();
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            t_train: sched.t_train(),
            beta_start: crate::schedule::DEFAULT_BETA_START,
            beta_end: crate::schedule::DEFAULT_BETA_END,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            edit: EditConfig::default(),
            checkpoint: PathBuf::from("model.rdmw"),
            banks: None,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "base seed for data, noise and initialisation"),
    ("image_size", "side length of generated images"),
    ("count", "number of images generated by gen-data"),
    ("min_extent", "smallest shape radius / half-side in pixels"),
    ("max_extent", "largest shape radius / half-side in pixels"),
    ("margin", "minimum gap between a shape and the border"),
    ("classes", "comma-separated shape classes (disc, square)"),
    ("textures", "comma-separated textures (solid, striped)"),
    ("t_train", "number of diffusion steps in the noise schedule"),
    ("beta_start", "first beta of the linear schedule"),
    ("beta_end", "last beta of the linear schedule"),
    ("width", "feature channels of the denoiser"),
    ("attn_dim", "query/key dimension of the cross-attention"),
    ("time_dim", "sinusoidal timestep feature size (even)"),
    ("pre_dilations", "dilations of the residual blocks before attention"),
    ("post_dilations", "dilations of the residual blocks after attention"),
    ("train_steps", "optimiser steps (one sample each)"),
    ("lr", "learning rate"),
    ("optimizer", "sgd or adam"),
    ("empty_prob", "probability of training on the empty prompt"),
    ("clip_norm", "global gradient-norm clip; 0 disables"),
    ("cosine_decay", "anneal the learning rate along a half cosine"),
    ("n_steps", "DDIM steps for inversion and editing"),
    ("cfg_scale", "classifier-free guidance scale"),
    ("lambda_xa", "step size of the cross-attention guidance"),
    ("lambda_rev", "initial step size of the cooperative update"),
    ("rev_steps", "edit steps (0 = most noised) with a cooperative update"),
    ("rev_decay", "factor applied to lambda_rev after each use"),
    ("ladder_mid", "edit weight of the intermediate rich prompt"),
    ("ladder_high", "edit weight of the strongest rich prompt"),
    ("fusion", "sliding, per-step, sliding-exclude-current or distance-weighted"),
    ("edit_weight", "weight of the edit direction in the editing prompt"),
    ("noise_reg_iters", "gradient steps of inversion-noise regularisation"),
    ("noise_reg_step", "step size of inversion-noise regularisation"),
    ("noise_reg_lambda", "weight of the KL term in the regulariser"),
    ("checkpoint", "model checkpoint path"),
    ("banks", "directory of sentence banks; empty for the bundled ones"),
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::param(format!("{key}: cannot parse {value:?}")))
}

fn list<T>(value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::param(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "image_size" => {
                self.dataset.size = num(key, v)?;
                self.model.size = self.dataset.size;
            }
            "count" => self.dataset.count = num(key, v)?,
            "min_extent" => self.dataset.min_extent = num(key, v)?,
            "max_extent" => self.dataset.max_extent = num(key, v)?,
            "margin" => self.dataset.margin = num(key, v)?,
            "classes" => self.dataset.classes = list(v, ShapeClass::parse)?,
            "textures" => self.dataset.textures = list(v, Texture::parse)?,
            "t_train" => self.t_train = num(key, v)?,
            "beta_start" => self.beta_start = num(key, v)?,
            "beta_end" => self.beta_end = num(key, v)?,
            "width" => self.model.width = num(key, v)?,
            "attn_dim" => self.model.attn_dim = num(key, v)?,
            "time_dim" => self.model.time_dim = num(key, v)?,
            "pre_dilations" => self.model.pre_dilations = list(v, |s| num(key, s))?,
            "post_dilations" => self.model.post_dilations = list(v, |s| num(key, s))?,
            "train_steps" => self.train.steps = num(key, v)?,
            "lr" => self.train.lr = num(key, v)?,
            "optimizer" => {
                self.train.optimizer = match v {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::adam(),
                    _ => return Err(Error::param(format!("optimizer: expected sgd or adam, got {v:?}"))),
                }
            }
            "empty_prob" => self.train.empty_prob = num(key, v)?,
            "clip_norm" => {
                let c: f64 = num(key, v)?;
                self.train.clip_norm = (c > 0.0).then_some(c);
            }
            "cosine_decay" => self.train.cosine_decay = flag(key, v)?,
            "n_steps" => self.edit.n_steps = num(key, v)?,
            "cfg_scale" => self.edit.cfg_scale = num(key, v)?,
            "lambda_xa" => self.edit.lambda_xa = num(key, v)?,
            "lambda_rev" => self.edit.lambda_rev = num(key, v)?,
            "rev_steps" => self.edit.rev_steps = list(v, |s| num(key, s))?,
            "rev_decay" => self.edit.rev_decay = num(key, v)?,
            "ladder_mid" => self.edit.ladder.mid = num(key, v)?,
            "ladder_high" => self.edit.ladder.high = num(key, v)?,
            "fusion" => self.edit.fusion = FusionMode::parse(v)?,
            "edit_weight" => self.edit.edit_weight = num(key, v)?,
            "noise_reg_iters" => self.edit.noise_reg.k_iters = num(key, v)?,
            "noise_reg_step" => self.edit.noise_reg.step_size = num(key, v)?,
            "noise_reg_lambda" => self.edit.noise_reg.lambda = num(key, v)?,
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "banks" => self.banks = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(Error::param(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let e = &self.edit;
        Some(match key {
            "seed" => self.seed.to_string(),
            "image_size" => self.dataset.size.to_string(),
            "count" => self.dataset.count.to_string(),
            "min_extent" => self.dataset.min_extent.to_string(),
            "max_extent" => self.dataset.max_extent.to_string(),
            "margin" => self.dataset.margin.to_string(),
            "classes" => join(self.dataset.classes.iter().map(|c| c.word())),
            "textures" => join(self.dataset.textures.iter().map(|t| t.word())),
            "t_train" => self.t_train.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "width" => self.model.width.to_string(),
            "attn_dim" => self.model.attn_dim.to_string(),
            "time_dim" => self.model.time_dim.to_string(),
            "pre_dilations" => join(&self.model.pre_dilations),
            "post_dilations" => join(&self.model.post_dilations),
            "train_steps" => self.train.steps.to_string(),
            "lr" => self.train.lr.to_string(),
            "optimizer" => match self.train.optimizer {
                Optimizer::Sgd => "sgd".into(),
                Optimizer::Adam { .. } => "adam".into(),
            },
            "empty_prob" => self.train.empty_prob.to_string(),
            "clip_norm" => self.train.clip_norm.unwrap_or(0.0).to_string(),
            "cosine_decay" => self.train.cosine_decay.to_string(),
            "n_steps" => e.n_steps.to_string(),
            "cfg_scale" => e.cfg_scale.to_string(),
            "lambda_xa" => e.lambda_xa.to_string(),
            "lambda_rev" => e.lambda_rev.to_string(),
            "rev_steps" => join(&e.rev_steps),
            "rev_decay" => e.rev_decay.to_string(),
            "ladder_mid" => e.ladder.mid.to_string(),
            "ladder_high" => e.ladder.high.to_string(),
            "fusion" => e.fusion.as_str().into(),
            "edit_weight" => e.edit_weight.to_string(),
            "noise_reg_iters" => e.noise_reg.k_iters.to_string(),
            "noise_reg_step" => e.noise_reg.step_size.to_string(),
            "noise_reg_lambda" => e.noise_reg.lambda.to_string(),
            "checkpoint" => self.checkpoint.display().to_string(),
            "banks" => self
                .banks
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            _ => return None,
        })
    }

    /// Apply `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::param(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::param(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// All keys with their current values and descriptions.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            let value = self.get(key).expect("every listed key has a value");
            out.push_str(&format!("# {doc}\n{key} = {value}\n"));
        }
        out
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_train, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.edit.validate()?;
        if self.model.size != self.dataset.size {
            return Err(Error::param("model and dataset image sizes differ"));
        }
        if self.edit.n_steps > self.t_train {
            return Err(Error::param(format!(
                "n_steps {} exceeds t_train {}",
                self.edit.n_steps, self.t_train
            )));
        }
        self.schedule().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_preserves_every_key() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("seed = 9\nclasses = square\nrev_steps = 1, 2\nclip_norm = 0\nbanks = /tmp/b\n").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.dataset.classes, [ShapeClass::Square]);
        assert_eq!(back.train.clip_norm, None);
        for (key, _) in KEYS {
            assert!(cfg.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn later_values_win() {
        let mut cfg = RunConfig::from_text("lambda_xa = 0.5  # comment\n").unwrap();
        assert_eq!(cfg.edit.lambda_xa, 0.5);
        cfg.set("lambda_xa", "0.25").unwrap();
        assert_eq!(cfg.edit.lambda_xa, 0.25);
    }

    #[test]
    fn bad_lines_are_parameter_errors() {
        for text in ["nonsense", "zebra = 1", "seed = x", "fusion = average", "optimizer = rmsprop"] {
            let err = RunConfig::from_text(text).unwrap_err();
            assert!(matches!(err, Error::Parameter(_)), "{text}: {err}");
            assert_eq!(err.exit_code(), 1);
        }
    }
}
