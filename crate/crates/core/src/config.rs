//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::optim::AdamConfig;
use crate::patchpool::{GeneratorConfig, SceneConfig, SensorConfig};
use crate::train::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("{key}: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
}

/// Every setting a command can consume.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Network patch size; for `generate`, the stored patch size.
    pub patch_size: usize,
    pub pool: PathBuf,
    /// Defaults to `<out>.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2_lambda: f64,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub eval_chunk: usize,
    pub scenes: usize,
    pub scene_height: usize,
    pub scene_width: usize,
    pub target_pairs: usize,
    pub bumps: usize,
    pub max_height: f64,
    pub albedo_smoothing: usize,
    pub incidence_deg: f64,
    pub looks: usize,
    pub sun_elevation_deg: f64,
    pub sar_albedo_weight: f64,
    pub amplitude_scale: f64,
    pub keypoints: usize,
    pub match_threshold: f64,
    pub fpr_cap: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: 0,
            patch_size: 112,
            pool: PathBuf::from("pool.pspl"),
            checkpoint: None,
            out: PathBuf::from("psn"),
            epochs: t.epochs,
            batch_size: t.batch_size,
            l2_lambda: t.l2_lambda,
            dropout_rate: t.dropout_rate,
            learning_rate: t.adam.alpha,
            eval_chunk: t.eval_chunk,
            scenes: g.scenes,
            scene_height: g.scene_height,
            scene_width: g.scene_width,
            target_pairs: g.target_pairs,
            bumps: g.scene.bumps,
            max_height: g.scene.max_height,
            albedo_smoothing: g.scene.albedo_smoothing,
            incidence_deg: g.sensor.incidence_deg,
            looks: g.sensor.looks,
            sun_elevation_deg: g.sensor.sun_elevation_deg,
            sar_albedo_weight: g.sensor.sar_albedo_weight,
            amplitude_scale: g.sensor.amplitude_scale,
            keypoints: 100,
            match_threshold: 0.5,
            fpr_cap: 0.05,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl RunConfig {
    /// Applies one setting; `Ok(false)` for an unknown key.
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "pool" => self.pool = PathBuf::from(value),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "l2_lambda" => self.l2_lambda = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "eval_chunk" => self.eval_chunk = parse(key, value)?,
            "scenes" => self.scenes = parse(key, value)?,
            "scene_height" => self.scene_height = parse(key, value)?,
            "scene_width" => self.scene_width = parse(key, value)?,
            "target_pairs" => self.target_pairs = parse(key, value)?,
            "bumps" => self.bumps = parse(key, value)?,
            "max_height" => self.max_height = parse(key, value)?,
            "albedo_smoothing" => self.albedo_smoothing = parse(key, value)?,
            "incidence_deg" => self.incidence_deg = parse(key, value)?,
            "looks" => self.looks = parse(key, value)?,
            "sun_elevation_deg" => self.sun_elevation_deg = parse(key, value)?,
            "sar_albedo_weight" => self.sar_albedo_weight = parse(key, value)?,
            "amplitude_scale" => self.amplitude_scale = parse(key, value)?,
            "keypoints" => self.keypoints = parse(key, value)?,
            "match_threshold" => self.match_threshold = parse(key, value)?,
            "fpr_cap" => self.fpr_cap = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Defaults overridden by the settings in `text`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            if !cfg.set(key, value)? {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.with_suffix(".ckpt"))
    }

    /// `<out><suffix>`.
    pub fn with_suffix(&self, suffix: &str) -> PathBuf {
        let mut p = self.out.as_os_str().to_owned();
        p.push(suffix);
        PathBuf::from(p)
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.seed,
            patch_size: self.patch_size,
            scenes: self.scenes,
            scene_height: self.scene_height,
            scene_width: self.scene_width,
            target_pairs: self.target_pairs,
            scene: SceneConfig {
                bumps: self.bumps,
                max_height: self.max_height,
                albedo_smoothing: self.albedo_smoothing,
                ..SceneConfig::default()
            },
            sensor: SensorConfig {
                incidence_deg: self.incidence_deg,
                looks: self.looks,
                sun_elevation_deg: self.sun_elevation_deg,
                sar_albedo_weight: self.sar_albedo_weight,
                amplitude_scale: self.amplitude_scale,
            },
            ..GeneratorConfig::default()
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            l2_lambda: self.l2_lambda,
            dropout_rate: self.dropout_rate,
            seed: self.seed,
            adam: AdamConfig {
                alpha: self.learning_rate,
                ..AdamConfig::default()
            },
            eval_chunk: self.eval_chunk,
        }
    }
}
