//! Flat TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use radarformer_core::error::{CoreError, Result};
use radarformer_core::synth::SynthConfig;
use radarformer_core::ModelConfig;

use crate::config_err;
use serde::{Deserialize, Serialize};

pub fn reference_model(name: &str) -> Result<ModelConfig> {
    ModelConfig::reference(name).ok_or_else(|| {
        config_err!("unknown model {name:?}; known: {}", ModelConfig::reference_names().join(", "))
    })
}

/// Name of the merged configuration written next to outputs.
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Step,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Reference model name; ignored when `model_file` is set.
    pub model: String,
    pub model_file: Option<PathBuf>,
    /// Overrides the model's temporal window.
    pub window: Option<usize>,
    pub train_stride: usize,
    pub test_stride: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: ScheduleKind,
    /// Number of decays for the step schedule.
    pub lr_steps: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub peak_floor: f64,
    /// L-NMS suppression threshold. The car tolerance grows as twice the
    /// range, so distinct same-class targets a few metres out already have
    /// OLS above 0.9; lower values merge them.
    pub nms_threshold: f64,
    pub deterministic: bool,
    pub checkpoint: Option<PathBuf>,
    pub heatmaps: bool,
    /// Detections file for `eval`.
    pub detections: Option<PathBuf>,

    pub sequences: usize,
    pub frames: usize,
    pub chirps: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub max_drift: f64,

    pub profile_models: Vec<String>,
    pub warmup: usize,
    pub runs: usize,
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            model: "radarformer-tiny".into(),
            model_file: None,
            window: None,
            train_stride: 8,
            test_stride: 8,
            epochs: 20,
            batch_size: 1,
            lr_start: 1e-4,
            lr_end: 1e-6,
            schedule: ScheduleKind::Step,
            lr_steps: 2,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            peak_floor: 0.3,
            nms_threshold: 0.99,
            deterministic: false,
            checkpoint: None,
            heatmaps: false,
            detections: None,
            sequences: 20,
            frames: s.frames,
            chirps: s.chirps,
            height: s.height,
            width: s.width,
            noise_sigma: s.noise_sigma,
            max_drift: s.max_drift,
            profile_models: vec!["radarformer-ref".into(), "hourglass3d-ref".into()],
            warmup: 1,
            runs: 3,
            timing: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err!("run config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| config_err!("{}: {e}", path.display()))
    }

    /// Reads the optional config file and applies `overrides` on top, each a
    /// `key=value` pair whose value is TOML (bare words are taken as strings).
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CoreError::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| config_err!("{}: {e}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for kv in overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| config_err!("override {kv:?} is not key=value"))?;
            let value = match format!("v = {v}").parse::<toml::Table>() {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(v.to_string()),
            };
            table.insert(k.trim().to_string(), value);
        }
        let cfg: Self = table.try_into().map_err(|e| config_err!("run config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_stride == 0 || self.test_stride == 0 {
            return Err(config_err!("strides must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be positive"));
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(config_err!("need lr_start > lr_end > 0, got {} and {}", self.lr_start, self.lr_end));
        }
        if !(0.0..1.0).contains(&self.peak_floor) {
            return Err(config_err!("peak_floor must be in [0, 1), got {}", self.peak_floor));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(config_err!("nms_threshold must be in [0, 1], got {}", self.nms_threshold));
        }
        if self.runs < 3 {
            return Err(config_err!("runs must be at least 3, got {}", self.runs));
        }
        Ok(())
    }

    /// Model configuration after applying the window override.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.model_file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CoreError::io(p, e))?;
                ModelConfig::from_toml(&text).map_err(|e| config_err!("{}: {e}", p.display()))?
            }
            None => reference_model(&self.model)?,
        };
        if let Some(w) = self.window {
            cfg.frames = w;
        }
        cfg.validate()?;
        if self.train_stride > cfg.frames {
            return Err(config_err!("train_stride {} exceeds window {}", self.train_stride, cfg.frames));
        }
        if self.test_stride > cfg.frames {
            return Err(config_err!("test_stride {} exceeds window {}", self.test_stride, cfg.frames));
        }
        Ok(cfg)
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            frames: self.frames,
            chirps: self.chirps,
            height: self.height,
            width: self.width,
            noise_sigma: self.noise_sigma,
            max_drift: self.max_drift,
        }
    }

    /// Writes the merged configuration into `dir`.
    pub fn write_effective(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| CoreError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let c = RunConfig { window: Some(16), checkpoint: Some("a.ck".into()), ..Default::default() };
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = RunConfig::from_toml("epochs = 3\nschedule = \"cosine\"").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.train_stride, 8);
        assert_eq!(partial.schedule, ScheduleKind::Cosine);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("lr_start = 1e-6\nlr_end = 1e-4").is_err());
        let c = RunConfig::resolve(None, &["epochs=2".into(), "data_dir=/tmp/x".into(), "deterministic=true".into()])
            .unwrap();
        assert_eq!((c.epochs, c.deterministic), (2, true));
        assert_eq!(c.data_dir, PathBuf::from("/tmp/x"));
        assert!(RunConfig::resolve(None, &["epochs=zero".into()]).is_err());
        let c = RunConfig { train_stride: 64, ..Default::default() };
        assert!(c.model_config().is_err());
    }
}
