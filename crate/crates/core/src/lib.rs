//! Radar object detection on range-azimuth maps: model family, confidence-map
//! codec, evaluation, synthetic data and complexity profiling.

pub mod blocks;
pub mod config;
pub mod error;
pub mod layers;
pub mod model;
pub mod params;

pub use config::{ModelConfig, Variant};
pub use error::{Category, CoreError, Result};
pub use layers::{LayerDesc, LayerKind};
pub use model::{build_model, Model};
pub use params::{Bound, Builder, ParamStore};
pub mod profiler;
pub mod confmap;
pub mod eval;
pub mod synth;
pub mod dataset;
pub mod checkpoint;
