//! Spatio-temporal memory attention for audio-visual sound source
//! localization, with a small f64 autodiff engine, synthetic training data,
//! box extraction and evaluation metrics.

pub mod attention;
pub mod autodiff;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod localization;
pub mod metrics;
pub mod model;
pub mod params;
pub mod render;
pub mod rng;
pub mod scenes;
pub mod stm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use localization::BBox;
pub use model::{Model, ModelConfig};
pub use scenes::{SceneConfig, SceneSample};
pub use stm::Ablation;
pub use tensor::Tensor;
pub use training::TrainConfig;
