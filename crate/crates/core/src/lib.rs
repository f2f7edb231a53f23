pub mod annotation;
pub mod assignment;
pub mod config;
pub mod geometry;
pub mod image;
pub mod model;
pub mod objectives;
pub mod scalar;
pub mod shard;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod zeroshot;

pub use assignment::{hungarian, Assignment};
pub use config::{resolve_config, GrainConfig, RunManifest};
pub use geometry::NormBox;
pub use model::{GrainModel, ModelConfig};
pub use scalar::Scalar;
pub use training::TrainConfig;

pub type Model32 = GrainModel<f32>;
pub type Model64 = GrainModel<f64>;
pub type Box32 = NormBox<f32>;
pub type Box64 = NormBox<f64>;
pub type ExactBox = NormBox<num_rational::Rational64>;
