//! Latent diffusion engine for zero-shot image-to-image translation across
//! large domain gaps, with the evaluation protocol used to score it.

pub mod codec;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod verify;

pub use codec::{Codec, CodecConfig, CodecTrainConfig};
pub use data::{DatasetManifest, Domain, GlyphSpec, Orientation, Split};
pub use denoiser::{ConditionEmbedding, Denoiser, DenoiserConfig, DenoiserTrainConfig, Template};
pub use error::{Error, Result};
pub use eval::{Classifier, ClassifierTrainConfig, MetricsReport};
pub use numerics::{AdamConfig, AdamState, ParamStore, Tensor};
pub use pipeline::{SweepAxis, SweepResult, SweepValue, TranslationConfig};
pub use sampler::{Guidance, NoisePredictor, SamplerConfig};
pub use schedule::{NoiseSchedule, ScheduleConfig, ScheduleKind};
