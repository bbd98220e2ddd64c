//! Two-stage controllable generation of tactile frames in a learned latent
//! space: a force-conditioned denoising transformer, a mask-conditioned
//! control branch grafted onto its first half, baseline variants for
//! comparison, and a deterministic strided sampler.

pub mod codec;
pub mod controlnet;
pub mod dit;
pub mod embed;
pub mod error;
pub mod net;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use codec::{train_codec, Codec, CodecConfig, Latent, TrainReport};
pub use controlnet::{
    controlnet_residuals, init_controlnet, predict_noise_controlled, ControlNetWeights,
};
pub use dit::{init_generator, CondMode, DiTConfig, GeneratorWeights};
pub use error::{DiffusionError, Result};
pub use sampler::{ddim_sample_latent, generate, generate_positioned, DenoiserRef, SampleCond};
pub use schedule::{NoiseSchedule, ScheduleConfig, StepCoefficients};
pub use train::{
    build_masked_tuples, build_separate_tuples, build_stage1_pairs, encode_split, train_denoiser,
    train_stage2, LatentBank, TrainConfig, TrainItem,
};
