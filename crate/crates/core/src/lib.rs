//! Region-aware acceleration for diffusion-transformer sampling.
//!
//! Early denoising steps reveal which blocks of a latent are complex. Simple
//! blocks are frozen for several steps at a time while their cached keys and
//! values keep participating in attention, so the remaining tokens see the
//! full sequence at a fraction of the compute.

pub mod analyzer;
pub mod error;
pub mod flow;
pub mod latents;
pub mod runtime;
pub mod scheduler;
pub mod synth;

pub use analyzer::{AnalyzerConfig, ComplexityMap, Correlation, GroundTruthMaps};
pub use error::{Error, Result};
pub use flow::{MixtureTarget, NoiseSchedule, Trajectory};
pub use latents::{BlockFeatureMatrix, BlockGrid, BlockSize, LatentShape, LatentTensor, TokenMatrix, Volume, VolumeDims};
pub use runtime::{KVCacheStore, ModelConfig, PipelineState, ToyDiT};
pub use scheduler::{Level, LevelMap, Phase, ScheduleConfig, StepPlan};
pub use synth::{DenoisingRun, Pattern, Region, SceneSpec};
