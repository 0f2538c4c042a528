//! Noise schedule, conditional denoiser, pretraining and the reverse chain.

pub mod denoiser;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use denoiser::{denoise, timestep_embedding, Denoiser, DenoiserConfig, PreparedCondition};
pub use sampler::{reverse_chain, sample_unguided, Guidance, StepContext, SAMPLER_CHUNK};
pub use schedule::{build_schedule, forward_sample, NoiseSchedule, ScheduleKind};
pub use train::{diff_loss, pretrain_phase1, Conditioning, DiffLossConfig, Phase1Config, Phase1Outcome};
