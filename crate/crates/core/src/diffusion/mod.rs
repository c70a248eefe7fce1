//! Noise schedules, the forward process, and DDPM / DDIM samplers with
//! classifier-free guidance.

mod sampler;
mod schedule;

pub use sampler::{
    cfg_predict, combine_guidance, guidance_labels, guided, ddim_sample, ddim_update, ddpm_mean, ddpm_step, ddpm_update,
    initial_noise, run_sampler, sample, spaced_timesteps, step_rng, Label, NoisePredictor,
    SamplerConfig, SamplerKind,
};
pub use schedule::{q_sample, q_sample_at, NoiseSchedule, ScheduleConfig};
