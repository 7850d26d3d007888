//! Intent-conditioned flow-matching policy.

pub mod checkpoint;
pub mod network;
pub mod sampler;
pub mod sft;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use network::{Architecture, PolicyParams};
pub use sampler::{
    guided_drift, replay_logprob, replay_logprob_grad, sample_sde, step_coeffs, Conditioning, SampledPath, SamplerConfig, SdeKernel,
    StepCoeffs,
};
pub use sft::{sft_loss, train_sft, SftConfig, SftExample, SftReport};
