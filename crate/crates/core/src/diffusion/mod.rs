//! Shared DDPM machinery and the concatenation-conditioned refiner.

mod denoiser;
mod sampler;
mod schedule;
mod train;

pub use denoiser::{denoising_loss_grad, noise_mse, Conditioning, DenoiserModel, EpsPredictor, LOSS_GUARD};
pub use sampler::{
    ddim_sample_form1, ddim_sigma, ddim_transition, ddpm_sample_form1, ddpm_transition, sample_form1, spaced_subsequence, Noise,
    SamplerKind, SamplerOptions, Scheme, Transition, VarianceType,
};
pub use schedule::{
    forward_posterior, linear_schedule, predict_x0_from_eps, q_sample, q_sample_rows, NoiseSchedule, PosteriorCoeffs,
};
pub use train::{
    refine, train_ddpm_form1, train_ddpm_form2, train_denoiser, train_unconditional, DdpmTrainConfig, StepObserver, TrainStep,
    TrainedDenoiser,
};

pub(crate) use denoiser::check_ddpm_scale;
pub(crate) use sampler::{ddim_direction, resolve_noise, run_chain, step_sigma, Shift};

use crate::error::Result;
use crate::nn::{MlpParams, Tensor};

/// Simplified denoising loss with concatenation conditioning:
/// `mean((eps - ε(q_sample(x0, t, eps) | x̂0, t))²)`, one step per row.
pub fn ddpm_loss_form1<P: EpsPredictor + ?Sized>(
    pred: &P,
    x0: &Tensor,
    x0_hat_cond: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<f64> {
    check_ddpm_scale(x0, "x0")?;
    check_ddpm_scale(x0_hat_cond, "x0_hat")?;
    let x_t = q_sample_rows(x0, t, eps, sched)?;
    let eps_hat = pred.predict_eps(&x_t, x0_hat_cond, t)?;
    noise_mse(eps, &eps_hat)
}

/// Loss and parameter gradient of [`ddpm_loss_form1`].
pub fn ddpm_loss_grad_form1(
    model: &DenoiserModel,
    x0: &Tensor,
    x0_hat_cond: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<(f64, MlpParams)> {
    check_ddpm_scale(x0, "x0")?;
    check_ddpm_scale(x0_hat_cond, "x0_hat")?;
    let x_t = q_sample_rows(x0, t, eps, sched)?;
    denoising_loss_grad(model, &x_t, x0_hat_cond, t, eps)
}
