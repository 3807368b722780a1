use crate::diffusion::{refine, Conditioning, DenoiserModel, Noise, NoiseSchedule, SamplerOptions};
use crate::error::{Error, Result};
use crate::latent::make_noise_pack;
use crate::nn::{RngStream, Tensor};
use crate::vae::{decode, sample_prior, LatentSource, VaeModel};

use super::checkpoint::Checkpoint;
use super::scaling::{scale_to_ddpm, scale_to_vae};

/// Source of generation-time VAE latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentChoice {
    Normal,
    Gmm,
}

/// Maps a refined `[-1, 1]` batch back to `[0, 1]`. Values already passed the
/// guard band in `scale_to_vae`; the clamp only absorbs rounding.
fn to_unit(x11: &Tensor) -> Result<Tensor> {
    Ok(scale_to_vae(x11)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Decodes `z`, refines the reconstruction, and returns samples in `[0, 1]`.
pub fn generate_from_latents(
    vae: &VaeModel,
    denoiser: &DenoiserModel,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
    z: &Tensor,
    noise: Noise<'_>,
) -> Result<Tensor> {
    if denoiser.conditioning == Conditioning::Unconditional {
        return Err(Error::config("unconditional refiner has no VAE conditioning path"));
    }
    let x_hat = decode(vae, z)?;
    let cond = scale_to_ddpm(&x_hat)?;
    to_unit(&refine(denoiser, &cond, sched, opts, noise)?)
}

fn shared_or_fresh<'a>(
    shared_noise: Option<u64>,
    dim: usize,
    opts: &SamplerOptions,
    rng: &'a mut RngStream,
    slot: &'a mut Option<crate::latent::NoisePack>,
) -> Result<Noise<'a>> {
    Ok(match shared_noise {
        Some(seed) => Noise::Pack(slot.insert(make_noise_pack(seed, &[1, dim], opts.steps, opts.scheme)?)),
        None => Noise::Rng(rng),
    })
}

/// Full generative path: latent draw, decode, refine, rescale.
///
/// With `shared_noise` one single-row pack is broadcast over all `n` samples,
/// so outputs depend on the batch only through the latents.
pub fn generate(
    ckpt: &Checkpoint,
    n: usize,
    opts: &SamplerOptions,
    source: LatentChoice,
    shared_noise: Option<u64>,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let vae = ckpt.vae()?;
    let (denoiser, sched) = ckpt.refiner()?;
    if n == 0 {
        return Ok(Tensor::zeros(&[0, vae.data_dim]));
    }
    let latent_source = match source {
        LatentChoice::Normal => LatentSource::StandardNormal,
        LatentChoice::Gmm => LatentSource::Gmm(ckpt.gmm.as_ref().ok_or_else(|| Error::config("checkpoint has no GMM; run fit-gmm"))?),
    };
    let mut latent_rng = rng.fork("latents");
    let (z, _) = sample_prior(vae, n, &mut latent_rng, latent_source)?;
    let mut slot = None;
    let noise = shared_or_fresh(shared_noise, vae.data_dim, opts, rng, &mut slot)?;
    generate_from_latents(vae, denoiser, sched, opts, &z, noise)
}

/// Samples from a baseline checkpoint whose refiner ignores conditioning.
pub fn generate_unconditional(ckpt: &Checkpoint, n: usize, opts: &SamplerOptions, shared_noise: Option<u64>, rng: &mut RngStream) -> Result<Tensor> {
    let (denoiser, sched) = ckpt.refiner()?;
    if denoiser.conditioning != Conditioning::Unconditional {
        return Err(Error::config("checkpoint does not hold an unconditional refiner"));
    }
    let dim = denoiser.data_dim;
    if n == 0 {
        return Ok(Tensor::zeros(&[0, dim]));
    }
    let mut slot = None;
    let noise = shared_or_fresh(shared_noise, dim, opts, rng, &mut slot)?;
    to_unit(&refine(denoiser, &Tensor::zeros(&[n, dim]), sched, opts, noise)?)
}
