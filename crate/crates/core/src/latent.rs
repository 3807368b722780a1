//! Latent-space tools: frozen reverse-process noise, interpolation, attribute
//! edits, and temperature scaling.

use crate::diffusion::{DenoiserModel, Noise, NoiseSchedule, SamplerOptions, Scheme};
use crate::error::{Error, Result};
use crate::nn::{RngStream, Tensor};
use crate::pipeline::generate_from_latents;
use crate::vae::{encode, VaeModel};

/// Frozen `x_T` noise plus one noise tensor per reverse step of a `(K, scheme)`
/// subsequence. A pack drawn for a single row is broadcast to any batch, so
/// every sample shares the same reverse-process randomness.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePack {
    seed: u64,
    x_t_noise: Tensor,
    step_noise: Vec<Tensor>,
    steps: usize,
    scheme: Scheme,
}

impl NoisePack {
    /// Deterministic pack from `seed`; `shape` is `[rows, dim]`.
    pub fn generate(seed: u64, shape: &[usize], steps: usize, scheme: Scheme) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("noise pack needs K >= 1"));
        }
        if shape.len() != 2 {
            return Err(Error::shape(format!("noise pack shape must be [rows, dim], got {shape:?}")));
        }
        let mut rng = RngStream::derive(seed, "noise-pack");
        Ok(Self::draw(&mut rng, shape, steps, scheme))
    }

    /// Pack drawn from an existing stream. Its `seed()` is the stream's seed,
    /// which does not by itself reproduce the pack.
    pub fn draw(rng: &mut RngStream, shape: &[usize], steps: usize, scheme: Scheme) -> Self {
        let x_t_noise = rng.gaussian(shape);
        let step_noise = (0..steps).map(|_| rng.gaussian(shape)).collect();
        NoisePack { seed: rng.seed(), x_t_noise, step_noise, steps, scheme }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn rows(&self) -> usize {
        self.x_t_noise.rows()
    }

    pub fn dim(&self) -> usize {
        self.x_t_noise.cols()
    }

    pub fn step_noise(&self) -> &[Tensor] {
        &self.step_noise
    }

    /// Same step noise with a different unit-variance `x_T` part.
    pub fn with_x_t_noise(&self, x_t_noise: Tensor) -> Result<Self> {
        self.x_t_noise.check_same(&x_t_noise)?;
        Ok(NoisePack { x_t_noise, ..self.clone() })
    }

    pub fn check_compatible(&self, rows: usize, dim: usize, steps: usize, scheme: Scheme) -> Result<()> {
        if self.steps != steps || self.scheme != scheme {
            return Err(Error::config(format!(
                "noise pack is for K = {} ({:?}), sampler wants K = {steps} ({scheme:?})",
                self.steps, self.scheme
            )));
        }
        if self.dim() != dim || (self.rows() != rows && self.rows() != 1) {
            return Err(Error::shape(format!("noise pack is {}x{}, batch is {rows}x{dim}", self.rows(), self.dim())));
        }
        Ok(())
    }

    fn broadcast(t: &Tensor, rows: usize) -> Result<Tensor> {
        if t.rows() == rows {
            Ok(t.as_matrix())
        } else if t.rows() == 1 {
            Ok(Tensor::repeat_row(t.row(0), rows))
        } else {
            Err(Error::shape(format!("noise pack has {} rows, batch has {rows}", t.rows())))
        }
    }

    /// Unit-variance part of `x_T` for a batch of `rows`.
    pub fn x_t_noise(&self, rows: usize) -> Result<Tensor> {
        Self::broadcast(&self.x_t_noise, rows)
    }

    /// Noise for reverse step `i`, counted from the first step taken at `t = T`.
    pub fn step(&self, i: usize, rows: usize) -> Result<Tensor> {
        let z = self.step_noise.get(i).ok_or_else(|| Error::config(format!("noise pack has no step {i}")))?;
        Self::broadcast(z, rows)
    }
}

pub fn make_noise_pack(seed: u64, shape: &[usize], steps: usize, scheme: Scheme) -> Result<NoisePack> {
    NoisePack::generate(seed, shape, steps, scheme)
}

/// `lam · a + (1 - lam) · b`; `lam` weights the first argument.
pub fn lerp(a: &Tensor, b: &Tensor, lam: f64) -> Result<Tensor> {
    a.axpby(lam, b, 1.0 - lam)
}

/// Mean latent difference between paired positive and negative examples.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeDirection {
    pub vector: Tensor,
    pub n_pairs: usize,
    pub name: String,
}

/// `z_a = mean_i [f(pos_i) - f(neg_i)]` with `f` the encoder posterior mean.
pub fn attribute_direction(vae: &VaeModel, pos: &Tensor, neg: &Tensor, name: &str) -> Result<AttributeDirection> {
    if pos.rows() != neg.rows() {
        return Err(Error::Pairing(format!("{} positives vs {} negatives", pos.rows(), neg.rows())));
    }
    if pos.is_empty() {
        return Err(Error::Pairing("need at least one pair".into()));
    }
    let diff = encode(vae, pos)?.mu.sub(&encode(vae, neg)?.mu)?;
    let vector = Tensor::from_vec(diff.col_mean());
    if !vector.is_finite() {
        return Err(Error::NonFinite { op: "attribute_direction" });
    }
    Ok(AttributeDirection { vector, n_pairs: pos.rows(), name: name.to_string() })
}

/// `z_n + lam · z_a`, row-wise when `z_n` holds several latents.
pub fn apply_edit(z_n: &Tensor, dir: &AttributeDirection, lam: f64) -> Result<Tensor> {
    if z_n.cols() != dir.vector.len() {
        return Err(Error::shape(format!("latent width {} vs direction length {}", z_n.cols(), dir.vector.len())));
    }
    let mut out = z_n.clone();
    let width = z_n.cols();
    if width == 0 {
        return Ok(out);
    }
    for (v, d) in out.data_mut().iter_mut().zip(dir.vector.data().iter().cycle()) {
        *v += lam * d;
    }
    Ok(out)
}

/// `lam · x_T_noise`, the unit-variance part only.
pub fn temperature_scale(x_t_noise: &Tensor, lam: f64) -> Result<Tensor> {
    if !(lam > 0.0) || !lam.is_finite() {
        return Err(Error::config(format!("temperature must be positive, got {lam}")));
    }
    Ok(x_t_noise.scale(lam))
}

/// What is interpolated.
#[derive(Clone, Copy, Debug)]
pub enum Interpolation<'a> {
    /// Between two VAE latents, every point refined with the same pack.
    VaeLatent { z2: &'a Tensor },
    /// Between two `x_T` noises at a fixed VAE latent.
    DdpmLatent { x_t_a: &'a Tensor, x_t_b: &'a Tensor },
}

/// One refined sample in `[0, 1]` per entry of `lams`.
#[allow(clippy::too_many_arguments)]
pub fn interpolate_generate(
    vae: &VaeModel,
    denoiser: &DenoiserModel,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
    z1: &Tensor,
    lams: &[f64],
    mode: Interpolation<'_>,
    pack: &NoisePack,
) -> Result<Vec<Tensor>> {
    let z1 = z1.as_matrix().reshape(vec![1, z1.len()])?;
    pack.check_compatible(1, denoiser.data_dim, opts.steps, opts.scheme)?;
    lams.iter()
        .map(|&lam| match mode {
            Interpolation::VaeLatent { z2 } => {
                if z2.len() != z1.len() {
                    return Err(Error::config("vae-latent interpolation needs two latents of equal width"));
                }
                let z = lerp(&z1, &z2.as_matrix().reshape(vec![1, z2.len()])?, lam)?;
                generate_from_latents(vae, denoiser, sched, opts, &z, Noise::Pack(pack))
            }
            Interpolation::DdpmLatent { x_t_a, x_t_b } => {
                let shape = [1, denoiser.data_dim];
                if x_t_a.len() != shape[1] || x_t_b.len() != shape[1] {
                    return Err(Error::config("ddpm-latent interpolation needs two x_T noises of data width"));
                }
                let a = x_t_a.as_matrix().reshape(shape.to_vec())?;
                let b = x_t_b.as_matrix().reshape(shape.to_vec())?;
                let mixed = pack.with_x_t_noise(lerp(&a, &b, lam)?)?;
                generate_from_latents(vae, denoiser, sched, opts, &z1, Noise::Pack(&mixed))
            }
        })
        .collect()
}
