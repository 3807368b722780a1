use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::form2;
use crate::latent::NoisePack;
use crate::nn::{RngStream, Tensor};
use crate::pipeline::GUARD_BAND;

use super::denoiser::EpsPredictor;
use super::schedule::{predict_x0_from_eps, NoiseSchedule, PosteriorCoeffs};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

/// How a `K`-step subsequence is picked out of the `T` training steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Linear,
    Quadratic,
}

/// Fixed reverse-step variance: `β̃_t` (small) or `β_t` (large).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarianceType {
    FixedSmall,
    FixedLarge,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerOptions {
    pub sampler: SamplerKind,
    /// DDIM stochasticity in `[0, 1]`; ignored by DDPM.
    pub eta: f64,
    /// Number of reverse steps `K`.
    pub steps: usize,
    pub scheme: Scheme,
    pub variance: VarianceType,
    pub clip_x0: bool,
    /// Scale on the unit-variance part of `x_T`.
    pub temperature: f64,
}

impl SamplerOptions {
    pub fn ddpm(steps: usize) -> Self {
        SamplerOptions {
            sampler: SamplerKind::Ddpm,
            eta: 1.0,
            steps,
            scheme: Scheme::Linear,
            variance: VarianceType::FixedSmall,
            clip_x0: true,
            temperature: 1.0,
        }
    }

    pub fn ddim(steps: usize, eta: f64) -> Self {
        SamplerOptions { sampler: SamplerKind::Ddim, eta, ..Self::ddpm(steps) }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > total_steps {
            return Err(Error::config(format!("steps must be in 1..={total_steps}, got {}", self.steps)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        // Zero is allowed here: it starts the chain at the base-measure mean.
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Strictly increasing steps in `[1, T]` ending at `T`.
///
/// Linear spaces `K` points evenly over `[1, T]`. Quadratic squares an even
/// grid over `(0, √T]`, rounds, and nudges collisions apart so that exactly
/// `K` distinct steps remain, dense near step 1.
pub fn spaced_subsequence(total: usize, k: usize, scheme: Scheme) -> Result<Vec<usize>> {
    if k == 0 || k > total {
        return Err(Error::config(format!("need 1 <= K <= T, got K = {k}, T = {total}")));
    }
    if k == 1 {
        return Ok(vec![total]);
    }
    let raw: Vec<usize> = match scheme {
        Scheme::Linear => {
            let span = (total - 1) as f64 / (k - 1) as f64;
            (0..k).map(|i| (1.0 + span * i as f64).round() as usize).collect()
        }
        Scheme::Quadratic => {
            let root = (total as f64).sqrt();
            (1..=k)
                .map(|i| {
                    let g = root * i as f64 / k as f64;
                    ((g * g).round() as usize).max(1)
                })
                .collect()
        }
    };
    let mut steps = raw;
    steps[k - 1] = total;
    for i in 1..k {
        if steps[i] <= steps[i - 1] {
            steps[i] = steps[i - 1] + 1;
        }
    }
    for i in (0..k).rev() {
        let cap = total - (k - 1 - i);
        if steps[i] > cap {
            steps[i] = cap;
        }
    }
    Ok(steps)
}

/// Source of the reverse-process randomness.
pub enum Noise<'a> {
    /// Fresh draws, materialized as a pack before the chain starts.
    Rng(&'a mut RngStream),
    /// Frozen `x_T` and per-step noise, shared across calls.
    Pack(&'a NoisePack),
}

pub(crate) fn resolve_noise<'a>(noise: Noise<'a>, rows: usize, dim: usize, opts: &SamplerOptions) -> Result<Cow<'a, NoisePack>> {
    let pack = match noise {
        Noise::Rng(rng) => Cow::Owned(NoisePack::draw(rng, &[rows, dim], opts.steps, opts.scheme)),
        Noise::Pack(p) => Cow::Borrowed(p),
    };
    pack.check_compatible(rows, dim, opts.steps, opts.scheme)?;
    Ok(pack)
}

/// Mean and standard deviation of one reverse transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub mean: Tensor,
    pub sigma: f64,
}

/// Ancestral step `t -> t_prev` through the forward posterior at the
/// predicted `x0`.
pub fn ddpm_transition(x_t: &Tensor, x0_pred: &Tensor, t: usize, t_prev: usize, sched: &NoiseSchedule, variance: VarianceType) -> Result<Transition> {
    let c = PosteriorCoeffs::between(sched, t, t_prev)?;
    let mean = x0_pred.axpby(c.coef_x0, x_t, c.coef_xt)?;
    Ok(Transition { mean, sigma: step_sigma(&c, variance) })
}

pub(crate) fn step_sigma(c: &PosteriorCoeffs, variance: VarianceType) -> f64 {
    match variance {
        VarianceType::FixedSmall => c.variance.sqrt(),
        VarianceType::FixedLarge => c.beta.sqrt(),
    }
}

/// DDIM noise level: `σ² = η² (1 - ᾱ_{t'}) / (1 - ᾱ_t) · (1 - ᾱ_t / ᾱ_{t'})`.
pub fn ddim_sigma(t: usize, t_prev: usize, eta: f64, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::config(format!("t_prev = {t_prev} must precede t = {t}")));
    }
    let (ab, abp) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let var = eta * eta * (1.0 - abp) / (1.0 - ab) * (1.0 - ab / abp);
    Ok(var.max(0.0).sqrt())
}

/// Direction term `(x_t - √ᾱ_t x0) / √(1 - ᾱ_t)` and the coefficient
/// `√(1 - ᾱ_{t'} - σ²)` multiplying it.
pub(crate) fn ddim_direction(x_t: &Tensor, x0_pred: &Tensor, t: usize, t_prev: usize, sigma: f64, sched: &NoiseSchedule) -> Result<(Tensor, f64)> {
    let (ab, abp) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let radicand = 1.0 - abp - sigma * sigma;
    if radicand < -1e-15 {
        return Err(Error::config(format!("eta too large for the jump {t} -> {t_prev}")));
    }
    let (s, r) = (ab.sqrt(), (1.0 - ab).sqrt());
    let dir = x_t.zip_map(x0_pred, |x, x0| (x - s * x0) / r)?;
    Ok((dir, radicand.max(0.0).sqrt()))
}

/// Non-Markovian DDIM step `t -> t_prev`.
pub fn ddim_transition(x_t: &Tensor, x0_pred: &Tensor, t: usize, t_prev: usize, eta: f64, sched: &NoiseSchedule) -> Result<Transition> {
    let sigma = ddim_sigma(t, t_prev, eta, sched)?;
    let (dir, c) = ddim_direction(x_t, x0_pred, t, t_prev, sigma, sched)?;
    let mean = x0_pred.axpby(sched.alpha_bar(t_prev).sqrt(), &dir, c)?;
    Ok(Transition { mean, sigma })
}

/// Which forward process the chain inverts. `Shifted` carries the
/// reconstruction the forward process is shifted towards.
#[derive(Clone, Copy)]
pub(crate) enum Shift<'a> {
    None,
    Shifted(&'a Tensor),
}

pub(crate) fn check_sampler_input(x: &Tensor, what: &str) -> Result<()> {
    if let Some(v) = x.data().iter().find(|v| !(v.abs() <= 1.0 + GUARD_BAND)) {
        return Err(Error::data(format!("{what} value {v} outside [-1, 1]")));
    }
    Ok(())
}

/// Runs the reverse chain and returns the final state before any bias
/// correction.
pub(crate) fn run_chain<P: EpsPredictor + ?Sized>(
    pred: &P,
    cond: &Tensor,
    shift: Shift<'_>,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
    noise: Noise<'_>,
) -> Result<Tensor> {
    opts.validate(sched.steps())?;
    check_sampler_input(cond, "conditioning")?;
    let cond = cond.as_matrix();
    let (rows, dim) = (cond.rows(), cond.cols());
    let pack = resolve_noise(noise, rows, dim, opts)?;
    let steps = spaced_subsequence(sched.steps(), opts.steps, opts.scheme)?;

    let start = pack.x_t_noise(rows)?;
    let mut x = match shift {
        Shift::None => start.scale(opts.temperature),
        Shift::Shifted(y) => y.as_matrix().axpby(1.0, &start, opts.temperature)?,
    };
    for (i, idx) in (0..steps.len()).rev().enumerate() {
        let t = steps[idx];
        let t_prev = if idx == 0 { 0 } else { steps[idx - 1] };
        let ts = vec![t; rows];
        let eps_hat = pred.predict_eps(&x, &cond, &ts)?;
        let x0_pred = match shift {
            Shift::None => predict_x0_from_eps(&x, t, &eps_hat, sched, opts.clip_x0)?,
            Shift::Shifted(y) => form2::predict_x0_form2(&x, y, t, &eps_hat, sched, opts.clip_x0)?,
        };
        let tr = match (opts.sampler, shift) {
            (SamplerKind::Ddpm, Shift::None) => ddpm_transition(&x, &x0_pred, t, t_prev, sched, opts.variance)?,
            (SamplerKind::Ddpm, Shift::Shifted(y)) => form2::ddpm_transition_form2(&x, &x0_pred, y, t, t_prev, sched, opts.variance)?,
            (SamplerKind::Ddim, Shift::None) => ddim_transition(&x, &x0_pred, t, t_prev, opts.eta, sched)?,
            (SamplerKind::Ddim, Shift::Shifted(y)) => form2::ddim_transition_form2(&x, &x0_pred, y, t, t_prev, opts.eta, sched)?,
        };
        x = if t_prev > 0 && tr.sigma > 0.0 {
            tr.mean.axpby(1.0, &pack.step(i, rows)?, tr.sigma)?
        } else {
            tr.mean
        };
        if !x.is_finite() {
            return Err(Error::Divergence { t });
        }
    }
    Ok(x)
}

fn expect_kind(opts: &SamplerOptions, kind: SamplerKind) -> Result<()> {
    if opts.sampler != kind {
        return Err(Error::config(format!("options select {:?}, this sampler is {kind:?}", opts.sampler)));
    }
    Ok(())
}

/// Ancestral sampling of the concatenation-conditioned refiner.
pub fn ddpm_sample_form1<P: EpsPredictor + ?Sized>(pred: &P, x0_hat_cond: &Tensor, sched: &NoiseSchedule, opts: &SamplerOptions, noise: Noise<'_>) -> Result<Tensor> {
    expect_kind(opts, SamplerKind::Ddpm)?;
    run_chain(pred, x0_hat_cond, Shift::None, sched, opts, noise)
}

/// DDIM sampling of the concatenation-conditioned refiner.
pub fn ddim_sample_form1<P: EpsPredictor + ?Sized>(pred: &P, x0_hat_cond: &Tensor, sched: &NoiseSchedule, opts: &SamplerOptions, noise: Noise<'_>) -> Result<Tensor> {
    expect_kind(opts, SamplerKind::Ddim)?;
    run_chain(pred, x0_hat_cond, Shift::None, sched, opts, noise)
}

/// Form-1 sampling with whichever sampler `opts` selects.
pub fn sample_form1<P: EpsPredictor + ?Sized>(pred: &P, x0_hat_cond: &Tensor, sched: &NoiseSchedule, opts: &SamplerOptions, noise: Noise<'_>) -> Result<Tensor> {
    run_chain(pred, x0_hat_cond, Shift::None, sched, opts, noise)
}
