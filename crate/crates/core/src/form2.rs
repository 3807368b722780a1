//! Refiner whose forward process is shifted towards the VAE reconstruction.
//!
//! The forward chain
//!
//! ```text
//! x_1 = √(1-β_1) x0 + x̂0 + √β_1 ε
//! x_t = √(1-β_t) x_{t-1} + (1 - √(1-β_t)) x̂0 + √β_t ε      (t > 1)
//! ```
//!
//! has marginal `N(√ᾱ_t x0 + x̂0, (1-ᾱ_t) I)`, so the base measure is centred on
//! the reconstruction. Its posterior is the standard forward posterior plus
//! `κ x̂0` with `κ = 1 - γ₁`, and the final sample is bias-corrected by
//! subtracting `x̂0`.

use crate::diffusion::{
    check_ddpm_scale, ddim_direction, ddim_sigma, noise_mse, resolve_noise, run_chain, step_sigma, DenoiserModel, EpsPredictor,
    Noise, NoiseSchedule, PosteriorCoeffs, SamplerKind, SamplerOptions, Shift, Transition, VarianceType,
};
use crate::error::{Error, Result};
use crate::nn::{MlpParams, Tensor};

/// Shifted-posterior coefficients at step `t`:
/// `μ̂ = γ₀ x0 + γ₁ x_t + γ₂ x̂0`, variance `β̂_t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Form2Coeffs {
    pub t: usize,
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta_hat: f64,
    pub kappa: f64,
}

impl Form2Coeffs {
    fn from_posterior(t: usize, c: &PosteriorCoeffs) -> Self {
        let kappa = 1.0 - c.coef_xt;
        Form2Coeffs { t, gamma0: c.coef_x0, gamma1: c.coef_xt, gamma2: kappa, beta_hat: c.variance, kappa }
    }
}

pub fn form2_posterior_coeffs(t: usize, sched: &NoiseSchedule) -> Result<Form2Coeffs> {
    Ok(Form2Coeffs::from_posterior(t, &PosteriorCoeffs::at(sched, t)?))
}

/// Shifted-marginal draw `√ᾱ_t x0 + x̂0 + √(1-ᾱ_t) eps`.
pub fn q_sample_form2(x0: &Tensor, x0_hat: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if t > sched.steps() {
        return Err(Error::Index { t, max: sched.steps() });
    }
    let ab = sched.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.check_same(x0_hat)?;
    x0.check_same(eps)?;
    let data = x0
        .data()
        .iter()
        .zip(x0_hat.data())
        .zip(eps.data())
        .map(|((&x, &y), &e)| (a * x + y) + s * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Row-wise [`q_sample_form2`] with one step per row.
pub fn q_sample_form2_rows(x0: &Tensor, x0_hat: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    x0.check_same(x0_hat)?;
    x0.check_same(eps)?;
    if ts.len() != x0.rows() {
        return Err(Error::shape(format!("{} steps for {} rows", ts.len(), x0.rows())));
    }
    let mut out = x0.as_matrix();
    for (i, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let ab = sched.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for ((o, y), e) in out.row_mut(i).iter_mut().zip(x0_hat.row(i)).zip(eps.row(i)) {
            *o = (a * *o + y) + s * e;
        }
    }
    Ok(out)
}

/// One step of the shifted forward chain.
///
/// `x_prev` is ignored at `t = 1`, where the chain starts from `x0`.
pub fn step_kernel_form2(x_prev: &Tensor, x0: &Tensor, x0_hat: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let beta = sched.beta(t);
    let keep = (1.0 - beta).sqrt();
    let noise = beta.sqrt();
    x0_hat.check_same(eps)?;
    let base = if t == 1 { x0 } else { x_prev };
    base.check_same(eps)?;
    let data = if t == 1 {
        base.data()
            .iter()
            .zip(x0_hat.data())
            .zip(eps.data())
            .map(|((&x, &y), &e)| (keep * x + y) + noise * e)
            .collect()
    } else {
        base.data()
            .iter()
            .zip(x0_hat.data())
            .zip(eps.data())
            .map(|((&x, &y), &e)| (keep * x + (1.0 - keep) * y) + noise * e)
            .collect()
    };
    Tensor::new(base.shape().to_vec(), data)
}

/// `(x_t - x̂0 - √(1-ᾱ_t) eps_hat) / √ᾱ_t`, optionally clipped to `[-1, 1]`.
pub fn predict_x0_form2(x_t: &Tensor, x0_hat: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule, clip: bool) -> Result<Tensor> {
    if t > sched.steps() {
        return Err(Error::Index { t, max: sched.steps() });
    }
    let (s, r) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    let shifted = x_t.sub(x0_hat)?;
    let x0 = shifted.zip_map(eps_hat, |x, e| (x - r * e) / s)?;
    Ok(if clip { x0.map(|v| v.clamp(-1.0, 1.0)) } else { x0 })
}

/// Denoising loss for the shifted forward process, one step per row.
pub fn ddpm_train_step_form2<P: EpsPredictor + ?Sized>(
    pred: &P,
    x0: &Tensor,
    x0_hat: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<f64> {
    check_ddpm_scale(x0, "x0")?;
    check_ddpm_scale(x0_hat, "x0_hat")?;
    let x_t = q_sample_form2_rows(x0, x0_hat, t, eps, sched)?;
    let eps_hat = pred.predict_eps(&x_t, x0_hat, t)?;
    noise_mse(eps, &eps_hat)
}

/// Loss and gradient of [`ddpm_train_step_form2`] for a trainable model.
pub fn ddpm_loss_grad_form2(
    model: &DenoiserModel,
    x0: &Tensor,
    x0_hat: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<(f64, MlpParams)> {
    check_ddpm_scale(x0, "x0")?;
    check_ddpm_scale(x0_hat, "x0_hat")?;
    let x_t = q_sample_form2_rows(x0, x0_hat, t, eps, sched)?;
    crate::diffusion::denoising_loss_grad(model, &x_t, x0_hat, t, eps)
}

/// Shifted ancestral step `t -> t_prev`: `γ₀ x0 + γ₁ x_t + γ₂ x̂0`. For
/// non-adjacent steps the coefficients come from the respaced posterior.
pub fn ddpm_transition_form2(
    x_t: &Tensor,
    x0_pred: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    variance: VarianceType,
) -> Result<Transition> {
    let c = PosteriorCoeffs::between(sched, t, t_prev)?;
    let g = Form2Coeffs::from_posterior(t, &c);
    let mean = x0_pred.axpby(g.gamma0, x_t, g.gamma1)?.axpby(1.0, x0_hat, g.gamma2)?;
    Ok(Transition { mean, sigma: step_sigma(&c, variance) })
}

/// DDIM noise level for the shifted process (identical to the unshifted one).
pub fn ddim_sigma_form2(t: usize, t_prev: usize, eta: f64, sched: &NoiseSchedule) -> Result<f64> {
    ddim_sigma(t, t_prev, eta, sched)
}

/// `κ = 1 - √(1 - ᾱ_{t'} - σ²) / √(1 - ᾱ_t)`.
pub fn ddim_kappa_form2(t: usize, t_prev: usize, sigma: f64, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::config(format!("t_prev = {t_prev} must precede t = {t}")));
    }
    let radicand = 1.0 - sched.alpha_bar(t_prev) - sigma * sigma;
    if radicand < 0.0 {
        return Err(Error::config(format!("negative radicand {radicand} at {t} -> {t_prev}: eta too large")));
    }
    Ok(1.0 - radicand.sqrt() / (1.0 - sched.alpha_bar(t)).sqrt())
}

/// Shifted DDIM step with mean
/// `√ᾱ_{t'} x0 + √(1-ᾱ_{t'}-σ²) (x_t - √ᾱ_t x0)/√(1-ᾱ_t) + κ x̂0`.
pub fn ddim_transition_form2(
    x_t: &Tensor,
    x0_pred: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    t_prev: usize,
    eta: f64,
    sched: &NoiseSchedule,
) -> Result<Transition> {
    let sigma = ddim_sigma(t, t_prev, eta, sched)?;
    let (dir, c) = ddim_direction(x_t, x0_pred, t, t_prev, sigma, sched)?;
    let kappa = ddim_kappa_form2(t, t_prev, sigma, sched)?;
    let mean = x0_pred.axpby(sched.alpha_bar(t_prev).sqrt(), &dir, c)?.axpby(1.0, x0_hat, kappa)?;
    Ok(Transition { mean, sigma })
}

/// Final chain state without the `- x̂0` correction; equals the corrected
/// sample plus `x̂0`.
pub fn sample_form2_uncorrected<P: EpsPredictor + ?Sized>(
    pred: &P,
    x0_hat: &Tensor,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
    noise: Noise<'_>,
) -> Result<Tensor> {
    run_chain(pred, x0_hat, Shift::Shifted(&x0_hat.as_matrix()), sched, opts, noise)
}

/// Form-2 sampling with whichever sampler `opts` selects, bias-corrected.
pub fn sample_form2<P: EpsPredictor + ?Sized>(pred: &P, x0_hat: &Tensor, sched: &NoiseSchedule, opts: &SamplerOptions, noise: Noise<'_>) -> Result<Tensor> {
    let raw = sample_form2_uncorrected(pred, x0_hat, sched, opts, noise)?;
    raw.sub(&x0_hat.as_matrix())
}

pub fn ddpm_sample_form2<P: EpsPredictor + ?Sized>(pred: &P, x0_hat: &Tensor, sched: &NoiseSchedule, opts: &SamplerOptions, noise: Noise<'_>) -> Result<Tensor> {
    if opts.sampler != SamplerKind::Ddpm {
        return Err(Error::config("ddpm_sample_form2 needs sampler = ddpm"));
    }
    sample_form2(pred, x0_hat, sched, opts, noise)
}

pub fn ddim_sample_form2<P: EpsPredictor + ?Sized>(pred: &P, x0_hat: &Tensor, sched: &NoiseSchedule, opts: &SamplerOptions, noise: Noise<'_>) -> Result<Tensor> {
    if opts.sampler != SamplerKind::Ddim {
        return Err(Error::config("ddim_sample_form2 needs sampler = ddim"));
    }
    sample_form2(pred, x0_hat, sched, opts, noise)
}

// Keeps the pack-validation path reachable for callers that build packs by
// hand and want an early error before sampling.
#[doc(hidden)]
pub fn check_pack(noise: Noise<'_>, rows: usize, dim: usize, opts: &SamplerOptions) -> Result<()> {
    resolve_noise(noise, rows, dim, opts).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{linear_schedule, q_sample, predict_x0_from_eps};
    use crate::nn::RngStream;

    #[test]
    fn first_step_coefficients() {
        let s = linear_schedule(20, 1e-3, 0.1).unwrap();
        let c = form2_posterior_coeffs(1, &s).unwrap();
        assert_eq!((c.gamma0, c.gamma1, c.gamma2, c.beta_hat), (1.0, 0.0, 1.0, 0.0));
    }

    #[test]
    fn gamma2_is_one_minus_gamma1() {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        for t in 1..=1000 {
            let c = form2_posterior_coeffs(t, &s).unwrap();
            assert!((c.gamma2 - (1.0 - c.gamma1)).abs() < 1e-14);
            assert_eq!(c.gamma2, c.kappa);
            assert_eq!(c.beta_hat, s.beta_tilde(t));
        }
    }

    #[test]
    fn hand_arithmetic_at_two_steps() {
        // β = [0.1, 0.2]: ᾱ_1 = 0.9, ᾱ_2 = 0.72.
        // γ₀ = √0.9 · 0.2 / 0.28, γ₁ = √0.8 · 0.1 / 0.28, β̂ = 0.1 / 0.28 · 0.2.
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let c = form2_posterior_coeffs(2, &s).unwrap();
        assert!((c.gamma0 - 0.677_630_927_178_938_5).abs() < 1e-14);
        assert!((c.gamma1 - 0.319_438_282_499_970_2).abs() < 1e-14);
        assert!((c.gamma2 - 0.680_561_717_500_029_8).abs() < 1e-14);
        assert!((c.beta_hat - 0.071_428_571_428_571_4).abs() < 1e-14);
    }

    #[test]
    fn zero_shift_reduces_to_standard_marginal() {
        let s = linear_schedule(30, 1e-4, 0.05).unwrap();
        let mut rng = RngStream::new(1);
        let x0 = rng.gaussian(&[3, 2]).map(|v| v.clamp(-1.0, 1.0));
        let eps = rng.gaussian(&[3, 2]);
        let zero = Tensor::zeros(&[3, 2]);
        for t in [1, 10, 30] {
            assert_eq!(q_sample_form2(&x0, &zero, t, &eps, &s).unwrap(), q_sample(&x0, t, &eps, &s).unwrap());
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            assert_eq!(
                predict_x0_form2(&xt, &zero, t, &eps, &s, true).unwrap(),
                predict_x0_from_eps(&xt, t, &eps, &s, true).unwrap()
            );
        }
    }

    #[test]
    fn vanishing_alpha_bar_centres_on_reconstruction() {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(1000) < 1e-4);
        let x0 = Tensor::from_vec(vec![0.9, -0.9]);
        let y = Tensor::from_vec(vec![0.2, 0.4]);
        let xt = q_sample_form2(&x0, &y, 1000, &Tensor::zeros(&[2]), &s).unwrap();
        assert!(xt.max_abs_diff(&y).unwrap() < 0.01);
    }

    #[test]
    fn frozen_chain_with_zero_beta() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.0, 0.0]).unwrap();
        let prev = Tensor::from_vec(vec![0.3, -0.2]);
        let y = Tensor::from_vec(vec![0.5, 0.5]);
        let eps = Tensor::from_vec(vec![1.0, -1.0]);
        let next = step_kernel_form2(&prev, &Tensor::zeros(&[2]), &y, 2, &eps, &s).unwrap();
        assert_eq!(next, prev);
    }

    #[test]
    fn zero_shift_step_is_standard_transition() {
        let s = linear_schedule(10, 1e-3, 0.2).unwrap();
        let prev = Tensor::from_vec(vec![0.3, -0.2]);
        let eps = Tensor::from_vec(vec![1.0, -1.0]);
        let zero = Tensor::zeros(&[2]);
        let b = s.beta(4);
        let expected = prev.axpby((1.0 - b).sqrt(), &eps, b.sqrt()).unwrap();
        let got = step_kernel_form2(&prev, &zero, &zero, 4, &eps, &s).unwrap();
        assert!(got.max_abs_diff(&expected).unwrap() < 1e-16);
    }

    #[test]
    fn kappa_boundaries_and_errors() {
        let s = linear_schedule(10, 1e-3, 0.2).unwrap();
        assert_eq!(ddim_kappa_form2(1, 0, 0.0, &s).unwrap(), 1.0);
        assert!(ddim_kappa_form2(5, 3, 2.0, &s).is_err());
        // ᾱ_{t'} = ᾱ_t via a zero-beta step.
        let z = NoiseSchedule::from_betas(vec![0.1, 0.0]).unwrap();
        assert!(ddim_kappa_form2(2, 1, 0.0, &z).unwrap().abs() < 1e-15);
    }

    #[test]
    fn predict_roundtrip_and_clip() {
        let s = linear_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = RngStream::new(3);
        let x0 = rng.gaussian(&[5, 2]).map(|v| 0.3 * v);
        let y = rng.gaussian(&[5, 2]).map(|v| 0.3 * v);
        let eps = rng.gaussian(&[5, 2]);
        let xt = q_sample_form2(&x0, &y, 25, &eps, &s).unwrap();
        let back = predict_x0_form2(&xt, &y, 25, &eps, &s, false).unwrap();
        assert!(back.max_abs_diff(&x0).unwrap() < 1e-12);
        let wild = predict_x0_form2(&xt.scale(50.0), &y, 25, &eps, &s, true).unwrap();
        assert!(wild.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
