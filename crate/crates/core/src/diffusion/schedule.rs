use crate::error::{Error, Result};
use crate::nn::Tensor;

/// The β / α / ᾱ ladder of a `T`-step forward process.
///
/// Steps are 1-based. `alpha_bar(0) == 1` by convention, which makes
/// `beta_tilde(1) == 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// `1 - ᾱ_t` accumulated as `(1 - ᾱ_{t-1}) + ᾱ_{t-1} β_t`, exact at `t = 1`.
    one_minus: Vec<f64>,
}

impl NoiseSchedule {
    /// Schedule from explicit betas `β_1..β_T`. Requires `0 < β_1`,
    /// `0 <= β_t < 1`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta[0] > 0.0) || beta.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config("betas must satisfy 0 < beta_1 and 0 <= beta_t < 1"));
        }
        let mut alpha_bar = vec![1.0];
        let mut one_minus = vec![0.0];
        for (t, b) in beta.iter().enumerate() {
            alpha_bar.push(alpha_bar[t] * (1.0 - b));
            one_minus.push(one_minus[t] + alpha_bar[t] * b);
        }
        Ok(NoiseSchedule { beta, alpha_bar, one_minus })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `1 - ᾱ_t` without the cancellation of subtracting from one.
    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.one_minus[t]
    }

    /// Forward-posterior variance `(1 - ᾱ_{t-1}) / (1 - ᾱ_t) · β_t`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.one_minus[t - 1] / self.one_minus[t] * self.beta[t - 1]
    }
}

/// Betas linearly interpolated from `beta_start` to `beta_end`, both inclusive.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("T must be at least 1"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let beta = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps).map(|i| beta_start + span * i as f64 / (steps - 1) as f64).collect()
    };
    NoiseSchedule::from_betas(beta)
}

/// Closed-form marginal draw `x_t = √ᾱ_t x0 + √(1 - ᾱ_t) eps`. `t = 0`
/// returns `x0`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if t > sched.steps() {
        return Err(Error::Index { t, max: sched.steps() });
    }
    let ab = sched.alpha_bar(t);
    x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Row-wise [`q_sample`] with one step per row.
pub fn q_sample_rows(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    x0.check_same(eps)?;
    if ts.len() != x0.rows() {
        return Err(Error::shape(format!("{} steps for {} rows", ts.len(), x0.rows())));
    }
    let mut out = x0.as_matrix();
    for (i, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let (a, s) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        for (o, e) in out.row_mut(i).iter_mut().zip(eps.row(i)) {
            *o = a * *o + s * e;
        }
    }
    Ok(out)
}

/// Coefficients of the forward posterior `q(x_{t'} | x_t, x0)` between two
/// steps `t' < t` of a (possibly spaced) chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    /// Weight on `x0`.
    pub coef_x0: f64,
    /// Weight on `x_t`.
    pub coef_xt: f64,
    /// Posterior variance.
    pub variance: f64,
    /// Effective forward variance of the jump, `1 - ᾱ_t / ᾱ_{t'}`; equals
    /// `β_t` for adjacent steps.
    pub beta: f64,
}

impl PosteriorCoeffs {
    /// Adjacent-step coefficients, read straight from the schedule.
    pub fn at(sched: &NoiseSchedule, t: usize) -> Result<Self> {
        sched.check_t(t)?;
        let (ab_prev, beta) = (sched.alpha_bar(t - 1), sched.beta(t));
        let (c, c_prev) = (sched.one_minus_alpha_bar(t), sched.one_minus_alpha_bar(t - 1));
        Ok(PosteriorCoeffs {
            coef_x0: ab_prev.sqrt() * beta / c,
            coef_xt: sched.alpha(t).sqrt() * c_prev / c,
            variance: sched.beta_tilde(t),
            beta,
        })
    }

    /// Coefficients for the jump `t -> t_prev`; `t_prev = 0` is the final step.
    pub fn between(sched: &NoiseSchedule, t: usize, t_prev: usize) -> Result<Self> {
        sched.check_t(t)?;
        if t_prev >= t {
            return Err(Error::config(format!("t_prev = {t_prev} must precede t = {t}")));
        }
        if t_prev + 1 == t {
            return Self::at(sched, t);
        }
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
        let beta = 1.0 - ab / ab_prev;
        Ok(PosteriorCoeffs {
            coef_x0: ab_prev.sqrt() * beta / (1.0 - ab),
            coef_xt: (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            variance: (1.0 - ab_prev) / (1.0 - ab) * beta,
            beta,
        })
    }
}

/// Mean and variance of `q(x_{t-1} | x_t, x0)`.
pub fn forward_posterior(x_t: &Tensor, x0: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<(Tensor, f64)> {
    let c = PosteriorCoeffs::at(sched, t)?;
    Ok((x0.axpby(c.coef_x0, x_t, c.coef_xt)?, c.variance))
}

/// Inverts the marginal: `(x_t - √(1 - ᾱ_t) eps) / √ᾱ_t`, optionally clipped
/// to `[-1, 1]`.
pub fn predict_x0_from_eps(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule, clip: bool) -> Result<Tensor> {
    if t > sched.steps() {
        return Err(Error::Index { t, max: sched.steps() });
    }
    let (s, r) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    let x0 = x_t.zip_map(eps_hat, |x, e| (x - r * e) / s)?;
    Ok(if clip { x0.map(|v| v.clamp(-1.0, 1.0)) } else { x0 })
}
