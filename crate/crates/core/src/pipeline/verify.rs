//! Self-contained structural checks over fixtures and synthetic schedules.
//! Nothing here trains a model.

use std::fmt;

use crate::diffusion::{
    ddim_sigma, ddpm_loss_form1, ddpm_loss_grad_form1, linear_schedule, predict_x0_from_eps, q_sample, sample_form1,
    spaced_subsequence, Conditioning, DenoiserModel, EpsPredictor, Noise, NoiseSchedule, PosteriorCoeffs, SamplerOptions, Scheme,
};
use crate::error::Result;
use crate::expde::{fit_gmm, GmmFitConfig};
use crate::form2::{
    ddim_kappa_form2, ddpm_loss_grad_form2, ddpm_train_step_form2, form2_posterior_coeffs, predict_x0_form2, q_sample_form2,
    sample_form2, sample_form2_uncorrected, step_kernel_form2,
};
use crate::latent::make_noise_pack;
use crate::nn::{MlpParams, RngStream, Tensor};
use crate::vae::{kl_to_standard_normal, vae_loss, vae_loss_grad, GaussianPosterior, VaeModel};

use super::checkpoint::{decode, encode, Checkpoint};
use super::export::{csv_string, parse_csv};
use super::scaling::{scale_to_ddpm, scale_to_vae};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyLevel {
    Fast,
    Full,
}

/// One check: pass iff `value <= tolerance`.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{} {status} {:.6e} {:.6e}", self.name, self.value, self.tolerance)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One line per check: `name status value tolerance`.
    pub fn render(&self) -> String {
        self.checks.iter().map(|c| format!("{c}\n")).collect()
    }

    fn push(&mut self, name: &str, value: f64, tolerance: f64) {
        let passed = value <= tolerance;
        self.checks.push(Check { name: name.to_string(), passed, value, tolerance });
    }

    fn push_result(&mut self, name: &str, r: Result<f64>, tolerance: f64) {
        self.push(name, r.unwrap_or(f64::INFINITY), tolerance);
    }
}

/// Predicts the exact noise that produced `x_t` from a known `x0`, for the
/// standard or the shifted forward process.
struct ExactNoise<'a> {
    x0: &'a Tensor,
    shift: Option<&'a Tensor>,
    sched: &'a NoiseSchedule,
}

impl EpsPredictor for ExactNoise<'_> {
    fn predict_eps(&self, x_t: &Tensor, _cond: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut out = x_t.as_matrix();
        for (i, &step) in t.iter().enumerate() {
            let ab = self.sched.alpha_bar(step);
            let (s, r) = (ab.sqrt(), (1.0 - ab).sqrt());
            let y = self.shift.map(|y| y.row(i).to_vec()).unwrap_or_else(|| vec![0.0; out.cols()]);
            let x0 = self.x0.row(i);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (*o - s * x0[j] - y[j]) / r;
            }
        }
        Ok(out)
    }
}

/// Max per-entry relative error between `analytic` and central differences
/// of `loss` over every parameter of `params`.
pub(crate) fn finite_difference_error(params: &MlpParams, analytic: &MlpParams, loss: &dyn Fn(&MlpParams) -> f64, h: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (ti, a) in analytic.tensors().iter().enumerate() {
        for k in 0..a.len() {
            let orig = probe.tensors()[ti].data()[k];
            probe.tensors_mut()[ti].data_mut()[k] = orig + h;
            let up = loss(&probe);
            probe.tensors_mut()[ti].data_mut()[k] = orig - h;
            let down = loss(&probe);
            probe.tensors_mut()[ti].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let g = a.data()[k];
            let rel = (g - numeric).abs() / (g.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn max_over<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    it.into_iter().fold(0.0, f64::max)
}

fn schedule_checks(r: &mut VerifyReport) -> Result<()> {
    let s = linear_schedule(1000, 1e-4, 0.02)?;
    r.push("schedule.alpha_bar_recursion", max_over((1..=1000).map(|t| (s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs())), 1e-15);
    r.push("schedule.beta_tilde_in_range", max_over((1..=1000).map(|t| (-s.beta_tilde(t)).max(s.beta_tilde(t) - s.beta(t)).max(0.0))), 0.0);
    r.push("schedule.beta_tilde_first", s.beta_tilde(1).abs(), 0.0);
    r.push("schedule.alpha_bar_decreasing", (1..=1000).filter(|&t| s.alpha_bar(t) >= s.alpha_bar(t - 1)).count() as f64, 0.0);
    // Product-of-Gaussians form of the posterior coefficients.
    let dual = max_over((2..=1000).map(|t| {
        let c = PosteriorCoeffs::at(&s, t).expect("t in range");
        let prec = s.alpha(t) / s.beta(t) + 1.0 / (1.0 - s.alpha_bar(t - 1));
        let cx = s.alpha(t).sqrt() / s.beta(t) / prec;
        let c0 = s.alpha_bar(t - 1).sqrt() / (1.0 - s.alpha_bar(t - 1)) / prec;
        (c.coef_xt - cx).abs().max((c.coef_x0 - c0).abs()).max((c.variance - 1.0 / prec).abs())
    }));
    r.push("posterior.dual_path_coefficients", dual, 1e-12);
    let kappa = max_over((1..=1000).map(|t| {
        let sigma = ddim_sigma(t, t - 1, 1.0, &s).expect("valid pair");
        let k = ddim_kappa_form2(t, t - 1, sigma, &s).expect("radicand >= 0");
        let g = form2_posterior_coeffs(t, &s).expect("t in range");
        (k - (1.0 - g.gamma1)).abs()
    }));
    r.push("form2.kappa_reduction", kappa, 1e-12);
    let sig = max_over((1..=1000).map(|t| (ddim_sigma(t, t - 1, 1.0, &s).expect("valid pair").powi(2) - s.beta_tilde(t)).abs()));
    r.push("ddim.sigma_reduction", sig, 1e-12);
    let g2 = max_over((1..=1000).map(|t| {
        let g = form2_posterior_coeffs(t, &s).expect("t in range");
        (g.gamma2 - (1.0 - g.gamma1)).abs()
    }));
    r.push("form2.gamma2_identity", g2, 1e-14);
    Ok(())
}

fn round_trip_checks(r: &mut VerifyReport, rng: &mut RngStream) -> Result<()> {
    let s = linear_schedule(100, 1e-3, 0.2)?;
    let x0 = rng.gaussian(&[64, 2]).map(|v| (0.4 * v).clamp(-1.0, 1.0));
    let y = rng.gaussian(&[64, 2]).map(|v| (0.4 * v).clamp(-1.0, 1.0));
    let eps = rng.gaussian(&[64, 2]);
    let mut e1: f64 = 0.0;
    let mut e2: f64 = 0.0;
    for t in [1, 10, 50, 100] {
        let xt = q_sample(&x0, t, &eps, &s)?;
        e1 = e1.max(predict_x0_from_eps(&xt, t, &eps, &s, false)?.max_abs_diff(&x0)?);
        let xt2 = q_sample_form2(&x0, &y, t, &eps, &s)?;
        e2 = e2.max(predict_x0_form2(&xt2, &y, t, &eps, &s, false)?.max_abs_diff(&x0)?);
    }
    r.push("roundtrip.predict_x0", e1, 1e-12);
    r.push("roundtrip.predict_x0_form2", e2, 1e-12);

    let u = rng.gaussian(&[100, 3]).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
    r.push_result("roundtrip.scaling", scale_to_ddpm(&u).and_then(|d| scale_to_vae(&d)).and_then(|b| b.max_abs_diff(&u)), 1e-15);
    r.push_result("roundtrip.csv", parse_csv(&csv_string(&u)).and_then(|b| b.max_abs_diff(&u)), 1e-12);

    let vae = VaeModel::init(2, 2, &[8], 1.0, rng)?;
    let den = DenoiserModel::init(2, &[8], 4, Conditioning::Form1Concat, rng)?;
    let ck = Checkpoint {
        config_text: "seed = 1\n".into(),
        vae: Some(vae),
        denoiser: Some(den),
        schedule: Some(s),
        vae_epochs: 1,
        ddpm_steps: 2,
        ..Checkpoint::default()
    };
    let bytes = encode(&ck);
    let back = decode(&bytes);
    let same = matches!(&back, Ok(b) if *b == ck && encode(b) == bytes);
    r.push("roundtrip.checkpoint_bitwise", if same { 0.0 } else { 1.0 }, 0.0);
    let truncated = (1..bytes.len()).step_by((bytes.len() / 37).max(1)).filter(|&cut| decode(&bytes[..cut]).is_ok()).count();
    r.push("checkpoint.truncation_rejected", truncated as f64, 0.0);
    Ok(())
}

fn subsequence_checks(r: &mut VerifyReport) {
    let mut bad = 0usize;
    for total in [1usize, 2, 7, 10, 50, 100, 1000] {
        for k in 1..=total.min(120) {
            for scheme in [Scheme::Linear, Scheme::Quadratic] {
                let ok = match spaced_subsequence(total, k, scheme) {
                    Ok(s) => s.len() == k && s.windows(2).all(|w| w[0] < w[1]) && s[0] >= 1 && *s.last().expect("k >= 1") == total,
                    Err(_) => false,
                };
                bad += usize::from(!ok);
            }
        }
    }
    r.push("subsequence.valid", bad as f64, 0.0);
}

fn kl_check(r: &mut VerifyReport, rng: &mut RngStream, draws: usize) {
    let mu = [0.5, -1.0];
    let lv = [0.3, -0.7];
    let post = GaussianPosterior { mu: Tensor::from_vec(mu.to_vec()), logvar: Tensor::from_vec(lv.to_vec()) };
    let closed = kl_to_standard_normal(&post);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let mut v = 0.0;
        for d in 0..2 {
            let e = rng.normal();
            let z = mu[d] + (0.5 * lv[d]).exp() * e;
            // log q(z) - log p(z) without the shared 2π terms.
            v += -0.5 * lv[d] - 0.5 * e * e + 0.5 * z * z;
        }
        s += v;
        s2 += v * v;
    }
    let n = draws as f64;
    let mean = s / n;
    let se = ((s2 / n - mean * mean) / n).sqrt();
    r.push("vae.kl_closed_form_vs_mc_in_se", (closed - mean).abs() / se, 3.0);
}

fn gradient_checks(r: &mut VerifyReport, rng: &mut RngStream) -> Result<()> {
    let h = 1e-5;
    let vae = VaeModel::init(3, 2, &[5], 0.7, rng)?;
    let x = rng.gaussian(&[6, 3]).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
    let eps = rng.gaussian(&[6, 2]);
    let (_, ge, gd) = vae_loss_grad(&vae, &x, &eps)?;
    let enc_err = finite_difference_error(
        &vae.encoder,
        &ge,
        &|p| vae_loss(&VaeModel { encoder: p.clone(), ..vae.clone() }, &x, &eps).map(|l| l.total).unwrap_or(f64::NAN),
        h,
    );
    let dec_err = finite_difference_error(
        &vae.decoder,
        &gd,
        &|p| vae_loss(&VaeModel { decoder: p.clone(), ..vae.clone() }, &x, &eps).map(|l| l.total).unwrap_or(f64::NAN),
        h,
    );
    r.push("grad.vae_negative_elbo", enc_err.max(dec_err), 1e-4);

    let s = linear_schedule(20, 1e-3, 0.2)?;
    let x0 = rng.gaussian(&[5, 2]).map(|v| (0.5 * v).clamp(-1.0, 1.0));
    let y = rng.gaussian(&[5, 2]).map(|v| (0.5 * v).clamp(-1.0, 1.0));
    let e = rng.gaussian(&[5, 2]);
    let t = [1, 4, 9, 15, 20];
    let den = DenoiserModel::init(2, &[6, 6], 4, Conditioning::Form1Concat, rng)?;
    let (_, g1) = ddpm_loss_grad_form1(&den, &x0, &y, &t, &e, &s)?;
    let err1 = finite_difference_error(
        &den.net,
        &g1,
        &|p| ddpm_loss_form1(&DenoiserModel { net: p.clone(), ..den.clone() }, &x0, &y, &t, &e, &s).unwrap_or(f64::NAN),
        h,
    );
    r.push("grad.form1_denoising_loss", err1, 1e-4);
    let den2 = DenoiserModel { conditioning: Conditioning::Form2Concat, ..den.clone() };
    let (_, g2) = ddpm_loss_grad_form2(&den2, &x0, &y, &t, &e, &s)?;
    let err2 = finite_difference_error(
        &den2.net,
        &g2,
        &|p| ddpm_train_step_form2(&DenoiserModel { net: p.clone(), ..den2.clone() }, &x0, &y, &t, &e, &s).unwrap_or(f64::NAN),
        h,
    );
    r.push("grad.form2_denoising_loss", err2, 1e-4);
    Ok(())
}

fn bitwise(a: &Result<Tensor>, b: &Result<Tensor>) -> f64 {
    match (a, b) {
        (Ok(a), Ok(b)) if a == b => 0.0,
        _ => 1.0,
    }
}

fn parity_and_oracle_checks(r: &mut VerifyReport, rng: &mut RngStream) -> Result<()> {
    let s = linear_schedule(40, 1e-3, 0.3)?;
    let n = 16;
    let x0 = rng.gaussian(&[n, 2]).map(|v| (0.4 * v).clamp(-1.0, 1.0));
    let zero = Tensor::zeros(&[n, 2]);
    let eps = rng.gaussian(&[n, 2]);
    let den = DenoiserModel::init(2, &[8], 4, Conditioning::Form1Concat, rng)?;
    let ts: Vec<usize> = (0..n).map(|i| 1 + (i * 7) % 40).collect();

    let mut mismatches = 0.0;
    for t in [1, 2, 20, 40] {
        mismatches += bitwise(&q_sample_form2(&x0, &zero, t, &eps, &s), &q_sample(&x0, t, &eps, &s));
        mismatches += bitwise(&predict_x0_form2(&x0, &zero, t, &eps, &s, true), &predict_x0_from_eps(&x0, t, &eps, &s, true));
    }
    let l1 = ddpm_loss_form1(&den, &x0, &zero, &ts, &eps, &s)?;
    let l2 = ddpm_train_step_form2(&den, &x0, &zero, &ts, &eps, &s)?;
    mismatches += if l1 == l2 { 0.0 } else { 1.0 };
    for opts in [SamplerOptions::ddpm(40), SamplerOptions::ddim(40, 0.0), SamplerOptions::ddim(8, 0.5), SamplerOptions::ddpm(8)] {
        let pack = make_noise_pack(5, &[1, 2], opts.steps, opts.scheme)?;
        let a = sample_form1(&den, &zero, &s, &opts, Noise::Pack(&pack));
        let b = sample_form2(&den, &zero, &s, &opts, Noise::Pack(&pack));
        mismatches += bitwise(&a, &b);
    }
    r.push("form2.zero_shift_bitwise", mismatches, 0.0);

    // Chain of the shifted kernel with zero shift equals the standard kernel.
    let prev = rng.gaussian(&[n, 2]);
    let k0 = step_kernel_form2(&prev, &x0, &zero, 5, &eps, &s)?;
    let std = prev.axpby(s.alpha(5).sqrt(), &eps, s.beta(5).sqrt())?;
    r.push("form2.zero_shift_step_kernel", k0.max_abs_diff(&std)?, 1e-15);

    let y = rng.gaussian(&[n, 2]).map(|v| (0.3 * v).clamp(-1.0, 1.0));
    let o1 = ExactNoise { x0: &x0, shift: None, sched: &s };
    let o2 = ExactNoise { x0: &x0, shift: Some(&y), sched: &s };
    let mut worst: f64 = 0.0;
    for opts in [SamplerOptions::ddpm(40), SamplerOptions::ddim(40, 0.0)] {
        let f1 = sample_form1(&o1, &y, &s, &opts, Noise::Rng(&mut rng.fork("o1")))?;
        let f2 = sample_form2(&o2, &y, &s, &opts, Noise::Rng(&mut rng.fork("o2")))?;
        worst = worst.max(f1.max_abs_diff(&x0)?).max(f2.max_abs_diff(&x0)?);
    }
    r.push("oracle.recovery", worst, 1e-6);
    let raw = sample_form2_uncorrected(&o2, &y, &s, &SamplerOptions::ddpm(40), Noise::Rng(&mut rng.fork("o3")))?;
    r.push("oracle.bias_residual_is_shift", raw.sub(&x0)?.max_abs_diff(&y)?, 1e-6);
    Ok(())
}

fn em_check(r: &mut VerifyReport, rng: &mut RngStream) -> Result<()> {
    let mut pts = Vec::new();
    for i in 0..600 {
        let c = if i % 3 == 0 { [0.0, 0.0] } else if i % 3 == 1 { [3.0, 1.0] } else { [-2.0, 2.5] };
        pts.push(c[0] + 0.5 * rng.normal());
        pts.push(c[1] + 0.3 * rng.normal());
    }
    let x = Tensor::matrix(600, 2, pts)?;
    let cfg = GmmFitConfig { n_components: 3, max_iters: 100, tol: 0.0, reg: 1e-6 };
    let (g, hist) = fit_gmm(&x, &cfg, rng)?;
    let drop = max_over(hist.windows(2).map(|w| w[0] - w[1]));
    r.push("gmm.em_monotone", drop, 1e-10);
    r.push("gmm.weights_simplex", (g.weights().iter().sum::<f64>() - 1.0).abs(), 1e-12);
    Ok(())
}

/// Empirical mean and variance of the shifted chain against the marginal, in
/// units of 3 standard errors and the larger of 2% or 4 standard errors
/// (pass iff <= 1).
fn marginal_check(r: &mut VerifyReport, rng: &mut RngStream, chains: usize) -> Result<()> {
    let s = linear_schedule(50, 1e-4, 0.02)?;
    let x0 = [0.6, -0.4];
    let y = [-0.3, 0.8];
    let probes = [1usize, 25, 50];
    let mut sums = vec![[0.0f64; 2]; 3];
    let mut sq = vec![[0.0f64; 2]; 3];
    let x0t = Tensor::matrix(1, 2, x0.to_vec())?;
    let yt = Tensor::matrix(1, 2, y.to_vec())?;
    for _ in 0..chains {
        let mut x = x0t.clone();
        for t in 1..=50 {
            let e = Tensor::matrix(1, 2, vec![rng.normal(), rng.normal()])?;
            x = step_kernel_form2(&x, &x0t, &yt, t, &e, &s)?;
            if let Some(p) = probes.iter().position(|&q| q == t) {
                for d in 0..2 {
                    sums[p][d] += x.data()[d];
                    sq[p][d] += x.data()[d] * x.data()[d];
                }
            }
        }
    }
    let n = chains as f64;
    let (mut mean_ratio, mut var_ratio): (f64, f64) = (0.0, 0.0);
    for (p, &t) in probes.iter().enumerate() {
        let ab = s.alpha_bar(t);
        for d in 0..2 {
            let m = sums[p][d] / n;
            let v = sq[p][d] / n - m * m;
            let target = ab.sqrt() * x0[d] + y[d];
            let se = ((1.0 - ab) / n).sqrt();
            mean_ratio = mean_ratio.max((m - target).abs() / (3.0 * se));
            var_ratio = var_ratio.max((v / (1.0 - ab) - 1.0).abs() / 0.02f64.max(4.0 * (2.0 / n).sqrt()));
        }
    }
    r.push("form2.marginal_mean_mc", mean_ratio, 1.0);
    r.push("form2.marginal_variance_mc", var_ratio, 1.0);
    Ok(())
}

/// Runs every structural check. `Full` adds the 10⁵-chain marginal check and
/// a larger KL sample.
pub fn verify_suite(level: VerifyLevel) -> VerifyReport {
    let mut r = VerifyReport::default();
    let mut rng = RngStream::derive(0x5eed, "verify");
    let steps: [(&str, Box<dyn Fn(&mut VerifyReport, &mut RngStream) -> Result<()>>); 6] = [
        ("schedule", Box::new(|r, _| schedule_checks(r))),
        ("roundtrip", Box::new(round_trip_checks)),
        ("gradients", Box::new(gradient_checks)),
        ("parity", Box::new(parity_and_oracle_checks)),
        ("gmm", Box::new(em_check)),
        ("marginal", Box::new(move |r, g| marginal_check(r, g, if level == VerifyLevel::Full { 100_000 } else { 20_000 }))),
    ];
    for (name, f) in steps.iter() {
        let mut g = rng.fork(name);
        if let Err(e) = f(&mut r, &mut g) {
            r.checks.push(Check { name: format!("{name}.error: {e}"), passed: false, value: f64::INFINITY, tolerance: 0.0 });
        }
    }
    subsequence_checks(&mut r);
    kl_check(&mut r, &mut rng, if level == VerifyLevel::Full { 1_000_000 } else { 100_000 });
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suite_passes() {
        let r = verify_suite(VerifyLevel::Fast);
        assert!(r.checks.len() >= 20);
        assert!(r.all_passed(), "{}", r.render());
    }

    #[test]
    fn render_has_one_line_per_check() {
        let mut r = VerifyReport::default();
        r.push("a", 0.5, 1.0);
        r.push("b", 2.0, 1.0);
        assert_eq!(r.render(), "a PASS 5.000000e-1 1.000000e0\nb FAIL 2.000000e0 1.000000e0\n");
        assert!(!r.all_passed());
    }
}
