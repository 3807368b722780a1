//! Property tests over random schedules, shapes and seeds.

use proptest::prelude::*;

use vaediff::diffusion::{
    ddim_sigma, linear_schedule, predict_x0_from_eps, q_sample, sample_form1, spaced_subsequence, Conditioning, DenoiserModel,
    Noise, NoiseSchedule, PosteriorCoeffs, SamplerOptions, Scheme,
};
use vaediff::form2::{ddim_kappa_form2, form2_posterior_coeffs, predict_x0_form2, q_sample_form2, sample_form2, step_kernel_form2};
use vaediff::latent::{apply_edit, lerp, make_noise_pack, temperature_scale, AttributeDirection};
use vaediff::nn::{RngStream, Tensor};
use vaediff::pipeline::{
    csv_string, evaluate_mmd, parse_csv, scale_to_ddpm, scale_to_vae, Checkpoint, Config, FORMAT_VERSION, MAGIC,
};

fn schedule() -> impl Strategy<Value = NoiseSchedule> {
    (1usize..300, 1e-5f64..1e-2, 0.0f64..1.0).prop_map(|(t, lo, frac)| {
        let hi = lo + frac * (0.5 - lo);
        linear_schedule(t, lo, hi).unwrap()
    })
}

fn direction(v: Vec<f64>) -> AttributeDirection {
    AttributeDirection { vector: Tensor::from_vec(v), n_pairs: 1, name: "p".into() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_strictly_decreasing_and_beta_tilde_bounded(s in schedule()) {
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        prop_assert_eq!(s.beta_tilde(1), 0.0);
        for t in 1..=s.steps() {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.alpha_bar(t) > 0.0);
            prop_assert!(s.beta_tilde(t) >= 0.0 && s.beta_tilde(t) <= s.beta(t));
        }
    }

    #[test]
    fn spaced_jump_reduces_to_adjacent(s in schedule()) {
        // A jump of one step through the spaced formula equals the adjacent one.
        for t in 1..=s.steps() {
            let a = PosteriorCoeffs::at(&s, t).unwrap();
            let ab = s.alpha_bar(t);
            let abp = s.alpha_bar(t - 1);
            let beta = 1.0 - ab / abp;
            prop_assert!((beta - s.beta(t)).abs() < 1e-12);
            prop_assert!((abp.sqrt() * beta / (1.0 - ab) - a.coef_x0).abs() < 1e-8 * (1.0 + a.coef_x0));
        }
    }

    #[test]
    fn posterior_gaussian_product(s in schedule()) {
        for t in 2..=s.steps() {
            let c = PosteriorCoeffs::at(&s, t).unwrap();
            let prec = s.alpha(t) / s.beta(t) + 1.0 / (1.0 - s.alpha_bar(t - 1));
            let var = 1.0 / prec;
            prop_assert!((c.variance - var).abs() <= 1e-10 * var.max(1e-300));
            prop_assert!((c.coef_xt - var * s.alpha(t).sqrt() / s.beta(t)).abs() < 1e-9);
            prop_assert!((c.coef_x0 - var * s.alpha_bar(t - 1).sqrt() / (1.0 - s.alpha_bar(t - 1))).abs() < 1e-9);
        }
    }

    #[test]
    fn kappa_is_one_minus_gamma1_at_eta_one(s in schedule()) {
        for t in 1..=s.steps() {
            let sigma = ddim_sigma(t, t - 1, 1.0, &s).unwrap();
            let k = ddim_kappa_form2(t, t - 1, sigma, &s).unwrap();
            let g = form2_posterior_coeffs(t, &s).unwrap();
            prop_assert!((k - (1.0 - g.gamma1)).abs() < 1e-10);
            prop_assert!((sigma * sigma - s.beta_tilde(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn subsequences_valid(total in 1usize..2000, frac in 0.0f64..1.0, quad in any::<bool>()) {
        let k = 1 + ((total - 1) as f64 * frac) as usize;
        let scheme = if quad { Scheme::Quadratic } else { Scheme::Linear };
        let s = spaced_subsequence(total, k, scheme).unwrap();
        prop_assert_eq!(s.len(), k);
        prop_assert_eq!(*s.last().unwrap(), total);
        prop_assert!(s[0] >= 1);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(spaced_subsequence(total, total + 1, scheme).is_err());
        prop_assert!(spaced_subsequence(total, 0, scheme).is_err());
    }

    #[test]
    fn q_sample_round_trips(s in schedule(), seed in any::<u64>(), rows in 1usize..8, dim in 1usize..5) {
        let mut rng = RngStream::new(seed);
        let x0 = rng.gaussian(&[rows, dim]).map(|v| (0.5 * v).clamp(-1.0, 1.0));
        let y = rng.gaussian(&[rows, dim]).map(|v| (0.5 * v).clamp(-1.0, 1.0));
        let eps = rng.gaussian(&[rows, dim]);
        let t = 1 + (seed as usize) % s.steps();
        let tol = 1e-9 / s.alpha_bar(t).sqrt();
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        prop_assert!(predict_x0_from_eps(&xt, t, &eps, &s, false).unwrap().max_abs_diff(&x0).unwrap() < tol);
        let xt2 = q_sample_form2(&x0, &y, t, &eps, &s).unwrap();
        prop_assert!(predict_x0_form2(&xt2, &y, t, &eps, &s, false).unwrap().max_abs_diff(&x0).unwrap() < tol);
        let shifted = xt2.sub(&y).unwrap();
        prop_assert!(shifted.max_abs_diff(&xt).unwrap() < 1e-12);
    }

    #[test]
    fn zero_shift_is_bitwise_form1(seed in any::<u64>(), k in 1usize..20, ddim in any::<bool>(), eta in 0.0f64..1.0) {
        let s = linear_schedule(20, 1e-3, 0.3).unwrap();
        let mut rng = RngStream::new(seed);
        let den = DenoiserModel::init(2, &[6], 4, Conditioning::Form1Concat, &mut rng).unwrap();
        let zero = Tensor::zeros(&[3, 2]);
        let x0 = rng.gaussian(&[3, 2]).map(|v| v.clamp(-1.0, 1.0));
        let eps = rng.gaussian(&[3, 2]);
        let t = 1 + (seed as usize) % 20;
        prop_assert_eq!(q_sample_form2(&x0, &zero, t, &eps, &s).unwrap(), q_sample(&x0, t, &eps, &s).unwrap());
        let prev = rng.gaussian(&[3, 2]);
        let base = if t == 1 { &x0 } else { &prev };
        let std = base.axpby(s.alpha(t).sqrt(), &eps, s.beta(t).sqrt()).unwrap();
        prop_assert_eq!(step_kernel_form2(&prev, &x0, &zero, t, &eps, &s).unwrap(), std);
        let opts = if ddim { SamplerOptions::ddim(k, eta) } else { SamplerOptions::ddpm(k) };
        let pack = make_noise_pack(seed, &[3, 2], k, Scheme::Linear).unwrap();
        let a = sample_form1(&den, &zero, &s, &opts, Noise::Pack(&pack)).unwrap();
        let b = sample_form2(&den, &zero, &s, &opts, Noise::Pack(&pack)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn edit_algebra(z in prop::collection::vec(-3.0f64..3.0, 4), a in prop::collection::vec(-2.0f64..2.0, 4),
                    b in prop::collection::vec(-2.0f64..2.0, 4), l1 in -2.0f64..2.0, l2 in -2.0f64..2.0) {
        let zt = Tensor::matrix(1, 4, z).unwrap();
        let da = direction(a.clone());
        let db = direction(b.clone());
        // Additivity in lambda.
        let two = apply_edit(&apply_edit(&zt, &da, l1).unwrap(), &da, l2).unwrap();
        let once = apply_edit(&zt, &da, l1 + l2).unwrap();
        prop_assert!(two.max_abs_diff(&once).unwrap() < 1e-14);
        // Inverse.
        let back = apply_edit(&apply_edit(&zt, &da, l1).unwrap(), &da, -l1).unwrap();
        prop_assert!(back.max_abs_diff(&zt).unwrap() < 1e-14);
        // Composition of two directions commutes.
        let ab = apply_edit(&apply_edit(&zt, &da, l1).unwrap(), &db, l2).unwrap();
        let ba = apply_edit(&apply_edit(&zt, &db, l2).unwrap(), &da, l1).unwrap();
        prop_assert!(ab.max_abs_diff(&ba).unwrap() < 1e-14);
    }

    #[test]
    fn lerp_endpoints_and_temperature(seed in any::<u64>(), lam in 1e-3f64..4.0) {
        let mut rng = RngStream::new(seed);
        let a = rng.gaussian(&[2, 3]);
        let b = rng.gaussian(&[2, 3]);
        prop_assert_eq!(lerp(&a, &b, 1.0).unwrap(), a.clone());
        prop_assert_eq!(lerp(&a, &b, 0.0).unwrap(), b.clone());
        prop_assert_eq!(temperature_scale(&a, lam).unwrap(), a.scale(lam));
        prop_assert!(temperature_scale(&a, -lam).is_err());
    }

    #[test]
    fn scaling_and_csv_round_trip(seed in any::<u64>(), rows in 0usize..20, dim in 1usize..6) {
        let mut rng = RngStream::new(seed);
        let u = Tensor::matrix(rows, dim, (0..rows * dim).map(|_| rng.uniform()).collect()).unwrap();
        let back = scale_to_vae(&scale_to_ddpm(&u).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&u).unwrap_or(0.0) < 1e-15);
        prop_assert_eq!(parse_csv(&csv_string(&u)).unwrap(), u);
    }

    #[test]
    fn mmd_symmetric_and_nonnegative(seed in any::<u64>(), shift in 0.0f64..0.3) {
        let mut rng = RngStream::new(seed);
        let x = rng.gaussian(&[20, 2]).scale(0.1);
        let y = rng.gaussian(&[15, 2]).map(|v| 0.1 * v + shift);
        let bw = [0.05, 0.1, 0.2];
        let a = evaluate_mmd(&x, &y, &bw).unwrap();
        let b = evaluate_mmd(&y, &x, &bw).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), latent in 1usize..4, hidden in 1usize..6, form in 0u64..3) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = RngStream::new(seed);
        let cond = Conditioning::from_code(form).unwrap();
        let ck = Checkpoint {
            config_text: Config::default().to_toml_string(),
            vae: Some(vaediff::vae::VaeModel::init(2, latent, &[hidden], 0.5, &mut rng).unwrap()),
            denoiser: Some(DenoiserModel::init(2, &[hidden, hidden], 4, cond, &mut rng).unwrap()),
            schedule: Some(linear_schedule(10, 1e-3, 0.2).unwrap()),
            vae_epochs: seed % 100,
            ddpm_steps: seed % 1000,
            ..Checkpoint::default()
        };
        vaediff::pipeline::save_checkpoint(&path, &ck).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        prop_assert_eq!(&bytes[..4], MAGIC);
        prop_assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        let back = vaediff::pipeline::load_checkpoint(&path).unwrap();
        prop_assert!(back == ck);
        // Chopping the file anywhere must fail cleanly.
        let cut = 1 + (seed as usize) % (bytes.len() - 1);
        std::fs::write(&path, &bytes[..cut]).unwrap();
        prop_assert!(vaediff::pipeline::load_checkpoint(&path).is_err());
    }
}
