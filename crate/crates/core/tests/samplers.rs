use vaediff::diffusion::{
    ddim_transition, ddpm_transition, linear_schedule, refine, sample_form1, spaced_subsequence, Conditioning, DenoiserModel, Noise,
    SamplerOptions, Scheme, VarianceType,
};
use vaediff::form2::{ddim_transition_form2, ddpm_transition_form2, sample_form2};
use vaediff::latent::make_noise_pack;
use vaediff::nn::{RngStream, Tensor};
use vaediff::pipeline::generate_from_latents;
use vaediff::vae::VaeModel;

fn fixture(seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = RngStream::new(seed);
    let x_t = rng.gaussian(&[5, 2]);
    let x0 = rng.gaussian(&[5, 2]).map(|v| v.clamp(-1.0, 1.0));
    let y = rng.gaussian(&[5, 2]).map(|v| (0.5 * v).clamp(-1.0, 1.0));
    (x_t, x0, y)
}

#[test]
fn ancestral_step_equals_ddim_at_eta_one() {
    let s = linear_schedule(100, 1e-3, 0.2).unwrap();
    let (x_t, x0, y) = fixture(1);
    for (t, tp) in [(1, 0), (2, 1), (50, 49), (100, 99), (100, 90), (37, 3), (10, 0)] {
        let a = ddpm_transition(&x_t, &x0, t, tp, &s, VarianceType::FixedSmall).unwrap();
        let b = ddim_transition(&x_t, &x0, t, tp, 1.0, &s).unwrap();
        assert!(a.mean.max_abs_diff(&b.mean).unwrap() < 1e-12, "{t}->{tp}");
        assert!((a.sigma - b.sigma).abs() < 1e-12);
        let a2 = ddpm_transition_form2(&x_t, &x0, &y, t, tp, &s, VarianceType::FixedSmall).unwrap();
        let b2 = ddim_transition_form2(&x_t, &x0, &y, t, tp, 1.0, &s).unwrap();
        assert!(a2.mean.max_abs_diff(&b2.mean).unwrap() < 1e-12, "form2 {t}->{tp}");
        assert!((a2.sigma - b2.sigma).abs() < 1e-12);
    }
}

#[test]
fn fixed_large_uses_jump_beta() {
    let s = linear_schedule(100, 1e-3, 0.2).unwrap();
    let (x_t, x0, _) = fixture(2);
    let a = ddpm_transition(&x_t, &x0, 40, 39, &s, VarianceType::FixedLarge).unwrap();
    assert_eq!(a.sigma, s.beta(40).sqrt());
    let b = ddpm_transition(&x_t, &x0, 40, 20, &s, VarianceType::FixedLarge).unwrap();
    assert!((b.sigma - (1.0 - s.alpha_bar(40) / s.alpha_bar(20)).sqrt()).abs() < 1e-15);
}

#[test]
fn deterministic_ddim_ignores_step_noise() {
    let s = linear_schedule(50, 1e-3, 0.3).unwrap();
    let mut rng = RngStream::new(3);
    let den = DenoiserModel::init(2, &[16], 8, Conditioning::Form2Concat, &mut rng).unwrap();
    let (_, _, y) = fixture(3);
    let opts = SamplerOptions::ddim(10, 0.0);
    let a = make_noise_pack(10, &[5, 2], 10, Scheme::Linear).unwrap();
    let b = make_noise_pack(11, &[5, 2], 10, Scheme::Linear).unwrap().with_x_t_noise(a.x_t_noise(5).unwrap()).unwrap();
    let ra = sample_form2(&den, &y, &s, &opts, Noise::Pack(&a)).unwrap();
    let rb = sample_form2(&den, &y, &s, &opts, Noise::Pack(&b)).unwrap();
    assert_eq!(ra, rb);
    // With eta > 0 the step noise matters.
    let opts = SamplerOptions::ddim(10, 0.5);
    assert_ne!(sample_form2(&den, &y, &s, &opts, Noise::Pack(&a)).unwrap(), sample_form2(&den, &y, &s, &opts, Noise::Pack(&b)).unwrap());
}

#[test]
fn single_row_pack_broadcasts() {
    let s = linear_schedule(30, 1e-3, 0.3).unwrap();
    let mut rng = RngStream::new(4);
    let den = DenoiserModel::init(2, &[16], 8, Conditioning::Form1Concat, &mut rng).unwrap();
    let row = [0.2, -0.4];
    let cond = Tensor::repeat_row(&row, 4);
    for opts in [SamplerOptions::ddpm(30), SamplerOptions::ddim(7, 0.0)] {
        let pack = make_noise_pack(5, &[1, 2], opts.steps, opts.scheme).unwrap();
        let many = sample_form1(&den, &cond, &s, &opts, Noise::Pack(&pack)).unwrap();
        let one = sample_form1(&den, &Tensor::repeat_row(&row, 1), &s, &opts, Noise::Pack(&pack)).unwrap();
        for r in many.iter_rows() {
            assert_eq!(r, one.row(0));
        }
    }
}

#[test]
fn pack_mismatch_is_rejected() {
    let s = linear_schedule(30, 1e-3, 0.3).unwrap();
    let mut rng = RngStream::new(5);
    let den = DenoiserModel::init(2, &[4], 4, Conditioning::Form1Concat, &mut rng).unwrap();
    let cond = Tensor::zeros(&[3, 2]);
    let opts = SamplerOptions::ddim(10, 0.0);
    for pack in [
        make_noise_pack(1, &[3, 2], 9, Scheme::Linear).unwrap(),
        make_noise_pack(1, &[3, 2], 10, Scheme::Quadratic).unwrap(),
        make_noise_pack(1, &[2, 2], 10, Scheme::Linear).unwrap(),
        make_noise_pack(1, &[3, 3], 10, Scheme::Linear).unwrap(),
    ] {
        assert!(sample_form1(&den, &cond, &s, &opts, Noise::Pack(&pack)).is_err());
    }
    assert_eq!(make_noise_pack(7, &[3, 2], 10, Scheme::Linear).unwrap(), make_noise_pack(7, &[3, 2], 10, Scheme::Linear).unwrap());
    assert_ne!(make_noise_pack(7, &[3, 2], 10, Scheme::Linear).unwrap(), make_noise_pack(8, &[3, 2], 10, Scheme::Linear).unwrap());
}

#[test]
fn unconditional_refine_ignores_conditioning() {
    let s = linear_schedule(20, 1e-3, 0.3).unwrap();
    let mut rng = RngStream::new(6);
    let den = DenoiserModel::init(2, &[8], 4, Conditioning::Unconditional, &mut rng).unwrap();
    let opts = SamplerOptions::ddpm(20);
    let pack = make_noise_pack(2, &[3, 2], 20, Scheme::Linear).unwrap();
    let a = refine(&den, &Tensor::zeros(&[3, 2]), &s, &opts, Noise::Pack(&pack)).unwrap();
    let b = refine(&den, &Tensor::full(&[3, 2], 0.7), &s, &opts, Noise::Pack(&pack)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn shared_pack_generation_is_repeatable() {
    let s = linear_schedule(40, 1e-3, 0.3).unwrap();
    let mut rng = RngStream::new(7);
    let vae = VaeModel::init(2, 2, &[16], 1.0, &mut rng).unwrap();
    let den = DenoiserModel::init(2, &[16, 16], 8, Conditioning::Form1Concat, &mut rng).unwrap();
    let opts = SamplerOptions::ddim(10, 0.0);
    let pack = make_noise_pack(3, &[1, 2], 10, Scheme::Linear).unwrap();
    let z = Tensor::matrix(3, 2, vec![0.3, -0.2, 1.0, 0.5, -0.7, 0.1]).unwrap();
    let all = generate_from_latents(&vae, &den, &s, &opts, &z, Noise::Pack(&pack)).unwrap();
    // Each row depends on its own latent only.
    for i in 0..3 {
        let one = generate_from_latents(&vae, &den, &s, &opts, &z.select_rows(&[i]), Noise::Pack(&pack)).unwrap();
        assert_eq!(one.row(0), all.row(i));
    }
    assert!(all.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn quadratic_subsequence_known_values() {
    // Squares of (10 i / 5) for i = 1..5: 4, 16, 36, 64, 100.
    assert_eq!(spaced_subsequence(100, 5, Scheme::Quadratic).unwrap(), vec![4, 16, 36, 64, 100]);
    assert_eq!(spaced_subsequence(100, 5, Scheme::Linear).unwrap(), vec![1, 26, 51, 75, 100]);
    assert_eq!(spaced_subsequence(4, 4, Scheme::Quadratic).unwrap(), vec![1, 2, 3, 4]);
}
