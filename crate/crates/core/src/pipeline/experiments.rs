use std::time::Instant;

use crate::diffusion::{
    check_ddpm_scale, ddpm_loss_form1, refine, Conditioning, DenoiserModel, Noise, NoiseSchedule, SamplerKind, SamplerOptions,
    Scheme, VarianceType,
};
use crate::diffusion::{train_denoiser, TrainedDenoiser};
use crate::error::{Error, Result};
use crate::expde::fit_gmm;
use crate::form2::ddpm_train_step_form2;
use crate::latent::{apply_edit, attribute_direction, make_noise_pack, AttributeDirection};
use crate::nn::{RngStream, Tensor};
use crate::vae::{encode, reconstruct, sample_prior, train_vae, vae_loss, LatentSource, ReconMode, VaeModel};

use super::checkpoint::Checkpoint;
use super::config::Config;
use super::dataset::{make_dataset, split_by_label, Dataset};
use super::generate::{generate, generate_from_latents, generate_unconditional, LatentChoice};
use super::metrics::{mmd_with_floor, MmdConfig};
use super::scaling::{scale_to_ddpm, scale_to_vae};

/// Result of the two-stage driver: the checkpoint plus per-stage histories.
#[derive(Clone, Debug)]
pub struct TwoStage {
    pub checkpoint: Checkpoint,
    pub vae_history: Vec<f64>,
    pub gmm_history: Vec<f64>,
    pub ddpm_history: Vec<f64>,
}

/// Stage 1. Returns a checkpoint holding only the VAE.
pub fn train_vae_stage(config: &Config, data: &Dataset) -> Result<(Checkpoint, Vec<f64>)> {
    let vc = config.vae_config()?;
    let mut rng = RngStream::derive(config.seed, "vae");
    let trained = train_vae(&data.train, &vc, &mut rng).map_err(|e| e.in_stage("vae"))?;
    let ck = Checkpoint {
        config_text: config.to_toml_string(),
        vae: Some(trained.model),
        vae_epochs: vc.epochs as u64,
        ..Checkpoint::default()
    };
    Ok((ck, trained.history))
}

/// Fits the ex-post GMM on posterior-mean training latents, if configured.
pub fn fit_gmm_stage(ck: &mut Checkpoint, config: &Config, data: &Dataset) -> Result<Vec<f64>> {
    let Some(gc) = config.gmm_config() else {
        return Ok(Vec::new());
    };
    let vae = ck.vae().map_err(|e| e.in_stage("gmm"))?;
    let latents = encode(vae, &data.train).map_err(|e| e.in_stage("gmm"))?.mu;
    let mut rng = RngStream::derive(config.seed, "gmm");
    let (gmm, history) = fit_gmm(&latents, &gc, &mut rng).map_err(|e| e.in_stage("gmm"))?;
    ck.gmm = Some(gmm);
    Ok(history)
}

/// Stage 2 against the frozen VAE in `ck`.
pub fn train_ddpm_stage(ck: &mut Checkpoint, config: &Config, data: &Dataset) -> Result<Vec<f64>> {
    let out = train_refiner(ck.vae.as_ref(), config.conditioning()?, config, data, "ddpm").map_err(|e| e.in_stage("ddpm"))?;
    ck.denoiser = Some(out.model);
    ck.schedule = Some(out.schedule);
    ck.ddpm_steps = config.ddpm.steps as u64;
    Ok(out.history)
}

fn train_refiner(vae: Option<&VaeModel>, cond: Conditioning, config: &Config, data: &Dataset, tag: &str) -> Result<TrainedDenoiser> {
    let dc = config.ddpm_config();
    let sched = dc.schedule()?;
    let mut rng = RngStream::derive(config.seed, tag);
    let mut init = rng.fork("ddpm-init");
    let model = DenoiserModel::init(data.train.cols(), &dc.hidden, dc.time_embed_dim, cond, &mut init)?;
    if cond != Conditioning::Unconditional && vae.is_none() {
        return Err(Error::config("checkpoint has no VAE; run train-vae first"));
    }
    train_denoiser(model, vae, &data.train, &sched, &dc, &mut rng, None)
}

/// VAE, optional GMM, then the refiner of the configured formulation.
pub fn train_two_stage(config: &Config) -> Result<TwoStage> {
    config.validate()?;
    let data = make_dataset(&config.dataset_spec()?)?;
    let (mut checkpoint, vae_history) = train_vae_stage(config, &data)?;
    let gmm_history = fit_gmm_stage(&mut checkpoint, config, &data)?;
    let ddpm_history = train_ddpm_stage(&mut checkpoint, config, &data)?;
    Ok(TwoStage { checkpoint, vae_history, gmm_history, ddpm_history })
}

/// Same refiner architecture, conditioning channel held at zero, no VAE.
pub fn train_unconditional_baseline(config: &Config) -> Result<(Checkpoint, Vec<f64>)> {
    config.validate()?;
    let data = make_dataset(&config.dataset_spec()?)?;
    let out = train_refiner(None, Conditioning::Unconditional, config, &data, "baseline").map_err(|e| e.in_stage("baseline"))?;
    let ck = Checkpoint {
        config_text: config.to_toml_string(),
        denoiser: Some(out.model),
        schedule: Some(out.schedule),
        ddpm_steps: config.ddpm.steps as u64,
        ..Checkpoint::default()
    };
    Ok((ck, out.history))
}

/// Decoded VAE samples without refinement.
pub fn vae_samples(ck: &Checkpoint, n: usize, source: LatentChoice, rng: &mut RngStream) -> Result<Tensor> {
    let vae = ck.vae()?;
    let src = match source {
        LatentChoice::Normal => LatentSource::StandardNormal,
        LatentChoice::Gmm => LatentSource::Gmm(ck.gmm.as_ref().ok_or_else(|| Error::config("checkpoint has no GMM"))?),
    };
    let mut latent_rng = rng.fork("latents");
    Ok(sample_prior(vae, n, &mut latent_rng, src)?.1)
}

/// Loss accounting of the two-stage bound on one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboReport {
    pub recon: f64,
    pub kl: f64,
    pub kl_weight: f64,
    /// `recon + kl_weight * kl`.
    pub vae_total: f64,
    /// Simplified denoising loss at `t = 1..=T`, index `t - 1`.
    pub ddpm_per_t: Vec<f64>,
    pub ddpm_sum: f64,
    /// `vae_total + ddpm_sum`; a diagnostic, not a calibrated likelihood.
    pub total: f64,
}

/// Denoising loss of any refiner at one step per row.
fn refiner_loss(model: &DenoiserModel, x0: &Tensor, cond: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<f64> {
    match model.conditioning {
        Conditioning::Form2Concat => ddpm_train_step_form2(model, x0, cond, t, eps, sched),
        _ => ddpm_loss_form1(model, x0, cond, t, eps, sched),
    }
}

pub fn elbo_report(ck: &Checkpoint, batch: &Tensor, rng: &mut RngStream) -> Result<ElboReport> {
    let vae = ck.vae()?;
    let (den, sched) = ck.refiner()?;
    let eps = rng.gaussian(&[batch.rows(), vae.latent_dim]);
    let l = vae_loss(vae, batch, &eps)?;
    let x0 = scale_to_ddpm(batch)?;
    let cond = match den.conditioning {
        Conditioning::Unconditional => Tensor::zeros(x0.shape()),
        _ => scale_to_ddpm(&reconstruct(vae, batch, ReconMode::PosteriorMean, None)?)?,
    };
    check_ddpm_scale(&cond, "x0_hat")?;
    let ddpm_per_t = (1..=sched.steps())
        .map(|t| {
            let e = rng.gaussian(x0.shape());
            refiner_loss(den, &x0, &cond, &vec![t; x0.rows()], &e, sched)
        })
        .collect::<Result<Vec<_>>>()?;
    let ddpm_sum: f64 = ddpm_per_t.iter().sum();
    let vae_total = l.recon + vae.kl_weight * l.kl;
    Ok(ElboReport { recon: l.recon, kl: l.kl, kl_weight: vae.kl_weight, vae_total, ddpm_per_t, ddpm_sum, total: vae_total + ddpm_sum })
}

/// One evaluated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub floor: f64,
    pub n_samples: usize,
    pub steps: usize,
    pub settings: String,
    pub seconds: f64,
}

fn describe(opts: &SamplerOptions) -> String {
    let sampler = match opts.sampler {
        SamplerKind::Ddpm => "ddpm".to_string(),
        SamplerKind::Ddim => format!("ddim(eta={})", opts.eta),
    };
    let scheme = match opts.scheme {
        Scheme::Linear => "linear",
        Scheme::Quadratic => "quadratic",
    };
    let variance = match opts.variance {
        VarianceType::FixedSmall => "fixedsmall",
        VarianceType::FixedLarge => "fixedlarge",
    };
    format!("{sampler} K={} {scheme} {variance} clip={} temp={}", opts.steps, opts.clip_x0, opts.temperature)
}

fn report(method: &str, samples: &Tensor, reference: &Tensor, opts: &SamplerOptions, mmd: &MmdConfig, seed: u64, started: Instant) -> Result<EvalReport> {
    let gen_seconds = started.elapsed().as_secs_f64();
    let mut rng = RngStream::derive(seed, &format!("mmd-{method}-{}", opts.steps));
    let r = mmd_with_floor(samples, reference, mmd, &mut rng)?;
    Ok(EvalReport {
        method: method.to_string(),
        metric: "mmd2".into(),
        value: r.value,
        floor: r.floor,
        n_samples: samples.rows(),
        steps: opts.steps,
        settings: describe(opts),
        seconds: gen_seconds,
    })
}

/// Rows of a speed-quality sweep and any trend regressions it detected.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<EvalReport>,
    pub regressions: Vec<String>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,steps,metric,value,floor,n_samples,seconds,settings\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:?},{:?},{},{:.3},{}\n",
                r.method, r.steps, r.metric, r.value, r.floor, r.n_samples, r.seconds, r.settings
            ));
        }
        s
    }

    pub fn find(&self, method: &str, steps: usize) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.method == method && r.steps == steps)
    }
}

pub const TWO_STAGE: &str = "two-stage";
pub const UNCONDITIONAL: &str = "unconditional";

/// MMD² against `reference` for every `K` in `ks`, for the two-stage model
/// and, when given, the unconditional baseline.
///
/// Flags a regression when the two-stage model at `K = 10` is worse than the
/// baseline at `K = 10` by more than the permutation floor, or when the full
/// chain is worse than `K = 10` by more than the floor.
#[allow(clippy::too_many_arguments)]
pub fn speed_quality_sweep(
    ck: &Checkpoint,
    baseline: Option<&Checkpoint>,
    ks: &[usize],
    template: &SamplerOptions,
    source: LatentChoice,
    n_eval: usize,
    reference: &Tensor,
    mmd: &MmdConfig,
    seed: u64,
) -> Result<SweepTable> {
    let (_, sched) = ck.refiner()?;
    let total = sched.steps();
    let mut rows = Vec::new();
    for &k in ks {
        let opts = SamplerOptions { steps: k, ..*template };
        let started = Instant::now();
        let mut rng = RngStream::derive(seed, &format!("sweep-{TWO_STAGE}-{k}"));
        let samples = generate(ck, n_eval, &opts, source, None, &mut rng)?;
        rows.push(report(TWO_STAGE, &samples, reference, &opts, mmd, seed, started)?);
        if let Some(b) = baseline {
            let started = Instant::now();
            let mut rng = RngStream::derive(seed, &format!("sweep-{UNCONDITIONAL}-{k}"));
            let samples = generate_unconditional(b, n_eval, &opts, None, &mut rng)?;
            rows.push(report(UNCONDITIONAL, &samples, reference, &opts, mmd, seed, started)?);
        }
    }
    let mut table = SweepTable { rows, regressions: Vec::new() };
    if let (Some(a), Some(b)) = (table.find(TWO_STAGE, 10), table.find(UNCONDITIONAL, 10)) {
        let floor = a.floor.max(b.floor);
        if a.value > b.value + floor {
            table.regressions.push(format!("K=10: two-stage {:.3e} > unconditional {:.3e} + floor {floor:.3e}", a.value, b.value));
        }
    }
    if total != 10 {
        if let (Some(full), Some(ten)) = (table.find(TWO_STAGE, total), table.find(TWO_STAGE, 10)) {
            let floor = full.floor.max(ten.floor);
            if full.value > ten.value + floor {
                table.regressions.push(format!("two-stage K={total} {:.3e} > K=10 {:.3e} + floor {floor:.3e}", full.value, ten.value));
            }
        }
    }
    Ok(table)
}

/// Corruption applied to held-out data before it is used as conditioning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Corruption {
    /// Add `sigma * eps`, then clip to `[0, 1]`.
    Gaussian { sigma: f64 },
    /// Points: snap to the centres of a `factor`-per-axis grid. Square images:
    /// average `factor x factor` blocks and re-expand.
    Coarsen { factor: usize },
}

pub fn corrupt(x: &Tensor, c: Corruption, rng: &mut RngStream) -> Result<Tensor> {
    match c {
        Corruption::Gaussian { sigma } => {
            if !(sigma >= 0.0) || !sigma.is_finite() {
                return Err(Error::config(format!("noise sigma must be >= 0, got {sigma}")));
            }
            let e = rng.gaussian(x.shape());
            Ok(x.zip_map(&e, |v, n| (v + sigma * n).clamp(0.0, 1.0))?)
        }
        Corruption::Coarsen { factor } => {
            if factor == 0 {
                return Err(Error::config("coarsen factor must be positive"));
            }
            let dim = x.cols();
            let side = (dim as f64).sqrt().round() as usize;
            if dim > 2 && side * side == dim {
                if side % factor != 0 {
                    return Err(Error::config(format!("coarsen factor {factor} does not divide image side {side}")));
                }
                let mut out = x.as_matrix();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let src = row.to_vec();
                    for bi in (0..side).step_by(factor) {
                        for bj in (0..side).step_by(factor) {
                            let cells: Vec<usize> = (bi..bi + factor).flat_map(|i| (bj..bj + factor).map(move |j| i * side + j)).collect();
                            let mean = cells.iter().map(|&p| src[p]).sum::<f64>() / cells.len() as f64;
                            for p in cells {
                                row[p] = mean;
                            }
                        }
                    }
                }
                Ok(out)
            } else {
                let f = factor as f64;
                Ok(x.map(|v| (((v * f).floor().min(f - 1.0)) + 0.5) / f))
            }
        }
    }
}

/// `(corrupted vs data, refined vs data)`: the first half of `eval` is
/// corrupted and refined, the second half is the clean reference.
pub fn noise_generalization(
    ck: &Checkpoint,
    corruption: Corruption,
    eval: &Tensor,
    opts: &SamplerOptions,
    mmd: &MmdConfig,
    seed: u64,
) -> Result<(EvalReport, EvalReport)> {
    let (den, sched) = ck.refiner()?;
    if den.conditioning == Conditioning::Unconditional {
        return Err(Error::config("noise generalization needs a conditioned refiner"));
    }
    let half = eval.rows() / 2;
    let cond_idx: Vec<usize> = (0..half).collect();
    let ref_idx: Vec<usize> = (half..eval.rows()).collect();
    let (clean, reference) = (eval.select_rows(&cond_idx), eval.select_rows(&ref_idx));
    let mut rng = RngStream::derive(seed, "noise-gen");
    let corrupted = corrupt(&clean, corruption, &mut rng)?;
    let started = Instant::now();
    let refined11 = refine(den, &scale_to_ddpm(&corrupted)?, sched, opts, Noise::Rng(&mut rng))?;
    let refined = scale_to_vae(&refined11)?.map(|v| v.clamp(0.0, 1.0));
    let a = report("corrupted", &corrupted, &reference, opts, mmd, seed, Instant::now())?;
    let b = report("refined", &refined, &reference, opts, mmd, seed, started)?;
    Ok((a, b))
}

/// Attribute edit on toy labels: direction from `n_pairs` labelled training
/// pairs, applied to the latents of negative examples, refined under one
/// shared noise pack. Returns `(direction, before, after)` in `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn attribute_edit(
    ck: &Checkpoint,
    data: &Tensor,
    labels: &[bool],
    n_pairs: usize,
    lam: f64,
    n: usize,
    opts: &SamplerOptions,
    noise_seed: u64,
) -> Result<(AttributeDirection, Tensor, Tensor)> {
    let vae = ck.vae()?;
    let (den, sched) = ck.refiner()?;
    if labels.len() != data.rows() {
        return Err(Error::Pairing(format!("{} labels for {} rows", labels.len(), data.rows())));
    }
    let (pos, neg) = split_by_label(data, labels);
    let npairs = n_pairs.min(pos.rows()).min(neg.rows());
    if npairs == 0 {
        return Err(Error::Pairing("need at least one positive and one negative example".into()));
    }
    let take: Vec<usize> = (0..npairs).collect();
    let dir = attribute_direction(vae, &pos.select_rows(&take), &neg.select_rows(&take), "label")?;
    let base: Vec<usize> = (0..n.min(neg.rows())).collect();
    let z_n = encode(vae, &neg.select_rows(&base))?.mu;
    let z_p = apply_edit(&z_n, &dir, lam)?;
    let pack = make_noise_pack(noise_seed, &[1, vae.data_dim], opts.steps, opts.scheme)?;
    let before = generate_from_latents(vae, den, sched, opts, &z_n, Noise::Pack(&pack))?;
    let after = generate_from_latents(vae, den, sched, opts, &z_p, Noise::Pack(&pack))?;
    Ok((dir, before, after))
}
