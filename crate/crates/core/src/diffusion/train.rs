use crate::error::{Error, Result};
use crate::form2;
use crate::nn::{AdamConfig, AdamState, RngStream, Tensor};
use crate::pipeline::scale_to_ddpm;
use crate::vae::{reconstruct, ReconMode, VaeModel};

use super::denoiser::{denoising_loss_grad, Conditioning, DenoiserModel, EpsPredictor};
use super::sampler::{sample_form1, Noise, SamplerOptions};
use super::schedule::{linear_schedule, q_sample_rows, NoiseSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct DdpmTrainConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DdpmTrainConfig {
    /// Endpoints are the 1000-step values `1e-4, 0.02` rescaled by `1000 / T`
    /// so that `ᾱ_T` still vanishes at `T = 100`.
    fn default() -> Self {
        DdpmTrainConfig {
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            hidden: vec![128, 128, 128],
            time_embed_dim: 32,
            steps: 20_000,
            batch_size: 128,
            lr: 1e-3,
        }
    }
}

impl DdpmTrainConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedDenoiser {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    /// Minibatch loss per optimizer step.
    pub history: Vec<f64>,
}

/// What an observer sees after each optimizer step.
pub struct TrainStep<'a> {
    pub step: usize,
    pub loss: f64,
    /// Conditioning channel exactly as fed to the network.
    pub cond: &'a Tensor,
    pub t: &'a [usize],
}

pub type StepObserver<'a> = dyn FnMut(&TrainStep<'_>) + 'a;

/// Trains `model` on `dataset` (in `[0, 1]`) with the forward process its
/// conditioning implies. Conditioned models draw `x̂₀` from the frozen VAE in
/// posterior-sample mode each step; the unconditional model sees zeros.
pub fn train_denoiser(
    mut model: DenoiserModel,
    vae: Option<&VaeModel>,
    dataset: &Tensor,
    sched: &NoiseSchedule,
    config: &DdpmTrainConfig,
    rng: &mut RngStream,
    mut observer: Option<&mut StepObserver<'_>>,
) -> Result<TrainedDenoiser> {
    if dataset.is_empty() {
        return Err(Error::data("DDPM training set is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if dataset.cols() != model.data_dim {
        return Err(Error::shape(format!("dataset width {} vs model width {}", dataset.cols(), model.data_dim)));
    }
    let vae = match (model.conditioning, vae) {
        (Conditioning::Unconditional, _) => None,
        (_, Some(v)) => Some(v),
        (_, None) => return Err(Error::config("conditioned refiner needs a trained VAE")),
    };
    let n = dataset.rows();
    let total = sched.steps();
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &model.net.tensors());
    let mut history = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.below(n)).collect();
        let x01 = dataset.select_rows(&idx);
        let x0 = scale_to_ddpm(&x01)?;
        let cond = match vae {
            Some(v) => scale_to_ddpm(&reconstruct(v, &x01, ReconMode::PosteriorSample, Some(rng))?)?,
            None => Tensor::zeros(x0.shape()),
        };
        let t: Vec<usize> = (0..idx.len()).map(|_| rng.int_inclusive(1, total)).collect();
        let eps = rng.gaussian(x0.shape());
        let x_t = match model.conditioning {
            Conditioning::Form2Concat => form2::q_sample_form2_rows(&x0, &cond, &t, &eps, sched)?,
            _ => q_sample_rows(&x0, &t, &eps, sched)?,
        };
        let (loss, grads) = denoising_loss_grad(&model, &x_t, &cond, &t, &eps)
            .map_err(|_| Error::Training { stage: "ddpm", at: format!("step {step}") })?;
        if !loss.is_finite() {
            return Err(Error::Training { stage: "ddpm", at: format!("step {step}") });
        }
        adam.step(&mut model.net.tensors_mut(), &grads.tensors())?;
        history.push(loss);
        if let Some(obs) = observer.as_deref_mut() {
            obs(&TrainStep { step, loss, cond: &cond, t: &t });
        }
    }
    Ok(TrainedDenoiser { model, schedule: sched.clone(), history })
}

fn fresh(data_dim: usize, config: &DdpmTrainConfig, conditioning: Conditioning, rng: &RngStream) -> Result<DenoiserModel> {
    let mut init = rng.fork("ddpm-init");
    DenoiserModel::init(data_dim, &config.hidden, config.time_embed_dim, conditioning, &mut init)
}

/// Refiner on the standard forward process, conditioned by concatenation.
pub fn train_ddpm_form1(vae: &VaeModel, dataset: &Tensor, config: &DdpmTrainConfig, rng: &mut RngStream) -> Result<TrainedDenoiser> {
    let model = fresh(dataset.cols(), config, Conditioning::Form1Concat, rng)?;
    train_denoiser(model, Some(vae), dataset, &config.schedule()?, config, rng, None)
}

/// Refiner on the forward process shifted towards `x̂₀`.
pub fn train_ddpm_form2(vae: &VaeModel, dataset: &Tensor, config: &DdpmTrainConfig, rng: &mut RngStream) -> Result<TrainedDenoiser> {
    let model = fresh(dataset.cols(), config, Conditioning::Form2Concat, rng)?;
    train_denoiser(model, Some(vae), dataset, &config.schedule()?, config, rng, None)
}

/// Same architecture with the conditioning channel held at zero.
pub fn train_unconditional(dataset: &Tensor, config: &DdpmTrainConfig, rng: &mut RngStream) -> Result<TrainedDenoiser> {
    let model = fresh(dataset.cols(), config, Conditioning::Unconditional, rng)?;
    train_denoiser(model, None, dataset, &config.schedule()?, config, rng, None)
}

/// Runs the reverse chain matching the model's formulation. `cond` is in
/// `[-1, 1]`; for the unconditional model only its shape matters.
pub fn refine(model: &DenoiserModel, cond: &Tensor, sched: &NoiseSchedule, opts: &SamplerOptions, noise: Noise<'_>) -> Result<Tensor> {
    refine_with(model, model.conditioning, cond, sched, opts, noise)
}

pub(crate) fn refine_with<P: EpsPredictor + ?Sized>(
    pred: &P,
    conditioning: Conditioning,
    cond: &Tensor,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
    noise: Noise<'_>,
) -> Result<Tensor> {
    match conditioning {
        Conditioning::Form2Concat => form2::sample_form2(pred, cond, sched, opts, noise),
        Conditioning::Form1Concat => sample_form1(pred, cond, sched, opts, noise),
        Conditioning::Unconditional => sample_form1(pred, &Tensor::zeros(&[cond.rows(), cond.cols()]), sched, opts, noise),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DdpmTrainConfig {
        DdpmTrainConfig { timesteps: 10, beta_start: 1e-2, beta_end: 0.2, hidden: vec![8], time_embed_dim: 4, steps: 5, batch_size: 4, lr: 0.0 }
    }

    fn data() -> Tensor {
        Tensor::matrix(4, 2, vec![0.1, 0.2, 0.8, 0.9, 0.5, 0.5, 0.3, 0.7]).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let cfg = tiny();
        let rng = RngStream::new(4);
        let init = fresh(2, &cfg, Conditioning::Unconditional, &rng).unwrap();
        let out = train_unconditional(&data(), &cfg, &mut rng.clone()).unwrap();
        assert_eq!(out.model, init);
        assert_eq!(out.history.len(), 5);
    }

    #[test]
    fn unconditional_sees_zero_channel() {
        let cfg = tiny();
        let model = fresh(2, &cfg, Conditioning::Unconditional, &RngStream::new(0)).unwrap();
        let mut seen = 0;
        let mut obs = |s: &TrainStep<'_>| {
            assert!(s.cond.data().iter().all(|v| *v == 0.0));
            seen += 1;
        };
        train_denoiser(model, None, &data(), &cfg.schedule().unwrap(), &cfg, &mut RngStream::new(1), Some(&mut obs)).unwrap();
        assert_eq!(seen, 5);
    }

    #[test]
    fn conditioned_needs_vae() {
        let cfg = tiny();
        let model = fresh(2, &cfg, Conditioning::Form1Concat, &RngStream::new(0)).unwrap();
        let err = train_denoiser(model, None, &data(), &cfg.schedule().unwrap(), &cfg, &mut RngStream::new(1), None);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
