//! Stage-1 generator: a single-latent-layer VAE trained on the negative ELBO.
//!
//! The decoder likelihood is Gaussian with unit variance, so the
//! reconstruction term is a squared error summed over data dimensions.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::expde::{sample_gmm, GmmModel};
use crate::nn::{mlp_forward, sigmoid, Activation, AdamConfig, AdamState, Graph, MlpParams, MlpVars, RngStream, Tensor, Var};

/// Bounds applied to the encoder's log-variance head.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    /// `data_dim -> 2 * latent_dim`; the first half is the mean head.
    pub encoder: MlpParams,
    /// `latent_dim -> data_dim` logits.
    pub decoder: MlpParams,
    pub latent_dim: usize,
    pub data_dim: usize,
    pub kl_weight: f64,
}

impl VaeModel {
    pub fn new(encoder: MlpParams, decoder: MlpParams, latent_dim: usize, data_dim: usize, kl_weight: f64) -> Result<Self> {
        if encoder.in_dim() != data_dim || encoder.out_dim() != 2 * latent_dim {
            return Err(Error::shape(format!(
                "encoder maps {} -> {}, expected {data_dim} -> {}",
                encoder.in_dim(),
                encoder.out_dim(),
                2 * latent_dim
            )));
        }
        if decoder.in_dim() != latent_dim || decoder.out_dim() != data_dim {
            return Err(Error::shape(format!(
                "decoder maps {} -> {}, expected {latent_dim} -> {data_dim}",
                decoder.in_dim(),
                decoder.out_dim()
            )));
        }
        if !kl_weight.is_finite() || kl_weight < 0.0 {
            return Err(Error::config(format!("kl_weight must be finite and >= 0, got {kl_weight}")));
        }
        Ok(VaeModel { encoder, decoder, latent_dim, data_dim, kl_weight })
    }

    pub fn init(data_dim: usize, latent_dim: usize, hidden: &[usize], kl_weight: f64, rng: &mut RngStream) -> Result<Self> {
        let mut enc_dims = vec![data_dim];
        enc_dims.extend_from_slice(hidden);
        enc_dims.push(2 * latent_dim);
        let mut dec_dims = vec![latent_dim];
        dec_dims.extend(hidden.iter().rev());
        dec_dims.push(data_dim);
        let encoder = MlpParams::init(&enc_dims, Activation::Silu, rng)?;
        let decoder = MlpParams::init(&dec_dims, Activation::Silu, rng)?;
        Self::new(encoder, decoder, latent_dim, data_dim, kl_weight)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.tensors();
        t.extend(self.decoder.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t
    }

    /// Hash over every parameter bit; equal iff parameters are bitwise equal
    /// (up to hash collisions).
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in self.tensors() {
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        self.kl_weight.to_bits().hash(&mut h);
        h.finish()
    }
}

/// Diagonal Gaussian `q(z | x)`; rows align with the encoded batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub logvar: Tensor,
}

fn check_width(x: &Tensor, width: usize, what: &str) -> Result<()> {
    if x.cols() != width {
        return Err(Error::shape(format!("{what} has width {}, expected {width}", x.cols())));
    }
    Ok(())
}

pub fn encode(model: &VaeModel, x: &Tensor) -> Result<GaussianPosterior> {
    check_width(x, model.data_dim, "encoder input")?;
    let h = mlp_forward(&model.encoder, x)?;
    let l = model.latent_dim;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = l;
    let mu = h.slice_cols(0, l)?.reshape(shape.clone())?;
    let logvar = h.slice_cols(l, 2 * l)?.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)).reshape(shape)?;
    Ok(GaussianPosterior { mu, logvar })
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize(post: &GaussianPosterior, eps: &Tensor) -> Result<Tensor> {
    post.mu.check_same(eps)?;
    let mut z = post.mu.clone();
    for ((zi, lv), e) in z.data_mut().iter_mut().zip(post.logvar.data()).zip(eps.data()) {
        *zi += (0.5 * lv).exp() * e;
    }
    Ok(z)
}

/// Decoder mean in `(0, 1)^D`.
pub fn decode(model: &VaeModel, z: &Tensor) -> Result<Tensor> {
    check_width(z, model.latent_dim, "decoder input")?;
    Ok(mlp_forward(&model.decoder, z)?.map(sigmoid))
}

/// KL divergence to `N(0, I)` for each row of the posterior.
pub fn kl_per_row(post: &GaussianPosterior) -> Vec<f64> {
    post.mu
        .iter_rows()
        .zip(post.logvar.iter_rows())
        .map(|(m, lv)| 0.5 * m.iter().zip(lv).map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>())
        .collect()
}

/// Closed-form `KL(q || N(0, I))`, averaged over rows for a batch.
pub fn kl_to_standard_normal(post: &GaussianPosterior) -> f64 {
    let kl = kl_per_row(post);
    if kl.is_empty() { 0.0 } else { kl.iter().sum::<f64>() / kl.len() as f64 }
}

/// Negative ELBO terms, each averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Graph nodes of the negative ELBO.
pub struct VaeLossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

/// Builds the negative ELBO for a batch `x` with reparameterization noise
/// `eps` on an existing graph.
pub fn vae_loss_graph(
    g: &mut Graph,
    encoder: &MlpVars,
    decoder: &MlpVars,
    latent_dim: usize,
    kl_weight: f64,
    x: &Tensor,
    eps: &Tensor,
) -> VaeLossVars {
    let batch = x.rows().max(1) as f64;
    let xv = g.leaf(x.as_matrix());
    let ev = g.leaf(eps.as_matrix());
    let h = encoder.forward(g, xv);
    let mu = g.slice_cols(h, 0, latent_dim);
    let lv_raw = g.slice_cols(h, latent_dim, 2 * latent_dim);
    let lv = g.clamp(lv_raw, LOGVAR_MIN, LOGVAR_MAX);
    let half_lv = g.scale(lv, 0.5);
    let std = g.exp(half_lv);
    let noise = g.mul(std, ev);
    let z = g.add(mu, noise);
    let logits = decoder.forward(g, z);
    let xhat = g.sigmoid(logits);
    let diff = g.sub(xhat, xv);
    let sq = g.square(diff);
    let recon_sum = g.sum(sq);
    let recon = g.scale(recon_sum, 1.0 / batch);

    let mu2 = g.square(mu);
    let var = g.exp(lv);
    let a = g.add(mu2, var);
    let b = g.sub(a, lv);
    let c = g.add_scalar(b, -1.0);
    let kl_sum = g.sum(c);
    let kl = g.scale(kl_sum, 0.5 / batch);

    let weighted = g.scale(kl, kl_weight);
    let total = g.add(recon, weighted);
    VaeLossVars { total, recon, kl }
}

/// Negative ELBO of a batch: `recon + kl_weight * kl`.
pub fn vae_loss(model: &VaeModel, x: &Tensor, eps: &Tensor) -> Result<VaeLoss> {
    check_width(x, model.data_dim, "vae_loss input")?;
    check_width(eps, model.latent_dim, "vae_loss noise")?;
    if eps.rows() != x.rows() {
        return Err(Error::shape("vae_loss: eps rows differ from batch rows"));
    }
    let mut g = Graph::new();
    let enc = g.bind_mlp(&model.encoder);
    let dec = g.bind_mlp(&model.decoder);
    let vars = vae_loss_graph(&mut g, &enc, &dec, model.latent_dim, model.kl_weight, x, eps);
    g.check()?;
    Ok(VaeLoss { total: g.scalar(vars.total), recon: g.scalar(vars.recon), kl: g.scalar(vars.kl) })
}

/// Loss and parameter gradients, encoder gradients first.
pub fn vae_loss_grad(model: &VaeModel, x: &Tensor, eps: &Tensor) -> Result<(VaeLoss, MlpParams, MlpParams)> {
    let mut g = Graph::new();
    let enc = g.bind_mlp(&model.encoder);
    let dec = g.bind_mlp(&model.decoder);
    let vars = vae_loss_graph(&mut g, &enc, &dec, model.latent_dim, model.kl_weight, x, eps);
    let grads = g.backward(vars.total)?;
    let loss = VaeLoss { total: g.scalar(vars.total), recon: g.scalar(vars.recon), kl: g.scalar(vars.kl) };
    Ok((loss, grads.mlp(&enc), grads.mlp(&dec)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub kl_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

// The KL weight is calibrated for two-dimensional data in [0, 1]: at 1.0 the
// posterior collapses onto the prior.
impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { latent_dim: 2, hidden: vec![128, 128], kl_weight: 0.03, epochs: 200, batch_size: 128, lr: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedVae {
    pub model: VaeModel,
    /// Mean total loss per epoch.
    pub history: Vec<f64>,
}

/// Initializes a model from `rng.fork("vae-init")` and trains it.
pub fn train_vae(dataset: &Tensor, config: &VaeConfig, rng: &mut RngStream) -> Result<TrainedVae> {
    let mut init_rng = rng.fork("vae-init");
    let model = VaeModel::init(dataset.cols(), config.latent_dim, &config.hidden, config.kl_weight, &mut init_rng)?;
    train_vae_from(model, dataset, config, rng)
}

/// Adam on the negative ELBO over shuffled minibatches.
pub fn train_vae_from(mut model: VaeModel, dataset: &Tensor, config: &VaeConfig, rng: &mut RngStream) -> Result<TrainedVae> {
    if dataset.is_empty() {
        return Err(Error::data("VAE training set is empty"));
    }
    check_width(dataset, model.data_dim, "training data")?;
    if dataset.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::data("VAE training data must lie in [0, 1]"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let n = dataset.rows();
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &model.tensors());
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let order = rng.permutation(n);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let x = dataset.select_rows(chunk);
            let eps = rng.gaussian(&[chunk.len(), model.latent_dim]);
            let (loss, genc, gdec) = vae_loss_grad(&model, &x, &eps)
                .map_err(|_| Error::Training { stage: "vae", at: format!("epoch {epoch}") })?;
            if !loss.total.is_finite() {
                return Err(Error::Training { stage: "vae", at: format!("epoch {epoch}") });
            }
            let mut grads = genc.tensors();
            grads.extend(gdec.tensors());
            adam.step(&mut model.tensors_mut(), &grads)?;
            total += loss.total;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    Ok(TrainedVae { model, history })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconMode {
    PosteriorMean,
    PosteriorSample,
}

/// Reconstruction `x̂₀` used as the refiner's conditioning signal.
pub fn reconstruct(model: &VaeModel, x: &Tensor, mode: ReconMode, rng: Option<&mut RngStream>) -> Result<Tensor> {
    let post = encode(model, x)?;
    let z = match mode {
        ReconMode::PosteriorMean => post.mu,
        ReconMode::PosteriorSample => {
            let rng = rng.ok_or_else(|| Error::config("posterior-sample reconstruction needs an RNG"))?;
            let eps = rng.gaussian(post.mu.shape());
            reparameterize(&post, &eps)?
        }
    };
    decode(model, &z)
}

/// Where generation-time VAE latents come from.
#[derive(Clone, Copy, Debug)]
pub enum LatentSource<'a> {
    StandardNormal,
    Gmm(&'a GmmModel),
}

/// Draws `n` latents from `source` and decodes them. Returns `(z, x̂)`.
pub fn sample_prior(model: &VaeModel, n: usize, rng: &mut RngStream, source: LatentSource<'_>) -> Result<(Tensor, Tensor)> {
    let l = model.latent_dim;
    let z = match source {
        LatentSource::StandardNormal => rng.gaussian(&[n, l]),
        LatentSource::Gmm(gmm) => {
            if gmm.dim() != l {
                return Err(Error::shape(format!("GMM dimension {} does not match latent dim {l}", gmm.dim())));
            }
            sample_gmm(gmm, n, rng)?
        }
    };
    if n == 0 {
        return Ok((Tensor::zeros(&[0, l]), Tensor::zeros(&[0, model.data_dim])));
    }
    let x = decode(model, &z)?;
    Ok((z, x))
}
