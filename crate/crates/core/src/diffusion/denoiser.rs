use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::nn::{mlp_forward, time_embedding_rows, Activation, Graph, MlpParams, MlpVars, RngStream, Tensor};

/// How the conditioning channel of the noise predictor is fed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Reconstruction concatenated to the noisy state; standard forward process.
    Form1Concat,
    /// Same concatenation, trained on the forward process shifted by the
    /// reconstruction.
    Form2Concat,
    /// Conditioning channel held at zero: the unconditional baseline.
    Unconditional,
}

impl Conditioning {
    pub fn code(self) -> u64 {
        match self {
            Conditioning::Form1Concat => 1,
            Conditioning::Form2Concat => 2,
            Conditioning::Unconditional => 0,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        Some(match code {
            1 => Conditioning::Form1Concat,
            2 => Conditioning::Form2Concat,
            0 => Conditioning::Unconditional,
            _ => return None,
        })
    }
}

/// Anything that predicts the noise in `x_t` given a conditioning signal.
///
/// `t` carries one step per row of `x_t`.
pub trait EpsPredictor {
    fn predict_eps(&self, x_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<Tensor>;
}

/// The ε-network: an MLP over `[x_t | cond | time embedding]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub net: MlpParams,
    pub time_embed_dim: usize,
    pub conditioning: Conditioning,
    pub data_dim: usize,
}

impl DenoiserModel {
    pub fn new(net: MlpParams, time_embed_dim: usize, conditioning: Conditioning, data_dim: usize) -> Result<Self> {
        if net.in_dim() != 2 * data_dim + time_embed_dim || net.out_dim() != data_dim {
            return Err(Error::shape(format!(
                "denoiser net maps {} -> {}, expected {} -> {data_dim}",
                net.in_dim(),
                net.out_dim(),
                2 * data_dim + time_embed_dim
            )));
        }
        if time_embed_dim == 0 || time_embed_dim % 2 != 0 {
            return Err(Error::config("time embedding dim must be even and positive"));
        }
        Ok(DenoiserModel { net, time_embed_dim, conditioning, data_dim })
    }

    pub fn init(data_dim: usize, hidden: &[usize], time_embed_dim: usize, conditioning: Conditioning, rng: &mut RngStream) -> Result<Self> {
        let mut dims = vec![2 * data_dim + time_embed_dim];
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        let net = MlpParams::init(&dims, Activation::Silu, rng)?;
        Self::new(net, time_embed_dim, conditioning, data_dim)
    }

    /// Network input rows `[x_t | cond | emb(t)]`; the conditioning slot is
    /// zeroed for the unconditional model.
    pub fn input(&self, x_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<Tensor> {
        if x_t.cols() != self.data_dim || cond.cols() != self.data_dim {
            return Err(Error::shape(format!(
                "denoiser expects width {}, got x_t {} and cond {}",
                self.data_dim,
                x_t.cols(),
                cond.cols()
            )));
        }
        if x_t.rows() != cond.rows() || t.len() != x_t.rows() {
            return Err(Error::shape("denoiser: x_t, cond and t row counts differ"));
        }
        let emb = time_embedding_rows(t, self.time_embed_dim)?;
        let zeros;
        let cond = if self.conditioning == Conditioning::Unconditional {
            zeros = Tensor::zeros(&[x_t.rows(), self.data_dim]);
            &zeros
        } else {
            cond
        };
        Tensor::concat_cols(&[x_t, cond, &emb])
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in self.net.tensors() {
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

impl EpsPredictor for DenoiserModel {
    fn predict_eps(&self, x_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<Tensor> {
        let input = self.input(x_t, cond, t)?;
        mlp_forward(&self.net, &input)
    }
}

/// Inputs to the denoising losses may overshoot `[-1, 1]` by this much.
pub const LOSS_GUARD: f64 = 1.5;

pub(crate) fn check_ddpm_scale(x: &Tensor, what: &str) -> Result<()> {
    if let Some(v) = x.data().iter().find(|v| !(v.abs() <= LOSS_GUARD)) {
        return Err(Error::data(format!("{what} value {v} outside the [-1.5, 1.5] guard band")));
    }
    Ok(())
}

/// `mean((eps - eps_hat)^2)` over every entry.
pub fn noise_mse(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    Ok(eps.sub(eps_hat)?.data().iter().map(|d| d * d).sum::<f64>() / eps.len().max(1) as f64)
}

/// Simplified denoising loss on a precomputed noisy state, with gradients.
pub fn denoising_loss_grad(model: &DenoiserModel, x_t: &Tensor, cond: &Tensor, t: &[usize], eps: &Tensor) -> Result<(f64, MlpParams)> {
    let input = model.input(x_t, cond, t)?;
    let mut g = Graph::new();
    let vars = g.bind_mlp(&model.net);
    let loss = denoising_loss_graph(&mut g, &vars, &input, eps);
    let grads = g.backward(loss)?;
    Ok((g.scalar(loss), grads.mlp(&vars)))
}

pub(crate) fn denoising_loss_graph(g: &mut Graph, vars: &MlpVars, input: &Tensor, eps: &Tensor) -> crate::nn::Var {
    let x = g.leaf(input.clone());
    let e = g.leaf(eps.as_matrix());
    let pred = vars.forward(g, x);
    let diff = g.sub(e, pred);
    let sq = g.square(diff);
    g.mean(sq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_layout_is_xt_then_cond_then_time() {
        let m = DenoiserModel::init(2, &[4], 4, Conditioning::Form1Concat, &mut RngStream::new(0)).unwrap();
        let xt = Tensor::matrix(1, 2, vec![0.1, 0.2]).unwrap();
        let c = Tensor::matrix(1, 2, vec![0.3, 0.4]).unwrap();
        let inp = m.input(&xt, &c, &[0]).unwrap();
        assert_eq!(inp.data(), &[0.1, 0.2, 0.3, 0.4, 0.0, 0.0, 1.0, 1.0]);
        let u = DenoiserModel { conditioning: Conditioning::Unconditional, ..m };
        let inp = u.input(&xt, &c, &[0]).unwrap();
        assert_eq!(&inp.data()[2..4], &[0.0, 0.0]);
    }

    #[test]
    fn shape_contract() {
        let net = MlpParams::init(&[5, 3], Activation::Silu, &mut RngStream::new(0)).unwrap();
        assert!(DenoiserModel::new(net, 2, Conditioning::Form1Concat, 2).is_err());
    }
}
