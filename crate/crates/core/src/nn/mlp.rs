use crate::error::{Error, Result};

use super::tensor::matmul;
use super::{RngStream, Tensor};

/// Element-wise nonlinearity placed between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Silu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation input.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }

    pub fn code(self) -> u64 {
        match self {
            Activation::Identity => 0,
            Activation::Silu => 1,
            Activation::Sigmoid => 2,
            Activation::Tanh => 3,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        Some(match code {
            0 => Activation::Identity,
            1 => Activation::Silu,
            2 => Activation::Sigmoid,
            3 => Activation::Tanh,
            _ => return None,
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One affine layer: `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::shape("layer weight must be a matrix"));
        }
        if bias.len() != weight.shape()[1] {
            return Err(Error::shape(format!(
                "bias length {} does not match weight out-dim {}",
                bias.len(),
                weight.shape()[1]
            )));
        }
        Ok(Layer { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn affine(&self, x: &Tensor) -> Tensor {
        let (n, k, m) = (x.rows(), self.in_dim(), self.out_dim());
        let mut out = matmul(x.data(), self.weight.data(), n, k, m);
        for row in out.chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        Tensor::matrix(n, m, out).expect("affine output shape")
    }
}

/// Parameters of a multilayer perceptron. The activation is applied after
/// every layer except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {i} out-dim {} does not chain into layer {} in-dim {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(MlpParams { layers, activation })
    }

    /// Random init for layer widths `dims[0] -> dims[1] -> ...`.
    ///
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(dims: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config("need at least input and output widths"));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect();
                Layer {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("init shape"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Self::new(layers, activation)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Widths `[in, hidden.., out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(Layer::out_dim));
        d
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
            activation: self.activation,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        mlp_forward(self, input)
    }
}

/// Forward pass. The last dimension of `input` must equal the first layer's
/// in-dim; the output keeps the leading dimensions.
pub fn mlp_forward(params: &MlpParams, input: &Tensor) -> Result<Tensor> {
    if input.cols() != params.in_dim() {
        return Err(Error::shape(format!(
            "input width {} does not match MLP in-dim {}",
            input.cols(),
            params.in_dim()
        )));
    }
    let mut h = input.as_matrix();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        h = layer.affine(&h);
        if i < last && params.activation != Activation::Identity {
            h = h.map(|v| params.activation.apply(v));
        }
    }
    let mut shape = input.shape().to_vec();
    if let Some(l) = shape.last_mut() {
        *l = params.out_dim();
    }
    h.reshape(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(w: Vec<f64>, rows: usize, cols: usize, b: Vec<f64>) -> Layer {
        Layer::new(Tensor::matrix(rows, cols, w).unwrap(), Tensor::from_vec(b)).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let p = MlpParams::new(vec![layer(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0.0, 0.0])], Activation::Silu).unwrap();
        let y = mlp_forward(&p, &Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let p = MlpParams::new(vec![layer(vec![0.0, 0.0], 2, 1, vec![3.0])], Activation::Silu).unwrap();
        let y = mlp_forward(&p, &Tensor::from_vec(vec![-5.0, 11.0])).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn two_layer_hand_computed() {
        // h = silu(1*2 + 0.5) = silu(2.5); y = -1.5 * h + 0.25
        let p = MlpParams::new(
            vec![layer(vec![2.0], 1, 1, vec![0.5]), layer(vec![-1.5], 1, 1, vec![0.25])],
            Activation::Silu,
        )
        .unwrap();
        let silu = 2.5 / (1.0 + (-2.5f64).exp());
        let expected = -1.5 * silu + 0.25;
        let y = mlp_forward(&p, &Tensor::from_vec(vec![1.0])).unwrap();
        assert!((y.data()[0] - expected).abs() < 1e-15);
        assert!((expected - -3.215_531_824_920_337).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = MlpParams::init(&[3, 4, 2], Activation::Silu, &mut RngStream::new(0)).unwrap();
        assert!(matches!(mlp_forward(&p, &Tensor::zeros(&[5, 2])), Err(Error::Shape(_))));
        assert!(MlpParams::new(vec![layer(vec![0.0; 2], 1, 2, vec![0.0; 2]), layer(vec![0.0; 3], 3, 1, vec![0.0])], Activation::Silu).is_err());
    }

    #[test]
    fn linear_when_unbiased_identity() {
        let mut p = MlpParams::init(&[3, 5, 2], Activation::Identity, &mut RngStream::new(4)).unwrap();
        for l in &mut p.layers {
            l.bias = Tensor::zeros(l.bias.shape());
        }
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let y = mlp_forward(&p, &x).unwrap();
        let y2 = mlp_forward(&p, &x.scale(-2.5)).unwrap();
        assert!(y.scale(-2.5).max_abs_diff(&y2).unwrap() < 1e-12);
    }
}
