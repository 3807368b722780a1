//! Reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Graph`] records every primitive applied to its nodes in creation order,
//! so a single reverse sweep over the node list is a valid topological order.
//! Values are batches of rows, the same convention as [`Tensor`].

use crate::error::{Error, Result};

use super::mlp::sigmoid;
use super::tensor::{matmul, matmul_nt, matmul_tn};
use super::{Activation, Layer, MlpParams, Tensor};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, end: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Silu(..) => "silu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Clamp { .. } => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatCols(..) => "concat",
            Op::SliceCols { .. } => "slice",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape.
///
/// Shape errors in primitive construction are programming errors and panic;
/// non-finite results are recorded and surface from [`Graph::backward`] and
/// [`Graph::check`] naming the first primitive that produced them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    non_finite: Option<&'static str>,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradients for a bound MLP, shaped like its parameters.
    pub fn mlp(&self, vars: &MlpVars) -> MlpParams {
        MlpParams {
            layers: vars
                .layers
                .iter()
                .map(|&(w, b)| Layer { weight: self.wrt(w), bias: self.wrt(b) })
                .collect(),
            activation: vars.activation,
        }
    }
}

/// MLP parameters bound as leaves of a graph.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
    pub activation: Activation,
}

impl MlpVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.affine(h, w, b);
            if i < last {
                h = g.activation(h, self.activation);
            }
        }
        h
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Whether its gradient matters is up to the caller.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn bind_mlp(&mut self, params: &MlpParams) -> MlpVars {
        MlpVars {
            layers: params
                .layers
                .iter()
                .map(|l| (self.leaf(l.weight.clone()), self.leaf(l.bias.clone())))
                .collect(),
            activation: params.activation,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn check(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).map(f);
        self.push(v, op)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let v = self.value(a).zip_map(self.value(b), f).expect("elementwise operands must match");
        self.push(v, op)
    }

    /// `x W + b` with `W` laid out `in x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, k) = (xv.rows(), xv.cols());
        assert_eq!(wv.shape()[0], k, "affine: input width mismatch");
        let m = wv.shape()[1];
        let mut out = matmul(xv.data(), wv.data(), n, k, m);
        for row in out.chunks_mut(m) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let value = Tensor::matrix(n, m, out).expect("affine shape");
        self.push(value, Op::Affine { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Identity => x,
            Activation::Silu => self.silu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let v = {
            let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_cols(&refs).expect("concat operands must share row count")
        };
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice_cols(start, end).expect("slice within width");
        self.push(v, Op::SliceCols { x, start, end })
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check()?;
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their gradient for the caller.
                    grads[i] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, k, m) = (xv.rows(), xv.cols(), wv.shape()[1]);
                    let dx = matmul_nt(g.data(), wv.data(), rows, k, m);
                    let dw = matmul_tn(xv.data(), g.data(), rows, k, m);
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                    accumulate(&mut grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, g.scale(*c)),
                Op::AddScalar(x) => accumulate(&mut grads, *x, g),
                Op::Silu(x) => {
                    let d = self.value(*x).zip_map(&g, |v, gv| gv * Activation::Silu.derivative(v))?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = node.value.zip_map(&g, |s, gv| gv * s * (1.0 - s))?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Tanh(x) => {
                    let d = node.value.zip_map(&g, |t, gv| gv * (1.0 - t * t))?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Exp(x) => {
                    let d = node.value.mul(&g)?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Log(x) => {
                    let d = self.value(*x).zip_map(&g, |v, gv| gv / v)?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Square(x) => {
                    let d = self.value(*x).zip_map(&g, |v, gv| 2.0 * v * gv)?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Clamp { x, lo, hi } => {
                    let d = self
                        .value(*x)
                        .zip_map(&g, |v, gv| if v < *lo || v > *hi { 0.0 } else { gv })?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), s));
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let s = g.data()[0] / xv.len().max(1) as f64;
                    accumulate(&mut grads, *x, Tensor::full(xv.shape(), s));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let piece = g.slice_cols(start, start + w)?.reshape(self.value(p).shape().to_vec())?;
                        accumulate(&mut grads, p, piece);
                        start += w;
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let xv = self.value(*x);
                    let mut d = Tensor::zeros(&[xv.rows(), xv.cols()]);
                    for r in 0..xv.rows() {
                        d.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, d.reshape(xv.shape().to_vec())?);
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: self.nodes[i].op.name() });
                }
            }
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Value and exact gradient of `loss` with respect to every entry of `params`.
///
/// The closure receives the graph and the MLP bound into it and returns the
/// scalar loss node.
pub fn grad<F>(params: &MlpParams, loss: F) -> Result<(f64, MlpParams)>
where
    F: FnOnce(&mut Graph, &MlpVars) -> Var,
{
    let mut g = Graph::new();
    let vars = g.bind_mlp(params);
    let l = loss(&mut g, &vars);
    let grads = g.backward(l)?;
    Ok((g.scalar(l), grads.mlp(&vars)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mlp_forward, RngStream};

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![1.0, -2.0]));
        let sq = g.square(w);
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(w).data(), &[2.0, -4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = MlpParams::init(&[2, 3, 1], Activation::Silu, &mut RngStream::new(0)).unwrap();
        let (v, grads) = grad(&p, |g, _| g.leaf(Tensor::scalar(4.0))).unwrap();
        assert_eq!(v, 4.0);
        assert!(grads.tensors().iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let mut rng = RngStream::new(11);
        let p = MlpParams::init(&[3, 8, 8, 2], Activation::Silu, &mut rng).unwrap();
        let x = rng.gaussian(&[5, 3]);
        let mut g = Graph::new();
        let vars = g.bind_mlp(&p);
        let xv = g.leaf(x.clone());
        let y = vars.forward(&mut g, xv);
        assert_eq!(g.value(y), &mlp_forward(&p, &x).unwrap());
    }

    #[test]
    fn non_finite_names_the_primitive() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-1.0]));
        let l = g.log(x);
        let s = g.sum(l);
        match g.backward(s) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "log"),
            other => panic!("expected non-finite error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn slice_concat_tanh_exp_gradients() {
        // l = sum(exp(a) * tanh(b)) with [a | b] = slice of concat
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 1, vec![0.3, -0.7]).unwrap());
        let b = g.leaf(Tensor::matrix(2, 1, vec![1.1, 0.2]).unwrap());
        let c = g.concat_cols(&[a, b]);
        let a2 = g.slice_cols(c, 0, 1);
        let b2 = g.slice_cols(c, 1, 2);
        let ea = g.exp(a2);
        let tb = g.tanh(b2);
        let m = g.mul(ea, tb);
        let l = g.sum(m);
        let grads = g.backward(l).unwrap();
        let da = grads.wrt(a);
        let db = grads.wrt(b);
        for (i, (&av, &bv)) in [0.3f64, -0.7].iter().zip(&[1.1f64, 0.2]).enumerate() {
            assert!((da.data()[i] - av.exp() * bv.tanh()).abs() < 1e-14);
            assert!((db.data()[i] - av.exp() * (1.0 - bv.tanh().powi(2))).abs() < 1e-14);
        }
    }
}
