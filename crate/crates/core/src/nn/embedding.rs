use crate::error::{Error, Result};

use super::Tensor;

/// Sinusoidal embedding of an integer step.
///
/// Layout is `[sin(t f_0) .. sin(t f_{h-1}), cos(t f_0) .. cos(t f_{h-1})]`
/// with `h = dim / 2` and frequencies geometrically spaced from 1 down to
/// 1/10000.
pub fn sinusoidal_time_embedding(t: usize, dim: usize) -> Result<Tensor> {
    let freqs = frequencies(dim)?;
    Ok(Tensor::from_vec(embed(t, &freqs)))
}

/// One embedding row per step.
pub fn time_embedding_rows(ts: &[usize], dim: usize) -> Result<Tensor> {
    let freqs = frequencies(dim)?;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(embed(t, &freqs));
    }
    Tensor::matrix(ts.len(), dim, data)
}

fn frequencies(dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!("time embedding dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    if half == 1 {
        return Ok(vec![1.0]);
    }
    let step = (10_000f64).ln() / (half - 1) as f64;
    Ok((0..half).map(|i| (-step * i as f64).exp()).collect())
}

fn embed(t: usize, freqs: &[f64]) -> Vec<f64> {
    let t = t as f64;
    let mut out: Vec<f64> = freqs.iter().map(|f| (t * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t * f).cos()));
    out
}
