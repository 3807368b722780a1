//! Ex-post density estimation: a full-covariance Gaussian mixture fit by EM on
//! training-set latent codes, sampled in place of the standard-normal prior.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::nn::{RngStream, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    chol: Vec<DMatrix<f64>>,
    log_dets: Vec<f64>,
    reg: f64,
}

impl GmmModel {
    /// Validates the simplex, symmetry, and positive-definiteness invariants.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<f64>>, reg: f64) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::ModelIntegrity(format!(
                "{k} weights, {} means, {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) || covariances.iter().any(|c| c.len() != dim * dim) {
            return Err(Error::ModelIntegrity("inconsistent component dimensions".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::ModelIntegrity("weights must be non-negative and sum to 1".into()));
        }
        let means: Vec<DVector<f64>> = means.into_iter().map(DVector::from_vec).collect();
        let covariances: Vec<DMatrix<f64>> = covariances.into_iter().map(|c| DMatrix::from_row_slice(dim, dim, &c)).collect();
        Self::from_parts(weights, means, covariances, reg)
    }

    fn from_parts(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>, reg: f64) -> Result<Self> {
        let mut chol = Vec::with_capacity(covariances.len());
        let mut log_dets = Vec::with_capacity(covariances.len());
        for (i, c) in covariances.iter().enumerate() {
            let asym = (c - c.transpose()).abs().max();
            if asym > 1e-12 * (1.0 + c.abs().max()) || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::ModelIntegrity(format!("covariance {i} is not symmetric")));
            }
            let l = c
                .clone()
                .cholesky()
                .ok_or_else(|| Error::ModelIntegrity(format!("covariance {i} is not positive definite")))?
                .unpack();
            log_dets.push(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>());
            chol.push(l);
        }
        Ok(GmmModel { weights, means, covariances, chol, log_dets, reg })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.means[k].as_slice()
    }

    /// Row-major `dim x dim` covariance of component `k`.
    pub fn covariance(&self, k: usize) -> Vec<f64> {
        let c = &self.covariances[k];
        let d = self.dim();
        (0..d * d).map(|i| c[(i / d, i % d)]).collect()
    }

    pub fn reg(&self) -> f64 {
        self.reg
    }

    /// Smallest covariance eigenvalue across components.
    pub fn min_eigenvalue(&self) -> f64 {
        self.covariances
            .iter()
            .map(|c| SymmetricEigen::new(c.clone()).eigenvalues.min())
            .fold(f64::INFINITY, f64::min)
    }

    fn component_log_density(&self, k: usize, x: &[f64]) -> f64 {
        let d = self.dim();
        let l = &self.chol[k];
        let mu = &self.means[k];
        // Forward substitution L y = x - mu.
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut s = x[i] - mu[i];
            for j in 0..i {
                s -= l[(i, j)] * y[j];
            }
            y[i] = s / l[(i, i)];
        }
        let maha: f64 = y.iter().map(|v| v * v).sum();
        -0.5 * (d as f64 * LN_2PI + self.log_dets[k] + maha)
    }

    /// `log p(x)` via log-sum-exp over components.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.n_components())
            .map(|k| self.weights[k].ln() + self.component_log_density(k, x))
            .collect();
        log_sum_exp(&terms)
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Mean log-density of the rows of `points`.
pub fn gmm_log_likelihood(model: &GmmModel, points: &Tensor) -> Result<f64> {
    if points.cols() != model.dim() {
        return Err(Error::shape(format!("points have dim {}, model has {}", points.cols(), model.dim())));
    }
    let n = points.rows();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(points.iter_rows().map(|r| model.log_density(r)).sum::<f64>() / n as f64)
}

/// Draws `n` points: component by weight, then `mean + L eps`.
pub fn sample_gmm(model: &GmmModel, n: usize, rng: &mut RngStream) -> Result<Tensor> {
    let d = model.dim();
    for (k, l) in model.chol.iter().enumerate() {
        if l.diagonal().iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::ModelIntegrity(format!("component {k} has a degenerate Cholesky factor")));
        }
    }
    let mut cdf = Vec::with_capacity(model.n_components());
    let mut acc = 0.0;
    for w in &model.weights {
        acc += w;
        cdf.push(acc);
    }
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let u = rng.uniform() * acc;
        let k = cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1);
        let eps = rng.normals(d);
        let l = &model.chol[k];
        for i in 0..d {
            let mut v = model.means[k][i];
            for j in 0..=i {
                v += l[(i, j)] * eps[j];
            }
            data.push(v);
        }
    }
    Tensor::matrix(n, d, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmFitConfig {
    pub n_components: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub reg: f64,
}

impl Default for GmmFitConfig {
    fn default() -> Self {
        GmmFitConfig { n_components: 10, max_iters: 200, tol: 1e-8, reg: 1e-6 }
    }
}

const MAX_RESEEDS: usize = 3;

/// EM with k-means++ seeding.
///
/// Returns the model and the mean log-likelihood of every model visited, so
/// the history is non-decreasing whenever no component had to be reseeded.
pub fn fit_gmm(latents: &Tensor, config: &GmmFitConfig, rng: &mut RngStream) -> Result<(GmmModel, Vec<f64>)> {
    let n = latents.rows();
    let d = latents.cols();
    let k = config.n_components;
    if k == 0 || d == 0 {
        return Err(Error::config("GMM needs at least one component and dimension"));
    }
    if n < k {
        return Err(Error::config(format!("{n} points cannot fit {k} components")));
    }
    if !(config.reg > 0.0) {
        return Err(Error::config("GMM regularizer must be positive"));
    }
    let points: Vec<DVector<f64>> = latents.iter_rows().map(DVector::from_column_slice).collect();
    let global_cov = covariance_of(&points, &vec![1.0; n], &mean_of(&points, &vec![1.0; n]), config.reg);

    let mut means = kmeans_pp(&points, k, rng);
    let mut covs = vec![global_cov.clone(); k];
    let mut weights = vec![1.0 / k as f64; k];
    let mut model = GmmModel::from_parts(weights.clone(), means.clone(), covs.clone(), config.reg)?;
    let mut history = Vec::new();
    let mut reseeds = vec![0usize; k];

    for iter in 0..=config.max_iters {
        // E-step on the current model.
        let mut resp = vec![0.0; n * k];
        let mut ll = 0.0;
        let mut terms = vec![0.0; k];
        for (i, x) in points.iter().enumerate() {
            for (j, t) in terms.iter_mut().enumerate() {
                *t = model.weights[j].ln() + model.component_log_density(j, x.as_slice());
            }
            let lse = log_sum_exp(&terms);
            ll += lse;
            for j in 0..k {
                resp[i * k + j] = (terms[j] - lse).exp();
            }
        }
        let ll = ll / n as f64;
        if !ll.is_finite() {
            return Err(Error::Fitting(format!("log-likelihood became non-finite at iteration {iter}")));
        }
        let converged = history.last().is_some_and(|&prev: &f64| ll - prev < config.tol);
        history.push(ll);
        if converged || iter == config.max_iters {
            break;
        }

        // M-step.
        for j in 0..k {
            let r: Vec<f64> = (0..n).map(|i| resp[i * k + j]).collect();
            let mass: f64 = r.iter().sum();
            if mass < 1e-10 {
                reseeds[j] += 1;
                if reseeds[j] > MAX_RESEEDS {
                    return Err(Error::Fitting(format!("component {j} stayed empty after {MAX_RESEEDS} reseeds")));
                }
                means[j] = points[rng.below(n)].clone();
                covs[j] = global_cov.clone();
                weights[j] = 1.0 / k as f64;
                continue;
            }
            weights[j] = mass / n as f64;
            means[j] = mean_of(&points, &r);
            covs[j] = covariance_of(&points, &r, &means[j], config.reg);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        model = GmmModel::from_parts(weights.clone(), means.clone(), covs.clone(), config.reg)
            .map_err(|e| Error::Fitting(format!("M-step at iteration {iter}: {e}")))?;
    }
    Ok((model, history))
}

fn mean_of(points: &[DVector<f64>], r: &[f64]) -> DVector<f64> {
    let mass: f64 = r.iter().sum();
    let mut m = DVector::zeros(points[0].len());
    for (x, &w) in points.iter().zip(r) {
        m.axpy(w, x, 1.0);
    }
    m / mass
}

fn covariance_of(points: &[DVector<f64>], r: &[f64], mean: &DVector<f64>, reg: f64) -> DMatrix<f64> {
    let d = mean.len();
    let mass: f64 = r.iter().sum();
    let mut c = DMatrix::zeros(d, d);
    for (x, &w) in points.iter().zip(r) {
        let diff = x - mean;
        c.ger(w, &diff, &diff, 1.0);
    }
    c /= mass;
    // Exact symmetry, then the ridge.
    let c = (&c + c.transpose()) * 0.5;
    c + DMatrix::identity(d, d) * reg
}

fn kmeans_pp(points: &[DVector<f64>], k: usize, rng: &mut RngStream) -> Vec<DVector<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.below(n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let u = rng.uniform() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&v| {
                    acc += v;
                    u < acc
                })
                .unwrap_or(n - 1)
        } else {
            rng.below(n)
        };
        let c = points[idx].clone();
        for (p, dd) in points.iter().zip(d2.iter_mut()) {
            *dd = dd.min((p - &c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standard(dim: usize) -> GmmModel {
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = 1.0;
        }
        GmmModel::new(vec![1.0], vec![vec![0.0; dim]], vec![cov], 1e-6).unwrap()
    }

    #[test]
    fn standard_normal_density_at_origin() {
        let ll = gmm_log_likelihood(&standard(1), &Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
        assert!((ll + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!((ll - -0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn distant_point_dilutes() {
        let m = standard(2);
        let near = Tensor::matrix(2, 2, vec![0.1, 0.0, -0.2, 0.3]).unwrap();
        let far = Tensor::matrix(3, 2, vec![0.1, 0.0, -0.2, 0.3, 8.0, -8.0]).unwrap();
        assert!(gmm_log_likelihood(&m, &far).unwrap() < gmm_log_likelihood(&m, &near).unwrap());
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(GmmModel::new(vec![0.6, 0.6], vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![1.0]], 1e-6).is_err());
        assert!(GmmModel::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![1.0, 2.0, 2.0, 1.0]], 1e-6).is_err());
        assert!(GmmModel::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![1.0, 0.5, 0.0, 1.0]], 1e-6).is_err());
    }

    #[test]
    fn single_component_is_closed_form() {
        let mut rng = RngStream::new(1);
        let data = rng.gaussian(&[500, 2]).map(|v| 3.0 * v + 1.0);
        let reg = 1e-6;
        let cfg = GmmFitConfig { n_components: 1, reg, ..GmmFitConfig::default() };
        let (m, _) = fit_gmm(&data, &cfg, &mut rng).unwrap();
        let mean = data.col_mean();
        let n = data.rows() as f64;
        for i in 0..2 {
            assert!((m.mean(0)[i] - mean[i]).abs() < 1e-12);
            for j in 0..2 {
                let c: f64 = data.iter_rows().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / n;
                let expected = c + if i == j { reg } else { 0.0 };
                assert!((m.covariance(0)[i * 2 + j] - expected).abs() < 1e-10);
            }
        }
        assert_eq!(m.weights(), &[1.0]);
    }

    #[test]
    fn point_mass_samples_sit_at_the_mean() {
        let m = GmmModel::new(vec![1.0], vec![vec![2.0, -1.0]], vec![vec![1e-6, 0.0, 0.0, 1e-6]], 1e-6).unwrap();
        let s = sample_gmm(&m, 100, &mut RngStream::new(3)).unwrap();
        for r in s.iter_rows() {
            assert!((r[0] - 2.0).abs() < 0.01 && (r[1] + 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn too_few_points_rejected() {
        let data = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        let cfg = GmmFitConfig { n_components: 3, ..GmmFitConfig::default() };
        assert!(matches!(fit_gmm(&data, &cfg, &mut RngStream::new(0)), Err(Error::Config(_))));
    }

    #[test]
    fn fitting_is_deterministic() {
        let data = RngStream::new(8).gaussian(&[300, 2]);
        let cfg = GmmFitConfig { n_components: 3, max_iters: 20, ..GmmFitConfig::default() };
        let a = fit_gmm(&data, &cfg, &mut RngStream::new(4)).unwrap();
        let b = fit_gmm(&data, &cfg, &mut RngStream::new(4)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
