//! Toy datasets in `[0, 1]^D`.

use std::f64::consts::PI;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetName {
    EightGaussians,
    TwoMoons,
    Pinwheel,
    Rings8x8,
}

impl DatasetName {
    pub fn dim(self) -> usize {
        match self {
            DatasetName::Rings8x8 => 64,
            _ => 2,
        }
    }

    pub fn default_latent_dim(self) -> usize {
        match self {
            DatasetName::Rings8x8 => 16,
            _ => 2,
        }
    }
}

impl FromStr for DatasetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eight-gaussians" => Ok(DatasetName::EightGaussians),
            "two-moons" => Ok(DatasetName::TwoMoons),
            "pinwheel" => Ok(DatasetName::Pinwheel),
            "rings-8x8" => Ok(DatasetName::Rings8x8),
            _ => Err(Error::config(format!("unknown dataset `{s}`"))),
        }
    }
}

/// Binary attribute attached to each point, derived from the generating
/// component rather than the noisy coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelRule {
    /// Component centre above the horizontal midline (for rings: radius above
    /// the middle of its range).
    UpperHalf,
    /// Component centre right of the vertical midline (for rings: same as
    /// upper-half).
    RightHalf,
}

impl FromStr for LabelRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upper-half" => Ok(LabelRule::UpperHalf),
            "right-half" => Ok(LabelRule::RightHalf),
            _ => Err(Error::config(format!("unknown label rule `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub n_train: usize,
    pub n_eval: usize,
    pub label: LabelRule,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn eight_gaussians(n_train: usize, n_eval: usize, seed: u64) -> Self {
        DatasetSpec { name: DatasetName::EightGaussians, n_train, n_eval, label: LabelRule::UpperHalf, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train.checked_add(self.n_eval).is_none() {
            return Err(Error::config("dataset size overflows"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Tensor,
    pub eval: Tensor,
    pub train_labels: Vec<bool>,
    pub eval_labels: Vec<bool>,
}

pub const EIGHT_RADIUS: f64 = 0.35;
pub const EIGHT_STD: f64 = 0.02;

/// Centres of the eight-gaussians modes.
pub fn eight_centers() -> Vec<[f64; 2]> {
    (0..8)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / 8.0;
            [0.5 + EIGHT_RADIUS * a.cos(), 0.5 + EIGHT_RADIUS * a.sin()]
        })
        .collect()
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn half(rule: LabelRule, x: f64, y: f64) -> bool {
    match rule {
        LabelRule::UpperHalf => y > 0.5 + 1e-9,
        LabelRule::RightHalf => x > 0.5 + 1e-9,
    }
}

fn point(name: DatasetName, rule: LabelRule, rng: &mut RngStream) -> (Vec<f64>, bool) {
    match name {
        DatasetName::EightGaussians => {
            let c = eight_centers()[rng.below(8)];
            let x = clip01(c[0] + EIGHT_STD * rng.normal());
            let y = clip01(c[1] + EIGHT_STD * rng.normal());
            (vec![x, y], half(rule, c[0], c[1]))
        }
        DatasetName::TwoMoons => {
            let upper = rng.below(2) == 0;
            let th = PI * rng.uniform();
            let (mx, my) = if upper { (th.cos(), th.sin()) } else { (1.0 - th.cos(), 0.5 - th.sin()) };
            let (mx, my) = (mx + 0.05 * rng.normal(), my + 0.05 * rng.normal());
            // Raw moons live in about [-1.15, 2.15] x [-0.65, 1.15].
            let x = clip01((mx + 1.2) / 3.4);
            let y = clip01((my + 0.7) / 1.9);
            let label = match rule {
                LabelRule::UpperHalf => upper,
                LabelRule::RightHalf => !upper,
            };
            (vec![x, y], label)
        }
        DatasetName::Pinwheel => {
            let (arms, radial, tangential, rate) = (5usize, 0.3, 0.1, 0.25);
            let arm = rng.below(arms);
            let f0 = radial * rng.normal() + 1.0;
            let f1 = tangential * rng.normal();
            let angle = 2.0 * PI * arm as f64 / arms as f64 + rate * f0.exp();
            let (s, c) = angle.sin_cos();
            let (px, py) = (c * f0 - s * f1, s * f0 + c * f1);
            let base = 2.0 * PI * arm as f64 / arms as f64;
            (vec![clip01(0.5 + px / 6.0), clip01(0.5 + py / 6.0)], half(rule, 0.5 + base.cos(), 0.5 + base.sin()))
        }
        DatasetName::Rings8x8 => {
            let r = 1.5 + 1.5 * rng.uniform();
            let (cx, cy) = (3.5 + 0.3 * rng.normal(), 3.5 + 0.3 * rng.normal());
            let img = (0..64)
                .map(|p| {
                    let (i, j) = ((p / 8) as f64, (p % 8) as f64);
                    let d = ((i - cy).powi(2) + (j - cx).powi(2)).sqrt();
                    clip01((-(d - r).powi(2) / (2.0 * 0.35 * 0.35)).exp())
                })
                .collect();
            (img, r > 2.25)
        }
    }
}

fn draw(spec: &DatasetSpec, n: usize, rng: &mut RngStream) -> (Tensor, Vec<bool>) {
    let dim = spec.name.dim();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, l) = point(spec.name, spec.label, rng);
        data.extend(p);
        labels.push(l);
    }
    (Tensor::matrix(n, dim, data).expect("dataset shape"), labels)
}

/// Train and held-out sets drawn from independent streams of `spec.seed`.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let (train, train_labels) = draw(spec, spec.n_train, &mut RngStream::derive(spec.seed, "dataset-train"));
    let (eval, eval_labels) = draw(spec, spec.n_eval, &mut RngStream::derive(spec.seed, "dataset-eval"));
    Ok(Dataset { train, eval, train_labels, eval_labels })
}

/// Rows of `x` split by label: `(positives, negatives)`.
pub fn split_by_label(x: &Tensor, labels: &[bool]) -> (Tensor, Tensor) {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    (x.select_rows(&pos), x.select_rows(&neg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_train_set() {
        let d = make_dataset(&DatasetSpec::eight_gaussians(0, 5, 1)).unwrap();
        assert_eq!(d.train.shape(), &[0, 2]);
        assert_eq!(d.eval.rows(), 5);
    }

    #[test]
    fn eight_modes_are_covered() {
        let d = make_dataset(&DatasetSpec::eight_gaussians(800, 0, 2)).unwrap();
        let centers = eight_centers();
        let mut hit = [0usize; 8];
        for r in d.train.iter_rows() {
            let k = (0..8)
                .min_by(|&a, &b| {
                    let da = (r[0] - centers[a][0]).powi(2) + (r[1] - centers[a][1]).powi(2);
                    let db = (r[0] - centers[b][0]).powi(2) + (r[1] - centers[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            hit[k] += 1;
        }
        assert!(hit.iter().all(|&h| h > 0), "{hit:?}");
    }

    #[test]
    fn every_dataset_is_in_unit_box_with_both_labels() {
        for name in [DatasetName::EightGaussians, DatasetName::TwoMoons, DatasetName::Pinwheel, DatasetName::Rings8x8] {
            let spec = DatasetSpec { name, n_train: 500, n_eval: 10, label: LabelRule::UpperHalf, seed: 3 };
            let d = make_dataset(&spec).unwrap();
            assert_eq!(d.train.cols(), name.dim());
            assert!(d.train.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(d.train_labels.iter().any(|&l| l) && d.train_labels.iter().any(|&l| !l), "{name:?}");
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = make_dataset(&DatasetSpec::eight_gaussians(50, 50, 7)).unwrap();
        assert_eq!(a, make_dataset(&DatasetSpec::eight_gaussians(50, 50, 7)).unwrap());
        assert_ne!(a.train, a.eval);
    }
}
