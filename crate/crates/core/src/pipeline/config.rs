//! Run configuration. Every key has a default and unknown keys are rejected.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Conditioning, DdpmTrainConfig, SamplerKind, SamplerOptions, Scheme, VarianceType};
use crate::error::{Error, Result};
use crate::expde::GmmFitConfig;
use crate::vae::VaeConfig;

use super::dataset::{DatasetName, DatasetSpec, LabelRule};
use super::metrics::MmdConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub vae: VaeSection,
    pub gmm: GmmSection,
    pub ddpm: DdpmSection,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub name: String,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    /// 0 picks the dataset default: 2 for points, 16 for images.
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub kl_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmSection {
    /// 0 disables the ex-post density estimate.
    pub n_components: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub reg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpmSection {
    pub formulation: u8,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub sampler: String,
    pub eta: f64,
    /// 0 means the full chain.
    pub steps: usize,
    pub scheme: String,
    /// Empty picks fixedlarge for formulation 1 and fixedsmall for 2.
    pub variance: String,
    pub clip_x0: bool,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_samples: usize,
    pub permutations: usize,
    pub bandwidths: Vec<f64>,
    pub floor_quantile: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            dataset: DatasetSection::default(),
            vae: VaeSection::default(),
            gmm: GmmSection::default(),
            ddpm: DdpmSection::default(),
            sampler: SamplerSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { name: "eight-gaussians".into(), n_train: 10_000, n_eval: 2_000, seed: 1, label: "upper-half".into() }
    }
}

impl Default for VaeSection {
    fn default() -> Self {
        let v = VaeConfig::default();
        VaeSection { latent_dim: 0, hidden: v.hidden, kl_weight: v.kl_weight, epochs: v.epochs, batch_size: v.batch_size, lr: v.lr }
    }
}

impl Default for GmmSection {
    fn default() -> Self {
        let g = GmmFitConfig::default();
        GmmSection { n_components: g.n_components, max_iters: g.max_iters, tol: g.tol, reg: g.reg }
    }
}

impl Default for DdpmSection {
    fn default() -> Self {
        let d = DdpmTrainConfig::default();
        DdpmSection {
            formulation: 1,
            timesteps: d.timesteps,
            beta_start: d.beta_start,
            beta_end: d.beta_end,
            hidden: d.hidden,
            time_embed_dim: d.time_embed_dim,
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
        }
    }
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            sampler: "ddpm".into(),
            eta: 0.0,
            steps: 0,
            scheme: "linear".into(),
            variance: String::new(),
            clip_x0: true,
            temperature: 1.0,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n_samples: 1_000, permutations: 500, bandwidths: vec![0.02, 0.05, 0.1, 0.2], floor_quantile: 0.95 }
    }
}

fn unknown(what: &str, s: &str, options: &str) -> Error {
    Error::config(format!("unknown {what} `{s}` (expected {options})"))
}

impl FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            _ => Err(unknown("sampler", s, "ddpm|ddim")),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Scheme::Linear),
            "quadratic" => Ok(Scheme::Quadratic),
            _ => Err(unknown("scheme", s, "linear|quadratic")),
        }
    }
}

impl FromStr for VarianceType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixedsmall" => Ok(VarianceType::FixedSmall),
            "fixedlarge" => Ok(VarianceType::FixedLarge),
            _ => Err(unknown("variance", s, "fixedsmall|fixedlarge")),
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.dataset_spec()?;
        spec.validate()?;
        self.conditioning()?;
        let v = self.vae_config()?;
        if v.latent_dim == 0 || v.batch_size == 0 || !(v.lr >= 0.0) || !(v.kl_weight >= 0.0) || !v.kl_weight.is_finite() {
            return Err(Error::config("vae: latent_dim and batch_size must be positive, lr and kl_weight >= 0"));
        }
        let d = self.ddpm_config();
        if d.timesteps == 0 || d.batch_size == 0 || !(d.lr >= 0.0) {
            return Err(Error::config("ddpm: timesteps and batch_size must be positive, lr >= 0"));
        }
        if d.time_embed_dim == 0 || d.time_embed_dim % 2 != 0 {
            return Err(Error::config("ddpm: time_embed_dim must be even and positive"));
        }
        if !(0.0 < d.beta_start && d.beta_start <= d.beta_end && d.beta_end < 1.0) {
            return Err(Error::config("ddpm: need 0 < beta_start <= beta_end < 1"));
        }
        self.sampler_options()?.validate(d.timesteps)?;
        if self.gmm.n_components > 0 && (self.gmm.reg < 0.0 || self.gmm.max_iters == 0) {
            return Err(Error::config("gmm: reg must be >= 0 and max_iters positive"));
        }
        let e = &self.eval;
        if e.bandwidths.is_empty() || e.bandwidths.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::config("eval: bandwidths must be positive"));
        }
        if !(0.0..1.0).contains(&e.floor_quantile) {
            return Err(Error::config("eval: floor_quantile must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            name: self.dataset.name.parse::<DatasetName>()?,
            n_train: self.dataset.n_train,
            n_eval: self.dataset.n_eval,
            label: self.dataset.label.parse::<LabelRule>()?,
            seed: self.dataset.seed,
        })
    }

    pub fn conditioning(&self) -> Result<Conditioning> {
        match self.ddpm.formulation {
            1 => Ok(Conditioning::Form1Concat),
            2 => Ok(Conditioning::Form2Concat),
            f => Err(Error::config(format!("formulation must be 1 or 2, got {f}"))),
        }
    }

    pub fn vae_config(&self) -> Result<VaeConfig> {
        let latent_dim = match self.vae.latent_dim {
            0 => self.dataset.name.parse::<DatasetName>()?.default_latent_dim(),
            l => l,
        };
        Ok(VaeConfig {
            latent_dim,
            hidden: self.vae.hidden.clone(),
            kl_weight: self.vae.kl_weight,
            epochs: self.vae.epochs,
            batch_size: self.vae.batch_size,
            lr: self.vae.lr,
        })
    }

    pub fn gmm_config(&self) -> Option<GmmFitConfig> {
        (self.gmm.n_components > 0).then(|| GmmFitConfig {
            n_components: self.gmm.n_components,
            max_iters: self.gmm.max_iters,
            tol: self.gmm.tol,
            reg: self.gmm.reg,
        })
    }

    pub fn ddpm_config(&self) -> DdpmTrainConfig {
        let d = &self.ddpm;
        DdpmTrainConfig {
            timesteps: d.timesteps,
            beta_start: d.beta_start,
            beta_end: d.beta_end,
            hidden: d.hidden.clone(),
            time_embed_dim: d.time_embed_dim,
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
        }
    }

    /// Sampler defaults with the formulation-dependent variance filled in.
    pub fn sampler_options(&self) -> Result<SamplerOptions> {
        let s = &self.sampler;
        let variance = if s.variance.is_empty() {
            match self.conditioning()? {
                Conditioning::Form2Concat => VarianceType::FixedSmall,
                _ => VarianceType::FixedLarge,
            }
        } else {
            s.variance.parse()?
        };
        Ok(SamplerOptions {
            sampler: s.sampler.parse()?,
            eta: s.eta,
            steps: if s.steps == 0 { self.ddpm.timesteps } else { s.steps },
            scheme: s.scheme.parse()?,
            variance,
            clip_x0: s.clip_x0,
            temperature: s.temperature,
        })
    }

    pub fn mmd_config(&self) -> MmdConfig {
        MmdConfig {
            bandwidths: self.eval.bandwidths.clone(),
            permutations: self.eval.permutations,
            floor_quantile: self.eval.floor_quantile,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_default() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(Config::from_toml_str("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml_str("[vae]\nwidth = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_text() {
        let mut c = Config::default();
        c.ddpm.formulation = 2;
        c.sampler.sampler = "ddim".into();
        let back = Config::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.sampler_options().unwrap().variance, VarianceType::FixedSmall);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_toml_str("[ddpm]\nformulation = 3").is_err());
        assert!(Config::from_toml_str("[sampler]\nscheme = \"cubic\"").is_err());
        assert!(Config::from_toml_str("[dataset]\nname = \"mnist\"").is_err());
        assert!(Config::from_toml_str("[sampler]\nsteps = 500").is_err());
    }
}
