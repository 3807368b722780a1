//! Orchestration: scaling boundary, datasets, configuration, checkpoints,
//! metrics, the two-stage driver, experiments, and the verification suite.

mod checkpoint;
mod config;
mod dataset;
mod experiments;
mod export;
mod generate;
mod metrics;
mod scaling;
mod verify;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{Config, DatasetSection, DdpmSection, EvalSection, GmmSection, SamplerSection, VaeSection};
pub use dataset::{make_dataset, split_by_label, Dataset, DatasetName, DatasetSpec, LabelRule};
pub use experiments::{
    attribute_edit, corrupt, elbo_report, fit_gmm_stage, noise_generalization, speed_quality_sweep, train_ddpm_stage, train_two_stage,
    train_unconditional_baseline, train_vae_stage, vae_samples, Corruption, ElboReport, EvalReport, SweepTable, TwoStage,
    TWO_STAGE, UNCONDITIONAL,
};
pub use export::{csv_string, export_samples, parse_csv, read_csv, ExportFormat};
pub use generate::{generate, generate_from_latents, generate_unconditional, LatentChoice};
pub use metrics::{evaluate_mmd, mmd_with_floor, permutation_floor, MmdConfig, MmdResult};
pub use scaling::{scale_to_ddpm, scale_to_vae, GUARD_BAND};
pub use verify::{verify_suite, Check, VerifyLevel, VerifyReport};
