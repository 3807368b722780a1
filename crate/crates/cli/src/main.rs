//! `vaediff`: train, sample, evaluate and verify the two-stage generator.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "vaediff", version, about = "VAE generator with a conditional diffusion refiner")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Sampler flags override the config.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config; defaults to the one embedded in the checkpoint, if any.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, also where checkpoints are read from [default: vaediff-out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Model checkpoint; defaults to `<out>/model.ckpt`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub formulation: Option<u8>,
    #[arg(long, global = true)]
    pub sampler: Option<SamplerArg>,
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub scheme: Option<SchemeArg>,
    #[arg(long, global = true)]
    pub variance: Option<VarianceArg>,
    #[arg(long, global = true)]
    pub clip: Option<bool>,
    #[arg(long, global = true)]
    pub temp: Option<f64>,
    #[arg(long = "latent-source", global = true, default_value = "normal")]
    pub latent_source: LatentArg,
    /// Share one noise pack across all generated samples.
    #[arg(long = "shared-noise-seed", global = true)]
    pub shared_noise_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Ddpm,
    Ddim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Linear,
    Quadratic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VarianceArg {
    Fixedsmall,
    Fixedlarge,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum LatentArg {
    #[default]
    Normal,
    Gmm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    TwoStage,
    Vae,
    Unconditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InterpMode {
    Vae,
    Ddpm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    PgmGrid,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the VAE and write a fresh checkpoint.
    TrainVae,
    /// Fit the ex-post GMM on training latents of the checkpointed VAE.
    FitGmm,
    /// Train the refiner against the checkpointed VAE.
    TrainDdpm,
    /// Train the unconditional baseline into `<out>/baseline.ckpt`.
    TrainBaseline,
    /// Generate samples into `<out>/samples.csv`.
    Sample {
        #[arg(long, short)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value = "two-stage")]
        method: Method,
    },
    /// Refined samples along a latent interpolation.
    Interpolate {
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        lambda: Vec<f64>,
        #[arg(long, value_enum, default_value = "vae")]
        mode: InterpMode,
    },
    /// Label-direction edits of held-out negatives.
    Edit {
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
        lambda: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        #[arg(long, short, default_value_t = 16)]
        n: usize,
    },
    /// MMD² against held-out data for each step count `K`.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "5,10,25,50,100")]
        ks: Vec<usize>,
        /// Exit with status 3 when a trend regression is flagged.
        #[arg(long)]
        strict: bool,
    },
    /// Refine corrupted held-out data and compare with the corruption.
    NoiseGen {
        #[arg(long, default_value_t = 0.3, conflicts_with = "coarsen")]
        sigma: f64,
        #[arg(long)]
        coarsen: Option<usize>,
    },
    /// Loss accounting of the two-stage bound on held-out data.
    Elbo {
        #[arg(long, short, default_value_t = 1000)]
        n: usize,
    },
    /// Structural self-checks. Exit status 3 on any failure.
    Verify {
        #[arg(long, conflicts_with = "full")]
        fast: bool,
        #[arg(long)]
        full: bool,
    },
    /// Convert a sample CSV to another format.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
    },
}

/// Errors that carry their own exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<vaediff::Error> for Failure {
    fn from(e: vaediff::Error) -> Self {
        use vaediff::Error as E;
        let msg = e.to_string();
        match e.root() {
            E::Config(_) | E::Shape(_) | E::Index { .. } => Failure::Usage(msg),
            _ => Failure::Data(msg),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_kind() {
        assert_eq!(Failure::Usage(String::new()).code(), 1);
        assert_eq!(Failure::Data(String::new()).code(), 2);
        assert_eq!(Failure::Verification(String::new()).code(), 3);
        let staged = Failure::from(vaediff::Error::Config("x".into()));
        assert_eq!(staged.code(), 1);
        assert_eq!(Failure::from(vaediff::Error::Data("x".into())).code(), 2);
        assert_eq!(Failure::from(vaediff::Error::Format { offset: 0, msg: "m".into() }).code(), 2);
    }

    #[test]
    fn flags_parse_anywhere() {
        let cli = Cli::try_parse_from(["vaediff", "sample", "--steps", "5", "--sampler", "ddim", "--eta", "0.5"]).unwrap();
        assert_eq!(cli.common.steps, Some(5));
        assert_eq!(cli.common.sampler, Some(SamplerArg::Ddim));
        assert!(Cli::try_parse_from(["vaediff", "verify", "--fast", "--full"]).is_err());
    }
}
