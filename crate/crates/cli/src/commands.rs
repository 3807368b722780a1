use std::fs;
use std::path::{Path, PathBuf};

use vaediff::diffusion::{Conditioning, SamplerKind, SamplerOptions, Scheme, VarianceType};
use vaediff::latent::{interpolate_generate, make_noise_pack, Interpolation};
use vaediff::pipeline::{
    attribute_edit, elbo_report, export_samples, fit_gmm_stage, generate, generate_unconditional, load_checkpoint, make_dataset,
    noise_generalization, read_csv, save_checkpoint, speed_quality_sweep, train_ddpm_stage, train_unconditional_baseline,
    train_vae_stage, vae_samples, verify_suite, Checkpoint, Config, Corruption, Dataset, ExportFormat, LatentChoice, VerifyLevel,
};
use vaediff::{RngStream, Tensor};

use crate::{Cli, Command, Common, Failure, FormatArg, InterpMode, LatentArg, Method, SamplerArg, SchemeArg, VarianceArg};

type Outcome<T = ()> = std::result::Result<T, Failure>;

const DEFAULT_OUT: &str = "vaediff-out";

fn out_dir(c: &Common) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn model_path(c: &Common) -> PathBuf {
    c.checkpoint.clone().unwrap_or_else(|| out_dir(c).join("model.ckpt"))
}

fn baseline_path(c: &Common) -> PathBuf {
    out_dir(c).join("baseline.ckpt")
}

fn prepare_out(c: &Common) -> Outcome<PathBuf> {
    let dir = out_dir(c);
    fs::create_dir_all(&dir).map_err(|e| Failure::Data(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

/// `--config` file, else the checkpoint snapshot, else defaults; then CLI
/// overrides, then validation.
fn resolve_config(c: &Common, ck: Option<&Checkpoint>) -> Outcome<Config> {
    let mut cfg = match (&c.config, ck) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            Config::from_toml_str(&text)?
        }
        (None, Some(ck)) if !ck.config_text.is_empty() => Config::from_toml_str(&ck.config_text)?,
        _ => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(f) = c.formulation {
        cfg.ddpm.formulation = f;
    }
    let s = &mut cfg.sampler;
    if let Some(v) = c.sampler {
        s.sampler = match v {
            SamplerArg::Ddpm => "ddpm",
            SamplerArg::Ddim => "ddim",
        }
        .into();
    }
    if let Some(v) = c.eta {
        s.eta = v;
    }
    if let Some(v) = c.steps {
        s.steps = v;
    }
    if let Some(v) = c.scheme {
        s.scheme = match v {
            SchemeArg::Linear => "linear",
            SchemeArg::Quadratic => "quadratic",
        }
        .into();
    }
    if let Some(v) = c.variance {
        s.variance = match v {
            VarianceArg::Fixedsmall => "fixedsmall",
            VarianceArg::Fixedlarge => "fixedlarge",
        }
        .into();
    }
    if let Some(v) = c.clip {
        s.clip_x0 = v;
    }
    if let Some(v) = c.temp {
        s.temperature = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Config for commands that run an already trained refiner; `--formulation`
/// must agree with it.
fn trained_config(c: &Common, ck: &Checkpoint) -> Outcome<Config> {
    let cfg = resolve_config(c, Some(ck))?;
    let stored = match ck.denoiser.as_ref().map(|d| d.conditioning) {
        Some(Conditioning::Form1Concat) => Some(1),
        Some(Conditioning::Form2Concat) => Some(2),
        _ => None,
    };
    if let (Some(asked), Some(stored)) = (c.formulation, stored) {
        if asked != stored {
            return Err(Failure::Usage(format!("--formulation {asked} but the checkpoint refiner uses formulation {stored}")));
        }
    }
    Ok(cfg)
}

fn load(path: &Path) -> Outcome<Checkpoint> {
    Ok(load_checkpoint(path)?)
}

fn dataset(cfg: &Config) -> Outcome<Dataset> {
    Ok(make_dataset(&cfg.dataset_spec()?)?)
}

fn latent_choice(c: &Common) -> LatentChoice {
    match c.latent_source {
        LatentArg::Normal => LatentChoice::Normal,
        LatentArg::Gmm => LatentChoice::Gmm,
    }
}

fn head(x: &Tensor, n: usize) -> Tensor {
    x.select_rows(&(0..n.min(x.rows())).collect::<Vec<_>>())
}

/// CSV with leading key columns before `dim0..dimD`.
fn keyed_csv(keys: &[&str], rows: &[(Vec<String>, Vec<f64>)]) -> String {
    let dim = rows.first().map_or(0, |r| r.1.len());
    let mut header: Vec<String> = keys.iter().map(|k| k.to_string()).collect();
    header.extend((0..dim).map(|i| format!("dim{i}")));
    let mut out = header.join(",") + "\n";
    for (k, v) in rows {
        let mut cells = k.clone();
        cells.extend(v.iter().map(|x| format!("{x:?}")));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn history_csv(name: &str, h: &[f64]) -> String {
    let mut s = format!("iter,{name}\n");
    for (i, v) in h.iter().enumerate() {
        s.push_str(&format!("{},{v:?}\n", i + 1));
    }
    s
}

fn describe_opts(o: &SamplerOptions) -> String {
    let sampler = match o.sampler {
        SamplerKind::Ddpm => "ddpm",
        SamplerKind::Ddim => "ddim",
    };
    let scheme = match o.scheme {
        Scheme::Linear => "linear",
        Scheme::Quadratic => "quadratic",
    };
    let variance = match o.variance {
        VarianceType::FixedSmall => "fixedsmall",
        VarianceType::FixedLarge => "fixedlarge",
    };
    format!("sampler={sampler} eta={} steps={} scheme={scheme} variance={variance}", o.eta, o.steps)
}

pub fn run(cli: &Cli) -> Outcome {
    let c = &cli.common;
    match &cli.command {
        Command::TrainVae => {
            let cfg = resolve_config(c, None)?;
            let dir = prepare_out(c)?;
            let data = dataset(&cfg)?;
            let (ck, history) = train_vae_stage(&cfg, &data)?;
            save_checkpoint(&model_path(c), &ck)?;
            write(&dir.join("vae_history.csv"), &history_csv("loss", &history))?;
            println!("vae trained: {} epochs, final loss {:.6}", history.len(), history.last().copied().unwrap_or(f64::NAN));
        }
        Command::FitGmm => {
            let path = model_path(c);
            let mut ck = load(&path)?;
            let cfg = resolve_config(c, Some(&ck))?;
            let dir = prepare_out(c)?;
            if cfg.gmm_config().is_none() {
                return Err(Failure::Usage("gmm.n_components is 0; nothing to fit".into()));
            }
            let history = fit_gmm_stage(&mut ck, &cfg, &dataset(&cfg)?)?;
            save_checkpoint(&path, &ck)?;
            write(&dir.join("gmm_history.csv"), &history_csv("log_likelihood", &history))?;
            println!("gmm fitted: {} EM iterations, final mean log-likelihood {:.6}", history.len(), history.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainDdpm => {
            let path = model_path(c);
            let mut ck = load(&path)?;
            let cfg = resolve_config(c, Some(&ck))?;
            let dir = prepare_out(c)?;
            let history = train_ddpm_stage(&mut ck, &cfg, &dataset(&cfg)?)?;
            ck.config_text = cfg.to_toml_string();
            save_checkpoint(&path, &ck)?;
            write(&dir.join("ddpm_history.csv"), &history_csv("loss", &history))?;
            println!("refiner trained: formulation {}, {} steps", cfg.ddpm.formulation, history.len());
        }
        Command::TrainBaseline => {
            let cfg = resolve_config(c, None)?;
            let dir = prepare_out(c)?;
            let (ck, history) = train_unconditional_baseline(&cfg)?;
            save_checkpoint(&baseline_path(c), &ck)?;
            write(&dir.join("baseline_history.csv"), &history_csv("loss", &history))?;
            println!("baseline trained: {} steps", history.len());
        }
        Command::Sample { n, method } => {
            let path = match method {
                Method::Unconditional => c.checkpoint.clone().unwrap_or_else(|| baseline_path(c)),
                _ => model_path(c),
            };
            let ck = load(&path)?;
            let cfg = trained_config(c, &ck)?;
            let dir = prepare_out(c)?;
            let n = n.unwrap_or(cfg.eval.n_samples);
            let opts = cfg.sampler_options()?;
            let mut rng = RngStream::derive(cfg.seed, "sample");
            let samples = match method {
                Method::TwoStage => generate(&ck, n, &opts, latent_choice(c), c.shared_noise_seed, &mut rng)?,
                Method::Vae => vae_samples(&ck, n, latent_choice(c), &mut rng)?,
                Method::Unconditional => generate_unconditional(&ck, n, &opts, c.shared_noise_seed, &mut rng)?,
            };
            let target = dir.join("samples.csv");
            export_samples(&samples, &target, ExportFormat::Csv)?;
            println!("{n} samples ({}) written to {}", describe_opts(&opts), target.display());
        }
        Command::Interpolate { lambda, mode } => {
            let ck = load(&model_path(c))?;
            let cfg = trained_config(c, &ck)?;
            let dir = prepare_out(c)?;
            let opts = cfg.sampler_options()?;
            let vae = ck.vae()?;
            let (den, sched) = ck.refiner()?;
            let mut rng = RngStream::derive(cfg.seed, "interpolate");
            let z1 = rng.gaussian(&[1, vae.latent_dim]);
            let pack = make_noise_pack(c.shared_noise_seed.unwrap_or(cfg.seed), &[1, vae.data_dim], opts.steps, opts.scheme)?;
            let outputs = match mode {
                InterpMode::Vae => {
                    let z2 = rng.gaussian(&[1, vae.latent_dim]);
                    interpolate_generate(vae, den, sched, &opts, &z1, lambda, Interpolation::VaeLatent { z2: &z2 }, &pack)?
                }
                InterpMode::Ddpm => {
                    let a = rng.gaussian(&[1, vae.data_dim]);
                    let b = rng.gaussian(&[1, vae.data_dim]);
                    interpolate_generate(vae, den, sched, &opts, &z1, lambda, Interpolation::DdpmLatent { x_t_a: &a, x_t_b: &b }, &pack)?
                }
            };
            let rows: Vec<_> = lambda.iter().zip(&outputs).map(|(l, x)| (vec![format!("{l:?}")], x.data().to_vec())).collect();
            write(&dir.join("interpolate.csv"), &keyed_csv(&["lambda"], &rows))?;
            println!("{} interpolation points written", rows.len());
        }
        Command::Edit { lambda, pairs, n } => {
            let ck = load(&model_path(c))?;
            let cfg = trained_config(c, &ck)?;
            let dir = prepare_out(c)?;
            let opts = cfg.sampler_options()?;
            let data = dataset(&cfg)?;
            let noise_seed = c.shared_noise_seed.unwrap_or(cfg.seed);
            let mut rows = Vec::new();
            for &lam in lambda {
                let (d, _, after) = attribute_edit(&ck, &data.train, &data.train_labels, *pairs, lam, *n, &opts, noise_seed)?;
                if rows.is_empty() {
                    println!("direction from {} pairs: {:?}", d.n_pairs, d.vector.data());
                }
                for (i, r) in after.iter_rows().enumerate() {
                    rows.push((vec![format!("{lam:?}"), i.to_string()], r.to_vec()));
                }
            }
            write(&dir.join("edit.csv"), &keyed_csv(&["lambda", "index"], &rows))?;
            println!("{} edited samples written", rows.len());
        }
        Command::Sweep { ks, strict } => {
            let ck = load(&model_path(c))?;
            let cfg = trained_config(c, &ck)?;
            let dir = prepare_out(c)?;
            let baseline = match baseline_path(c) {
                p if p.exists() => Some(load(&p)?),
                _ => None,
            };
            let data = dataset(&cfg)?;
            let reference = head(&data.eval, cfg.eval.n_samples);
            let template = cfg.sampler_options()?;
            let table = speed_quality_sweep(
                &ck,
                baseline.as_ref(),
                ks,
                &template,
                latent_choice(c),
                cfg.eval.n_samples,
                &reference,
                &cfg.mmd_config(),
                cfg.seed,
            )?;
            let csv = table.to_csv();
            write(&dir.join("sweep.csv"), &csv)?;
            print!("{csv}");
            for r in &table.regressions {
                eprintln!("REGRESSION {r}");
            }
            if *strict && !table.regressions.is_empty() {
                return Err(Failure::Verification(format!("{} trend regression(s)", table.regressions.len())));
            }
        }
        Command::NoiseGen { sigma, coarsen } => {
            let ck = load(&model_path(c))?;
            let cfg = trained_config(c, &ck)?;
            let dir = prepare_out(c)?;
            let corruption = match coarsen {
                Some(f) => Corruption::Coarsen { factor: *f },
                None => Corruption::Gaussian { sigma: *sigma },
            };
            let data = dataset(&cfg)?;
            let eval = head(&data.eval, 2 * cfg.eval.n_samples);
            let (a, b) = noise_generalization(&ck, corruption, &eval, &cfg.sampler_options()?, &cfg.mmd_config(), cfg.seed)?;
            let mut csv = String::from("method,value,floor,n_samples\n");
            for r in [&a, &b] {
                csv.push_str(&format!("{},{:?},{:?},{}\n", r.method, r.value, r.floor, r.n_samples));
            }
            write(&dir.join("noise_gen.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Elbo { n } => {
            let ck = load(&model_path(c))?;
            let cfg = trained_config(c, &ck)?;
            let dir = prepare_out(c)?;
            let data = dataset(&cfg)?;
            let mut rng = RngStream::derive(cfg.seed, "elbo");
            let r = elbo_report(&ck, &head(&data.eval, *n), &mut rng)?;
            let mut csv = String::from("term,t,value\n");
            csv.push_str(&format!("recon,,{:?}\nkl,,{:?}\nkl_weight,,{:?}\nvae_total,,{:?}\n", r.recon, r.kl, r.kl_weight, r.vae_total));
            for (i, v) in r.ddpm_per_t.iter().enumerate() {
                csv.push_str(&format!("ddpm,{},{v:?}\n", i + 1));
            }
            csv.push_str(&format!("ddpm_sum,,{:?}\ntotal,,{:?}\n", r.ddpm_sum, r.total));
            write(&dir.join("elbo.csv"), &csv)?;
            println!("recon {:.6} kl {:.6} vae {:.6} ddpm {:.6} total {:.6}", r.recon, r.kl, r.vae_total, r.ddpm_sum, r.total);
        }
        Command::Verify { full, .. } => {
            let level = if *full { VerifyLevel::Full } else { VerifyLevel::Fast };
            let report = verify_suite(level);
            let text = report.render();
            print!("{text}");
            if c.out.is_some() {
                let dir = prepare_out(c)?;
                write(&dir.join("verify.txt"), &text)?;
            }
            if !report.all_passed() {
                let failed = report.checks.iter().filter(|k| !k.passed).count();
                return Err(Failure::Verification(format!("{failed} check(s) failed")));
            }
        }
        Command::Export { input, format } => {
            let samples = read_csv(input)?;
            let dir = prepare_out(c)?;
            let (fmt, name) = match format {
                FormatArg::Csv => (ExportFormat::Csv, "samples.csv"),
                FormatArg::PgmGrid => (ExportFormat::PgmGrid, "samples.pgm"),
            };
            let target = dir.join(name);
            export_samples(&samples, &target, fmt)?;
            println!("{} samples written to {}", samples.rows(), target.display());
        }
    }
    Ok(())
}
