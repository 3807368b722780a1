use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[dataset]
n_train = 400
n_eval = 200

[vae]
epochs = 2
hidden = [16]
kl_weight = 0.01

[gmm]
n_components = 3

[ddpm]
timesteps = 10
hidden = [16]
time_embed_dim = 8
steps = 40
batch_size = 32

[eval]
n_samples = 50
permutations = 20
"#;

fn vaediff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vaediff")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = vaediff(dir, args);
    assert_eq!(code(&o), 0, "{args:?}\nstdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn full_pipeline_on_tiny_config() {
    let dir = tiny_dir();
    let d = dir.path();
    let common = ["--config", "tiny.toml", "--out", "run"];
    let with = |extra: &[&'static str]| -> Vec<&str> { common.iter().copied().chain(extra.iter().copied()).collect() };

    ok(d, &with(&["train-vae"]));
    assert!(d.join("run/model.ckpt").exists());
    ok(d, &with(&["fit-gmm"]));
    ok(d, &with(&["train-ddpm"]));
    ok(d, &with(&["train-baseline"]));
    assert!(d.join("run/baseline.ckpt").exists());

    ok(d, &with(&["sample", "-n", "12", "--sampler", "ddim", "--eta", "0", "--steps", "5", "--latent-source", "gmm"]));
    let csv = std::fs::read_to_string(d.join("run/samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert_eq!(csv.lines().next().unwrap(), "dim0,dim1");

    // Shared noise and a deterministic sampler give repeatable output.
    let shared = with(&["sample", "-n", "4", "--sampler", "ddim", "--shared-noise-seed", "9"]);
    ok(d, &shared);
    let first = std::fs::read(d.join("run/samples.csv")).unwrap();
    ok(d, &shared);
    assert_eq!(first, std::fs::read(d.join("run/samples.csv")).unwrap());

    ok(d, &with(&["sample", "-n", "5", "--method", "vae"]));
    ok(d, &with(&["sample", "-n", "5", "--method", "unconditional", "--variance", "fixedsmall"]));

    ok(d, &with(&["interpolate", "--lambda", "0,0.5,1"]));
    let interp = std::fs::read_to_string(d.join("run/interpolate.csv")).unwrap();
    assert_eq!(interp.lines().count(), 4);
    assert!(interp.starts_with("lambda,dim0,dim1"));
    ok(d, &with(&["interpolate", "--mode", "ddpm", "--lambda", "0,1"]));

    ok(d, &with(&["edit", "--lambda", "0,1", "--pairs", "10", "-n", "3"]));
    assert_eq!(std::fs::read_to_string(d.join("run/edit.csv")).unwrap().lines().count(), 7);

    let sweep = ok(d, &with(&["sweep", "--ks", "2,5,10"]));
    assert!(sweep.starts_with("method,steps,metric"));
    assert!(sweep.contains("two-stage,5,") && sweep.contains("unconditional,10,"));

    let ng = ok(d, &with(&["noise-gen", "--sigma", "0.3"]));
    assert!(ng.contains("corrupted") && ng.contains("refined"));
    ok(d, &with(&["noise-gen", "--coarsen", "4"]));

    ok(d, &with(&["elbo", "-n", "50"]));
    assert!(std::fs::read_to_string(d.join("run/elbo.csv")).unwrap().contains("ddpm,10,"));

    ok(d, &["--out", "run", "export", "--input", "run/samples.csv", "--format", "csv"]);
    // Two-dimensional samples cannot tile into square images.
    assert_eq!(code(&vaediff(d, &["--out", "run", "export", "--input", "run/samples.csv", "--format", "pgm-grid"])), 2);
}

#[test]
fn formulation_two_trains_and_samples() {
    let dir = tiny_dir();
    let d = dir.path();
    let c = ["--config", "tiny.toml", "--out", "f2", "--formulation", "2"];
    let args = |x: &'static str| -> Vec<&str> { c.iter().copied().chain([x]).collect() };
    ok(d, &args("train-vae"));
    ok(d, &args("train-ddpm"));
    // The checkpoint remembers the formulation; sampling needs no flag.
    ok(d, &["--out", "f2", "sample", "-n", "3"]);
    // Overriding it at sampling time contradicts the stored refiner.
    assert_eq!(code(&vaediff(d, &["--out", "f2", "--formulation", "1", "sample", "-n", "3"])), 1);
}

#[test]
fn verify_fast_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["--out", "v", "verify", "--fast"]);
    assert!(out.lines().count() >= 20);
    assert!(out.lines().all(|l| l.split(' ').nth(1) == Some("PASS")), "{out}");
    assert_eq!(std::fs::read_to_string(dir.path().join("v/verify.txt")).unwrap(), out);
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tiny_dir();
    let d = dir.path();
    assert_eq!(code(&vaediff(d, &["no-such-command"])), 1);
    assert_eq!(code(&vaediff(d, &["--sampler", "euler", "verify"])), 1);
    assert_eq!(code(&vaediff(d, &["--formulation", "3", "verify"])), 1);
    assert_eq!(code(&vaediff(d, &[])), 1);
    assert_eq!(code(&vaediff(d, &["--help"])), 0);

    std::fs::write(d.join("bad.toml"), "[vae]\nepochz = 3\n").unwrap();
    let o = vaediff(d, &["--config", "bad.toml", "--out", "x", "train-vae"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));

    assert_eq!(code(&vaediff(d, &["--config", "missing.toml", "train-vae"])), 1);
    assert_eq!(code(&vaediff(d, &["--config", "tiny.toml", "--out", "x", "--steps", "11", "train-vae"])), 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = tiny_dir();
    let d = dir.path();
    assert_eq!(code(&vaediff(d, &["--out", "nothing", "sample"])), 2);
    std::fs::create_dir_all(d.join("junk")).unwrap();
    std::fs::write(d.join("junk/model.ckpt"), b"DVAE\x01\x00\x00\x00\xff").unwrap();
    assert_eq!(code(&vaediff(d, &["--out", "junk", "sample"])), 2);
    std::fs::write(d.join("junk/bad.csv"), "dim0,dim1\n0.1,zz\n").unwrap();
    assert_eq!(code(&vaediff(d, &["--out", "junk", "export", "--input", "junk/bad.csv"])), 2);
}
