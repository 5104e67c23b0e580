use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rvae_core::attack::{attack_sweep, pgd_ood_attack, AttackConfig, DEFAULT_NOISE_DRAWS, DEFAULT_STEPS};
use rvae_core::data::Split;
use rvae_core::rng::derive_seed;
use rvae_core::robust::{
    certify, evaluate, init_model, EpsSchedule, OptimizerKind, TrainConfig, Trainer, DEFAULT_CERTIFY_NOISE,
};
use rvae_core::tensor::Tensor;
use rvae_core::vae::{self, Architecture, DEFAULT_DENSE_HIDDEN, DEFAULT_LATENT_DIM, DEFAULT_SIGMA0};

use crate::checkpoint::{load_checkpoint, save_checkpoint, MetricsRow, RunInfo};
use crate::error::{io, CliError, Result};
use crate::pgm::write_grid;
use crate::source::{DataKind, DataSpec, DEFAULT_BLOB_SIDE};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
/// Noise stream used for test-set evaluation during training.
const EVAL_STREAM: u64 = 0xE7A1;
const ELBO_DRAWS: usize = 16;

#[derive(Debug, Parser)]
#[command(name = "rvae", version, about = "Certifiably robust VAE training, attack and certification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train by maximizing the certified ELBO lower bound.
    Train(TrainArgs),
    /// PGD sweep over attack radii on the test split.
    Attack(AttackArgs),
    /// Certify test samples at a radius and threshold.
    Certify(CertifyArgs),
    /// Decode prior samples into a PGM grid.
    Sample(SampleArgs),
    /// Reconstruct test samples (optionally attacked first) into a PGM grid.
    Reconstruct(ReconstructArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Dense,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    pub data: DataKind,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub eps_train: f64,
    /// Epochs trained at radius 0 before the ramp starts.
    #[arg(long, default_value_t = 0)]
    pub eps_warmup: usize,
    /// Epochs over which the radius grows linearly to --eps-train.
    #[arg(long, default_value_t = 0)]
    pub eps_ramp: usize,
    /// Final weight of the clean ELBO mixed into the certified objective.
    #[arg(long, default_value_t = 0.0)]
    pub clean_weight: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, value_enum, default_value = "sgd")]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = DEFAULT_LATENT_DIM)]
    pub latent: usize,
    /// Comma-separated hidden widths of the dense preset.
    #[arg(long, value_delimiter = ',', default_values_t = [DEFAULT_DENSE_HIDDEN])]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_SIGMA0)]
    pub sigma0: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cap on training images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Cap on test images used for the per-epoch metrics.
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Side length of synthetic blob images.
    #[arg(long, default_value_t = DEFAULT_BLOB_SIDE)]
    pub side: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "dense")]
    pub preset: PresetArg,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Ascending comma-separated radii.
    #[arg(long, value_delimiter = ',', required = true)]
    pub eps_list: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    /// Defaults to 2.5·ε/steps for each radius.
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub n_samples: usize,
    #[arg(long, default_value_t = DEFAULT_NOISE_DRAWS)]
    pub n_noise: usize,
    /// Extra PGD runs from random starts per radius.
    #[arg(long, default_value_t = 0)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV path; a JSON summary is written next to it with a `.json` extension.
    #[arg(long)]
    pub report: PathBuf,
    /// Overrides the data directory recorded in the checkpoint.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub eps: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_CERTIFY_NOISE)]
    pub n_noise: usize,
    #[arg(long, default_value_t = 100)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path; printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Attack the inputs with PGD before reconstructing them.
    #[arg(long)]
    pub attacked: bool,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Attack(a) => cmd_attack(&a, out),
        Command::Certify(a) => cmd_certify(&a, out),
        Command::Sample(a) => cmd_sample(&a, out),
        Command::Reconstruct(a) => cmd_reconstruct(&a, out),
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| io("<stdout>", e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io(path, e))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| io("<csv>", e.into_error()))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let spec = DataSpec {
        kind: a.data,
        dir: a.data_dir.clone(),
        limit: a.limit,
        test_limit: a.test_limit,
        side: a.side,
        seed: a.seed,
    };
    let train = spec.load(Split::Train)?;
    let test = spec.load(Split::Test)?;
    let arch = match a.preset {
        PresetArg::Dense => Architecture::dense(train.shape(), a.latent, &a.hidden),
        PresetArg::Conv => Architecture::conv(train.shape(), a.latent),
    };
    let mut cfg = TrainConfig::new(arch);
    cfg.eps_train = a.eps_train;
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch;
    cfg.learning_rate = a.lr;
    cfg.seed = a.seed;
    cfg.sigma0 = a.sigma0;
    cfg.clean_weight = a.clean_weight;
    if a.eps_warmup > 0 || a.eps_ramp > 0 {
        cfg.eps_schedule = EpsSchedule::LinearRamp { warmup: a.eps_warmup, ramp: a.eps_ramp };
    }
    cfg.optimizer = match a.optimizer {
        OptimizerArg::Sgd => OptimizerKind::Sgd,
        OptimizerArg::Momentum => OptimizerKind::Momentum { beta: 0.9 },
        OptimizerArg::Adam => OptimizerKind::adam(),
    };
    let mut model = init_model(&cfg)?;
    let mut trainer = Trainer::new(cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| io(&a.out, e))?;
    say(
        out,
        format!(
            "training {} images ({} test) with {} parameters, eps_train {}",
            train.len(),
            test.len(),
            model.num_params(),
            a.eps_train
        ),
    )?;
    let mut rows = Vec::new();
    for _ in 0..a.epochs {
        let m = trainer.train_epoch(&mut model, &train)?;
        let eval = evaluate(&model, &test, a.eps_train, derive_seed(a.seed, EVAL_STREAM))?;
        let row = MetricsRow {
            epoch: m.epoch + 1,
            lb_train: m.mean_lower,
            lb_test: eval.mean_lower,
            elbo_test: eval.mean_elbo,
        };
        rows.push(row);
        let info = RunInfo {
            eps_train: a.eps_train,
            seed: a.seed,
            epoch: row.epoch,
            data: spec.clone(),
            metrics: rows.clone(),
        };
        save_checkpoint(&a.out.join(CHECKPOINT_DIR), &model, &info)?;
        write_file(&a.out.join(METRICS_FILE), csv_bytes(&rows)?)?;
        say(
            out,
            format!(
                "epoch {:>3}  lb_train {:.4}  lb_test {:.4}  elbo_test {:.4}",
                row.epoch, row.lb_train, row.lb_test, row.elbo_test
            ),
        )?;
    }
    Ok(())
}

fn test_split(spec: &DataSpec, data_dir: &Option<PathBuf>, n: usize) -> Result<rvae_core::data::Dataset> {
    let mut spec = spec.clone();
    if let Some(d) = data_dir {
        spec.dir = Some(d.clone());
    }
    spec.test_limit = Some(n);
    if n == 0 {
        return Err(CliError::Usage("sample count must be at least 1".into()));
    }
    spec.load(Split::Test)
}

#[derive(Serialize)]
struct SweepRow {
    eps_attack: f64,
    mean_elbo: f64,
    std_elbo: f64,
    n: usize,
}

#[derive(Serialize)]
struct AttackSummary {
    ckpt: PathBuf,
    eps_train: f64,
    preset: String,
    steps: usize,
    step_size: Option<f64>,
    n_noise: usize,
    restarts: usize,
    seed: u64,
    n_samples: usize,
    points: Vec<SweepSummary>,
}

#[derive(Serialize)]
struct SweepSummary {
    eps_attack: f64,
    mean_elbo: f64,
    std_elbo: f64,
    mean_clean_elbo: f64,
    max_delta_norm: f64,
}

pub fn cmd_attack(a: &AttackArgs, out: &mut dyn Write) -> Result<()> {
    let (model, manifest) = load_checkpoint(&a.ckpt)?;
    let data = test_split(&manifest.data, &a.data_dir, a.n_samples)?;
    let cfg = AttackConfig {
        eps: 0.0,
        steps: a.steps,
        step_size: a.step_size,
        n_noise: a.n_noise,
        restarts: a.restarts,
        seed: a.seed,
    };
    let report = attack_sweep(&model, &data, &a.eps_list, &cfg)?;
    let rows: Vec<SweepRow> = report
        .points
        .iter()
        .map(|p| SweepRow { eps_attack: p.eps, mean_elbo: p.mean_elbo, std_elbo: p.std_elbo, n: p.samples.len() })
        .collect();
    write_file(&a.report, csv_bytes(&rows)?)?;
    let summary = AttackSummary {
        ckpt: a.ckpt.clone(),
        eps_train: manifest.eps_train,
        preset: manifest.preset.clone(),
        steps: a.steps,
        step_size: a.step_size,
        n_noise: a.n_noise,
        restarts: a.restarts,
        seed: a.seed,
        n_samples: data.len(),
        points: report
            .points
            .iter()
            .map(|p| SweepSummary {
                eps_attack: p.eps,
                mean_elbo: p.mean_elbo,
                std_elbo: p.std_elbo,
                mean_clean_elbo: p.samples.iter().map(|s| s.elbo_clean).sum::<f64>() / p.samples.len() as f64,
                max_delta_norm: p.samples.iter().map(|s| s.delta_norm).fold(0.0, f64::max),
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    write_file(&a.report.with_extension("json"), json)?;
    for r in &rows {
        say(
            out,
            format!("eps_attack {:.4}  mean_elbo {:.4}  std {:.4}  n {}", r.eps_attack, r.mean_elbo, r.std_elbo, r.n),
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CertifiedSample {
    index: usize,
    bound: f64,
    spread: f64,
    certified: bool,
}

#[derive(Serialize)]
struct CertifyReport {
    eps: f64,
    alpha: f64,
    n_noise: usize,
    eps_train: f64,
    fraction_certified: f64,
    samples: Vec<CertifiedSample>,
}

pub fn cmd_certify(a: &CertifyArgs, out: &mut dyn Write) -> Result<()> {
    let (model, manifest) = load_checkpoint(&a.ckpt)?;
    let data = test_split(&manifest.data, &a.data_dir, a.n_samples)?;
    let samples = data
        .images()
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let c = certify(&model, x, a.eps, a.alpha, a.n_noise, derive_seed(a.seed, i as u64))?;
            Ok(CertifiedSample { index: i, bound: c.bound, spread: c.spread, certified: c.certified })
        })
        .collect::<Result<Vec<_>>>()?;
    let fraction = samples.iter().filter(|s| s.certified).count() as f64 / samples.len() as f64;
    let report = CertifyReport {
        eps: a.eps,
        alpha: a.alpha,
        n_noise: a.n_noise,
        eps_train: manifest.eps_train,
        fraction_certified: fraction,
        samples,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    match &a.report {
        Some(p) => {
            write_file(p, json)?;
            say(out, format!("certified {:.4} of {} samples at eps {}", fraction, report.samples.len(), a.eps))
        }
        None => say(out, json.trim_end()),
    }
}

pub fn cmd_sample(a: &SampleArgs, out: &mut dyn Write) -> Result<()> {
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let images = vae::sample(&model, a.n, a.seed)?;
    let cols = (a.n as f64).sqrt().ceil() as usize;
    write_grid(&a.out, &images, cols)?;
    say(out, format!("wrote {} samples to {}", a.n, a.out.display()))
}

pub fn cmd_reconstruct(a: &ReconstructArgs, out: &mut dyn Write) -> Result<()> {
    let (model, manifest) = load_checkpoint(&a.ckpt)?;
    let data = test_split(&manifest.data, &a.data_dir, a.n)?;
    let inputs: Vec<Tensor> = if a.attacked {
        data.images()
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let cfg =
                    AttackConfig { steps: a.steps, seed: derive_seed(a.seed, i as u64), ..AttackConfig::new(a.eps) };
                let r = pgd_ood_attack(&model, x, &cfg)?;
                Ok(x.zip_map(&r.delta, |u, d| u + d)?)
            })
            .collect::<Result<_>>()?
    } else {
        data.images().to_vec()
    };
    let mut elbo_sum = 0.0;
    let mut recon = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let (mu, _) = vae::encode(&model, x)?;
        recon.push(vae::decode(&model, &mu)?);
        elbo_sum += vae::elbo_estimate(&model, x, ELBO_DRAWS, derive_seed(a.seed ^ EVAL_STREAM, i as u64))?;
    }
    let mut grid = inputs.clone();
    grid.extend(recon);
    write_grid(&a.out, &grid, inputs.len())?;
    say(
        out,
        format!(
            "mean_elbo {:.4} over {} {} inputs; wrote {}",
            elbo_sum / inputs.len() as f64,
            inputs.len(),
            if a.attacked { "attacked" } else { "clean" },
            a.out.display()
        ),
    )
}
