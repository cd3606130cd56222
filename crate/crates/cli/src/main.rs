//! `atm`: generate synthetic data, train autoencoders, evaluate and compare.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O or file
//! format error, 4 numeric failure during training or evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use atm_core::config::ExperimentConfig;
use atm_core::datagen::{dataset_hash, Dataset};
use atm_core::eval::{evaluate, EvalModel};
use atm_core::report::{compare_csv, MetricsReport, RunIdentity};
use atm_core::trainer::{checkpoint, Trainer};
use atm_core::Error;

#[derive(Parser)]
#[command(name = "atm", version, about = "Sparse autoencoders with adaptive temporal masking")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an autoencoder on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        /// Save a checkpoint every N steps (0: only at the end).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
    },
    /// Evaluate a trained run on the held-out split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Tabulate metrics from several reports, one column per report.
    Compare {
        #[arg(long)]
        out: PathBuf,
        reports: Vec<PathBuf>,
    },
}

const CONFIG_ECHO: &str = "config.toml";
const PROVENANCE: &str = "provenance.json";

/// Written next to every dataset and run.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Provenance {
    config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset_hash: Option<String>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Shape(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numeric { .. } | Error::NonFinite { .. } | Error::Training(_) => 4,
    }
}

struct Ctx {
    config: ExperimentConfig,
    quiet: bool,
}

impl Ctx {
    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_echo(dir: &Path, config: &ExperimentConfig, dataset_hash: Option<String>) -> Result<(), Error> {
    write_file(&dir.join(CONFIG_ECHO), config.to_toml())?;
    let prov = Provenance {
        config_hash: config.hash(),
        dataset_hash,
    };
    write_file(
        &dir.join(PROVENANCE),
        serde_json::to_string_pretty(&prov).unwrap() + "\n",
    )
}

fn read_provenance(dir: &Path) -> Result<Provenance, Error> {
    let path = dir.join(PROVENANCE);
    serde_json::from_str(&read_text(&path)?).map_err(|e| Error::Format {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    })
}

fn generate(ctx: &Ctx, out: &Path) -> Result<(), Error> {
    let cfg = &ctx.config;
    let ds = Dataset::generate(&cfg.data, cfg.seed)?.quantized();
    ds.save(out)?;
    write_echo(out, cfg, None)?;
    ctx.say(format!(
        "generated d={} atoms={} implication_pairs={} train={} test={} -> {}",
        ds.dict.dim(),
        ds.dict.atom_count(),
        ds.dict.implications.len(),
        ds.train.count(),
        ds.test.count(),
        out.display()
    ));
    Ok(())
}

fn train(ctx: &Ctx, data: &Path, out: &Path, resume: bool, every: u64) -> Result<(), Error> {
    let cfg = &ctx.config;
    cfg.validate()?;
    let ds = Dataset::load(data)?;
    if ds.train.dim() != cfg.data.d {
        return Err(Error::Config {
            field: "data.d".into(),
            reason: format!("dataset has dimension {}, config says {}", ds.train.dim(), cfg.data.d),
        });
    }
    let hash = dataset_hash(data)?;
    let mut trainer = if resume {
        let saved = checkpoint::load(out)?;
        if saved.config != cfg.train_config() {
            return Err(Error::Config {
                field: "config".into(),
                reason: "checkpoint was trained with a different configuration".into(),
            });
        }
        Trainer::resume(saved, ds.train.data.view())?
    } else {
        Trainer::new(cfg.train_config(), ds.train.data.view())?
    };
    write_echo(out, cfg, Some(hash))?;
    let total = cfg.train.total_steps;
    let report_every = (total / 10).max(1);
    while !trainer.is_done() {
        let row = match trainer.step() {
            Ok(row) => row.clone(),
            Err(e) => {
                checkpoint::save(&trainer.snapshot(), out)?;
                return Err(e);
            }
        };
        if (row.step + 1) % report_every == 0 {
            ctx.say(format!(
                "step {:>6}/{total} phase={} loss={:.5} recon={:.5} masked={:.3}",
                row.step + 1,
                row.phase,
                row.loss_total,
                row.loss_recon,
                row.masked_fraction
            ));
        }
        if every > 0 && (row.step + 1) % every == 0 {
            checkpoint::save(&trainer.snapshot(), out)?;
        }
    }
    checkpoint::save(&trainer.snapshot(), out)?;
    ctx.say(format!(
        "trained {} for {total} steps -> {}",
        cfg.model.arch,
        out.display()
    ));
    Ok(())
}

fn eval(ctx: &Ctx, run_dir: &Path, data: &Path, report_path: &Path) -> Result<(), Error> {
    let run = checkpoint::load(run_dir)?;
    let prov = read_provenance(run_dir)?;
    let run_cfg = ExperimentConfig::from_toml(&read_text(&run_dir.join(CONFIG_ECHO))?)?;
    if run_cfg.hash() != prov.config_hash {
        return Err(Error::Config {
            field: "config_hash".into(),
            reason: format!("{} does not match {}", CONFIG_ECHO, PROVENANCE),
        });
    }
    let hash = dataset_hash(data)?;
    if prov.dataset_hash.as_deref() != Some(hash.as_str()) {
        return Err(Error::Config {
            field: "dataset_hash".into(),
            reason: format!(
                "run was trained on dataset {}, but {} hashes to {hash}",
                prov.dataset_hash.as_deref().unwrap_or("<unknown>"),
                data.display()
            ),
        });
    }
    let ds = Dataset::load(data)?;
    let model = EvalModel::from_run(&run);
    let result = evaluate(
        &model,
        ds.test.data.view(),
        &ds.test_codes,
        &ds.dict,
        &run_cfg.eval,
        run_cfg.seed,
    )?;
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let report = MetricsReport::new(
        RunIdentity {
            arch: run.config.model.arch,
            seed: run.config.seed,
            d: run.config.d,
            n: run.config.model.n,
            total_steps: run.config.optim.total_steps,
            config_hash: prov.config_hash,
            dataset_hash: hash,
        },
        result,
        now,
    );
    write_file(report_path, report.to_json())?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    ctx.say(format!(
        "{}: EV={:.4} L0={:.2} absorption={} sparse_probing={} -> {}",
        report.run.arch,
        report.unsup.explained_variance,
        report.unsup.l0_mean,
        fmt(report.absorption.mean),
        fmt(report.sparse_probing.mean_top1),
        report_path.display()
    ));
    Ok(())
}

fn compare(ctx: &Ctx, reports: &[PathBuf], out: &Path) -> Result<(), Error> {
    let parsed = reports
        .iter()
        .map(|p| {
            MetricsReport::from_json(&read_text(p)?).map_err(|e| match e {
                Error::Format { offset, message } => Error::Format {
                    offset,
                    message: format!("{}: {message}", p.display()),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let csv = compare_csv(&parsed)?;
    write_file(out, &csv)?;
    if !ctx.quiet {
        print!("{csv}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let ctx = Ctx {
        config,
        quiet: cli.quiet,
    };
    match &cli.command {
        Command::Generate { out } => generate(&ctx, out),
        Command::Train {
            data,
            out,
            resume,
            checkpoint_every,
        } => train(&ctx, data, out, *resume, *checkpoint_every),
        Command::Eval { run, data, report } => eval(&ctx, run, data, report),
        Command::Compare { out, reports } => compare(&ctx, reports, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
