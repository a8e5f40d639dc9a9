use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use fednoise_core::config::ExperimentConfig;
use fednoise_core::gradcheck::{run_gradcheck, GradcheckOptions, GRADCHECK_TOLERANCE};
use fednoise_core::metrics::metrics_csv;
use fednoise_core::nn::serialize;
use fednoise_core::orchestrator::{partition_for, prepare_data, run_experiment_with, worker_count_from_env};
use fednoise_core::strategy::Registry;

/// Federated learning with self-distillation and noise distillation.
#[derive(Parser)]
#[command(name = "fednoise", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics.csv, effective_config.json and
    /// final_model.fsnd into the output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Record real wall-clock times in metrics.csv (makes it
        /// non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Write the client partition manifest (JSON) and a per-client class
    /// count table next to it.
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb: f64,
    },
}

enum Failure {
    Config(String),
    Runtime(anyhow::Error),
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let cfg = ExperimentConfig::from_json(&text).map_err(|e| {
        Failure::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
    })?;
    let registry = Registry::builtin();
    cfg.validate()
        .and_then(|()| registry.method(&cfg.method).map(drop))
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(config: &Path, out: &Path, timing: bool) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let threads = worker_count_from_env().map_err(|e| Failure::Config(e.to_string()))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("effective_config.json"), cfg.to_json() + "\n")?;

    let every = cfg.checkpoint_every;
    let result = run_experiment_with(&cfg, &Registry::builtin(), Some(threads), |m, model| {
        eprintln!(
            "round {:>3}  accuracy {:.4}  test_ce {:.4}  noise {}",
            m.round, m.accuracy, m.test_ce, m.noise_retained
        );
        if every > 0 && m.round % every == 0 {
            let path = out.join(format!("checkpoint_round_{:04}.fsnd", m.round));
            std::fs::write(&path, serialize(model))?;
        }
        Ok(())
    })
    .with_context(|| format!("running {}", config.display()))?;

    write(&out.join("metrics.csv"), metrics_csv(&result.history, timing))?;
    write(&out.join("final_model.fsnd"), serialize(&result.final_model))?;
    Ok(())
}

fn counts_path(out: &Path) -> PathBuf {
    out.with_extension("counts.csv")
}

fn cmd_partition(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let (train, _) = prepare_data(&cfg).context("building dataset")?;
    let partition = partition_for(&cfg, &train).context("partitioning")?;
    write(out, partition.to_json() + "\n")?;

    let c = train.class_count();
    let mut csv = String::from("client");
    for j in 0..c {
        csv.push_str(&format!(",class_{j}"));
    }
    csv.push_str(",total\n");
    for (k, row) in partition.count_table(train.labels(), c).iter().enumerate() {
        csv.push_str(&k.to_string());
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push_str(&format!(",{}\n", row.iter().sum::<usize>()));
    }
    write(&counts_path(out), csv)?;
    Ok(())
}

fn cmd_gradcheck(seed: u64, instances: usize, perturb: f64) -> Result<(), Failure> {
    let reports = run_gradcheck(&GradcheckOptions {
        seed,
        instances,
        perturbation: perturb,
    })
    .context("gradient check")?;
    let mut failing = Vec::new();
    for r in &reports {
        println!(
            "{:<24} instances {:>3}  coords {:>6}  max rel err {:.3e}  {}",
            r.name,
            r.instances,
            r.coordinates,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failing.push(format!(
                "{} (instance {}, coordinate {}, rel err {:.3e} >= {GRADCHECK_TOLERANCE:e})",
                r.name, r.worst_instance, r.worst_coordinate, r.max_rel_error
            ));
        }
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failing.join("\n")))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config, out, timing } => cmd_run(config, out, *timing),
        Command::Partition { config, out } => cmd_partition(config, out),
        Command::Gradcheck {
            seed,
            instances,
            perturb,
        } => cmd_gradcheck(*seed, *instances, *perturb),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("gradient check failed:\n{msg}");
            ExitCode::from(1)
        }
    }
}
