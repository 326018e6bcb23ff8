use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use redlab_cli::{
    ablate, audit_params, grad_check_config, train, CliError, CliResult, ExperimentConfig,
    GradCheckArgs, Precision, Suite,
};

#[derive(Parser)]
#[command(
    name = "redlab",
    version,
    about = "Representation editing and PEFT baselines on a small transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count trainable parameters on full-size host architectures.
    AuditParams {
        /// Preset host name, e.g. roberta_base.
        host: Option<String>,
        /// Every preset, with published values and reduction factors.
        #[arg(long)]
        all: bool,
        /// JSON host descriptor instead of a preset.
        #[arg(long)]
        host_file: Option<PathBuf>,
        /// Also write table.txt and table.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Precision::Train)]
        precision: Precision,
    },
    /// Compare analytic and finite-difference gradients of every trainable group.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Accepted for symmetry; the check always runs at 64-bit precision.
        #[arg(long, value_enum, default_value_t = Precision::Verify)]
        precision: Precision,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        /// Negative control: scale every matmul backward by this factor.
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Run an ablation suite derived from a base config.
    Ablate {
        suite: Suite,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Precision::Train)]
        precision: Precision,
    },
}

fn load(path: &Path, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::AuditParams {
            host,
            all,
            host_file,
            out,
        } => {
            let report = audit_params(host.as_deref(), host_file.as_deref(), all)?;
            let table = report.to_table();
            print!("{table}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("table.txt"), &table)?;
                fs::write(
                    dir.join("table.json"),
                    serde_json::to_string_pretty(&report)? + "\n",
                )?;
            }
        }
        Command::Train {
            config,
            out,
            seed,
            precision,
        } => {
            let cfg = load(&config, seed)?;
            let dir = cfg.out_dir(out.as_deref());
            let report = train(&cfg, &dir, precision)?;
            println!(
                "{}: trainable {} / {}, best valid {:.4} (epoch {}), test {:.4}; outputs in {}",
                report.method,
                report.trainable_params,
                report.total_params,
                report.best_valid_acc,
                report.best_epoch,
                report.test_acc.unwrap_or(f64::NAN),
                dir.display()
            );
        }
        Command::GradCheck {
            config,
            out,
            seed,
            precision: _,
            batch_size,
            inject_fault,
        } => {
            let cfg = load(&config, seed)?;
            let args = GradCheckArgs {
                batch_size,
                inject_fault,
                ..GradCheckArgs::default()
            };
            let report = grad_check_config(&cfg, args)?;
            print!("{}", report.to_table());
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(
                    dir.join("gradcheck.json"),
                    serde_json::to_string_pretty(&report)? + "\n",
                )?;
            }
            if !report.pass() {
                let bad: Vec<&str> = report
                    .rows
                    .iter()
                    .filter(|r| !r.pass)
                    .map(|r| r.group.as_str())
                    .collect();
                return Err(CliError::Check(format!(
                    "relative error above {} in {}",
                    report.tolerance,
                    bad.join(", ")
                )));
            }
        }
        Command::Ablate {
            suite,
            config,
            out,
            seed,
            precision,
        } => {
            let cfg = load(&config, seed)?;
            let dir = cfg.out_dir(out.as_deref());
            let table = ablate(suite, &cfg, &dir, precision)?;
            print!("{}", table.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("redlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
