//! Experiment orchestration behind the `redlab` binary: config ingestion,
//! training runs, gradient checks, ablation suites and parameter audits.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use redlab::audit::{self, AuditReport, HostDescriptor};
use redlab::checkpoint;
use redlab::peft::{ComponentMask, Positions};
use redlab::tasks::generate;
use redlab::tensor::{Fault, OpKind};
use redlab::train::{
    grad_check, perturb_peft, GradCheckOptions, GradCheckReport, TrainReport, Trainer,
};
use redlab::{Method, PeftModel, PeftSpec, Scalar, TransformerModel};

pub use config::ExperimentConfig;

/// Failure classes, each with its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// A check ran and did not pass (exit 1).
    Check(String),
    /// Invalid or unreadable configuration (exit 2).
    Config(String),
    /// Training produced a non-finite loss or gradient (exit 3).
    Diverged(String),
    /// Anything else, e.g. an I/O failure while writing results (exit 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) | CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Diverged(m) => write!(f, "{m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<redlab::Error> for CliError {
    fn from(e: redlab::Error) -> Self {
        use redlab::Error as E;
        match e {
            E::Config(_) | E::MissingRank { .. } | E::Task(_) => CliError::Config(e.to_string()),
            E::Diverged { .. } => CliError::Diverged(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// 32-bit floats.
    #[default]
    Train,
    /// 64-bit floats.
    Verify,
}

/// Result of one training run, before anything is written to disk.
struct RunOutcome {
    report: TrainReport,
    /// Divergence message, when training stopped early.
    diverged: Option<String>,
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, dir: &Path) -> CliResult<RunOutcome> {
    let seed = cfg.train.seed;
    let base = TransformerModel::<T>::init(cfg.model.clone(), seed)?;
    let model = PeftModel::attach(base, &cfg.peft, seed)?;
    let data = generate(&cfg.task, seed)?;
    let mut trainer = Trainer::new(model, data, cfg.train.clone())?;
    if let Err(e) = trainer.run() {
        return match e {
            redlab::Error::Diverged { .. } => Ok(RunOutcome {
                report: trainer.report().clone(),
                diverged: Some(e.to_string()),
            }),
            other => Err(other.into()),
        };
    }
    let (model, report) = trainer.finish()?;
    fs::create_dir_all(dir)?;
    checkpoint::save_base(&model.base, dir.join("base.ckpt"))?;
    checkpoint::save_peft(&model.peft, dir.join("peft.ckpt"))?;
    Ok(RunOutcome {
        report,
        diverged: None,
    })
}

/// Trains `cfg` and writes `report.json`, `steps.csv`, `meta.json` and the
/// best checkpoints (`base.ckpt`, `peft.ckpt`) under `dir`. Divergence still
/// writes the partial report before returning [`CliError::Diverged`].
pub fn train(cfg: &ExperimentConfig, dir: &Path, precision: Precision) -> CliResult<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let outcome = match precision {
        Precision::Train => run_typed::<f32>(cfg, dir)?,
        Precision::Verify => run_typed::<f64>(cfg, dir)?,
    };
    let report = &outcome.report;
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report)? + "\n",
    )?;
    fs::write(dir.join("steps.csv"), report.steps_csv())?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(cfg)? + "\n",
    )?;
    let meta = serde_json::json!({
        "wall_clock_secs": report.wall_clock_secs,
        "finished_unix_secs": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    match outcome.diverged {
        Some(msg) => Err(CliError::Diverged(msg)),
        None => Ok(outcome.report),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckArgs {
    pub batch_size: usize,
    /// Off-identity noise added to PEFT parameters before checking.
    pub perturb: f64,
    /// Scales the backward pass of every matmul: a deliberately broken build.
    pub inject_fault: Option<f64>,
}

impl Default for GradCheckArgs {
    fn default() -> Self {
        Self {
            batch_size: 4,
            perturb: 0.1,
            inject_fault: None,
        }
    }
}

/// Runs the finite-difference check at 64-bit precision on the first
/// `batch_size` training examples. Returns the report even when it fails.
pub fn grad_check_config(
    cfg: &ExperimentConfig,
    args: GradCheckArgs,
) -> CliResult<GradCheckReport> {
    cfg.validate()?;
    let seed = cfg.train.seed;
    let base = TransformerModel::<f64>::init(cfg.model.clone(), seed)?;
    let mut model = PeftModel::attach(base, &cfg.peft, seed)?;
    if args.perturb > 0.0 {
        perturb_peft(&mut model, seed, args.perturb);
    }
    let data = generate(&cfg.task, seed)?;
    let n = args.batch_size.clamp(1, data.train.len());
    let indices: Vec<usize> = (0..n).collect();
    let (batch, labels) = data.train.batch(&indices)?;
    let opts = GradCheckOptions {
        fault: args.inject_fault.map(|factor| Fault {
            op: OpKind::MatMul,
            factor,
        }),
        ..GradCheckOptions::default()
    };
    Ok(grad_check(&mut model, &batch, &labels, opts)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// RED with both vectors, scaling only, bias only.
    Components,
    /// RED at the FFN site, the attention site, both.
    Positions,
    /// RED against rank-1 LoRA, Adapter and Adapter_FFN.
    Rank1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub method: String,
    pub trainable_params: usize,
    pub best_valid_acc: f64,
    pub final_valid_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: Suite,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<14} {:<24} {:>10} {:>11} {:>11} {:>9}\n",
            "row", "method", "trainable", "best_valid", "final_valid", "test"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:<24} {:>10} {:>11.4} {:>11.4} {:>9}",
                r.name,
                r.method,
                r.trainable_params,
                r.best_valid_acc,
                r.final_valid_acc,
                r.test_acc.map_or("-".into(), |a| format!("{a:.4}"))
            );
        }
        out
    }
}

/// The PEFT variants a suite compares, derived from the base spec so that
/// rows differ only in the intended factor.
pub fn suite_rows(suite: Suite, base: &PeftSpec) -> Vec<(String, PeftSpec)> {
    let red = PeftSpec {
        method: Method::Red,
        rank: None,
        ..base.clone()
    };
    match suite {
        Suite::Components => [
            ("both", ComponentMask::Both),
            ("scaling_only", ComponentMask::ScalingOnly),
            ("bias_only", ComponentMask::BiasOnly),
        ]
        .into_iter()
        .map(|(n, m)| {
            (
                n.to_string(),
                PeftSpec {
                    component_mask: m,
                    ..red.clone()
                },
            )
        })
        .collect(),
        Suite::Positions => [
            ("ffn", Positions::Ffn),
            ("attn", Positions::Attn),
            ("both", Positions::Both),
        ]
        .into_iter()
        .map(|(n, p)| {
            (
                n.to_string(),
                PeftSpec {
                    positions: p,
                    ..red.clone()
                },
            )
        })
        .collect(),
        Suite::Rank1 => {
            let rank1 = |m: Method| PeftSpec {
                method: m,
                rank: Some(1),
                alpha: None,
                component_mask: ComponentMask::Both,
                positions: Positions::Ffn,
                ..base.clone()
            };
            vec![
                ("red".into(), red.clone()),
                ("lora_r1".into(), rank1(Method::Lora)),
                ("adapter_r1".into(), rank1(Method::Adapter)),
                ("adapter_ffn_r1".into(), rank1(Method::AdapterFfn)),
            ]
        }
    }
}

/// Runs every row of `suite` sequentially, each under `dir/<row>`, and writes
/// `table.txt` and `table.json`.
pub fn ablate(
    suite: Suite,
    cfg: &ExperimentConfig,
    dir: &Path,
    precision: Precision,
) -> CliResult<AblationTable> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for (name, spec) in suite_rows(suite, &cfg.peft) {
        let row_cfg = ExperimentConfig {
            peft: spec,
            ..cfg.clone()
        };
        let report = train(&row_cfg, &dir.join(&name), precision)?;
        rows.push(AblationRow {
            name,
            method: report.method.clone(),
            trainable_params: report.trainable_params,
            best_valid_acc: report.best_valid_acc,
            final_valid_acc: report.final_valid_acc(),
            test_acc: report.test_acc,
        });
    }
    let table = AblationTable { suite, rows };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("table.txt"), table.to_table())?;
    fs::write(
        dir.join("table.json"),
        serde_json::to_string_pretty(&table)? + "\n",
    )?;
    Ok(table)
}

/// Audit of one preset, one user descriptor file, or every preset.
pub fn audit_params(
    host: Option<&str>,
    host_file: Option<&Path>,
    all: bool,
) -> CliResult<AuditReport> {
    let cfg = |e: redlab::Error| CliError::Config(e.to_string());
    if all {
        return audit::audit_all().map_err(cfg);
    }
    let descriptor = match (host, host_file) {
        (Some(name), None) => audit::preset(name).ok_or_else(|| {
            let known: Vec<String> = audit::presets().into_iter().map(|h| h.name).collect();
            CliError::Config(format!(
                "unknown host `{name}`; presets: {}",
                known.join(", ")
            ))
        })?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read host file {}: {e}", path.display()))
            })?;
            serde_json::from_str::<HostDescriptor>(&text).map_err(|e| {
                CliError::Config(format!("invalid host file {}: {e}", path.display()))
            })?
        }
        _ => {
            return Err(CliError::Config(
                "give exactly one of a host name, --host-file, or --all".into(),
            ))
        }
    };
    let rows = audit::audit_host(&descriptor).map_err(cfg)?;
    let ratios = audit::reduction_claims()
        .map_err(cfg)?
        .into_iter()
        .filter(|r| r.host == descriptor.name)
        .collect();
    Ok(AuditReport { rows, ratios })
}
