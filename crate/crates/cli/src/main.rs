use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mmvq_core::config::RunConfig;
use mmvq_core::downstream::TaskMode;
use mmvq_core::metrics::{percent_change, ComparisonRow};
use mmvq_core::mrl::SelectOn;
use mmvq_core::pipeline::Run;
use mmvq_core::verify::run_suite;
use mmvq_core::Error;

/// Multimodal VQ-VAE severity pipeline.
///
/// Every stage reads and writes `<out>/run-<hash>/`, where the hash covers
/// the resolved configuration. Pass the same --config, --seed and
/// --select-on to every stage of one run.
#[derive(Parser, Debug)]
#[command(name = "mmvq", version)]
struct Cli {
    /// JSON overlay onto the default configuration (`"preset": "desk"` starts from the desk preset).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Overwrite existing stage outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Split used to select the MRL checkpoint.
    #[arg(long, global = true, value_enum)]
    select_on: Option<SelectArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SelectArg {
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Mtl,
    Cls,
    Reg,
}

impl From<ModeArg> for TaskMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mtl => TaskMode::Mtl,
            ModeArg::Cls => TaskMode::Cls,
            ModeArg::Reg => TaskMode::Reg,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic cohort (channel CSVs and manifest).
    SynthData,
    /// Segment sessions and build the FVTC cache.
    ExtractFeatures {
        /// Manifest to read instead of the run's synthetic cohort.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the multimodal VQ-VAE.
    TrainMrl,
    /// Quantize every segment and stack per-session matrices.
    Embed,
    /// Train a session-level model.
    TrainDownstream {
        #[arg(long, value_enum, default_value = "mtl")]
        mode: ModeArg,
    },
    /// Compute metrics from predictions.
    Evaluate {
        /// Mode to evaluate; all trained modes when omitted.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Predictions CSV to evaluate instead of the run's own.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Leave-subject-out MAE analysis.
    ErrorAnalysis {
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Predictions for sessions that replace the excluded subject.
        #[arg(long)]
        replacement: Option<PathBuf>,
        /// Report the change from excluding this subject.
        #[arg(long)]
        exclude_subject: Option<String>,
    },
    /// Run the finite-difference gradient suite.
    GradCheck,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(s) = cli.select_on {
        c.mrl.training.select_on = match s {
            SelectArg::Val => SelectOn::Val,
            SelectArg::Test => SelectOn::Test,
        };
    }
    c.validate()?;
    Ok(c)
}

fn execute(cli: Cli) -> Result<(), Error> {
    if let Command::GradCheck = cli.command {
        let report = run_suite(cli.seed.unwrap_or(0))?;
        print!("{}", report.to_table());
        if !report.all_passed() {
            return Err(Error::numeric(format!(
                "gradient check failed: worst relative error {:.3e} ≥ {:.0e}",
                report.worst(),
                report.tolerance
            )));
        }
        return Ok(());
    }
    let config = resolve_config(&cli)?;
    let run = Run::open(&cli.out, config, cli.force)?;
    println!("run directory {}", run.dir.display());
    match cli.command {
        Command::SynthData => {
            let m = run.synth_data()?;
            println!("{} sessions from {} subjects", m.records.len(), m.subjects().len());
        }
        Command::ExtractFeatures { manifest } => {
            let infos = run.extract_features(manifest.as_deref())?;
            let segs: usize = infos.iter().map(|s| s.segments).sum();
            println!("{} sessions, {segs} segments", infos.len());
        }
        Command::TrainMrl => {
            let out = run.train_mrl()?;
            let first = &out.history[0];
            let last = out.history.last().unwrap_or(first);
            println!(
                "epochs {}: train loss {:.5} → {:.5}, {} codes in use, selected epoch {}",
                out.history.len(),
                first.train.total,
                last.train.total,
                last.distinct_codes(),
                out.checkpoint.selected_epoch
            );
        }
        Command::Embed => {
            let emb = run.embed()?;
            if let Some(m) = emb.matrices.values().next() {
                println!("{} session matrices of {}×{}", emb.matrices.len(), m.t_max(), m.dim());
            }
        }
        Command::TrainDownstream { mode } => {
            let (ckpt, rows) = run.train_downstream(mode.into())?;
            println!(
                "{} mode: selected epoch {} of {}, {} test predictions",
                ckpt.mode.as_str(),
                ckpt.selected_epoch,
                ckpt.history.len(),
                rows.len()
            );
        }
        Command::Evaluate { mode, predictions } => {
            let mode = mode.map(TaskMode::from);
            let reports = run.evaluate(mode, predictions.as_deref())?;
            for (name, r) in &reports {
                println!("== {name}\n{}", r.to_table());
            }
            let rows: Vec<ComparisonRow> = TaskMode::ALL
                .iter()
                .filter_map(|m| reports.get(m.as_str()).map(|r| ComparisonRow::from_report(*m, r)))
                .collect();
            if rows.len() > 1 {
                print!("{}", mmvq_core::metrics::comparison_table(&rows));
            }
        }
        Command::ErrorAnalysis {
            predictions,
            replacement,
            exclude_subject,
        } => {
            let lso = run.error_analysis(predictions.as_deref(), replacement.as_deref())?;
            print!("{}", lso.to_table());
            if let Some(s) = exclude_subject {
                let row = lso
                    .subjects
                    .iter()
                    .find(|r| r.subject_id == s)
                    .ok_or_else(|| Error::validation(format!("subject {s} is not in the predictions")))?;
                println!(
                    "\nexcluding {s}: MAE {:.2} → {:.2} ({:.2}% drop)",
                    lso.pooled_mae,
                    row.mae_excluded,
                    100.0 * percent_change(lso.pooled_mae, row.mae_excluded)
                );
                if let Some(m) = row.mae_replaced {
                    println!(
                        "excluding {s} and adding the replacement: MAE {:.2} → {m:.2} ({:.2}% drop)",
                        lso.pooled_mae,
                        100.0 * percent_change(lso.pooled_mae, m)
                    );
                }
            }
        }
        Command::GradCheck => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
