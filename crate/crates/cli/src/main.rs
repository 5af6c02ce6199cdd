use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sts_cli::commands::{self, DataSource, EvalOptions};
use sts_cli::RunConfig;
use sts_core::trainer::Split;
use sts_core::{Result, StsError};

const CONFIG_HELP: &str = "\
Config files hold one `key = value` per line; `#` starts a comment and unknown keys are errors.

Run:       seed, synth_seed, categories
Generator: grid_rows, grid_cols, n_regions, n_categories, n_slots, base_rate,
           autoregression, spatial_diffusion, semantic_coupling, target_zero_ratio,
           hotspot_scale, exposure_gate, max_rate, slot_seconds, t0
Training:  t_window, d, layers, heads, lr, decay, epochs, batch_size, split_ratio,
           val_slots, eta, lambda_c, lambda_reg, tau, norm, dsa_self_loop,
           dsa_activation, mask_mode, ablation, grad_clip, windows_per_pass

A run manifest (manifest.json) may be passed as --config to repeat a run.
Exit codes: 0 success, 1 data error, 2 config error, 3 numeric failure.";

#[derive(Parser)]
#[command(name = "sts", version, about = "Zero-inflated urban anomaly forecasting", after_long_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (key = value text or a run manifest).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "sts-out")]
    out: PathBuf,
    /// Region graph spec; defaults to the configured grid.
    #[arg(long)]
    graph: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Data {
    #[command(flatten)]
    common: Common,
    /// Event CSV (timestamp,region_id,category,value); generated when absent.
    #[arg(long)]
    events: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Zero,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic event log and graph spec.
    Generate(Common),
    /// Train and write the best checkpoint with an epoch log.
    Train(Data),
    /// Score a checkpoint or a baseline on one split.
    Eval {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train every ablation variant and compare test metrics.
    Ablate(Data),
    /// Retrain on coarser time slots and compare.
    Sparsity {
        #[command(flatten)]
        data: Data,
        /// Comma-separated rebin factors.
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        factors: Vec<usize>,
    },
    /// Finite-difference check of the model gradients on a toy problem.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Write the attention weights of one window as CSV.
    ExportAttention {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn config(common: &Common) -> Result<RunConfig> {
    let rc = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => rc.with_seed(s),
        None => rc,
    })
}

fn source(data: &Data) -> DataSource<'_> {
    DataSource {
        events: data.events.as_deref(),
        graph: data.common.graph.as_deref(),
    }
}

fn print_rows(path: &Path, csv: &str) {
    print!("{csv}");
    eprintln!("wrote {}", path.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let rc = config(&common)?;
            let s = commands::cmd_generate(&rc, common.graph.as_deref(), &common.out)?;
            if let Some(w) = &s.warning {
                eprintln!("warning: {w}");
            }
            print!("{}", s.to_text());
        }
        Command::Train(data) => {
            let rc = config(&data.common)?;
            let run = commands::cmd_train(&rc, &source(&data), &data.common.out)?;
            let o = &run.outcome;
            println!("epochs={}", o.log.len());
            println!("best_epoch={}", o.best_epoch.map_or("none".into(), |e| e.to_string()));
            println!("best_val_mae={}", o.best_val_mae.map_or("absent".into(), |m| format!("{m:.4}")));
            eprintln!("wrote {}", data.common.out.join(commands::CHECKPOINT_FILE).display());
        }
        Command::Eval { data, checkpoint, baseline, split } => {
            let rc = config(&data.common)?;
            let opts = EvalOptions {
                checkpoint: checkpoint.as_deref(),
                baseline_zero: baseline.is_some(),
                split: match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Val => Split::Val,
                    SplitArg::Test => Split::Test,
                },
            };
            let report = commands::cmd_eval(&rc, &source(&data), opts, &data.common.out)?;
            print!("{}", report.to_text());
        }
        Command::Ablate(data) => {
            let rc = config(&data.common)?;
            let rows = commands::cmd_ablate(&rc, &source(&data), &data.common.out)?;
            print_rows(&data.common.out.join(commands::ABLATION_FILE), &commands::ablation_csv(&rows));
        }
        Command::Sparsity { data, factors } => {
            let rc = config(&data.common)?;
            let rows = commands::cmd_sparsity(&rc, &source(&data), &factors, &data.common.out)?;
            print_rows(&data.common.out.join(commands::SPARSITY_FILE), &commands::sparsity_csv(&rows));
        }
        Command::Gradcheck { common, corrupt_gradient } => {
            let rc = config(&common)?;
            let groups = commands::cmd_gradcheck(&rc, common.graph.as_deref(), corrupt_gradient, &common.out)?;
            for g in &groups {
                println!("{:<16} {:>6} {:.3e}", g.name, g.n_params, g.max_error);
            }
            commands::gradcheck_verdict(&groups)?;
        }
        Command::ExportAttention { data, checkpoint } => {
            let rc = config(&data.common)?;
            let path = commands::cmd_export_attention(&rc, &source(&data), &checkpoint, &data.common.out)?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
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

fn exit_code(e: &StsError) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
