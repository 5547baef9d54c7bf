use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

mod commands;

/// Hierarchical multi-distribution CTR models: data, training and experiments.
#[derive(Debug, Parser)]
#[command(name = "hmdn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train.csv, test.csv and schema.json.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, print the metric trace and write a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        /// Also append metric records to this file.
        #[arg(long)]
        metrics_file: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labelled CSV or the configured test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Finite-difference check of every gradient on a 4-example batch.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        /// Hold quantizer codes fixed while perturbing (on|off).
        #[arg(long, default_value = "on", action = ArgAction::Set, value_parser = parse_switch)]
        freeze_codes: bool,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
    /// Train at several quantizer depths and tabulate mean test AUC.
    SweepDepth {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        depths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Print JSON instead of a tab-separated table.
        #[arg(long)]
        json: bool,
    },
    /// Compare the DNN, vanilla and hierarchical-gate models over seeds.
    Ablation {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Print per-level code usage of a checkpoint's codebooks.
    InspectCodebooks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
}

/// Config file plus flag overrides; flags win.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long, env = "HMDN_CONFIG")]
    pub config: Option<PathBuf>,
    /// moe | dw | dnn
    #[arg(long)]
    pub backbone: Option<String>,
    /// hierarchical_sD | raw_xb
    #[arg(long)]
    pub gate_input: Option<String>,
    #[arg(long)]
    pub n_experts: Option<usize>,
    /// implicit | explicit
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub codebook_size: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub include_zero_code: Option<bool>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub train_path: Option<PathBuf>,
    #[arg(long)]
    pub test_path: Option<PathBuf>,
    #[arg(long)]
    pub n_examples: Option<usize>,
    /// Seed of the synthetic generator (the training seed is `--seed`).
    #[arg(long)]
    pub data_seed: Option<u64>,
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(format!("expected on or off, got `{other}`")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData { run, out } => commands::gen_data(&run, &out),
        Command::Train {
            run,
            checkpoint,
            metrics_file,
        } => commands::train(&run, &checkpoint, metrics_file.as_deref()),
        Command::Eval { checkpoint, data, run } => commands::eval(&run, &checkpoint, data.as_deref()),
        Command::Gradcheck {
            run,
            freeze_codes,
            tolerance,
            step,
        } => commands::gradcheck(&run, freeze_codes, tolerance, step),
        Command::SweepDepth {
            run,
            depths,
            seeds,
            json,
        } => commands::sweep_depth(&run, &depths, &seeds, json),
        Command::Ablation {
            run,
            models,
            seeds,
            json,
        } => commands::ablation(&run, &models, &seeds, json),
        Command::InspectCodebooks { checkpoint, data, run } => {
            commands::inspect_codebooks(&run, &checkpoint, data.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
