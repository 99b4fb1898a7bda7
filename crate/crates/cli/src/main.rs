use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use tacoformer::preprocess::instances::{Dataset, Task};
use tacoformer::preprocess::synth::Coupling;
use tacoformer::FusionMode;

mod commands;
mod config;

/// EEG and peripheral-signal emotion recognition with token-channel compound attention.
#[derive(Debug, Parser)]
#[command(name = "tacoformer", version)]
struct Cli {
    /// Worker threads for batch-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration with `arch` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn raw trial containers into a labelled instance file.
    Preprocess {
        #[arg(long)]
        dataset: Dataset,
        /// Directory with `s<NN>.pstb` containers and `ratings.csv`.
        #[arg(long = "in")]
        input: PathBuf,
        /// Channel-to-grid map CSV (`name,row,col`); defaults to the built-in map.
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long, default_value = "valence")]
        task: Task,
        /// Rating threshold; label is 1 when rating > threshold.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic instance file with known cross-modal structure.
    Synth {
        #[arg(long, default_value = "both")]
        coupling: Coupling,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        timestamps: usize,
        #[arg(long, default_value_t = 8)]
        pps_channels: usize,
        /// Strength of the static class pattern added to the EEG grid.
        #[arg(long, default_value_t = tacoformer::preprocess::synth::DEFAULT_MARGINAL_GAIN)]
        marginal_gain: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on an instance file and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint path; the model description goes next to it as `.json`.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log (default: stdout).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on an instance file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON output (also printed).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fusion-mode and position-encoding ablation over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// CSV of per-setting results.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check on the tiny configuration.
    Gradcheck {
        /// Fusion modes to check (default: all four).
        #[arg(long, value_delimiter = ',')]
        mode: Vec<FusionMode>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = tacoformer::gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Coordinates checked per tensor (default: every coordinate).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Write the fusion attention matrices of one instance as CSV and PGM.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Instance index in the data file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(2);
        }
    };
    if let Err(e) = commands::set_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Preprocess {
            dataset,
            input,
            map,
            task,
            threshold,
            out,
        } => commands::preprocess(dataset, &input, map.as_deref(), task, threshold, &out),
        Command::Synth {
            coupling,
            n,
            noise,
            seed,
            timestamps,
            pps_channels,
            marginal_gain,
            out,
        } => {
            let mut spec = tacoformer::preprocess::synth::SynthSpec::new(n, coupling, noise, seed)
                .with_shape(timestamps, pps_channels);
            spec.marginal_gain = marginal_gain;
            commands::synth(&spec, &out)
        }
        Command::Train { data, cfg, out, log } => commands::train(&data, &cfg, &out, log.as_deref()),
        Command::Eval { checkpoint, data, out } => commands::eval(&checkpoint, &data, out.as_deref()),
        Command::Ablate { data, cfg, seeds, out } => commands::ablate(&data, &cfg, &seeds, &out),
        Command::Gradcheck {
            mode,
            seed,
            tolerance,
            samples,
        } => commands::gradcheck(&mode, seed, tolerance, samples),
        Command::ExportAttn {
            checkpoint,
            data,
            index,
            out,
        } => commands::export_attn(&checkpoint, &data, index, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
