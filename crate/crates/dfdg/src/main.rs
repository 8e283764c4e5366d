//! Command-line driver for the simulation laboratory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dfdg::config::{defaults_for, format_config, read_config};
use dfdg::data::DatasetName;
use dfdg::error::Result;
use dfdg::metrics::read_run_record;
use dfdg::models::write_checkpoint;
use dfdg::plots::{render_line_plot, Series};
use dfdg::runner::{
    export_partition, prepare, run_ablation, run_experiment, run_modes, train_clients,
    AblationKnob, ExperimentOutcome, ResultTable,
};
use dfdg::server::Mode;

#[derive(Parser)]
#[command(
    name = "dfdg",
    version,
    about = "A single-process laboratory for one-shot, data-free federated distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a default configuration for a dataset
    DefaultConfig {
        /// Dataset name (synth_toy, fmnist, cifar10, svhn, cinic10,
        /// cifar100, tiny_imagenet, food101)
        #[arg(long)]
        dataset: String,
    },
    /// Export one seed's data partition as a structured text file
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the clients for one seed and save their checkpoints
    TrainClients {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the configured experiment over all seeds
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured mode (dfdg, dfad, dense_style,
        /// fedftg_style, fedavg_only)
        #[arg(long)]
        mode: Option<String>,
    },
    /// Run several modes over the same seeds, reusing trained clients
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated mode list
        #[arg(long)]
        modes: String,
    },
    /// Run ablation arms of the full method (full, drop_tran, drop_div,
    /// drop_cd, merge_<op>, gate_<variant>)
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated knob list
        #[arg(long)]
        knobs: String,
    },
    /// Re-render the accuracy plot from a run record
    Plot {
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_table(table: &ResultTable) {
    println!("{:<18} {:>7} {:>10} {:>10}", "arm", "seeds", "mean", "std");
    for row in &table.rows {
        let std = row.std.map_or("-".to_string(), |s| format!("{s:.4}"));
        println!("{:<18} {:>7} {:>10.4} {:>10}", row.key, row.n_seeds, row.mean, std);
    }
}

fn finish(outcome: &ExperimentOutcome) -> ExitCode {
    print_table(&outcome.table);
    if outcome.all_completed() {
        println!("all {} runs completed", outcome.records.len());
        ExitCode::SUCCESS
    } else {
        for (seed, msg) in &outcome.failures {
            eprintln!("seed {seed} failed: {msg}");
        }
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::DefaultConfig { dataset } => {
            let name = DatasetName::parse(&dataset)?;
            print!("{}", format_config(&defaults_for(name)));
            Ok(ExitCode::SUCCESS)
        }
        Command::Partition { config, seed, out } => {
            let cfg = read_config(&config)?;
            export_partition(&cfg, seed, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainClients { config, seed, out_dir } => {
            let cfg = read_config(&config)?;
            let prep = prepare(&cfg, seed)?;
            let trained = train_clients(&prep, &cfg.client_config(), seed)?;
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| dfdg::DfdgError::io(&out_dir, e))?;
            for (i, params) in trained.params.iter().enumerate() {
                write_checkpoint(params, &out_dir.join(format!("client{i}.ckpt")))?;
            }
            let reports = serde_json::to_vec_pretty(&trained.reports).expect("reports serialize");
            let reports_path = out_dir.join("clients.json");
            std::fs::write(&reports_path, reports)
                .map_err(|e| dfdg::DfdgError::io(&reports_path, e))?;
            for r in &trained.reports {
                println!(
                    "client {:>2}: width {:>5.2}, {:>5} examples, local accuracy {:.3}",
                    r.client_id, r.width_ratio, r.data_size, r.final_local_accuracy
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, mode } => {
            let mut cfg = read_config(&config)?;
            if let Some(m) = mode {
                cfg.mode = Mode::parse(&m)?;
            }
            let outcome = run_experiment(&cfg)?;
            Ok(finish(&outcome))
        }
        Command::Compare { config, modes } => {
            let cfg = read_config(&config)?;
            let modes = modes
                .split(',')
                .map(|m| Mode::parse(m.trim()))
                .collect::<Result<Vec<_>>>()?;
            let base = cfg.output_dir.join("compare");
            let outcome = run_modes(&cfg, &modes, &base)?;
            Ok(finish(&outcome))
        }
        Command::Ablate { config, knobs } => {
            let cfg = read_config(&config)?;
            let knobs = knobs
                .split(',')
                .map(|k| AblationKnob::parse(k.trim()))
                .collect::<Result<Vec<_>>>()?;
            let base = cfg.output_dir.join("ablation");
            let outcome = run_ablation(&cfg, &knobs, &base)?;
            Ok(finish(&outcome))
        }
        Command::Plot { record, out } => {
            let rec = read_run_record(&record)?;
            let series = vec![Series {
                label: rec.mode.clone(),
                points: rec
                    .eval_points
                    .iter()
                    .map(|p| (p.outer_iter as f64, p.test_accuracy))
                    .collect(),
            }];
            render_line_plot(&out, "test accuracy", "outer iteration", "accuracy", &series)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
