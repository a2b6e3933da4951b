//! Command-line driver for the translation and self-training pipeline.
//!
//! Exit status: 0 on success, 2 on configuration errors, 3 on runtime
//! failures (missing inputs, non-finite training, I/O).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use uda_core::pipeline::{Arm, Pipeline, PipelineConfig};
use uda_core::report::report_run;
use uda_core::Error;

#[derive(Parser)]
#[command(name = "uda", version, about = "Unpaired translation and self-training for cross-modality segmentation")]
struct Cli {
    /// TOML config; `preset = "<name>"` inside it selects the base values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given (reference, smoke, full).
    #[arg(long, global = true, default_value = "reference")]
    preset: String,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rebuild stages whose existing outputs are stale or incomplete.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the phantom dataset and its manifest.
    GenData,
    /// Train the disentangled translation model.
    TrainTranslate,
    /// Translate every source volume to the target domain.
    Translate,
    /// Train a segmentation network (no_uda on raw sources, drl on translated).
    TrainSeg {
        #[arg(long, default_value = "drl")]
        arm: Arm,
    },
    /// Pseudo-label the target volumes for one self-training round.
    PseudoLabel {
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Fine-tune on translated and pseudo-labeled volumes for one round.
    Finetune {
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Score an arm on the held-out target volumes.
    Evaluate {
        #[arg(long, default_value = "drl_st")]
        arm: Arm,
    },
    /// Run the comparison over the configured arms (or the given ones).
    Ablate {
        #[arg(long)]
        arm: Vec<Arm>,
    },
    /// Emit tables, example grids and curves for completed runs.
    Report {
        /// Run directories; defaults to the configured output directory.
        runs: Vec<PathBuf>,
    },
}

fn config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::preset(&cli.preset)?,
    };
    if let Some(o) = &cli.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = config(&cli)?;
    if let Cmd::Report { runs } = &cli.cmd {
        let runs = if runs.is_empty() { vec![cfg.output_dir.clone()] } else { runs.clone() };
        let mut missing = Vec::new();
        for r in &runs {
            match report_run(r) {
                Ok(files) => files.iter().for_each(|f| println!("{}", f.display())),
                Err(e) => {
                    eprintln!("{}: {e}", r.display());
                    missing.push(r.display().to_string());
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingInput(format!("no report for: {}", missing.join(", "))));
        }
        return Ok(());
    }
    let p = Pipeline::new(cfg, cli.resume)?;
    match cli.cmd {
        Cmd::GenData => {
            let m = p.gen_data()?;
            println!(
                "source {} target {} oracle {} manifest {}",
                m.source_train.len(),
                m.target_train.len(),
                m.paired_oracle.len(),
                m.hash()
            );
        }
        Cmd::TrainTranslate => {
            let f = p.train_translate()?;
            println!(
                "reconstruction {:.4} cycle {:.4} (fraction of intensity range)",
                f.rec_fraction(),
                f.cycle_fraction()
            );
        }
        Cmd::Translate => println!("translated {} volumes", p.translate()?.len()),
        Cmd::TrainSeg { arm } => {
            p.train_seg(arm)?;
        }
        Cmd::PseudoLabel { round } => println!("pseudo-labeled {} volumes", p.pseudo_label(round)?.len()),
        Cmd::Finetune { round } => {
            p.finetune(round)?;
        }
        Cmd::Evaluate { arm } => {
            let r = p.evaluate(arm)?;
            println!("{arm}: mean DSC {:.2} NSD {:.2}", 100.0 * r.report.mean_dsc, 100.0 * r.report.mean_nsd);
        }
        Cmd::Ablate { arm } => {
            let r = p.ablate(&arm)?;
            for a in &r.arms {
                println!(
                    "{}: mean DSC {:.2} NSD {:.2}",
                    a.arm,
                    100.0 * a.report.mean_dsc,
                    100.0 * a.report.mean_nsd
                );
            }
            if r.partial {
                let failed: Vec<String> = r.failures.iter().map(|(a, e)| format!("{a}: {e}")).collect();
                return Err(Error::InvalidArgument(format!("partial ablation report; failed arms: {}", failed.join("; "))));
            }
        }
        Cmd::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 3,
            })
        }
    }
}
