use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cda::commands::{self, RunOptions, CHECKPOINT_FILE};
use cda::config::ExperimentConfig;
use cda::manifest::ManifestRow;
use cda::Result;
use cda_core::pipeline::Variant;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cda", version, about = "Contrastive domain adaptation experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root, overriding `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run only this seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for `bench`.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a domain pair as IDX files.
    GenData {
        /// Pair name from `data.pairs`; defaults to the first.
        #[arg(long)]
        pair: Option<String>,
    },
    /// Pretrain the configured variant for each seed.
    Pretrain {
        /// Pair name from `data.pairs`; defaults to the first.
        #[arg(long)]
        pair: Option<String>,
        /// Override `train.variant`.
        #[arg(long)]
        variant: Option<Variant>,
        /// Continue from the checkpoint already in the run directory.
        #[arg(long)]
        resume: bool,
        /// Record per-step wall time in the metrics CSV.
        #[arg(long)]
        wall_time: bool,
        /// Stop after this many epochs; continue later with `--resume`.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Linear evaluation of a pretrained checkpoint.
    Eval {
        /// Defaults to the run directory of the configured variant and seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pair name from `data.pairs`; defaults to the first.
        #[arg(long)]
        pair: Option<String>,
    },
    /// Pretrain and evaluate every (pair, variant, seed) cell.
    Bench {
        #[arg(long)]
        wall_time: bool,
    },
    /// Print checkpoint metadata.
    Inspect { checkpoint: PathBuf },
}

fn load_config(global: &Global) -> Result<(ExperimentConfig, PathBuf)> {
    let (mut cfg, base) = match &global.config {
        Some(path) => {
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (ExperimentConfig::load(path)?, base)
        }
        None => (ExperimentConfig::default(), PathBuf::from(".")),
    };
    if let Some(out) = &global.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = global.seed {
        cfg.seeds = vec![seed];
    }
    Ok((cfg, base))
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Inspect { checkpoint } = &cli.command {
        print!("{}", commands::inspect(checkpoint)?);
        return Ok(());
    }
    let (mut cfg, base) = load_config(&cli.global)?;
    match cli.command {
        Command::GenData { pair } => {
            let files = commands::gen_data(&cfg, &base, pair.as_deref())?;
            println!("wrote {}", files.dir.display());
        }
        Command::Pretrain {
            pair,
            variant,
            resume,
            wall_time,
            stop_after,
        } => {
            if let Some(v) = variant {
                cfg.train.variant = v;
            }
            let opts = RunOptions {
                wall_time,
                resume,
                max_epochs: stop_after,
            };
            for out in commands::pretrain(&cfg, &base, pair.as_deref(), opts)? {
                let r = &out.record;
                let last = r.final_losses.unwrap_or_default();
                println!(
                    "{} seed {}: {} epochs, {} steps, final loss {:.4} (cont_s {:.4}, cont_t {:.4}, mmd {:.4}) in {:.1}s -> {}",
                    r.variant,
                    r.seed,
                    r.epoch,
                    r.step,
                    last.total,
                    last.cont_s,
                    last.cont_t,
                    last.mmd,
                    r.pretrain_seconds,
                    out.dir.display()
                );
            }
        }
        Command::Eval { checkpoint, pair } => {
            let paths = match checkpoint {
                Some(p) => vec![p],
                None => {
                    let name = cfg.pair(pair.as_deref())?.name();
                    cfg.seeds
                        .iter()
                        .map(|&s| commands::run_dir(&cfg.out, &name, cfg.train.variant, s).join(CHECKPOINT_FILE))
                        .collect()
                }
            };
            for path in paths {
                let (ckpt, report) = commands::evaluate(&cfg, &base, &path, pair.as_deref())?;
                println!(
                    "{} seed {}: source accuracy {:.4}, target accuracy {:.4} ({} classes)",
                    ckpt.train.variant, ckpt.train.seed, report.source_accuracy, report.target_accuracy, report.classes
                );
            }
        }
        Command::Bench { wall_time } => {
            let opts = RunOptions {
                wall_time,
                ..RunOptions::default()
            };
            let progress = |row: &ManifestRow| match (&row.error, row.target_accuracy) {
                (Some(e), _) => eprintln!("{} {} seed {}: {e}", row.pair, row.variant, row.seed),
                (None, acc) => eprintln!(
                    "{} {} seed {}: target accuracy {:.4}",
                    row.pair,
                    row.variant,
                    row.seed,
                    acc.unwrap_or(f64::NAN)
                ),
            };
            let manifest = commands::bench(&cfg, &base, cli.global.threads, opts, &progress)?;
            print!("{}", manifest.summary_table());
        }
        Command::Inspect { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
