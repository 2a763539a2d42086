mod alloc;
mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[global_allocator]
static GLOBAL: alloc::Tracking = alloc::Tracking;

#[derive(Parser)]
#[command(name = "voldiff", version, about = "Volumetric diffusion segmentation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set train.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// patchddm, fullres or halfres.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate {
        #[arg(long)]
        n_cases: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train with periodic validation and best-checkpoint selection.
    Train {
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample masks, mean and variance maps over a steps × ensemble grid.
    Sample {
        /// Defaults to `<run_dir>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        ensemble: Option<Vec<usize>>,
    },
    /// Score previously sampled masks against the dataset.
    Eval {
        /// A directory written by `sample`; defaults to every one under the run directory.
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Time and memory of one training step and one network evaluation per mode.
    Bench,
}

fn quoted(v: &str) -> String {
    format!("{v:?}")
}

fn load_config(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut sets = common.overrides.clone();
    if let Some(m) = &common.mode {
        sets.push(format!("mode={}", quoted(m)));
    }
    if let Some(d) = &common.run_dir {
        sets.push(format!("run_dir={}", quoted(&d.to_string_lossy())));
    }
    if let Some(d) = &common.data_dir {
        sets.push(format!("data.dir={}", quoted(&d.to_string_lossy())));
    }
    match command {
        Command::Generate { n_cases, seed } => {
            sets.extend(n_cases.map(|n| format!("data.n_cases={n}")));
            sets.extend(seed.map(|s| format!("data.seed={s}")));
        }
        Command::Train { steps, .. } => sets.extend(steps.map(|s| format!("train.steps={s}"))),
        Command::Sample { steps, ensemble, .. } => {
            sets.extend(steps.as_ref().map(|s| format!("sample.steps={s:?}")));
            sets.extend(ensemble.as_ref().map(|e| format!("sample.ensemble_sizes={e:?}")));
        }
        _ => {}
    }
    RunConfig::load(common.config.as_deref(), &sets)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli.common, &cli.command)?;
    match &cli.command {
        Command::Generate { .. } => {
            let m = commands::generate(&cfg)?;
            println!(
                "wrote {} cases to {} (manifest sha256 {})",
                m.cases.len(),
                cfg.data.dir.display(),
                commands::manifest_hash(&cfg.data.dir)?
            );
        }
        Command::Train { resume, .. } => {
            let s = commands::train(&cfg, resume.as_deref())?;
            if let Some(l) = s.losses.last() {
                println!("final loss {l:.5}");
            }
            match s.best {
                Some(b) => println!("trained to step {}; best validation dice {:.4} at step {}", s.final_step, b.dice, b.step),
                None => println!("trained to step {}", s.final_step),
            }
        }
        Command::Sample { checkpoint, .. } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| cfg.run_dir.join("best.ckpt"));
            let rows = commands::sample(&cfg, &ckpt)?;
            println!("wrote {} rows to {}", rows.len(), cfg.run_dir.join("sweep.csv").display());
        }
        Command::Eval { pred } => {
            let dirs = match pred {
                Some(p) => vec![p.clone()],
                None => {
                    let mut v: Vec<PathBuf> = std::fs::read_dir(cfg.run_dir.join("samples"))?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.join("meta.json").exists())
                        .collect();
                    v.sort();
                    v
                }
            };
            anyhow::ensure!(!dirs.is_empty(), "nothing to evaluate");
            for d in dirs {
                let rows = commands::eval(&cfg, &d)?;
                let mean = rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64;
                println!("{}: {} cases, mean dice {mean:.4}", d.display(), rows.len());
            }
        }
        Command::Bench => {
            println!("{}", commands::BENCH_HEADER);
            for r in commands::bench(&cfg)? {
                println!("{}", r.to_csv());
            }
        }
    }
    Ok(())
}
