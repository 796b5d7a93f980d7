//! `ltlab`: data synthesis, training presets, diagnostics and theorem checks
//! for long-tailed recognition experiments.

mod aggregate;
mod commands;
mod config;
mod error;
mod output;
mod pool;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::ExperimentConfig;
use error::{CliError, CliResult};
use output::OutputDir;

#[derive(Parser, Debug)]
#[command(name = "ltlab", version, about = "Long-tailed recognition laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed(s); overrides the config's seed list. Repeatable.
    #[arg(long)]
    seed: Vec<u64>,
    /// Output directory; also read from LTLAB_OUT.
    #[arg(long, env = "LTLAB_OUT")]
    out: Option<PathBuf>,
    /// Overwrite files in an existing output directory.
    #[arg(long)]
    force: bool,
    /// Threads for independent seeds or sweep cells.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/val/test splits and a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a preset over the configured seeds.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Feature diagnostics for a trained network.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
    },
    /// Check a theorem or the closed-form ratio.
    Verify {
        #[arg(value_enum)]
        which: Which,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
    },
    /// Method comparison table over one or more training output directories.
    Report {
        dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Where a trained network comes from.
#[derive(Args, Debug, Clone)]
struct Source {
    /// Seed directory written by `train` (data is regenerated from its config).
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    run: Option<PathBuf>,
    /// Directory holding `model.bin` / `model.json`.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    /// Dataset directory written by `synth`.
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Which {
    Lemma1,
    Theorem1,
    Theorem2,
}

impl Common {
    fn config(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if !self.seed.is_empty() {
            cfg.seeds = self.seed.clone();
            cfg.validate()?;
        }
        if self.workers == 0 {
            return Err(CliError::usage("--workers must be at least 1"));
        }
        Ok(cfg)
    }

    fn require_config(&self) -> CliResult<ExperimentConfig> {
        if self.config.is_none() {
            return Err(CliError::usage("--config is required for this command"));
        }
        self.config()
    }

    /// Flag or `LTLAB_OUT`, then the config's `output`, then `default`.
    fn out_dir(&self, cfg: &ExperimentConfig, default: PathBuf) -> CliResult<OutputDir> {
        let root = self.out.clone().or_else(|| cfg.output.clone()).unwrap_or(default);
        OutputDir::prepare(&root, self.force)
    }
}

fn load_source(source: &Source, cfg: ExperimentConfig) -> CliResult<(commands::Loaded, PathBuf)> {
    match (&source.run, &source.checkpoint, &source.data) {
        (Some(run), _, _) => Ok((commands::load_run(run)?, run.clone())),
        (None, Some(ck), Some(data)) => {
            let seed = cfg.seeds[0];
            Ok((commands::load_pair(ck, data, cfg, seed)?, ck.clone()))
        }
        _ => Err(CliError::usage("give --run <seed dir> or both --checkpoint and --data")),
    }
}

fn default_root() -> PathBuf {
    PathBuf::from("ltlab-out")
}

fn sanitize(name: &str) -> String {
    name.replace('+', "-")
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = common.require_config()?;
            let seed = cfg.seeds[0];
            let out = common.out_dir(&cfg, default_root().join(format!("data-seed{seed}")))?;
            commands::synth::run(&cfg, seed, &out)?;
            eprintln!("wrote {}", out.path().display());
        }
        Command::Train { common } => {
            let cfg = common.require_config()?;
            cfg.dataset()?;
            let name = sanitize(&cfg.method()?.preset);
            let out = common.out_dir(&cfg, default_root().join(name))?;
            let agg = commands::train::run(&cfg, &cfg.seeds, common.workers, &out)?;
            print!("{}", aggregate::methods_markdown(&[agg]));
            eprintln!("wrote {}", out.path().display());
        }
        Command::Metrics { common, source, split } => {
            let cfg = common.config()?;
            let (loaded, origin) = load_source(&source, cfg)?;
            let set = match split {
                Split::Train => &loaded.splits.train,
                Split::Val => &loaded.splits.val,
                Split::Test => &loaded.splits.test,
            };
            let name = format!("metrics-{}", format!("{split:?}").to_lowercase());
            let out = common.out_dir(&loaded.config, origin.join(name))?;
            let summary = commands::metrics::run(&loaded, set, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary).map_err(ltlab::Error::from)?);
        }
        Command::Verify { which, common, source } => {
            let cfg = common.config()?;
            match which {
                Which::Lemma1 => {
                    let out = common.out_dir(&cfg, default_root().join("verify-lemma1"))?;
                    commands::verify::lemma1(&cfg, &out)?;
                }
                Which::Theorem1 => {
                    let (loaded, origin) = load_source(&source, cfg)?;
                    let out = common.out_dir(&loaded.config, origin.join("theorem1"))?;
                    commands::verify::theorem1(&loaded, &out)?;
                }
                Which::Theorem2 => {
                    let out = common.out_dir(&cfg, default_root().join("verify-theorem2"))?;
                    commands::verify::theorem2(&cfg, common.workers, &out)?;
                }
            }
        }
        Command::Report { dir, common } => {
            let cfg = common.config()?;
            if !Path::new(&dir).is_dir() {
                return Err(CliError::usage(format!("{} is not a directory", dir.display())));
            }
            let rows = commands::report::collect(&dir)?;
            let out = common.out_dir(&cfg, dir.join("report"))?;
            commands::report::run(&dir, &out)?;
            print!("{}", aggregate::methods_markdown(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
