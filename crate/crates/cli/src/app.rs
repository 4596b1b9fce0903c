//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use hwid_core::evaluate::Condition;

use crate::config::{ConfigError, RunConfig, RUN_ROOT_ENV};
use crate::pipeline::{self, RunLayout, CONFIG_FILE};
use crate::report;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "hwid",
    version,
    about = "Writer identification from handwriting images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration. Defaults to config.toml in the run directory, if present.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; relative paths resolve against $HWID_RUN_ROOT when set.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Config overrides such as contrastive.steps=200.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic corpus and its manifest.
    GenerateCorpus(Common),
    /// Run the spectral pre-filter over the training images.
    Preprocess(Common),
    /// Contrastive pre-training with adaptive patch matching.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from the saved checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Few-shot writer calibration of the pre-trained encoder.
    Calibrate(Common),
    /// Score the calibrated classifier on the test split under one condition.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.0)]
        defect_ratio: f64,
        #[arg(long, default_value_t = 0.0)]
        forgery_ratio: f64,
    },
    /// Evaluate every configured defect and forgery ratio.
    Sweep(Common),
    /// Tables and figures from a finished sweep.
    Report(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenerateCorpus(c)
            | Command::Preprocess(c)
            | Command::Calibrate(c)
            | Command::Sweep(c)
            | Command::Report(c) => c,
            Command::Pretrain { common, .. } | Command::Evaluate { common, .. } => common,
        }
    }
}

fn run_root() -> Option<PathBuf> {
    std::env::var_os(RUN_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

/// Resolve the config and the run directory it points at.
fn resolve(common: &Common) -> Result<(RunConfig, RunLayout), ConfigError> {
    let root = run_root();
    let mut probe = RunConfig::default();
    if let Some(d) = &common.run_dir {
        probe.run_dir = d.clone();
    }
    let saved = probe.run_dir_in(root.as_deref()).join(CONFIG_FILE);
    let file: Option<&Path> = match &common.config {
        Some(p) => Some(p),
        None if saved.exists() => Some(&saved),
        None => None,
    };
    let mut config = RunConfig::load(file, &common.overrides)?;
    if let Some(d) = &common.run_dir {
        config.run_dir = d.clone();
    }
    let layout = RunLayout::new(config.run_dir_in(root.as_deref()));
    Ok((config, layout))
}

fn dispatch(command: &Command, config: &RunConfig, layout: &RunLayout) -> hwid_core::Result<()> {
    pipeline::write_config(layout, config)?;
    match command {
        Command::GenerateCorpus(_) => {
            let m = pipeline::generate_corpus(layout, config)?;
            eprintln!(
                "generate-corpus: {} samples in {}",
                m.samples.len(),
                layout.corpus_dir().display()
            );
        }
        Command::Preprocess(_) => {
            let n = pipeline::preprocess(layout, config)?;
            eprintln!("preprocess: {n} images filtered");
        }
        Command::Pretrain { resume, .. } => {
            let rows = pipeline::run_pretrain(layout, config, *resume)?;
            if let Some(last) = rows.last() {
                eprintln!(
                    "pretrain: final logged loss {:.4} at step {}",
                    last.loss, last.step
                );
            }
        }
        Command::Calibrate(_) => {
            let clf = pipeline::run_calibrate(layout, config)?;
            eprintln!("calibrate: {} writers", clf.num_classes());
        }
        Command::Evaluate {
            defect_ratio,
            forgery_ratio,
            ..
        } => {
            let condition = Condition {
                defect_ratio: *defect_ratio,
                forgery_ratio: *forgery_ratio,
            };
            for r in pipeline::run_evaluate(layout, config, condition)? {
                println!(
                    "{} seed {}: top1 {:.4} top5 {:.4}",
                    r.condition.label(),
                    r.seed,
                    r.top1,
                    r.top5
                );
            }
        }
        Command::Sweep(_) => {
            let reports = pipeline::run_sweep(layout, config)?;
            print!("{}", hwid_core::evaluate::summary_table(&reports));
        }
        Command::Report(_) => {
            for path in report::emit_report(layout, config)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (config, layout) = match resolve(cli.command.common()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match dispatch(&cli.command, &config, &layout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
