//! Command-line front end.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{execute, execute_config, report, Command, Overrides};
pub use config::{DataConfig, ExperimentConfig, Manifest, ModelConfig, PlanConfig, PlanProfile};

use crate::error::{Error, Result};
use crate::session::UpdateMode;

#[derive(Debug, Parser)]
#[command(
    name = "fscil",
    version,
    about = "Few-shot class-incremental learning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run the protocol for the configured mode and seeds.
    Run(RunArgs),
    /// NONPC protocol once per label-smoothing value, base retrained each time.
    SweepSmoothing(RunArgs),
    /// Train one base model per seed, then run every configured mode from it.
    CompareModes(RunArgs),
    /// Print the final-session summary of an output directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<UpdateMode>>,
    /// Label-smoothing values for sweep-smoothing.
    #[arg(long, value_delimiter = ',')]
    pub smoothing: Option<Vec<f64>>,
    /// Worker threads for independent cells.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Replace results already present in the output directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Used only to find the output directory when --out is absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Cli {
    pub fn execute(self) -> Result<String> {
        let (cmd, a) = match self.command {
            Cmd::Run(a) => (Command::Run, a),
            Cmd::SweepSmoothing(a) => (Command::SweepSmoothing, a),
            Cmd::CompareModes(a) => (Command::CompareModes, a),
            Cmd::Report(r) => {
                let dir = match (r.out, r.config) {
                    (Some(d), _) => d,
                    (None, Some(c)) => ExperimentConfig::load(&c)?.output.ok_or_else(|| {
                        Error::Config("config has no `output`; pass --out".into())
                    })?,
                    (None, None) => {
                        return Err(Error::Config("report needs --out or --config".into()))
                    }
                };
                return report(&dir);
            }
        };
        let ov = Overrides {
            out: a.out,
            seeds: a.seeds,
            modes: a.modes,
            smoothing: a.smoothing,
            jobs: a.jobs,
            overwrite: a.overwrite,
        };
        let out = execute(cmd, &a.config, &ov)?;
        Ok(format!(
            "{}: results written to {}\n",
            cmd.name(),
            out.display()
        ))
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match cli.execute() {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
