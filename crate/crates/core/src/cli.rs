//! Command-line surface. [`main`] maps outcomes to exit codes: 0 success,
//! 1 usage error, 2 runtime failure, 3 property-suite failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::config::Config;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::suite;
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::metrics::export_plots;
use crate::trainer::{run, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_PROPERTY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "daps", version, about = "Discrete autoencoders trained by policy search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint and print one metrics record as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// TOML file holding a dataset spec, bare or under `[data]`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Run the exact-enumeration property suites.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert a JSONL metrics file to plot CSV.
    ExportPlots {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err((code, e)) => {
            eprintln!("error: {e}");
            code
        }
    }
}

type Outcome = std::result::Result<i32, (i32, Error)>;

fn usage(e: Error) -> (i32, Error) {
    (EXIT_USAGE, e)
}

fn runtime(e: Error) -> (i32, Error) {
    (EXIT_RUNTIME, e)
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Train { config } => {
            let cfg = Config::load(&config).map_err(usage)?;
            let summary = run(cfg).map_err(runtime)?;
            println!("trained {} steps; checkpoint {}", summary.steps, summary.checkpoint.display());
            Ok(EXIT_OK)
        }
        Command::Eval { checkpoint, data, split } => {
            let spec = load_spec(&data).map_err(usage)?;
            let ck = Checkpoint::load(&checkpoint).map_err(runtime)?;
            let mut dataset = spec.load(Path::new("")).map_err(runtime)?;
            if let Split::Train = split {
                dataset.val = dataset.train.clone();
            }
            let mut trainer = Trainer::from_checkpoint(&ck, &checkpoint, dataset).map_err(runtime)?;
            let record = trainer.record().map_err(runtime)?;
            let line = serde_json::to_string(&record).map_err(|e| runtime(Error::Invalid(e.to_string())))?;
            println!("{line}");
            Ok(EXIT_OK)
        }
        Command::OracleCheck { instances, seed } => {
            if instances == 0 {
                return Err(usage(Error::Config("--instances must be positive".into())));
            }
            let reports = suite::all(instances, seed).map_err(runtime)?;
            for r in &reports {
                println!("{r}");
            }
            Ok(if reports.iter().all(suite::SuiteReport::passed) { EXIT_OK } else { EXIT_PROPERTY })
        }
        Command::ExportPlots { metrics, out } => {
            let n = export_plots(&metrics, &out).map_err(runtime)?;
            println!("wrote {n} rows to {}", out.display());
            Ok(EXIT_OK)
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecFile {
    Wrapped { data: DatasetSpec },
    Bare(DatasetSpec),
}

/// Reads a dataset spec, resolving a relative `path` against the file's directory.
pub fn load_spec(path: &Path) -> Result<DatasetSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SpecFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut spec = match file {
        SpecFile::Wrapped { data } | SpecFile::Bare(data) => data,
    };
    if let Some(p) = spec.path.as_mut().filter(|p| p.is_relative()) {
        *p = path.parent().unwrap_or(Path::new("")).join(&*p);
    }
    spec.validate()?;
    Ok(spec)
}
