use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand};

use cds_cli::{cmd_check_backend, cmd_compare, cmd_edit, cmd_source, cmd_sweep, parse_values, CliError, RunArgs};
use cds_core::SweepAxis;

/// Latent image editing by concept distillation sampling.
#[derive(Debug, Parser)]
#[command(name = "cds", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Run-config JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Source latent (CDST), or an image when the backend is remote.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Output directory; overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Bridge URL; overrides backend.url.
    #[arg(long, env = "CDS_BACKEND_URL")]
    backend_url: Option<String>,
    /// Write per-step gradients as CDST files.
    #[arg(long)]
    dump_gradients: bool,
}

impl From<CommonArgs> for RunArgs {
    fn from(a: CommonArgs) -> Self {
        RunArgs {
            config: a.config,
            source: a.source,
            out: a.out,
            backend_url: a.backend_url,
            dump_gradients: a.dump_gradients,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Edit a source latent and write the result, trace and summary.
    Edit(CommonArgs),
    /// Run one edit per value of a hyperparameter and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// eta, tau, patch or lr.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. 0.01,0.05,1,5,10.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        /// Run sweep cells concurrently.
        #[arg(long)]
        concurrent: bool,
    },
    /// Run the sds, dds and cds objectives with identical seeds.
    Compare(CommonArgs),
    /// Check a bridge: health, condition registration and a zero-latent predict.
    CheckBackend {
        #[arg(long, env = "CDS_BACKEND_URL")]
        backend_url: Option<String>,
    },
    /// Write the analytic backend's source concept mean as a CDST file.
    Source {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Edit(a) => cmd_edit(&a.into()).map(|dir| format!("ok out={}", dir.display())),
        Command::Compare(a) => cmd_compare(&a.into()).map(|dir| format!("ok out={}", dir.display())),
        Command::Sweep {
            common,
            axis,
            values,
            concurrent,
        } => {
            let values = parse_values(&values)?;
            cmd_sweep(&common.into(), axis, &values, concurrent).map(|p| format!("ok report={}", p.display()))
        }
        Command::CheckBackend { backend_url } => cmd_check_backend(backend_url.as_deref()),
        Command::Source { config, out } => cmd_source(&config, &out).map(|p| format!("ok source={}", p.display())),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("usage error").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::config(format!("usage: {first}")));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
