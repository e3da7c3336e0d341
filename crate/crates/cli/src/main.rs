use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use surprisenet_cli::{BaselineKind, CliError, RunConfig, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "surprisenet", version, about = "Replay-free class-incremental learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON file with run settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

impl Common {
    fn merged(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        c.overlay(&self.run);
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate on a class-incremental scenario
    Run(Common),
    /// Run the naive or joint reference strategy
    Baseline {
        /// naive | joint
        kind: String,
        #[command(flatten)]
        common: Common,
    },
    /// Repeat a run for several seeds and aggregate
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Sweep a baseline instead of the main method
        #[arg(long)]
        baseline: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Describe a checkpoint file
    Inspect { checkpoint: PathBuf },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(common) => surprisenet_cli::cmd_run(&common.merged()?).map(drop),
        Command::Baseline { kind, common } => {
            let kind: BaselineKind = kind.parse()?;
            surprisenet_cli::cmd_baseline(&common.merged()?, kind).map(drop)
        }
        Command::Sweep { seeds, baseline, common } => {
            let baseline = baseline.map(|b| b.parse::<BaselineKind>()).transpose()?;
            surprisenet_cli::cmd_sweep(&common.merged()?, &seeds, baseline).map(drop)
        }
        Command::Inspect { checkpoint } => {
            print!("{}", surprisenet_cli::cmd_inspect(&checkpoint)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("surprisenet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
