use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod error;
mod jobs;
mod manifest;
mod table;

use error::CliError;
use jobs::{Job, Overrides};

#[derive(Parser, Debug)]
#[command(
    name = "bsvie",
    version,
    about = "Linear BSVIE solver with jumps under a change of measure"
)]
struct Cli {
    /// Cap on worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,

    /// Output directory.
    #[arg(long, env = "BSVIE_OUT_DIR", default_value = "bsvie-out")]
    out_dir: PathBuf,

    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute Y, Z, K and write them as CSV.
    Solve(Common),
    /// Simulate paths and check the solution against independent oracles.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Corrupt the analytic Z or K grid before checking.
        #[arg(long, value_enum)]
        inject_fault: Option<jobs::FaultArg>,
        /// Also write the first N simulated paths.
        #[arg(long, value_name = "N")]
        dump_paths: Option<usize>,
    },
    /// Tabulate the resolvent kernel with truncation diagnostics.
    Resolvent(Common),
    /// Sweep the grid size and fit convergence slopes.
    Convergence {
        #[command(flatten)]
        common: Common,
        /// Grid sizes to sweep.
        #[arg(long, value_delimiter = ',', default_value = "50,100,200")]
        levels: Vec<usize>,
        /// Paths per level for the pathwise residual (0 skips it).
        #[arg(long = "residual-paths", default_value_t = 10_000)]
        residual_paths: usize,
    },
    /// Repeat a recorded run and check its outputs are reproduced.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; defaults to `rerun` next to the manifest.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve(c) => jobs::execute(&c.scenario, &c.out_dir, c.overrides, Job::Solve),
        Command::Verify {
            common: c,
            inject_fault,
            dump_paths,
        } => jobs::execute(
            &c.scenario,
            &c.out_dir,
            c.overrides,
            Job::Verify {
                inject_fault,
                dump_paths,
            },
        ),
        Command::Resolvent(c) => {
            jobs::execute(&c.scenario, &c.out_dir, c.overrides, Job::Resolvent)
        }
        Command::Convergence {
            common: c,
            levels,
            residual_paths,
        } => jobs::execute(
            &c.scenario,
            &c.out_dir,
            c.overrides,
            Job::Convergence {
                levels,
                residual_paths,
            },
        ),
        Command::Rerun { manifest, out_dir } => jobs::rerun(&manifest, out_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(cli)),
            Err(e) => Err(CliError::Environment(format!("thread pool: {e}"))),
        },
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
