use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use layerfuse::app::{self, Failure, RunConfig, EXIT_PARSE};

/// Cross-layer fusion planner, kernel generator and verifier.
#[derive(Parser)]
#[command(name = "layerfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect fusion blocks and write one plan file per fused block.
    Plan(Common),
    /// Evaluate every tiling candidate and write the tables and best plans.
    Tune(Common),
    /// Emit kernel, host and manifest files for every plan.
    Codegen(Common),
    /// Run the fused schedule against the reference executor.
    Simulate(Common),
    /// Print the fused/unfused store-transaction and time table.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    device: PathBuf,
    /// Plan file, or a directory of `*.plan` files.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Relative tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Force one tile size for every block instead of tuning.
    #[arg(long, value_name = "HxW", value_parser = app::parse_tile)]
    tile: Option<(usize, usize)>,
    /// Execute tiles in reverse order.
    #[arg(long)]
    reverse_tiles: bool,
    /// Weight manifest written by `--save-weights`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Also write the weights used to the output directory.
    #[arg(long)]
    save_weights: bool,
}

impl From<Common> for RunConfig {
    fn from(c: Common) -> Self {
        RunConfig {
            graph: c.graph,
            device: c.device,
            plan: c.plan,
            seed: c.seed,
            tol: c.tol,
            out: c.out,
            tile: c.tile,
            reverse_tiles: c.reverse_tiles,
            weights: c.weights,
            save_weights: c.save_weights,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_PARSE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Plan(c) => app::cmd_plan(&c.into()),
        Command::Tune(c) => app::cmd_tune(&c.into()),
        Command::Codegen(c) => app::cmd_codegen(&c.into()),
        Command::Simulate(c) => app::cmd_simulate(&c.into()),
        Command::Report(c) => app::cmd_report(&c.into()),
    };
    match result {
        Ok(o) => {
            for w in &o.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", o.text);
            ExitCode::SUCCESS
        }
        Err(e) => report(&e),
    }
}

fn report(e: &Failure) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code())
}
