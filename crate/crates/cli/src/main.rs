use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lakat_cli::dump::{dump_state, verify_dump};
use lakat_cli::{parse_scenario, run};

#[derive(Parser)]
#[command(name = "lakat", version, about = "Run and check Lakat simulator scenarios")]
struct Cli {
    /// Log filter; LAKAT_LOG takes precedence when set.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print its report.
    Run {
        scenario: PathBuf,
        /// Overrides the simulator seed in the scenario.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes the first peer's final state here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Check a directory written by `run --dump`.
    Verify { dump: PathBuf },
}

const FAILED: u8 = 1;
const BAD_INPUT: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = std::env::var("LAKAT_LOG").unwrap_or(cli.log_level);
    env_logger::Builder::new().parse_filters(&filter).format_timestamp(None).init();
    match cli.command {
        Command::Run { scenario, seed, dump } => run_scenario(&scenario, seed, dump),
        Command::Verify { dump } => match verify_dump(&dump) {
            Ok(report) => {
                for line in &report.lines {
                    println!("{line}");
                }
                if report.ok() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(FAILED)
                }
            }
            Err(e) => {
                eprintln!("error: {}: {e}", dump.display());
                ExitCode::from(BAD_INPUT)
            }
        },
    }
}

fn run_scenario(path: &PathBuf, seed: Option<u64>, dump: Option<PathBuf>) -> ExitCode {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(BAD_INPUT);
        }
    };
    let mut scenario = match parse_scenario(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}:{e}", path.display());
            return ExitCode::from(BAD_INPUT);
        }
    };
    if let Some(seed) = seed {
        scenario.sim_config.seed = seed;
    }
    let name = path.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned());
    let (world, report) = run(&scenario, &name);
    print!("{}", report.render());
    if let Some(dir) = dump {
        if let Err(e) = dump_state(world.sim.peers[0].ledger(), &world.bindings, &dir) {
            eprintln!("error: dump to {}: {e}", dir.display());
            return ExitCode::from(BAD_INPUT);
        }
        log::info!("state written to {}", dir.display());
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(FAILED)
    }
}
