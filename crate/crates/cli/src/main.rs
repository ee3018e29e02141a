use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod run;
mod sweep;

use run::Failure;

/// Decentralized SGD simulation lab.
#[derive(Parser)]
#[command(name = "consensus-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.jsonl and manifest.json.
    Run {
        config: PathBuf,
        /// Output directory, overriding `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a built-in verification suite.
    Verify {
        /// theorem1 | lemma_c2 | smoothing | props | flatness | all
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for verify_<suite>.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print a gossip matrix and its spectrum as JSON.
    TopologyInfo { kind: String, m: usize },
    /// Run one experiment per value of a config key.
    Sweep {
        config: PathBuf,
        /// `key=v1,v2,...`, with `key` dotted (`trainer.eta`) or a bare key
        /// unique to one section.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("CONSENSUS_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::config(format!("CONSENSUS_LAB_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::internal(e.into()))
}

fn dispatch(cli: Cli) -> Result<u8, Failure> {
    configure_threads()?;
    match cli.command {
        Command::Run { config, out } => run::cmd_run(&config, out.as_deref()),
        Command::Verify { suite, seed, out } => run::cmd_verify(&suite, seed, &out),
        Command::TopologyInfo { kind, m } => run::cmd_topology_info(&kind, m),
        Command::Sweep { config, axis, out } => sweep::cmd_sweep(&config, &axis, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
