//! Runs the shards described by a server configuration file.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use ados_core::ado::PluginRegistry;
use ados_proto::{Server, ServerConfig};
use clap::Parser;

#[derive(Parser)]
#[command(about = "Sharded persistent key-value store server")]
struct Args {
    /// Server configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replace the shard list with this many copies of the first shard.
    #[arg(long)]
    shards: Option<usize>,
    /// Abort the process at this durability point (1-based count of
    /// persists across all pools), leaving pool files as they are.
    #[arg(long)]
    crash_point: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::init();
    let args = Args::parse();
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", args.config.display());
            return ExitCode::FAILURE;
        }
    };
    let config = ServerConfig::parse(&text).and_then(|c| match args.shards {
        Some(n) => c.with_shard_count(n),
        None => Ok(c),
    });
    let config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("bad configuration: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Some(n) = args.crash_point {
        ados_core::pmem::set_process_crash_point(n);
    }
    let server = match Server::start(&config, Arc::new(PluginRegistry::builtin())) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("cannot start: {e}");
            return ExitCode::FAILURE;
        }
    };
    for s in &server.shards {
        match s.addr() {
            Some(a) => println!("shard {} listening on {a}", s.id()),
            None => println!("shard {} has no endpoint", s.id()),
        }
    }
    loop {
        std::thread::park();
    }
}
