//! Experiment driver: runs one experiment and writes its report.

use std::path::PathBuf;
use std::process::ExitCode;

use ados_bench::report::Report;
use ados_bench::spec::WorkloadSpec;
use ados_bench::{crash, experiments, BenchError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(about = "Benchmarks and crash campaigns for the CDP store")]
struct Args {
    #[command(subcommand)]
    experiment: Experiment,
}

#[derive(clap::Args)]
struct Common {
    /// Workload spec (TOML); defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory for report.json and CSV tables.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Experiment {
    /// Throughput against shard count, with and without replication.
    WriteScaling(Common),
    /// Query latency per quantum size.
    QueryLatency(Common),
    /// Write throughput with a concurrent querying client.
    QueryLoad(Common),
    /// Client and server memory footprint, ADO against Plain-KV.
    Footprint(Common),
    /// Crash injection with recovery checks.
    Crash {
        #[command(flatten)]
        common: Common,
        /// Server binary for process crashes; defaults to the one built
        /// next to this executable.
        #[arg(long)]
        server: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<WorkloadSpec, BenchError> {
    match &common.spec {
        Some(p) => WorkloadSpec::parse(&std::fs::read_to_string(p)?).map_err(BenchError::Spec),
        None => Ok(WorkloadSpec::default()),
    }
}

fn run(args: Args) -> Result<(Report, PathBuf), BenchError> {
    let (report, common) = match &args.experiment {
        Experiment::WriteScaling(c) => (experiments::run_write_scaling(&load(c)?)?, c),
        Experiment::QueryLatency(c) => (experiments::run_query_latency(&load(c)?)?, c),
        Experiment::QueryLoad(c) => (experiments::run_query_under_load(&load(c)?)?, c),
        Experiment::Footprint(c) => (experiments::run_footprint(&load(c)?)?, c),
        Experiment::Crash { common, server } => {
            let bin = server.clone().or_else(crash::sibling_server);
            (crash::run_crash_campaign(&load(common)?, bin.as_deref())?, common)
        }
    };
    Ok((report, common.out.clone()))
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Args::parse()) {
        Ok((report, out)) => {
            if let Err(e) = report.write(&out) {
                eprintln!("cannot write report to {}: {e}", out.display());
                return ExitCode::FAILURE;
            }
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
