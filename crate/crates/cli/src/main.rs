use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use northcape::ntlb::{InjectedBug, NtlbConfig};
use northcape_cli::fuzz::{self, FuzzConfig};
use northcape_cli::scenario::{self, RunOptions, Scenario};

#[derive(Parser)]
#[command(name = "northcape", version, about = "Northcape capability machine emulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone, Default)]
struct CacheArgs {
    /// L1 entries per cache (instruction and data).
    #[arg(long)]
    l1_size: Option<usize>,
    /// Total L2 entries.
    #[arg(long)]
    l2_size: Option<usize>,
    #[arg(long)]
    l2_assoc: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario script and print its trace.
    Run {
        scenario: PathBuf,
        /// Resolve every access through the table.
        #[arg(long)]
        no_cache: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[arg(long)]
        spin_limit: Option<u32>,
        #[command(flatten)]
        cache: CacheArgs,
    },
    /// Run a scenario and print only its counters.
    Stats {
        scenario: PathBuf,
        #[arg(long)]
        no_cache: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cache: CacheArgs,
    },
    /// Differential fuzzing of the cached and uncached resolvers.
    Fuzz {
        #[arg(long, default_value_t = fuzz::DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = fuzz::DEFAULT_STEPS)]
        steps: u64,
        /// Plant the skipped-taint bug in the cached machine.
        #[arg(long)]
        inject_bug: bool,
        #[command(flatten)]
        cache: CacheArgs,
    },
}

fn ntlb(c: &CacheArgs) -> NtlbConfig {
    let d = NtlbConfig::default();
    NtlbConfig {
        l1_instruction: c.l1_size.unwrap_or(d.l1_instruction),
        l1_data: c.l1_size.unwrap_or(d.l1_data),
        l2_entries: c.l2_size.unwrap_or(d.l2_entries),
        l2_assoc: c.l2_assoc.unwrap_or(d.l2_assoc),
    }
}

fn run_scenario(path: &Path, opts: &RunOptions) -> Result<scenario::RunReport, ExitCode> {
    let s = Scenario::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })?;
    scenario::run(&s, opts).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { scenario, no_cache, seed, trace_out, spin_limit, cache } => {
            let opts = RunOptions {
                no_cache,
                seed,
                l1_size: cache.l1_size,
                l2_size: cache.l2_size,
                l2_assoc: cache.l2_assoc,
                spin_limit,
            };
            let report = match run_scenario(&scenario, &opts) {
                Ok(r) => r,
                Err(code) => return code,
            };
            match trace_out {
                Some(p) => {
                    if let Err(e) = std::fs::write(&p, &report.trace) {
                        eprintln!("error: {}: {e}", p.display());
                        return ExitCode::from(2);
                    }
                }
                None => print!("{}", report.trace),
            }
            for f in &report.failures {
                eprintln!("FAIL {f}");
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Cmd::Stats { scenario, no_cache, seed, cache } => {
            let opts = RunOptions {
                no_cache,
                seed,
                l1_size: cache.l1_size,
                l2_size: cache.l2_size,
                l2_assoc: cache.l2_assoc,
                spin_limit: None,
            };
            match run_scenario(&scenario, &opts) {
                Ok(r) => {
                    print!("{}", r.stats);
                    for f in &r.failures {
                        eprintln!("FAIL {f}");
                    }
                    if r.passed() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(code) => code,
            }
        }
        Cmd::Fuzz { seed, steps, inject_bug, cache } => {
            let cfg = FuzzConfig {
                seed,
                steps,
                ntlb: ntlb(&cache),
                bug: inject_bug.then_some(InjectedBug::SkipGlobalTaint),
                ..FuzzConfig::default()
            };
            if let Err(e) = cfg.ntlb.validate() {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
            let r = fuzz::run(&cfg);
            print!("{r}");
            if r.clean() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
