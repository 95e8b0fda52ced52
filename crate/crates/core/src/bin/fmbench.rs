use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fmtree::bench::{self, BenchConfig, CostWeights, ReportFormat, VerifyConfig};

#[derive(Parser)]
#[command(name = "fmbench", about = "Flash-tree erase benchmark and differential checker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-tree erase experiment and emit a report.
    Run(RunArgs),
    /// Run the differential suite against the reference map.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    trials: usize,
    #[arg(long, default_value_t = 1000)]
    baseline_inserts: usize,
    #[arg(long, default_value_t = 10_000)]
    ops: usize,
    #[arg(long, default_value_t = 0.5)]
    insert_fraction: f64,
    #[arg(long, default_value_t = 8)]
    q: u32,
    #[arg(long, default_value_t = 4096)]
    blocks: usize,
    #[arg(long, default_value_t = 16)]
    slots_per_node: usize,
    #[arg(long, default_value_t = 32)]
    key_bits: u32,
    #[arg(long, default_value_t = 32)]
    payload_bits: u32,
    #[arg(long, default_value_t = 0.25)]
    gc_fraction: f64,
    #[arg(long)]
    always_erase_on_rewrite: bool,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 10_000)]
    ops: usize,
}

fn run(args: RunArgs) -> ExitCode {
    let config = BenchConfig {
        seed: args.seed,
        baseline_inserts: args.baseline_inserts,
        mixed_ops: args.ops,
        trials: args.trials,
        insert_fraction: args.insert_fraction,
        q: args.q,
        blocks: args.blocks,
        slots_per_node: args.slots_per_node,
        key_bits: args.key_bits,
        payload_bits: args.payload_bits,
        gc_barren_fraction: args.gc_fraction,
        always_erase_on_rewrite: args.always_erase_on_rewrite,
        format: args.format,
        weights: CostWeights::default(),
    };
    if let Err(e) = config.validate() {
        eprintln!("fmbench: {e}");
        return ExitCode::from(2);
    }
    let report = match bench::run_experiment(&config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("fmbench: {e}");
            return ExitCode::from(1);
        }
    };
    let written = match &args.out {
        Some(path) => bench::write_report(&report, config.format, path),
        None => bench::emit_report(&report, config.format, io::stdout().lock()),
    };
    match written {
        Ok(()) => {
            let m = &report.means;
            eprintln!(
                "mean erases fm={} baseline={} erase_ratio={:.2} read_ratio={:.3}",
                m.fm.block_erases, m.baseline.block_erases, m.erase_ratio, m.read_ratio
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("fmbench: {e}");
            ExitCode::from(1)
        }
    }
}

fn verify(args: VerifyArgs) -> ExitCode {
    let config = VerifyConfig {
        seed: args.seed,
        seeds: args.seeds,
        ops: args.ops,
        ..VerifyConfig::default()
    };
    let mut failed = 0;
    for r in bench::run_verify(&config) {
        match &r.verdict.first_divergence {
            None => println!("seed {} {:?}: pass", r.seed, r.kind),
            Some(d) => {
                failed += 1;
                println!(
                    "seed {} {:?}: FAIL at op {} expected {:?} got {:?}",
                    r.seed, r.kind, d.op_index, d.expected, d.actual
                );
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run(args),
        Command::Verify(args) => verify(args),
    }
}
