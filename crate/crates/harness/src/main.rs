use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flashwin::ChunkRule;
use flashwin_harness::{
    run_bench, run_check, run_demo, run_traffic, write_bench_csv, BenchOptions, BenchPass,
    CheckOptions, CommonOptions, DemoOptions, HarnessError, List, Result, TrafficOptions,
    DEFAULT_SEED,
};

/// Tiled window attention over a simulated two-level memory: correctness
/// checks, traffic reports, benchmarks and a windowing demo.
#[derive(Debug, Parser)]
#[command(name = "flashwin", version)]
struct Cli {
    /// RNG seed for all generated inputs.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Scratchpad budget per worker, in bytes.
    #[arg(long, global = true, default_value_t = flashwin::DEFAULT_CAPACITY_BYTES)]
    capacity_bytes: usize,
    /// Bytes per element used for footprint accounting.
    #[arg(long, global = true, default_value_t = 4, value_parser = parse_elem_bytes)]
    elem_bytes: usize,
    /// Write the primary output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the correctness grid (oracle, finite differences, traffic, footprint).
    Check(CheckArgs),
    /// Report instrumented traffic and peak scratchpad use for one shape.
    Traffic(TrafficArgs),
    /// Time the registered kernels and emit a CSV table.
    Bench(BenchArgs),
    /// Run flash attention over a windowed image and compare with the reference.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
struct CheckArgs {
    /// Sequence lengths, comma-separated.
    #[arg(long = "L")]
    seq_lens: Option<List<usize>>,
    /// Channel counts, comma-separated.
    #[arg(long = "C")]
    channels: Option<List<usize>>,
    /// Chunk counts (`auto` = C/16), comma-separated.
    #[arg(long = "r")]
    chunks: Option<List<ChunkRule>>,
}

#[derive(Debug, Args)]
struct TrafficArgs {
    #[arg(long = "L", default_value_t = 64)]
    seq_len: usize,
    #[arg(long = "C", default_value_t = 64)]
    channels: usize,
    #[arg(long = "r", default_value = "auto")]
    chunks: ChunkRule,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Batch sizes (windows), comma-separated.
    #[arg(long = "batch", default_value = "16,64")]
    batches: List<usize>,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long = "L", default_value_t = 64)]
    seq_len: usize,
    #[arg(long = "C", default_value = "64,256")]
    channels: List<usize>,
    #[arg(long = "r", default_value = "auto")]
    chunks: ChunkRule,
    /// `fwd`, `fwd_bwd` or `both`.
    #[arg(long, default_value = "fwd")]
    pass: String,
    /// Timed runs per point (median is reported); at least 3.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Kernel names, comma-separated.
    #[arg(long = "impl", default_value = "naive,flash")]
    kernels: List<String>,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long = "H", default_value_t = 224)]
    height: usize,
    #[arg(long = "W", default_value_t = 224)]
    width: usize,
    #[arg(long = "C", default_value_t = 32)]
    channels: usize,
    #[arg(long = "k", default_value_t = 7)]
    k: usize,
    #[arg(long = "r", default_value = "auto")]
    chunks: ChunkRule,
}

fn parse_elem_bytes(s: &str) -> std::result::Result<usize, String> {
    match s {
        "4" => Ok(4),
        "8" => Ok(8),
        other => Err(format!("expected 4 or 8, got `{other}`")),
    }
}

fn parse_passes(s: &str) -> std::result::Result<Vec<BenchPass>, String> {
    if s == "both" {
        return Ok(vec![BenchPass::Fwd, BenchPass::FwdBwd]);
    }
    s.parse().map(|p| vec![p])
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

/// Returns whether every check passed.
fn run(cli: Cli) -> Result<bool> {
    let common = CommonOptions {
        seed: cli.seed,
        capacity_bytes: cli.capacity_bytes,
        elem_bytes: cli.elem_bytes,
    };
    match cli.command {
        Command::Check(a) => {
            let defaults = CheckOptions::default();
            let opts = CheckOptions {
                seq_lens: a.seq_lens.map_or(defaults.seq_lens, |l| l.0),
                channels: a.channels.map_or(defaults.channels, |l| l.0),
                chunks: a.chunks.map_or(defaults.chunks, |l| l.0),
            };
            let report = run_check(&opts, &common)?;
            let mut out = output(&cli.out)?;
            out.write_all(report.table().as_bytes())?;
            out.flush()?;
            Ok(report.all_passed())
        }
        Command::Traffic(a) => {
            let summary = run_traffic(
                &TrafficOptions {
                    seq_len: a.seq_len,
                    channels: a.channels,
                    chunks: a.chunks,
                },
                &common,
            )?;
            print!("{}", summary.text());
            if let Some(path) = &cli.out {
                summary.write_csv(BufWriter::new(File::create(path)?))?;
            }
            Ok(
                summary.forward.peak_sram_bytes == summary.closed_forward_peak
                    && summary.backward.peak_sram_bytes == summary.closed_backward_peak,
            )
        }
        Command::Bench(a) => {
            let rows = run_bench(
                &BenchOptions {
                    batches: a.batches.0,
                    heads: a.heads,
                    seq_len: a.seq_len,
                    channels: a.channels.0,
                    chunks: a.chunks,
                    passes: parse_passes(&a.pass).map_err(HarnessError::Usage)?,
                    repeats: a.repeats,
                    kernels: a.kernels.0,
                },
                &common,
            )?;
            write_bench_csv(&rows, output(&cli.out)?)?;
            Ok(true)
        }
        Command::Demo(a) => {
            let summary = run_demo(
                &DemoOptions {
                    height: a.height,
                    width: a.width,
                    channels: a.channels,
                    k: a.k,
                    chunks: a.chunks,
                },
                &common,
            )?;
            let mut out = output(&cli.out)?;
            out.write_all(summary.text().as_bytes())?;
            out.flush()?;
            Ok(summary.max_oracle_err <= 1e-10 && summary.round_trip_err == 0.0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("flashwin: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
