//! Command-line harness around `flashwin`: correctness checks, traffic and
//! footprint reports, benchmark CSV tables and an end-to-end windowing demo.
//!
//! Each subcommand is a plain function returning structured results, so the
//! binary in `main.rs` only parses flags, formats output and picks the exit
//! code.

pub mod bench;
pub mod check;
pub mod demo;
pub mod grid;
pub mod traffic;

use thiserror::Error;

pub use bench::{run_bench, write_bench_csv, BenchOptions, BenchPass, BenchRow, BENCH_HEADER};
pub use check::{run_check, CheckOptions, CheckReport, SuiteResult};
pub use demo::{run_demo, DemoOptions, DemoSummary};
pub use grid::List;
pub use traffic::{run_traffic, TrafficOptions, TrafficSummary};

/// Seed used when none is given on the command line.
pub const DEFAULT_SEED: u64 = 42;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommonOptions {
    pub seed: u64,
    pub capacity_bytes: usize,
    pub elem_bytes: usize,
}

impl Default for CommonOptions {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            capacity_bytes: flashwin::DEFAULT_CAPACITY_BYTES,
            elem_bytes: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Kernel(#[from] flashwin::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
