//! `bench`: median-of-repeats timings of the registered kernels over
//! `batch × heads × L × C` inputs, emitted as CSV.
//!
//! Timings are desk-CPU numbers and are reported, never asserted.

use std::io::Write;
use std::time::Instant;

use flashwin::{
    batched_backward, batched_forward, AttentionKernel, AttnParams, ChunkRule, DenseTensor,
    KernelRegistry, KernelSettings, Rng,
};
use serde::{Deserialize, Serialize};

use crate::grid::{positive, require_chunks};
use crate::{CommonOptions, HarnessError, Result};

pub const BENCH_HEADER: &str =
    "batch,heads,L,C,r,impl,pass,elapsed_ns,peak_sram_bytes,total_global_elements";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPass {
    Fwd,
    FwdBwd,
}

impl std::str::FromStr for BenchPass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fwd" => Ok(BenchPass::Fwd),
            "fwd_bwd" => Ok(BenchPass::FwdBwd),
            other => Err(format!("expected `fwd` or `fwd_bwd`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for BenchPass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchPass::Fwd => "fwd",
            BenchPass::FwdBwd => "fwd_bwd",
        })
    }
}

/// One CSV row. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRow {
    /// Number of windows (sequences after partition), not the image batch.
    pub batch: usize,
    pub heads: usize,
    #[serde(rename = "L")]
    pub seq_len: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    pub r: usize,
    #[serde(rename = "impl")]
    pub kernel: String,
    pub pass: BenchPass,
    pub elapsed_ns: u64,
    pub peak_sram_bytes: usize,
    pub total_global_elements: u64,
}

impl BenchRow {
    fn sort_key(&self) -> (usize, usize, usize, usize, usize, &str, BenchPass) {
        (
            self.batch,
            self.heads,
            self.seq_len,
            self.channels,
            self.r,
            &self.kernel,
            self.pass,
        )
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub batches: Vec<usize>,
    pub heads: usize,
    pub seq_len: usize,
    pub channels: Vec<usize>,
    pub chunks: ChunkRule,
    pub passes: Vec<BenchPass>,
    pub repeats: usize,
    pub kernels: Vec<String>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            batches: vec![16, 64],
            heads: 4,
            seq_len: 64,
            channels: vec![64, 256],
            chunks: ChunkRule::Auto,
            passes: vec![BenchPass::Fwd],
            repeats: 3,
            kernels: vec!["naive".into(), "flash".into()],
        }
    }
}

fn median(mut samples: Vec<u64>) -> u64 {
    samples.sort_unstable();
    let mid = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        (samples[mid - 1] + samples[mid]) / 2
    }
}

struct Inputs {
    q: DenseTensor,
    k: DenseTensor,
    v: DenseTensor,
    d_out: DenseTensor,
}

/// One full pass; returns `(peak_sram_bytes, total_global_elements)`.
fn execute(
    kernel: &dyn AttentionKernel,
    x: &Inputs,
    pass: BenchPass,
    capacity: usize,
) -> Result<(usize, u64)> {
    let fwd = batched_forward(kernel, &x.q, &x.k, &x.v, capacity)?;
    let (mut peak, mut elements) = (fwd.report.peak_sram_bytes, fwd.report.total_elements());
    if pass == BenchPass::FwdBwd {
        let bwd = batched_backward(kernel, &fwd.saved, &x.d_out, capacity)?;
        peak = peak.max(bwd.report.peak_sram_bytes);
        elements += bwd.report.total_elements();
    }
    Ok((peak, elements))
}

pub fn run_bench(opts: &BenchOptions, common: &CommonOptions) -> Result<Vec<BenchRow>> {
    if opts.repeats < 3 {
        return Err(HarnessError::Usage(format!(
            "--repeats must be >= 3, got {}",
            opts.repeats
        )));
    }
    positive("--batch", &opts.batches)?;
    positive("--C", &opts.channels)?;
    positive("--heads", &[opts.heads])?;
    positive("--L", &[opts.seq_len])?;
    if opts.passes.is_empty() || opts.kernels.is_empty() {
        return Err(HarnessError::Usage(
            "need at least one --pass and one --impl".into(),
        ));
    }

    let registry = KernelRegistry::with_builtins(KernelSettings {
        params: AttnParams::default(),
        chunks: opts.chunks,
        elem_bytes: common.elem_bytes,
    });
    let kernels = opts
        .kernels
        .iter()
        .map(|name| {
            registry.get(name).map_err(|_| {
                HarnessError::Usage(format!(
                    "unknown --impl `{name}` (available: {})",
                    registry.names().join(", ")
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let chunks = opts
        .channels
        .iter()
        .map(|&c| require_chunks(opts.chunks, c))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = Rng::new(common.seed);
    let mut rows = Vec::new();
    for &batch in &opts.batches {
        for (&c, &r) in opts.channels.iter().zip(&chunks) {
            let shape = [batch, opts.heads, opts.seq_len, c];
            let mut rand = || DenseTensor::fill_uniform(&mut rng, &shape, -1.0, 1.0);
            let inputs = Inputs {
                q: rand()?,
                k: rand()?,
                v: rand()?,
                d_out: rand()?,
            };
            for kernel in &kernels {
                for &pass in &opts.passes {
                    // Warm-up, also the source of the traffic figures.
                    let (peak, elements) =
                        execute(kernel.as_ref(), &inputs, pass, common.capacity_bytes)?;
                    let mut samples = Vec::with_capacity(opts.repeats);
                    for _ in 0..opts.repeats {
                        let start = Instant::now();
                        execute(kernel.as_ref(), &inputs, pass, common.capacity_bytes)?;
                        samples.push((start.elapsed().as_nanos() as u64).max(1));
                    }
                    rows.push(BenchRow {
                        batch,
                        heads: opts.heads,
                        seq_len: opts.seq_len,
                        channels: c,
                        r,
                        kernel: kernel.name().to_string(),
                        pass,
                        elapsed_ns: median(samples),
                        peak_sram_bytes: peak,
                        total_global_elements: elements,
                    });
                }
            }
        }
    }
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(BENCH_HEADER.split(','))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
