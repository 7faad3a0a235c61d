//! `traffic`: instrumented forward/backward runs for one shape, with the
//! closed-form footprints alongside.

use std::fmt::Write as _;
use std::io::Write;

use flashwin::{
    flash_backward, flash_forward, peak_sram_backward, peak_sram_forward, ChunkRule, DenseTensor,
    Rng, ScratchpadArena, TileConfig, TrafficReport,
};

use crate::grid::{positive, require_chunks};
use crate::{CommonOptions, Result};

#[derive(Debug, Clone, Copy)]
pub struct TrafficOptions {
    pub seq_len: usize,
    pub channels: usize,
    pub chunks: ChunkRule,
}

#[derive(Debug, Clone)]
pub struct TrafficSummary {
    pub seq_len: usize,
    pub channels: usize,
    pub chunks: usize,
    pub chunk_width: usize,
    pub elem_bytes: usize,
    pub forward: TrafficReport,
    pub backward: TrafficReport,
    pub closed_forward_peak: usize,
    pub closed_backward_peak: usize,
}

pub fn run_traffic(opts: &TrafficOptions, common: &CommonOptions) -> Result<TrafficSummary> {
    positive("--L", &[opts.seq_len])?;
    positive("--C", &[opts.channels])?;
    let (l, c) = (opts.seq_len, opts.channels);
    let r = require_chunks(opts.chunks, c)?;
    let cfg = TileConfig::new(r, 1.0, common.elem_bytes)?;

    let mut rng = Rng::new(common.seed);
    let mut rand = || DenseTensor::fill_uniform(&mut rng, &[l, c], -1.0, 1.0);
    let (q, k, v, d_out) = (rand()?, rand()?, rand()?, rand()?);

    let mut arena = ScratchpadArena::new(common.capacity_bytes);
    let fwd = flash_forward(&q, &k, &v, &cfg, &mut arena)?;
    let mut arena = ScratchpadArena::new(common.capacity_bytes);
    let bwd = flash_backward(&fwd.context, &d_out, &mut arena)?;

    Ok(TrafficSummary {
        seq_len: l,
        channels: c,
        chunks: r,
        chunk_width: cfg.chunk_width(c)?,
        elem_bytes: common.elem_bytes,
        forward: fwd.report,
        backward: bwd.report,
        closed_forward_peak: peak_sram_forward(l, c, &cfg)?,
        closed_backward_peak: peak_sram_backward(l, c, &cfg)?,
    })
}

fn kb(bytes: usize) -> String {
    format!("{:.3} kB", bytes as f64 / 1000.0)
}

impl TrafficSummary {
    fn passes(&self) -> [(&'static str, &TrafficReport, usize); 2] {
        [
            ("forward", &self.forward, self.closed_forward_peak),
            ("backward", &self.backward, self.closed_backward_peak),
        ]
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "L={} C={} r={} chunk_width={} elem_bytes={}",
            self.seq_len, self.channels, self.chunks, self.chunk_width, self.elem_bytes
        );
        for (name, rep, closed) in self.passes() {
            let _ = writeln!(
                out,
                "{name}: peak scratchpad {} B ({}), closed form {} B{}",
                rep.peak_sram_bytes,
                kb(rep.peak_sram_bytes),
                closed,
                if rep.peak_sram_bytes == closed {
                    ""
                } else {
                    "  MISMATCH"
                }
            );
            for op in rep.operands() {
                let _ = writeln!(
                    out,
                    "  {op:<3} loads {:>10}  stores {:>10}",
                    rep.loads_of(op),
                    rep.stores_of(op)
                );
            }
            let _ = writeln!(
                out,
                "  total {} elements ({} B)",
                rep.total_elements(),
                rep.total_elements() as usize * self.elem_bytes
            );
        }
        out
    }

    /// One row per `(pass, operand)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "pass",
            "operand",
            "loads",
            "stores",
            "bytes",
            "peak_sram_bytes",
        ])?;
        for (name, rep, _) in self.passes() {
            for op in rep.operands() {
                let (loads, stores) = (rep.loads_of(op), rep.stores_of(op));
                let bytes = (loads + stores) as usize * self.elem_bytes;
                w.write_record([
                    name.to_string(),
                    op.to_string(),
                    loads.to_string(),
                    stores.to_string(),
                    bytes.to_string(),
                    rep.peak_sram_bytes.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
