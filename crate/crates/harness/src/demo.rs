//! `demo`: partition random `H×W×C` images into windows, run flash attention
//! over every window as one batch, reverse the output back to image layout and
//! compare against per-window reference attention.

use std::fmt::Write as _;

use flashwin::{
    batched_flash_forward, max_abs_diff, naive_forward, window_partition, window_reverse,
    AttnParams, ChunkRule, DenseTensor, Error, Rng, TileConfig, TrafficReport, WindowConfig,
};

use crate::grid::require_chunks;
use crate::{CommonOptions, HarnessError, Result};

#[derive(Debug, Clone, Copy)]
pub struct DemoOptions {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub k: usize,
    pub chunks: ChunkRule,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self {
            height: 224,
            width: 224,
            channels: 32,
            k: 7,
            chunks: ChunkRule::Auto,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DemoSummary {
    pub windows: usize,
    pub seq_len: usize,
    pub channels: usize,
    pub chunks: usize,
    /// Image-space max |flash − reference|.
    pub max_oracle_err: f64,
    /// `max |reverse(partition(Q)) − Q|`; exactly zero for a bijection.
    pub round_trip_err: f64,
    pub report: TrafficReport,
}

impl DemoSummary {
    pub fn text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "windows={} L={} C={} r={}",
            self.windows, self.seq_len, self.channels, self.chunks
        );
        let _ = writeln!(out, "max |flash - reference| = {:.3e}", self.max_oracle_err);
        let _ = writeln!(out, "window round-trip error = {:.3e}", self.round_trip_err);
        let _ = writeln!(
            out,
            "global traffic: {} loads, {} stores; peak scratchpad {} B per worker",
            self.report.total_loads(),
            self.report.total_stores(),
            self.report.peak_sram_bytes
        );
        out
    }
}

pub fn run_demo(opts: &DemoOptions, common: &CommonOptions) -> Result<DemoSummary> {
    let win =
        WindowConfig::new(opts.height, opts.width, opts.channels, opts.k).map_err(|e| match e {
            Error::Partition { .. } | Error::InvalidShape { .. } => {
                HarnessError::Usage(e.to_string())
            }
            other => other.into(),
        })?;
    let (n, l, c) = (win.num_windows(), win.seq_len(), opts.channels);
    let r = require_chunks(opts.chunks, c)?;
    let cfg = TileConfig::new(r, 1.0, common.elem_bytes)?;

    let mut rng = Rng::new(common.seed);
    let image = [opts.height, opts.width, c];
    let mut rand = || DenseTensor::fill_uniform(&mut rng, &image, -1.0, 1.0);
    let (q, k, v) = (rand()?, rand()?, rand()?);

    let windows = |x: &DenseTensor| window_partition(x, &win);
    let (qw, kw, vw) = (windows(&q)?, windows(&k)?, windows(&v)?);
    let round_trip_err = max_abs_diff(&window_reverse(&qw, &win)?, &q)?;

    let as_heads = |x: &DenseTensor| x.clone().reshape(&[n, 1, l, c]);
    let fwd = batched_flash_forward(
        &as_heads(&qw)?,
        &as_heads(&kw)?,
        &as_heads(&vw)?,
        &cfg,
        common.capacity_bytes,
    )?;
    let flash_image = window_reverse(&fwd.output.reshape(&[n, l, c])?, &win)?;

    let (qs, ks, vs) = (
        qw.matrix_slices()?,
        kw.matrix_slices()?,
        vw.matrix_slices()?,
    );
    let params = AttnParams::default();
    let reference = (0..n)
        .map(|i| naive_forward(&qs[i], &ks[i], &vs[i], &params).map(|(o, _)| o))
        .collect::<flashwin::Result<Vec<_>>>()?;
    let reference_image = window_reverse(&DenseTensor::stack(&[n], &reference)?, &win)?;

    Ok(DemoSummary {
        windows: n,
        seq_len: l,
        channels: c,
        chunks: r,
        max_oracle_err: max_abs_diff(&flash_image, &reference_image)?,
        round_trip_err,
        report: fwd.report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window() {
        let s = run_demo(
            &DemoOptions {
                height: 7,
                width: 7,
                channels: 16,
                k: 7,
                chunks: ChunkRule::Fixed(4),
            },
            &CommonOptions::default(),
        )
        .unwrap();
        assert_eq!((s.windows, s.seq_len), (1, 49));
        assert!(s.max_oracle_err <= 1e-10);
        assert_eq!(s.round_trip_err, 0.0);
        assert_eq!(s.report.total_loads(), 3 * 49 * 16);
    }

    #[test]
    fn full_resolution_image() {
        let s = run_demo(&DemoOptions::default(), &CommonOptions::default()).unwrap();
        assert_eq!((s.windows, s.seq_len, s.chunks), (1024, 49, 2));
        assert!(s.max_oracle_err <= 1e-10, "{}", s.max_oracle_err);
        assert_eq!(s.round_trip_err, 0.0);
        assert_eq!(s.report.total_stores(), 1024 * 49 * 32);
        assert!(s.text().contains("windows=1024 L=49 C=32 r=2"));
    }

    #[test]
    fn indivisible_image_is_usage_error() {
        let err = run_demo(
            &DemoOptions {
                height: 10,
                ..Default::default()
            },
            &CommonOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
