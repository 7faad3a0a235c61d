//! `check`: oracle, gradient, round-trip, traffic and occupancy checks over a
//! shape grid.

use std::fmt::Write as _;
use std::time::Instant;

use flashwin::{
    finite_diff_grad, flash_backward, flash_forward, max_abs_diff, naive_backward, naive_forward,
    peak_sram_backward, peak_sram_forward, window_partition, window_reverse, AttnGrads, AttnParams,
    ChunkRule, DenseTensor, Rng, ScratchpadArena, TileConfig, TrafficReport, WindowConfig,
};
use rayon::prelude::*;

use crate::grid::{positive, resolve_chunks};
use crate::{CommonOptions, Result};

pub const ORACLE_TOL: f64 = 1e-10;
pub const FD_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
/// Finite differences cost O(L·C) forward passes; only small cases get them.
const FD_MAX_ELEMENTS: usize = 256;

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub seq_lens: Vec<usize>,
    pub channels: Vec<usize>,
    pub chunks: Vec<ChunkRule>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seq_lens: vec![1, 2, 8, 49, 64],
            channels: vec![16, 32, 64],
            chunks: vec![
                ChunkRule::Fixed(1),
                ChunkRule::Fixed(2),
                ChunkRule::Fixed(4),
                ChunkRule::Auto,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub case_id: String,
    /// Largest flash-vs-reference deviation over O, dQ, dK, dV and the
    /// window round trip.
    pub max_err: f64,
    /// Largest flash-vs-finite-difference gradient deviation, when computed.
    pub fd_err: Option<f64>,
    pub traffic_ok: bool,
    pub sram_ok: bool,
    pub elapsed_ns: u64,
    pub passed: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub results: Vec<SuiteResult>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SuiteResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    /// Fixed-width table. Timings are left out so the text depends only on
    /// seed and grid.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<18} {:<6} {:>10} {:>10} {:<8} {:<6} note",
            "case", "status", "max_err", "fd_err", "traffic", "sram"
        );
        for r in &self.results {
            let fd = r
                .fd_err
                .map_or_else(|| "-".to_string(), |e| format!("{e:.2e}"));
            let _ = writeln!(
                out,
                "{:<18} {:<6} {:>10.2e} {:>10} {:<8} {:<6} {}",
                r.case_id,
                if r.passed { "PASS" } else { "FAIL" },
                r.max_err,
                fd,
                if r.traffic_ok { "ok" } else { "BAD" },
                if r.sram_ok { "ok" } else { "BAD" },
                r.note
            );
        }
        let failed = self.failures().count();
        let _ = writeln!(
            out,
            "{} cases, {} passed, {failed} failed",
            self.results.len(),
            self.results.len() - failed
        );
        out
    }
}

struct CaseSpec {
    l: usize,
    c: usize,
    r: usize,
    seed: u64,
}

fn expand_grid(opts: &CheckOptions, seed: u64) -> Result<Vec<CaseSpec>> {
    positive("--L", &opts.seq_lens)?;
    positive("--C", &opts.channels)?;
    let mut rng = Rng::new(seed);
    let mut cases = Vec::new();
    for &l in &opts.seq_lens {
        for &c in &opts.channels {
            let mut rs = Vec::new();
            for &rule in &opts.chunks {
                if let Some(r) = resolve_chunks(rule, c)? {
                    rs.push(r);
                }
            }
            rs.sort_unstable();
            rs.dedup();
            for r in rs {
                cases.push(CaseSpec {
                    l,
                    c,
                    r,
                    seed: rng.next_u64(),
                });
            }
        }
    }
    Ok(cases)
}

/// Runs every case of the grid. Cases run concurrently; results keep grid order.
pub fn run_check(opts: &CheckOptions, common: &CommonOptions) -> Result<CheckReport> {
    let cases = expand_grid(opts, common.seed)?;
    let results = cases
        .par_iter()
        .map(|case| run_case(case, common))
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckReport { results })
}

fn grads_err(a: &AttnGrads, b: &AttnGrads) -> flashwin::Result<f64> {
    Ok(max_abs_diff(&a.dq, &b.dq)?
        .max(max_abs_diff(&a.dk, &b.dk)?)
        .max(max_abs_diff(&a.dv, &b.dv)?))
}

fn forward_traffic_exact(rep: &TrafficReport, lc: u64) -> bool {
    ["Q", "K", "V"].iter().all(|n| rep.loads_of(n) == lc)
        && rep.stores_of("O") == lc
        && rep.total_elements() == 4 * lc
}

fn backward_traffic_exact(rep: &TrafficReport, lc: u64) -> bool {
    rep.loads_of("Q") == 2 * lc
        && rep.loads_of("K") == 2 * lc
        && rep.loads_of("V") == lc
        && rep.loads_of("dO") == lc
        && ["dQ", "dK", "dV"].iter().all(|n| rep.stores_of(n) == lc)
        && rep.total_elements() == 9 * lc
}

/// Window round trip on a 2×3-window image when `L` is a perfect square.
fn round_trip_err(l: usize, c: usize, rng: &mut Rng) -> flashwin::Result<Option<f64>> {
    let k = (l as f64).sqrt().round() as usize;
    if k * k != l {
        return Ok(None);
    }
    let cfg = WindowConfig::new(2 * k, 3 * k, c, k)?;
    let x = DenseTensor::fill_uniform(rng, &[2 * k, 3 * k, c], -1.0, 1.0)?;
    let back = window_reverse(&window_partition(&x, &cfg)?, &cfg)?;
    Ok(Some(max_abs_diff(&x, &back)?))
}

fn run_case(case: &CaseSpec, common: &CommonOptions) -> Result<SuiteResult> {
    let start = Instant::now();
    let (l, c) = (case.l, case.c);
    let case_id = format!("L{l}-C{c}-r{}", case.r);
    let mut rng = Rng::new(case.seed);
    let mut rand = || DenseTensor::fill_uniform(&mut rng, &[l, c], -1.0, 1.0);
    let (q, k, v, d_out) = (rand()?, rand()?, rand()?, rand()?);
    let params = AttnParams::default();
    let cfg = TileConfig::new(case.r, params.scale, common.elem_bytes)?;
    let fwd_peak = peak_sram_forward(l, c, &cfg)?;
    let bwd_peak = peak_sram_backward(l, c, &cfg)?;

    let (o, cache) = naive_forward(&q, &k, &v, &params)?;
    let mut notes = Vec::new();
    let mut max_err = 0.0f64;
    let mut fd_err = None;
    let mut traffic_ok = true;
    let mut sram_ok = true;

    let mut arena = ScratchpadArena::new(common.capacity_bytes);
    let fwd = flash_forward(&q, &k, &v, &cfg, &mut arena);
    match fwd {
        Err(e) if e.is_capacity() => {
            // Expected only when the closed form says it cannot fit.
            sram_ok = fwd_peak > common.capacity_bytes;
            notes.push(format!(
                "expected capacity error ({fwd_peak} B > {} B)",
                common.capacity_bytes
            ));
        }
        Err(e) => return Err(e.into()),
        Ok(fwd) => {
            if fwd_peak > common.capacity_bytes {
                sram_ok = false;
                notes.push("forward ran past the scratchpad budget".into());
            }
            max_err = max_err.max(max_abs_diff(&fwd.output, &o)?);
            traffic_ok &= forward_traffic_exact(&fwd.report, (l * c) as u64);
            sram_ok &= arena.peak_bytes() == fwd_peak;

            let mut arena = ScratchpadArena::new(common.capacity_bytes);
            match flash_backward(&fwd.context, &d_out, &mut arena) {
                Err(e) if e.is_capacity() => {
                    sram_ok &= bwd_peak > common.capacity_bytes;
                    notes.push(format!(
                        "expected backward capacity error ({bwd_peak} B > {} B)",
                        common.capacity_bytes
                    ));
                }
                Err(e) => return Err(e.into()),
                Ok(bwd) => {
                    let naive = naive_backward(&q, &k, &v, &cache, &d_out, &params)?;
                    max_err = max_err.max(grads_err(&bwd.grads, &naive)?);
                    traffic_ok &= backward_traffic_exact(&bwd.report, (l * c) as u64);
                    sram_ok &= arena.peak_bytes() == bwd_peak;
                    if l * c <= FD_MAX_ELEMENTS {
                        let loss = |q: &DenseTensor, k: &DenseTensor, v: &DenseTensor| {
                            naive_forward(q, k, v, &params)?.0.dot(&d_out)
                        };
                        let numeric = AttnGrads {
                            dq: finite_diff_grad(|x| loss(x, &k, &v), &q, FD_STEP)?,
                            dk: finite_diff_grad(|x| loss(&q, x, &v), &k, FD_STEP)?,
                            dv: finite_diff_grad(|x| loss(&q, &k, x), &v, FD_STEP)?,
                        };
                        fd_err = Some(grads_err(&bwd.grads, &numeric)?);
                    }
                }
            }
        }
    }

    if let Some(err) = round_trip_err(l, c, &mut rng)? {
        max_err = max_err.max(err);
        if err == 0.0 {
            notes.push("window round trip exact".into());
        } else {
            notes.push(format!("window round trip off by {err:e}"));
        }
    }

    let passed =
        max_err <= ORACLE_TOL && fd_err.is_none_or(|e| e <= FD_TOL) && traffic_ok && sram_ok;
    Ok(SuiteResult {
        case_id,
        max_err,
        fd_err,
        traffic_ok,
        sram_ok,
        elapsed_ns: start.elapsed().as_nanos().max(1) as u64,
        passed,
        note: notes.join("; "),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CheckOptions {
        CheckOptions {
            seq_lens: vec![1, 4, 9],
            channels: vec![4, 16],
            chunks: vec![ChunkRule::Fixed(1), ChunkRule::Fixed(2), ChunkRule::Auto],
        }
    }

    #[test]
    fn small_grid_passes_and_dedups() {
        let report = run_check(&small(), &CommonOptions::default()).unwrap();
        let ids: Vec<&str> = report.results.iter().map(|r| r.case_id.as_str()).collect();
        assert_eq!(ids.len(), 3 * (2 + 2));
        assert!(ids.contains(&"L9-C16-r1"));
        let mut unique = ids.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), ids.len());
        assert!(report.all_passed(), "{}", report.table());
    }

    #[test]
    fn oversized_window_is_an_expected_pass() {
        let opts = CheckOptions {
            seq_lens: vec![1024],
            channels: vec![32],
            chunks: vec![ChunkRule::Auto],
        };
        let report = run_check(&opts, &CommonOptions::default()).unwrap();
        let r = &report.results[0];
        assert!(r.passed, "{}", report.table());
        assert!(r.note.contains("expected capacity error"));
    }

    #[test]
    fn tiny_budget_fails_backward_but_not_forward() {
        // L=8, C=4, r=1: forward 512 B, backward 768 B at fp32.
        let opts = CheckOptions {
            seq_lens: vec![8],
            channels: vec![4],
            chunks: vec![ChunkRule::Fixed(1)],
        };
        let common = CommonOptions {
            capacity_bytes: 600,
            ..Default::default()
        };
        let report = run_check(&opts, &common).unwrap();
        let r = &report.results[0];
        assert!(r.passed);
        assert!(r.note.contains("backward capacity error"));
        assert!(r.fd_err.is_none());
    }

    #[test]
    fn deterministic_table() {
        let a = run_check(&small(), &CommonOptions::default())
            .unwrap()
            .table();
        let b = run_check(&small(), &CommonOptions::default())
            .unwrap()
            .table();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_grid_is_vacuous_pass() {
        let opts = CheckOptions {
            seq_lens: vec![],
            ..Default::default()
        };
        let report = run_check(&opts, &CommonOptions::default()).unwrap();
        assert!(report.results.is_empty());
        assert!(report.all_passed());
    }
}
