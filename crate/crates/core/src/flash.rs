//! Feature-dimension tiled window attention.
//!
//! Q, K and V are split into `r` column chunks. The forward pass
//! accumulates `S = Σ_i Q_i K_iᵀ` on chip, applies the softmax in place and
//! then produces `O_i = P V_i` one chunk at a time. The backward pass
//! recomputes `P` the same way, so no `L×L` matrix ever reaches global
//! memory in either direction.
//!
//! On-chip schedule (elements live at the high-water mark, `w` = chunk width):
//!
//! | pass     | phase                  | live                    |
//! |----------|------------------------|-------------------------|
//! | forward  | score accumulation     | `S, Q_i, K_i` = L²+2Lw  |
//! | forward  | output chunks          | `P, V_i, O_i` = L²+2Lw  |
//! | backward | score accumulation     | `P, dP, Q_i, K_i` = 2L²+2Lw |
//! | backward | dV / dP chunks         | `P, dP, dO_i, V_i` then `P, dP, dO_i, dV_i` |
//! | backward | dQ / dK chunks         | `dS, K_i, dQ_i` then `dS, Q_i, dK_i` |
//!
//! `dS` overwrites `dP` in place and `P` is released once `dS` exists.

use std::ops::Range;
use std::sync::Arc;

use crate::batch::{leading_dims, par_map_slices};
use crate::error::{Error, Result};
use crate::memory::{GlobalMemory, ScratchpadArena, Tile, TrafficReport};
use crate::reference::AttnGrads;
use crate::tensor::DenseTensor;

/// Feature width of one chunk in the reference benchmark setting (`r = C/16`).
pub const AUTO_CHUNK_WIDTH: usize = 16;

/// Tiling parameters for one kernel launch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileConfig {
    /// Number of chunks `r` along the feature dimension.
    pub chunks: usize,
    /// Multiplier applied to the accumulated scores before the softmax.
    pub scale: f64,
    /// Bytes per element used for scratchpad accounting (4 for fp32).
    /// Arithmetic is always carried out in `f64`.
    pub elem_bytes: usize,
}

impl TileConfig {
    pub fn new(chunks: usize, scale: f64, elem_bytes: usize) -> Result<Self> {
        if chunks == 0 {
            return Err(Error::InvalidConfig("chunk count must be >= 1".into()));
        }
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "scale must be finite and > 0, got {scale}"
            )));
        }
        if elem_bytes == 0 {
            return Err(Error::InvalidConfig(
                "element size must be >= 1 byte".into(),
            ));
        }
        Ok(Self {
            chunks,
            scale,
            elem_bytes,
        })
    }

    /// `⌈C/r⌉`, checked against `1 ≤ r ≤ C` and `w·(r−1) < C ≤ w·r`.
    pub fn chunk_width(&self, channels: usize) -> Result<usize> {
        let r = self.chunks;
        if r == 0 || r > channels {
            return Err(Error::InvalidConfig(format!(
                "chunk count {r} must lie in 1..={channels}"
            )));
        }
        let w = channels.div_ceil(r);
        if w * (r - 1) >= channels {
            return Err(Error::InvalidConfig(format!(
                "{r} chunks of width {w} leave the last chunk empty for C = {channels}"
            )));
        }
        Ok(w)
    }

    /// Column ranges of the chunks; all have width `⌈C/r⌉` except possibly a
    /// narrower last one.
    pub fn chunk_ranges(&self, channels: usize) -> Result<Vec<Range<usize>>> {
        let w = self.chunk_width(channels)?;
        Ok((0..self.chunks)
            .map(|i| i * w..((i + 1) * w).min(channels))
            .collect())
    }
}

/// How the chunk count is chosen for a given channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkRule {
    Fixed(usize),
    /// `r = C/16`; only defined when 16 divides `C`.
    Auto,
}

impl ChunkRule {
    pub fn resolve(self, channels: usize) -> Result<usize> {
        match self {
            ChunkRule::Fixed(r) => Ok(r),
            ChunkRule::Auto if channels.is_multiple_of(AUTO_CHUNK_WIDTH) => {
                Ok(channels / AUTO_CHUNK_WIDTH)
            }
            ChunkRule::Auto => Err(Error::InvalidConfig(format!(
                "r = C/{AUTO_CHUNK_WIDTH} is not integral for C = {channels}"
            ))),
        }
    }
}

impl std::str::FromStr for ChunkRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(ChunkRule::Auto);
        }
        match s.parse::<usize>() {
            Ok(r) if r >= 1 => Ok(ChunkRule::Fixed(r)),
            _ => Err(format!(
                "expected a positive chunk count or `auto`, got `{s}`"
            )),
        }
    }
}

impl std::fmt::Display for ChunkRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChunkRule::Fixed(r) => write!(f, "{r}"),
            ChunkRule::Auto => f.write_str("auto"),
        }
    }
}

/// Closed-form forward peak: `(L² + 2·L·⌈C/r⌉)·elem_bytes`.
pub fn peak_sram_forward(seq_len: usize, channels: usize, cfg: &TileConfig) -> Result<usize> {
    let w = cfg.chunk_width(channels)?;
    Ok((seq_len * seq_len + 2 * seq_len * w) * cfg.elem_bytes)
}

/// Closed-form backward peak: `(2L² + 2·L·⌈C/r⌉)·elem_bytes`.
pub fn peak_sram_backward(seq_len: usize, channels: usize, cfg: &TileConfig) -> Result<usize> {
    let w = cfg.chunk_width(channels)?;
    Ok((2 * seq_len * seq_len + 2 * seq_len * w) * cfg.elem_bytes)
}

fn ensure_fits(arena: &ScratchpadArena, required: usize) -> Result<()> {
    let available = arena.capacity_bytes().saturating_sub(arena.live_bytes());
    if required > available {
        return Err(Error::Capacity {
            required,
            available,
        });
    }
    Ok(())
}

/// Inputs retained by the forward pass for the backward pass. Holds Q, K
/// and V only; attention weights are recomputed on chip.
#[derive(Debug, Clone)]
pub struct FlashContext {
    q: Arc<DenseTensor>,
    k: Arc<DenseTensor>,
    v: Arc<DenseTensor>,
    cfg: TileConfig,
}

impl FlashContext {
    pub fn config(&self) -> &TileConfig {
        &self.cfg
    }

    /// `(L, C)` recorded at forward time.
    pub fn dims(&self) -> (usize, usize) {
        let s = self.q.shape();
        (s[0], s[1])
    }

    pub fn inputs(&self) -> (&DenseTensor, &DenseTensor, &DenseTensor) {
        (&self.q, &self.k, &self.v)
    }
}

#[derive(Debug, Clone)]
pub struct FlashForward {
    pub output: DenseTensor,
    pub context: FlashContext,
    pub report: TrafficReport,
}

#[derive(Debug, Clone)]
pub struct FlashBackward {
    pub grads: AttnGrads,
    pub report: TrafficReport,
}

// On-chip kernels. Each is a plain triple loop over row-major buffers.

/// `acc += a·bᵀ` for `a, b` of shape `L×w`.
fn accumulate_a_bt(acc: &mut [f64], a: &Tile, b: &Tile) {
    let (l, w) = (a.rows(), a.cols());
    for i in 0..l {
        let ai = &a.data()[i * w..(i + 1) * w];
        for j in 0..b.rows() {
            let bj = &b.data()[j * w..(j + 1) * w];
            acc[i * b.rows() + j] += ai.iter().zip(bj).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out = factor·(m·b)` for square `m` (`L×L`) and `b` (`L×w`).
fn square_times(out: &mut Tile, m: &[f64], b: &Tile, factor: f64) {
    let (l, w) = (b.rows(), b.cols());
    let dst = out.data_mut();
    dst.fill(0.0);
    for i in 0..l {
        let row = &mut dst[i * w..(i + 1) * w];
        for j in 0..l {
            let mij = m[i * l + j];
            for (o, &x) in row.iter_mut().zip(&b.data()[j * w..(j + 1) * w]) {
                *o += mij * x;
            }
        }
        if factor != 1.0 {
            row.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// `out = factor·(mᵀ·b)` for square `m` (`L×L`) and `b` (`L×w`).
fn square_t_times(out: &mut Tile, m: &[f64], b: &Tile, factor: f64) {
    let (l, w) = (b.rows(), b.cols());
    let dst = out.data_mut();
    dst.fill(0.0);
    for j in 0..l {
        let bj = &b.data()[j * w..(j + 1) * w];
        for i in 0..l {
            let mji = m[j * l + i];
            for (o, &x) in dst[i * w..(i + 1) * w].iter_mut().zip(bj) {
                *o += mji * x;
            }
        }
    }
    if factor != 1.0 {
        dst.iter_mut().for_each(|x| *x *= factor);
    }
}

/// Scales each row by `scale`, then applies a max-subtracted softmax in place.
fn softmax_in_place(scores: &mut [f64], cols: usize, scale: f64) -> Result<()> {
    if let Some(index) = scores.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            op: "flash softmax",
            index,
        });
    }
    for row in scores.chunks_exact_mut(cols) {
        let mut max = f64::NEG_INFINITY;
        for x in row.iter_mut() {
            *x *= scale;
            max = max.max(*x);
        }
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        let inv = 1.0 / total;
        row.iter_mut().for_each(|x| *x *= inv);
    }
    Ok(())
}

/// `dP ← P ∘ (dP − rowsum(P ∘ dP))`, overwriting `dP` with `dS`.
fn softmax_grad_in_place(dp: &mut [f64], p: &[f64], cols: usize) {
    for (dpr, pr) in dp.chunks_exact_mut(cols).zip(p.chunks_exact(cols)) {
        let weighted: f64 = pr.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
        for (d, &pij) in dpr.iter_mut().zip(pr) {
            *d = pij * (*d - weighted);
        }
    }
}

/// Accumulates `S = Σ_i Q_i K_iᵀ` chunk by chunk into `acc`.
fn accumulate_scores(
    gm: &mut GlobalMemory,
    arena: &mut ScratchpadArena,
    acc: &mut Tile,
    ranges: &[Range<usize>],
    elem_bytes: usize,
) -> Result<()> {
    for cols in ranges {
        let qi = gm.load_cols("Q", cols.clone(), arena, elem_bytes)?;
        let ki = gm.load_cols("K", cols.clone(), arena, elem_bytes)?;
        accumulate_a_bt(acc.data_mut(), &qi, &ki);
        arena.free(qi);
        arena.free(ki);
    }
    Ok(())
}

fn qkv_dims(q: &DenseTensor, k: &DenseTensor, v: &DenseTensor) -> Result<(usize, usize)> {
    let dims = q.dims2()?;
    q.check_same_shape("flash_forward(K)", k)?;
    q.check_same_shape("flash_forward(V)", v)?;
    Ok(dims)
}

/// Tiled forward pass for one `L×C` window.
pub fn flash_forward(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    cfg: &TileConfig,
    arena: &mut ScratchpadArena,
) -> Result<FlashForward> {
    let (l, c) = qkv_dims(q, k, v)?;
    let ranges = cfg.chunk_ranges(c)?;
    ensure_fits(arena, peak_sram_forward(l, c, cfg)?)?;
    arena.begin_run();
    let eb = cfg.elem_bytes;

    let (q, k, v) = (
        Arc::new(q.clone()),
        Arc::new(k.clone()),
        Arc::new(v.clone()),
    );
    let mut gm = GlobalMemory::new();
    gm.insert("Q", (*q).clone())?;
    gm.insert("K", (*k).clone())?;
    gm.insert("V", (*v).clone())?;
    gm.alloc("O", l, c)?;

    let mut scores = arena.alloc(l, l, eb)?;
    accumulate_scores(&mut gm, arena, &mut scores, &ranges, eb)?;
    softmax_in_place(scores.data_mut(), l, cfg.scale)?;
    let probs = scores;

    for cols in &ranges {
        let vi = gm.load_cols("V", cols.clone(), arena, eb)?;
        let mut oi = arena.alloc(l, cols.len(), eb)?;
        square_times(&mut oi, probs.data(), &vi, 1.0);
        gm.store_cols("O", cols.clone(), &oi)?;
        arena.free(vi);
        arena.free(oi);
    }
    arena.free(probs);

    let report = gm.report(arena.peak_bytes());
    Ok(FlashForward {
        output: gm.take("O")?,
        context: FlashContext { q, k, v, cfg: *cfg },
        report,
    })
}

/// Tiled backward pass for one window, recomputing `P` from Q and K.
pub fn flash_backward(
    ctx: &FlashContext,
    d_out: &DenseTensor,
    arena: &mut ScratchpadArena,
) -> Result<FlashBackward> {
    let (l, c) = ctx.dims();
    if d_out.shape() != [l, c] {
        return Err(Error::ShapeMismatch {
            op: "flash_backward(dO)",
            expected: vec![l, c],
            actual: d_out.shape().to_vec(),
        });
    }
    let cfg = ctx.cfg;
    let ranges = cfg.chunk_ranges(c)?;
    ensure_fits(arena, peak_sram_backward(l, c, &cfg)?)?;
    arena.begin_run();
    let eb = cfg.elem_bytes;

    let mut gm = GlobalMemory::new();
    gm.insert("Q", (*ctx.q).clone())?;
    gm.insert("K", (*ctx.k).clone())?;
    gm.insert("V", (*ctx.v).clone())?;
    gm.insert("dO", d_out.clone())?;
    for name in ["dQ", "dK", "dV"] {
        gm.alloc(name, l, c)?;
    }

    let mut probs = arena.alloc(l, l, eb)?;
    let mut d_probs = arena.alloc(l, l, eb)?;

    accumulate_scores(&mut gm, arena, &mut probs, &ranges, eb)?;
    softmax_in_place(probs.data_mut(), l, cfg.scale)?;

    for cols in &ranges {
        let doi = gm.load_cols("dO", cols.clone(), arena, eb)?;
        let vi = gm.load_cols("V", cols.clone(), arena, eb)?;
        accumulate_a_bt(d_probs.data_mut(), &doi, &vi);
        arena.free(vi);
        let mut dvi = arena.alloc(l, cols.len(), eb)?;
        square_t_times(&mut dvi, probs.data(), &doi, 1.0);
        gm.store_cols("dV", cols.clone(), &dvi)?;
        arena.free(dvi);
        arena.free(doi);
    }

    softmax_grad_in_place(d_probs.data_mut(), probs.data(), l);
    arena.free(probs);
    let d_scores = d_probs;

    for cols in &ranges {
        let ki = gm.load_cols("K", cols.clone(), arena, eb)?;
        let mut dqi = arena.alloc(l, cols.len(), eb)?;
        square_times(&mut dqi, d_scores.data(), &ki, cfg.scale);
        gm.store_cols("dQ", cols.clone(), &dqi)?;
        arena.free(dqi);
        arena.free(ki);

        let qi = gm.load_cols("Q", cols.clone(), arena, eb)?;
        let mut dki = arena.alloc(l, cols.len(), eb)?;
        square_t_times(&mut dki, d_scores.data(), &qi, cfg.scale);
        gm.store_cols("dK", cols.clone(), &dki)?;
        arena.free(dki);
        arena.free(qi);
    }
    arena.free(d_scores);

    let report = gm.report(arena.peak_bytes());
    Ok(FlashBackward {
        grads: AttnGrads {
            dq: gm.take("dQ")?,
            dk: gm.take("dK")?,
            dv: gm.take("dV")?,
        },
        report,
    })
}

#[derive(Debug, Clone)]
pub struct BatchedFlashForward {
    /// `B×h×L×C`.
    pub output: DenseTensor,
    /// One context per `(batch, head)` slice, row-major over `(b, head)`.
    pub contexts: Vec<FlashContext>,
    /// Summed counts; `peak_sram_bytes` is the per-worker peak.
    pub report: TrafficReport,
}

#[derive(Debug, Clone)]
pub struct BatchedFlashBackward {
    pub dq: DenseTensor,
    pub dk: DenseTensor,
    pub dv: DenseTensor,
    pub report: TrafficReport,
}

/// Runs [`flash_forward`] on every `(b, head)` slice of `B×h×L×C` inputs.
/// Each worker gets its own arena of `capacity_bytes`.
pub fn batched_flash_forward(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    cfg: &TileConfig,
    capacity_bytes: usize,
) -> Result<BatchedFlashForward> {
    let (batch, heads) = leading_dims(q, "batched_flash_forward")?;
    q.check_same_shape("batched_flash_forward(K)", k)?;
    q.check_same_shape("batched_flash_forward(V)", v)?;
    let (qs, ks, vs) = (q.matrix_slices()?, k.matrix_slices()?, v.matrix_slices()?);

    let runs = par_map_slices(batch, heads, |i| {
        let mut arena = ScratchpadArena::new(capacity_bytes);
        flash_forward(&qs[i], &ks[i], &vs[i], cfg, &mut arena)
    })?;

    let mut report = TrafficReport::default();
    let mut outputs = Vec::with_capacity(runs.len());
    let mut contexts = Vec::with_capacity(runs.len());
    for run in runs {
        report.merge(&run.report);
        outputs.push(run.output);
        contexts.push(run.context);
    }
    Ok(BatchedFlashForward {
        output: DenseTensor::stack(&[batch, heads], &outputs)?,
        contexts,
        report,
    })
}

/// Backward counterpart of [`batched_flash_forward`].
pub fn batched_flash_backward(
    contexts: &[FlashContext],
    d_out: &DenseTensor,
    capacity_bytes: usize,
) -> Result<BatchedFlashBackward> {
    let (batch, heads) = leading_dims(d_out, "batched_flash_backward")?;
    if contexts.len() != batch * heads {
        return Err(Error::Context(format!(
            "{} saved contexts for {batch}x{heads} slices",
            contexts.len()
        )));
    }
    let d_outs = d_out.matrix_slices()?;
    let runs = par_map_slices(batch, heads, |i| {
        let mut arena = ScratchpadArena::new(capacity_bytes);
        flash_backward(&contexts[i], &d_outs[i], &mut arena)
    })?;

    let mut report = TrafficReport::default();
    let (mut dq, mut dk, mut dv) = (Vec::new(), Vec::new(), Vec::new());
    for run in runs {
        report.merge(&run.report);
        dq.push(run.grads.dq);
        dk.push(run.grads.dk);
        dv.push(run.grads.dv);
    }
    let lead = [batch, heads];
    Ok(BatchedFlashBackward {
        dq: DenseTensor::stack(&lead, &dq)?,
        dk: DenseTensor::stack(&lead, &dk)?,
        dv: DenseTensor::stack(&lead, &dv)?,
        report,
    })
}
