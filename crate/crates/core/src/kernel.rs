//! Attention kernels behind a common trait, looked up by name at runtime.
//!
//! Two strategies ship built in:
//!
//! * `naive` — the unfused three-stage baseline. Each stage reads its
//!   operands from global memory and writes its result back, so `S` and `P`
//!   make a round trip through global memory. Intended as the comparison
//!   point for traffic and timing, not for correctness (that is
//!   [`crate::reference`]'s job).
//! * `flash` — the feature-tiled kernels from [`crate::flash`].

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::batch::{leading_dims, par_map_slices};
use crate::error::{Error, Result};
use crate::flash::{flash_backward, flash_forward, ChunkRule, FlashContext, TileConfig};
use crate::memory::{GlobalMemory, ScratchpadArena, TrafficReport};
use crate::reference::{softmax_backward, softmax_rows, AttnGrads, AttnParams};
use crate::tensor::{matmul, DenseTensor};

/// State a kernel's forward pass leaves behind for its backward pass.
#[derive(Debug, Clone)]
pub enum SavedState {
    /// Q, K, V plus the attention weights stored in global memory.
    Naive {
        q: DenseTensor,
        k: DenseTensor,
        v: DenseTensor,
        weights: DenseTensor,
    },
    Flash(FlashContext),
}

impl SavedState {
    fn kind(&self) -> &'static str {
        match self {
            SavedState::Naive { .. } => "naive",
            SavedState::Flash(_) => "flash",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: DenseTensor,
    pub saved: SavedState,
    pub report: TrafficReport,
}

#[derive(Debug, Clone)]
pub struct BackwardPass {
    pub grads: AttnGrads,
    pub report: TrafficReport,
}

/// One attention strategy operating on a single `L×C` window.
pub trait AttentionKernel: Send + Sync {
    fn name(&self) -> &str;

    fn forward(
        &self,
        q: &DenseTensor,
        k: &DenseTensor,
        v: &DenseTensor,
        arena: &mut ScratchpadArena,
    ) -> Result<ForwardPass>;

    fn backward(
        &self,
        saved: &SavedState,
        d_out: &DenseTensor,
        arena: &mut ScratchpadArena,
    ) -> Result<BackwardPass>;
}

/// Settings shared by the built-in kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSettings {
    pub params: AttnParams,
    pub chunks: ChunkRule,
    pub elem_bytes: usize,
}

impl Default for KernelSettings {
    fn default() -> Self {
        Self {
            params: AttnParams::default(),
            chunks: ChunkRule::Auto,
            elem_bytes: 4,
        }
    }
}

/// Unfused baseline. Scratchpad figures describe the per-stage working set;
/// a real baseline streams its GEMMs, so no capacity limit is enforced.
#[derive(Debug, Clone)]
pub struct NaiveKernel {
    pub params: AttnParams,
    pub elem_bytes: usize,
}

impl NaiveKernel {
    fn load_full(
        &self,
        gm: &mut GlobalMemory,
        name: &'static str,
        arena: &mut ScratchpadArena,
    ) -> Result<(DenseTensor, crate::memory::Tile)> {
        let cols = gm_cols(gm, name)?;
        let tile = gm.load_cols(name, 0..cols, arena, self.elem_bytes)?;
        Ok((tile.to_tensor()?, tile))
    }

    fn store_full(
        &self,
        gm: &mut GlobalMemory,
        name: &'static str,
        value: &DenseTensor,
        arena: &mut ScratchpadArena,
    ) -> Result<()> {
        let (rows, cols) = value.dims2()?;
        let mut tile = arena.alloc(rows, cols, self.elem_bytes)?;
        tile.fill_from(value)?;
        gm.store_cols(name, 0..cols, &tile)?;
        arena.free(tile);
        Ok(())
    }
}

fn gm_cols(gm: &mut GlobalMemory, name: &'static str) -> Result<usize> {
    // Peek at the width without counting traffic.
    let t = gm.take(name)?;
    let (_, cols) = t.dims2()?;
    gm.insert(name, t)?;
    Ok(cols)
}

impl AttentionKernel for NaiveKernel {
    fn name(&self) -> &str {
        "naive"
    }

    fn forward(
        &self,
        q: &DenseTensor,
        k: &DenseTensor,
        v: &DenseTensor,
        _arena: &mut ScratchpadArena,
    ) -> Result<ForwardPass> {
        let (l, c) = q.dims2()?;
        q.check_same_shape("naive kernel(K)", k)?;
        q.check_same_shape("naive kernel(V)", v)?;
        let mut arena = ScratchpadArena::unbounded();
        let mut gm = GlobalMemory::new();
        gm.insert("Q", q.clone())?;
        gm.insert("K", k.clone())?;
        gm.insert("V", v.clone())?;
        for (name, cols) in [("S", l), ("P", l), ("O", c)] {
            gm.alloc(name, l, cols)?;
        }

        // S = scale·QKᵀ
        let (qt, qtile) = self.load_full(&mut gm, "Q", &mut arena)?;
        let (kt, ktile) = self.load_full(&mut gm, "K", &mut arena)?;
        let s = matmul(&qt, &kt.transpose()?)?.scaled(self.params.scale);
        self.store_full(&mut gm, "S", &s, &mut arena)?;
        arena.free(qtile);
        arena.free(ktile);

        // P = softmax(S), in place on chip
        let (st, stile) = self.load_full(&mut gm, "S", &mut arena)?;
        let p = softmax_rows(&st)?;
        arena.free(stile);
        self.store_full(&mut gm, "P", &p, &mut arena)?;

        // O = PV
        let (pt, ptile) = self.load_full(&mut gm, "P", &mut arena)?;
        let (vt, vtile) = self.load_full(&mut gm, "V", &mut arena)?;
        self.store_full(&mut gm, "O", &matmul(&pt, &vt)?, &mut arena)?;
        arena.free(ptile);
        arena.free(vtile);

        let report = gm.report(arena.peak_bytes());
        Ok(ForwardPass {
            output: gm.take("O")?,
            saved: SavedState::Naive {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                weights: gm.take("P")?,
            },
            report,
        })
    }

    fn backward(
        &self,
        saved: &SavedState,
        d_out: &DenseTensor,
        _arena: &mut ScratchpadArena,
    ) -> Result<BackwardPass> {
        let SavedState::Naive { q, k, v, weights } = saved else {
            return Err(Error::Context(format!(
                "naive backward given {} forward state",
                saved.kind()
            )));
        };
        q.check_same_shape("naive kernel(dO)", d_out)?;
        let (l, c) = q.dims2()?;
        let mut arena = ScratchpadArena::unbounded();
        let mut gm = GlobalMemory::new();
        for (name, t) in [("Q", q), ("K", k), ("V", v), ("P", weights), ("dO", d_out)] {
            gm.insert(name, t.clone())?;
        }
        for (name, cols) in [("dP", l), ("dS", l), ("dQ", c), ("dK", c), ("dV", c)] {
            gm.alloc(name, l, cols)?;
        }
        let scale = self.params.scale;

        // dV = Pᵀ dO
        let (p, ptile) = self.load_full(&mut gm, "P", &mut arena)?;
        let (d_o, dotile) = self.load_full(&mut gm, "dO", &mut arena)?;
        self.store_full(&mut gm, "dV", &matmul(&p.transpose()?, &d_o)?, &mut arena)?;
        arena.free(ptile);
        arena.free(dotile);

        // dP = dO Vᵀ
        let (d_o, dotile) = self.load_full(&mut gm, "dO", &mut arena)?;
        let (vt, vtile) = self.load_full(&mut gm, "V", &mut arena)?;
        self.store_full(&mut gm, "dP", &matmul(&d_o, &vt.transpose()?)?, &mut arena)?;
        arena.free(dotile);
        arena.free(vtile);

        // dS = softmax'(P)·dP
        let (p, ptile) = self.load_full(&mut gm, "P", &mut arena)?;
        let (dp, dptile) = self.load_full(&mut gm, "dP", &mut arena)?;
        self.store_full(&mut gm, "dS", &softmax_backward(&p, &dp)?, &mut arena)?;
        arena.free(ptile);
        arena.free(dptile);

        // dQ = scale·dS K, dK = scale·dSᵀ Q
        let (ds, dstile) = self.load_full(&mut gm, "dS", &mut arena)?;
        let (kt, ktile) = self.load_full(&mut gm, "K", &mut arena)?;
        self.store_full(&mut gm, "dQ", &matmul(&ds, &kt)?.scaled(scale), &mut arena)?;
        arena.free(dstile);
        arena.free(ktile);
        let (ds, dstile) = self.load_full(&mut gm, "dS", &mut arena)?;
        let (qt, qtile) = self.load_full(&mut gm, "Q", &mut arena)?;
        let dk = matmul(&ds.transpose()?, &qt)?.scaled(scale);
        self.store_full(&mut gm, "dK", &dk, &mut arena)?;
        arena.free(dstile);
        arena.free(qtile);

        let report = gm.report(arena.peak_bytes());
        Ok(BackwardPass {
            grads: AttnGrads {
                dq: gm.take("dQ")?,
                dk: gm.take("dK")?,
                dv: gm.take("dV")?,
            },
            report,
        })
    }
}

/// Feature-tiled kernel; the chunk count is resolved per call from `C`.
#[derive(Debug, Clone)]
pub struct FlashKernel {
    pub params: AttnParams,
    pub chunks: ChunkRule,
    pub elem_bytes: usize,
}

impl FlashKernel {
    pub fn tile_config(&self, channels: usize) -> Result<TileConfig> {
        TileConfig::new(
            self.chunks.resolve(channels)?,
            self.params.scale,
            self.elem_bytes,
        )
    }
}

impl AttentionKernel for FlashKernel {
    fn name(&self) -> &str {
        "flash"
    }

    fn forward(
        &self,
        q: &DenseTensor,
        k: &DenseTensor,
        v: &DenseTensor,
        arena: &mut ScratchpadArena,
    ) -> Result<ForwardPass> {
        let (_, c) = q.dims2()?;
        let run = flash_forward(q, k, v, &self.tile_config(c)?, arena)?;
        Ok(ForwardPass {
            output: run.output,
            saved: SavedState::Flash(run.context),
            report: run.report,
        })
    }

    fn backward(
        &self,
        saved: &SavedState,
        d_out: &DenseTensor,
        arena: &mut ScratchpadArena,
    ) -> Result<BackwardPass> {
        let SavedState::Flash(ctx) = saved else {
            return Err(Error::Context(format!(
                "flash backward requires a flash forward context, got {} state",
                saved.kind()
            )));
        };
        let run = flash_backward(ctx, d_out, arena)?;
        Ok(BackwardPass {
            grads: run.grads,
            report: run.report,
        })
    }
}

/// Name → kernel lookup.
#[derive(Clone, Default)]
pub struct KernelRegistry {
    kernels: BTreeMap<String, Arc<dyn AttentionKernel>>,
}

impl std::fmt::Debug for KernelRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelRegistry")
            .field("kernels", &self.names())
            .finish()
    }
}

impl KernelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding `naive` and `flash`.
    pub fn with_builtins(settings: KernelSettings) -> Self {
        let mut reg = Self::new();
        reg.register(Arc::new(NaiveKernel {
            params: settings.params,
            elem_bytes: settings.elem_bytes,
        }));
        reg.register(Arc::new(FlashKernel {
            params: settings.params,
            chunks: settings.chunks,
            elem_bytes: settings.elem_bytes,
        }));
        reg
    }

    /// Adds a kernel, replacing any previous one with the same name.
    pub fn register(&mut self, kernel: Arc<dyn AttentionKernel>) {
        self.kernels.insert(kernel.name().to_string(), kernel);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn AttentionKernel>> {
        self.kernels
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownKernel(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.kernels.keys().map(String::as_str).collect()
    }
}

/// Result of running a kernel over every slice of `B×h×L×C` inputs.
#[derive(Debug, Clone)]
pub struct BatchedPass {
    pub output: DenseTensor,
    pub saved: Vec<SavedState>,
    pub report: TrafficReport,
}

#[derive(Debug, Clone)]
pub struct BatchedGrads {
    pub dq: DenseTensor,
    pub dk: DenseTensor,
    pub dv: DenseTensor,
    pub report: TrafficReport,
}

/// Forward over all `(b, head)` slices, one arena per worker.
pub fn batched_forward(
    kernel: &dyn AttentionKernel,
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    capacity_bytes: usize,
) -> Result<BatchedPass> {
    let (batch, heads) = leading_dims(q, "batched_forward")?;
    q.check_same_shape("batched_forward(K)", k)?;
    q.check_same_shape("batched_forward(V)", v)?;
    let (qs, ks, vs) = (q.matrix_slices()?, k.matrix_slices()?, v.matrix_slices()?);
    let runs = par_map_slices(batch, heads, |i| {
        kernel.forward(
            &qs[i],
            &ks[i],
            &vs[i],
            &mut ScratchpadArena::new(capacity_bytes),
        )
    })?;
    let mut report = TrafficReport::default();
    let mut outputs = Vec::with_capacity(runs.len());
    let mut saved = Vec::with_capacity(runs.len());
    for run in runs {
        report.merge(&run.report);
        outputs.push(run.output);
        saved.push(run.saved);
    }
    Ok(BatchedPass {
        output: DenseTensor::stack(&[batch, heads], &outputs)?,
        saved,
        report,
    })
}

/// Backward over all slices saved by [`batched_forward`].
pub fn batched_backward(
    kernel: &dyn AttentionKernel,
    saved: &[SavedState],
    d_out: &DenseTensor,
    capacity_bytes: usize,
) -> Result<BatchedGrads> {
    let (batch, heads) = leading_dims(d_out, "batched_backward")?;
    if saved.len() != batch * heads {
        return Err(Error::Context(format!(
            "{} saved states for {batch}x{heads} slices",
            saved.len()
        )));
    }
    let d_outs = d_out.matrix_slices()?;
    let runs = par_map_slices(batch, heads, |i| {
        kernel.backward(
            &saved[i],
            &d_outs[i],
            &mut ScratchpadArena::new(capacity_bytes),
        )
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
    Ok(BatchedGrads {
        dq: DenseTensor::stack(&lead, &dq)?,
        dk: DenseTensor::stack(&lead, &dk)?,
        dv: DenseTensor::stack(&lead, &dv)?,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{naive_backward, naive_forward};
    use crate::tensor::{max_abs_diff, Rng};

    fn settings(r: usize) -> KernelSettings {
        KernelSettings {
            chunks: ChunkRule::Fixed(r),
            elem_bytes: 8,
            ..Default::default()
        }
    }

    #[test]
    fn registry_lookup() {
        let reg = KernelRegistry::with_builtins(KernelSettings::default());
        assert_eq!(reg.names(), vec!["flash", "naive"]);
        assert_eq!(reg.get("flash").unwrap().name(), "flash");
        assert!(matches!(reg.get("cudnn"), Err(Error::UnknownKernel(_))));
    }

    #[test]
    fn both_kernels_agree_with_reference() {
        let mut rng = Rng::new(77);
        let rand = |rng: &mut Rng| DenseTensor::fill_uniform(rng, &[9, 8], -1.0, 1.0).unwrap();
        let (q, k, v, d_out) = (
            rand(&mut rng),
            rand(&mut rng),
            rand(&mut rng),
            rand(&mut rng),
        );
        let p = AttnParams::default();
        let (o, cache) = naive_forward(&q, &k, &v, &p).unwrap();
        let g = naive_backward(&q, &k, &v, &cache, &d_out, &p).unwrap();
        let reg = KernelRegistry::with_builtins(settings(2));
        for name in reg.names() {
            let kern = reg.get(name).unwrap();
            let mut arena = ScratchpadArena::default();
            let fwd = kern.forward(&q, &k, &v, &mut arena).unwrap();
            let bwd = kern.backward(&fwd.saved, &d_out, &mut arena).unwrap();
            assert!(max_abs_diff(&fwd.output, &o).unwrap() <= 1e-10, "{name}");
            assert!(
                max_abs_diff(&bwd.grads.dq, &g.dq).unwrap() <= 1e-10,
                "{name}"
            );
            assert!(
                max_abs_diff(&bwd.grads.dk, &g.dk).unwrap() <= 1e-10,
                "{name}"
            );
            assert!(
                max_abs_diff(&bwd.grads.dv, &g.dv).unwrap() <= 1e-10,
                "{name}"
            );
        }
    }

    #[test]
    fn naive_moves_attention_matrix_through_global_memory() {
        let q = DenseTensor::zeros(&[6, 4]).unwrap();
        let kern = NaiveKernel {
            params: AttnParams::default(),
            elem_bytes: 4,
        };
        let fwd = kern
            .forward(&q, &q, &q, &mut ScratchpadArena::default())
            .unwrap();
        let r = &fwd.report;
        assert_eq!((r.stores_of("S"), r.loads_of("S")), (36, 36));
        assert_eq!((r.stores_of("P"), r.loads_of("P")), (36, 36));
        assert_eq!(r.total_elements(), 4 * 6 * 4 + 4 * 36);
        let bwd = kern
            .backward(&fwd.saved, &q, &mut ScratchpadArena::default())
            .unwrap();
        assert_eq!(bwd.report.loads_of("P"), 72);
    }

    #[test]
    fn mismatched_state_is_a_context_error() {
        let q = DenseTensor::zeros(&[4, 4]).unwrap();
        let reg = KernelRegistry::with_builtins(settings(1));
        let naive_state = reg
            .get("naive")
            .unwrap()
            .forward(&q, &q, &q, &mut ScratchpadArena::default())
            .unwrap()
            .saved;
        let err = reg
            .get("flash")
            .unwrap()
            .backward(&naive_state, &q, &mut ScratchpadArena::default())
            .unwrap_err();
        assert!(matches!(err, Error::Context(_)));
    }

    #[test]
    fn batched_flash_matches_batched_naive() {
        let mut rng = Rng::new(5);
        let shape = [2, 3, 8, 16];
        let mut rand = || DenseTensor::fill_uniform(&mut rng, &shape, -1.0, 1.0).unwrap();
        let (q, k, v, d_out) = (rand(), rand(), rand(), rand());
        let reg = KernelRegistry::with_builtins(settings(4));
        let run = |name: &str| {
            let kern = reg.get(name).unwrap();
            let f = batched_forward(kern.as_ref(), &q, &k, &v, 131072).unwrap();
            let b = batched_backward(kern.as_ref(), &f.saved, &d_out, 131072).unwrap();
            (f, b)
        };
        let (nf, nb) = run("naive");
        let (ff, fb) = run("flash");
        assert!(max_abs_diff(&nf.output, &ff.output).unwrap() <= 1e-10);
        assert!(max_abs_diff(&nb.dq, &fb.dq).unwrap() <= 1e-10);
        assert!(max_abs_diff(&nb.dk, &fb.dk).unwrap() <= 1e-10);
        assert!(max_abs_diff(&nb.dv, &fb.dv).unwrap() <= 1e-10);
        assert_eq!(ff.report.total_elements(), 4 * 8 * 16 * 6);
    }
}
