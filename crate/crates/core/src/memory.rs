//! Two-level memory model: a capacity-bounded on-chip scratchpad and an
//! instrumented global memory that counts every element moved between them.
//!
//! Kernels never touch global tensors directly. They call
//! [`GlobalMemory::load_cols`] to bring a column block on chip as a [`Tile`]
//! (which charges the arena) and [`GlobalMemory::store_cols`] to write one
//! back. Counting happens there and only there.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// 128 KB, the per-SM L1 size the footprint analysis is measured against.
pub const DEFAULT_CAPACITY_BYTES: usize = 131_072;

/// On-chip memory simulator. Tracks live bytes and the high-water mark, and
/// refuses allocations that would exceed capacity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScratchpadArena {
    capacity_bytes: usize,
    live_bytes: usize,
    peak_bytes: usize,
}

impl Default for ScratchpadArena {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY_BYTES)
    }
}

impl ScratchpadArena {
    pub fn new(capacity_bytes: usize) -> Self {
        Self {
            capacity_bytes,
            live_bytes: 0,
            peak_bytes: 0,
        }
    }

    /// An arena that never runs out, for measuring footprints without a budget.
    pub fn unbounded() -> Self {
        Self::new(usize::MAX)
    }

    pub fn capacity_bytes(&self) -> usize {
        self.capacity_bytes
    }

    pub fn live_bytes(&self) -> usize {
        self.live_bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    /// Starts a new measurement window: the peak restarts from current occupancy.
    pub fn begin_run(&mut self) {
        self.peak_bytes = self.live_bytes;
    }

    /// Allocates a zero-filled `rows×cols` tile of `elem_bytes`-sized elements.
    pub fn alloc(&mut self, rows: usize, cols: usize, elem_bytes: usize) -> Result<Tile> {
        let bytes = rows * cols * elem_bytes;
        let required = self.live_bytes.saturating_add(bytes);
        if required > self.capacity_bytes {
            return Err(Error::Capacity {
                required,
                available: self.capacity_bytes,
            });
        }
        self.live_bytes = required;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        Ok(Tile {
            rows,
            cols,
            bytes,
            data: vec![0.0; rows * cols],
        })
    }

    pub fn free(&mut self, tile: Tile) {
        debug_assert!(tile.bytes <= self.live_bytes);
        self.live_bytes -= tile.bytes;
    }
}

/// A row-major block resident in the scratchpad.
#[derive(Debug)]
pub struct Tile {
    rows: usize,
    cols: usize,
    bytes: usize,
    pub(crate) data: Vec<f64>,
}

impl Tile {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    /// Copy of the tile contents as a matrix.
    pub fn to_tensor(&self) -> Result<DenseTensor> {
        DenseTensor::from_vec(&[self.rows, self.cols], self.data.clone())
    }

    /// Overwrites the tile with a matrix of the same extents.
    pub fn fill_from(&mut self, t: &DenseTensor) -> Result<()> {
        if t.shape() != [self.rows, self.cols] {
            return Err(Error::ShapeMismatch {
                op: "Tile::fill_from",
                expected: vec![self.rows, self.cols],
                actual: t.shape().to_vec(),
            });
        }
        self.data.copy_from_slice(t.data());
        Ok(())
    }
}

/// Per-operand element traffic between global memory and the scratchpad.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficReport {
    pub loads: BTreeMap<String, u64>,
    pub stores: BTreeMap<String, u64>,
    /// Peak scratchpad occupancy. For merged reports this is the largest
    /// per-worker peak, since each worker owns its own arena.
    pub peak_sram_bytes: usize,
    /// Shape of every global buffer the kernel touched.
    pub buffers: BTreeMap<String, Vec<usize>>,
}

impl TrafficReport {
    pub fn loads_of(&self, operand: &str) -> u64 {
        self.loads.get(operand).copied().unwrap_or(0)
    }

    pub fn stores_of(&self, operand: &str) -> u64 {
        self.stores.get(operand).copied().unwrap_or(0)
    }

    pub fn total_loads(&self) -> u64 {
        self.loads.values().sum()
    }

    pub fn total_stores(&self) -> u64 {
        self.stores.values().sum()
    }

    /// Loads plus stores over all operands.
    pub fn total_elements(&self) -> u64 {
        self.total_loads() + self.total_stores()
    }

    /// Sums counts and keeps the larger peak. Commutative and associative.
    pub fn merge(&mut self, other: &TrafficReport) {
        for (name, n) in &other.loads {
            *self.loads.entry(name.clone()).or_default() += n;
        }
        for (name, n) in &other.stores {
            *self.stores.entry(name.clone()).or_default() += n;
        }
        for (name, shape) in &other.buffers {
            self.buffers
                .entry(name.clone())
                .or_insert_with(|| shape.clone());
        }
        self.peak_sram_bytes = self.peak_sram_bytes.max(other.peak_sram_bytes);
    }

    /// Names of all operands that were loaded or stored.
    pub fn operands(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .loads
            .keys()
            .chain(self.stores.keys())
            .map(String::as_str)
            .collect();
        names.sort_unstable();
        names.dedup();
        names
    }
}

/// Named global buffers plus load/store counters.
#[derive(Debug, Default)]
pub struct GlobalMemory {
    buffers: BTreeMap<&'static str, DenseTensor>,
    loads: BTreeMap<&'static str, u64>,
    stores: BTreeMap<&'static str, u64>,
}

impl GlobalMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Places an existing matrix in global memory. Not counted as traffic.
    pub fn insert(&mut self, name: &'static str, tensor: DenseTensor) -> Result<()> {
        tensor.dims2()?;
        self.buffers.insert(name, tensor);
        Ok(())
    }

    /// Allocates a zeroed `rows×cols` output buffer.
    pub fn alloc(&mut self, name: &'static str, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, DenseTensor::zeros(&[rows, cols])?)
    }

    fn buffer(&self, name: &str) -> Result<&DenseTensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Context(format!("no global buffer named {name}")))
    }

    fn check_cols(name: &str, cols: &Range<usize>, width: usize) -> Result<()> {
        if cols.start >= cols.end || cols.end > width {
            return Err(Error::Context(format!(
                "column block {cols:?} out of range for {name} with {width} columns"
            )));
        }
        Ok(())
    }

    /// Copies columns `cols` of every row of `name` into a freshly
    /// allocated scratchpad tile, counting `rows·|cols|` element loads.
    pub fn load_cols(
        &mut self,
        name: &'static str,
        cols: Range<usize>,
        arena: &mut ScratchpadArena,
        elem_bytes: usize,
    ) -> Result<Tile> {
        let src = self.buffer(name)?;
        let (rows, width) = src.dims2()?;
        Self::check_cols(name, &cols, width)?;
        let mut tile = arena.alloc(rows, cols.len(), elem_bytes)?;
        for (r, dst) in tile.data.chunks_exact_mut(cols.len()).enumerate() {
            dst.copy_from_slice(&src.data()[r * width + cols.start..r * width + cols.end]);
        }
        *self.loads.entry(name).or_default() += (rows * cols.len()) as u64;
        Ok(tile)
    }

    /// Writes `tile` into columns `cols` of `name`, counting the stores.
    pub fn store_cols(
        &mut self,
        name: &'static str,
        cols: Range<usize>,
        tile: &Tile,
    ) -> Result<()> {
        let dst = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::Context(format!("no global buffer named {name}")))?;
        let (rows, width) = dst.dims2()?;
        Self::check_cols(name, &cols, width)?;
        if tile.rows != rows || tile.cols != cols.len() {
            return Err(Error::ShapeMismatch {
                op: "store_cols",
                expected: vec![rows, cols.len()],
                actual: vec![tile.rows, tile.cols],
            });
        }
        let mut data = std::mem::replace(dst, DenseTensor::zeros(&[1])?).into_data();
        for (r, src) in tile.data.chunks_exact(tile.cols).enumerate() {
            data[r * width + cols.start..r * width + cols.end].copy_from_slice(src);
        }
        *dst = DenseTensor::from_vec(&[rows, width], data)?;
        *self.stores.entry(name).or_default() += (rows * cols.len()) as u64;
        Ok(())
    }

    /// Removes a buffer, typically a finished output.
    pub fn take(&mut self, name: &str) -> Result<DenseTensor> {
        self.buffers
            .remove(name)
            .ok_or_else(|| Error::Context(format!("no global buffer named {name}")))
    }

    /// Snapshot of the counters with the given arena peak.
    pub fn report(&self, peak_sram_bytes: usize) -> TrafficReport {
        let owned =
            |m: &BTreeMap<&'static str, u64>| m.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        TrafficReport {
            loads: owned(&self.loads),
            stores: owned(&self.stores),
            peak_sram_bytes,
            buffers: self
                .buffers
                .iter()
                .filter(|(name, _)| {
                    self.loads.contains_key(*name) || self.stores.contains_key(*name)
                })
                .map(|(k, v)| (k.to_string(), v.shape().to_vec()))
                .collect(),
        }
    }
}
