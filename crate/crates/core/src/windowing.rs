//! Non-overlapping window partition of `H×W×C` images into `N×L×C`
//! sequences, and its inverse.
//!
//! Windows are enumerated row-major over (window-row, window-column);
//! pixels inside a window are enumerated row-major as well.

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Window side length in pixels.
    pub k: usize,
}

impl WindowConfig {
    pub fn new(height: usize, width: usize, channels: usize, k: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || k == 0 {
            return Err(Error::InvalidShape {
                shape: vec![height, width, channels],
                reason: format!("image extents and window side must be >= 1 (k = {k})"),
            });
        }
        if !height.is_multiple_of(k) || !width.is_multiple_of(k) {
            return Err(Error::Partition { height, width, k });
        }
        Ok(Self {
            height,
            width,
            channels,
            k,
        })
    }

    /// Number of windows, `H·W / k²`.
    pub fn num_windows(&self) -> usize {
        (self.height / self.k) * (self.width / self.k)
    }

    /// Sequence length per window, `k²`.
    pub fn seq_len(&self) -> usize {
        self.k * self.k
    }

    fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    fn windowed_shape(&self) -> [usize; 3] {
        [self.num_windows(), self.seq_len(), self.channels]
    }

    /// Image pixel `(row, col)` for sequence position `l` of window `n`.
    #[inline]
    fn pixel(&self, n: usize, l: usize) -> (usize, usize) {
        let per_row = self.width / self.k;
        let (wr, wc) = (n / per_row, n % per_row);
        (wr * self.k + l / self.k, wc * self.k + l % self.k)
    }
}

/// `H×W×C → N×L×C` with `output[n][l][c] = x[wr·k + l/k][wc·k + l%k][c]`.
pub fn window_partition(x: &DenseTensor, cfg: &WindowConfig) -> Result<DenseTensor> {
    let cfg = WindowConfig::new(cfg.height, cfg.width, cfg.channels, cfg.k)?;
    if x.shape() != cfg.image_shape() {
        return Err(Error::ShapeMismatch {
            op: "window_partition",
            expected: cfg.image_shape().to_vec(),
            actual: x.shape().to_vec(),
        });
    }
    let c = cfg.channels;
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for n in 0..cfg.num_windows() {
        for l in 0..cfg.seq_len() {
            let (row, col) = cfg.pixel(n, l);
            let base = (row * cfg.width + col) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    DenseTensor::from_vec(&cfg.windowed_shape(), out)
}

/// `N×L×C → H×W×C`, the exact inverse of [`window_partition`].
pub fn window_reverse(y: &DenseTensor, cfg: &WindowConfig) -> Result<DenseTensor> {
    let cfg = WindowConfig::new(cfg.height, cfg.width, cfg.channels, cfg.k)?;
    if y.shape() != cfg.windowed_shape() {
        return Err(Error::ShapeMismatch {
            op: "window_reverse",
            expected: cfg.windowed_shape().to_vec(),
            actual: y.shape().to_vec(),
        });
    }
    let c = cfg.channels;
    let src = y.data();
    let mut out = vec![0.0; src.len()];
    for n in 0..cfg.num_windows() {
        for l in 0..cfg.seq_len() {
            let (row, col) = cfg.pixel(n, l);
            let dst = (row * cfg.width + col) * c;
            let from = (n * cfg.seq_len() + l) * c;
            out[dst..dst + c].copy_from_slice(&src[from..from + c]);
        }
    }
    DenseTensor::from_vec(&cfg.image_shape(), out)
}
