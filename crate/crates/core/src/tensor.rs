//! Dense row-major tensors and the seeded generator used to fill them.
//!
//! Everything here is deliberately small: no broadcasting, no strided
//! views. Tensors are immutable once built and are shared freely between
//! worker threads.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};

/// Maximum number of axes a [`DenseTensor`] may carry.
pub const MAX_RANK: usize = 4;

/// Row-major dense tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("rank must be between 1 and {MAX_RANK}"),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "all extents must be >= 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl DenseTensor {
    /// Wraps a flat row-major buffer. The buffer length must equal the
    /// product of the extents.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("buffer holds {} elements, shape needs {len}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Builds a tensor by evaluating `f` at every flat row-major index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..len).map(f).collect(),
        })
    }

    /// Draws i.i.d. values on `[lo, hi)` from `rng` in row-major order.
    pub fn fill_uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::InvalidRange { lo, hi });
        }
        Self::from_fn(shape, |_| rng.uniform(lo, hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Returns `(rows, cols)` if the tensor is 2-D.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [rows, cols] => Ok((rows, cols)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a matrix".into(),
            }),
        }
    }

    /// Element at a 2-D index. Panics when out of range.
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[self.shape.len() - 1] + col]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Copy with a single flat element replaced; used by the
    /// finite-difference oracle.
    pub fn with_element(&self, index: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.data[index] = value;
        out
    }

    pub fn transpose(&self) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = self.data[i * cols + j];
            }
        }
        Self::from_vec(&[cols, rows], data)
    }

    /// Elementwise inner product `⟨self, other⟩`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape("dot", other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|x| x * factor)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape("add", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Splits a tensor of rank ≥ 3 into its trailing matrices. A
    /// `B×h×L×C` tensor yields `B·h` tensors of shape `L×C`.
    pub fn matrix_slices(&self) -> Result<Vec<DenseTensor>> {
        if self.rank() < 3 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected at least one leading batch axis".into(),
            });
        }
        let n = self.rank();
        let (rows, cols) = (self.shape[n - 2], self.shape[n - 1]);
        Ok(self
            .data
            .chunks_exact(rows * cols)
            .map(|chunk| DenseTensor {
                shape: vec![rows, cols],
                data: chunk.to_vec(),
            })
            .collect())
    }

    /// Inverse of [`matrix_slices`](Self::matrix_slices).
    pub fn stack(leading: &[usize], slices: &[DenseTensor]) -> Result<Self> {
        let expected: usize = leading.iter().product();
        if slices.len() != expected || slices.is_empty() {
            return Err(Error::InvalidShape {
                shape: leading.to_vec(),
                reason: format!("{} slices for {expected} positions", slices.len()),
            });
        }
        let inner = slices[0].shape.clone();
        let mut data = Vec::with_capacity(expected * slices[0].len());
        for s in slices {
            if s.shape != inner {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    expected: inner,
                    actual: s.shape.clone(),
                });
            }
            data.extend_from_slice(&s.data);
        }
        let mut shape = leading.to_vec();
        shape.extend_from_slice(&inner);
        Self::from_vec(&shape, data)
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Index of the first NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }
}

/// `c[i][j] = Σ_m a[i][m]·b[m][j]`, naive triple loop in `f64`.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let (l, m) = a.dims2()?;
    let (m2, n) = b.dims2()?;
    if m != m2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            expected: vec![m, n],
            actual: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; l * n];
    for i in 0..l {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a.data[i * m..(i + 1) * m].iter().enumerate() {
            for (o, &bpj) in row.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
    DenseTensor::from_vec(&[l, n], out)
}

/// Largest elementwise absolute difference.
pub fn max_abs_diff(a: &DenseTensor, b: &DenseTensor) -> Result<f64> {
    a.check_same_shape("max_abs_diff", b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// Seeded SplitMix64 generator (Steele, Lea & Flood, 2014).
///
/// The seed is the initial 64-bit state. Each draw adds the golden-ratio
/// increment and applies the standard finalizer, so sequences are identical
/// on every platform. Floats take the top 53 bits: `u = (x >> 11)·2⁻⁵³`.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: SplitMix64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`. Draws that round up to `hi` are rejected.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        loop {
            let v = lo + (hi - lo) * self.next_f64();
            if v < hi {
                return v;
            }
        }
    }

    /// Child generator seeded from the next output of `self`.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}
