//! Dense row-major tensor with byte accounting.

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU8, Ordering};

use crate::error::{mismatch, Result, TensorError};

/// Numeric storage mode.
///
/// Values are always held in `f64` buffers; in `F32` mode every op result is
/// rounded through `f32` and accounted at four bytes per element, which is
/// what a native 32-bit buffer would cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn bytes_per_element(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F64 => v,
            Precision::F32 => v as f32 as f64,
        }
    }

    pub fn round_slice(self, v: &mut [f64]) {
        if self == Precision::F32 {
            for x in v {
                *x = *x as f32 as f64;
            }
        }
    }
}

static GLOBAL_PRECISION: AtomicU8 = AtomicU8::new(0);

/// Sets the engine-wide default precision picked up by [`crate::Graph::new`].
pub fn set_global_precision(p: Precision) {
    GLOBAL_PRECISION.store(matches!(p, Precision::F32) as u8, Ordering::SeqCst);
}

pub fn global_precision() -> Precision {
    match GLOBAL_PRECISION.load(Ordering::SeqCst) {
        1 => Precision::F32,
        _ => Precision::F64,
    }
}

thread_local! {
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

fn track_alloc(bytes: usize) {
    LIVE.with(|l| {
        let now = l.get() + bytes as isize;
        l.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now)
            }
        });
    });
}

fn track_free(bytes: usize) {
    LIVE.with(|l| l.set(l.get() - bytes as isize));
}

/// Tensor bytes currently live on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(|l| l.get().max(0) as usize)
}

/// High-water mark of tensor bytes on this thread since the last reset.
pub fn peak_bytes() -> usize {
    PEAK.with(|p| p.get().max(0) as usize)
}

/// Resets the high-water mark to the current live total.
pub fn reset_peak() {
    let live = LIVE.with(|l| l.get());
    PEAK.with(|p| p.set(live));
}

pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    pub(crate) fn raw(dims: Vec<usize>, data: Vec<f64>, precision: Precision) -> Tensor {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        track_alloc(data.len() * precision.bytes_per_element());
        Tensor {
            dims,
            data,
            precision,
        }
    }

    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::with_precision(dims, data, global_precision())
    }

    pub fn with_precision(dims: &[usize], data: Vec<f64>, precision: Precision) -> Result<Tensor> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(mismatch("new", format!("extents must be positive, got {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(mismatch(
                "new",
                format!("dims {dims:?} need {n} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteValue { op: "new" });
        }
        let mut data = data;
        precision.round_slice(&mut data);
        Ok(Tensor::raw(dims.to_vec(), data, precision))
    }

    pub fn zeros(dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::raw(dims.to_vec(), vec![0.0; n], global_precision())
    }

    pub fn full(dims: &[usize], v: f64) -> Tensor {
        let n = dims.iter().product();
        Tensor::raw(dims.to_vec(), vec![v; n], global_precision())
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::raw(vec![1, 1], vec![v], global_precision())
    }

    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::raw(vec![n, n], data, global_precision())
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        if rows.iter().any(|x| x.len() != c) {
            return Err(mismatch("from_rows", "ragged rows"));
        }
        Tensor::new(&[r, c], rows.concat())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Row count of a matrix (the leading extent for higher ranks).
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Column count when viewed as a matrix (product of trailing extents).
    pub fn cols(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != self.len() || dims.contains(&0) {
            return Err(mismatch("reshape", format!("{:?} -> {dims:?}", self.dims)));
        }
        Ok(Tensor::raw(
            dims.to_vec(),
            self.data.clone(),
            self.precision,
        ))
    }

    /// Elementwise map; errors if the result is not finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteValue { op: "map" });
        }
        Ok(Tensor::raw(self.dims.clone(), data, self.precision))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor::raw(self.dims.clone(), self.data.clone(), self.precision)
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        track_free(self.data.len() * self.precision.bytes_per_element());
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}
