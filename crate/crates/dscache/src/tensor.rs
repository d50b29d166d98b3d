//! Dense row-major matrices and the deterministic kernels built on them.
//!
//! Every kernel accumulates in a fixed order (ascending index), so a given
//! input produces bit-identical output on every run, platform, and opt level
//! that implements IEEE-754 — the property the rest of the crate leans on for
//! byte-exact cache and report comparisons. Kernels are generic over
//! [`Scalar`] so the whole engine can run in `f64` (the default) or `f32`.

use crate::error::{Error, Result};
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

// ---------------------------------------------------------------------------
// Scalar
// ---------------------------------------------------------------------------

/// Element type of all tensors: `f32` or `f64`.
///
/// Transcendentals that feed rotary angles are always evaluated in `f64` and
/// cast down, so the trait only needs the handful of operations the kernels
/// apply elementwise.
pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;
    /// Width of the little-endian encoding used by cache snapshots.
    const BYTES: usize;
    /// Short name used in snapshot headers and report records.
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte scalar"))
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f32::exp(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte scalar"))
    }
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    #[must_use]
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![S::ZERO; rows * cols] }
    }

    /// Builds a matrix from row-major data; errors on a length mismatch.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[must_use]
    pub fn transpose(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Stacks matrices vertically; all parts must share a column count.
    pub fn vstack(parts: &[&Matrix<S>]) -> Result<Matrix<S>> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for part in parts {
            if part.cols != cols {
                return Err(Error::contract(format!(
                    "vstack column mismatch: {} vs {}",
                    part.cols, cols
                )));
            }
            data.extend_from_slice(&part.data);
            rows += part.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Copies rows `from..to` into a new matrix.
    pub fn slice_rows(&self, from: usize, to: usize) -> Result<Matrix<S>> {
        if from > to || to > self.rows {
            return Err(Error::contract(format!(
                "row slice {from}..{to} out of range for {} rows",
                self.rows
            )));
        }
        Ok(Matrix {
            rows: to - from,
            cols: self.cols,
            data: self.data[from * self.cols..to * self.cols].to_vec(),
        })
    }

    /// Copies an arbitrary selection of rows, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix<S>> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::contract(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix { rows: indices.len(), cols: self.cols, data })
    }

    /// Largest elementwise absolute difference, in `f64`.
    pub fn max_abs_diff(&self, other: &Matrix<S>) -> f64 {
        assert_eq!(self.rows, other.rows, "max_abs_diff row mismatch");
        assert_eq!(self.cols, other.cols, "max_abs_diff col mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Seeded randomness
// ---------------------------------------------------------------------------

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a root seed and a tag.
///
/// Pure in `(root, tag)`, so block seeds depend only on the scenario seed and
/// the block id — never on generation order.
#[must_use]
pub fn derive_seed(root: u64, tag: u64) -> u64 {
    mix(root ^ mix(tag.wrapping_mul(GAMMA) ^ 0xA5A5_A5A5_A5A5_A5A5))
}

/// Counter-based pseudo-random generator (splitmix64).
///
/// Output `i` is a pure function of `(seed, i)`, which makes streams
/// splittable and replayable: [`Rng::split`] derives an independent stream
/// from a tag without consuming state from the parent.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    #[must_use]
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Independent child stream; depends only on the parent's seed and `tag`.
    #[must_use]
    pub fn split(&self, tag: u64) -> Rng {
        Rng::new(derive_seed(self.seed, tag))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw via Box-Muller, evaluated in `f64`.
    pub fn next_gaussian(&mut self) -> f64 {
        // u1 lies in (0, 1] so the log never sees zero.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Fills a matrix with i.i.d. `N(0, scale^2)` entries in row-major order.
pub fn seeded_gaussian<S: Scalar>(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix<S> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(S::from_f64(rng.next_gaussian() * scale));
    }
    Matrix { rows, cols, data }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Matrix product `a * b`.
///
/// Every output cell accumulates strictly in ascending `k`, so the result is
/// bit-stable: the compiler may vectorize across the `j` lanes, which never
/// reorders a single cell's sum.
pub fn matmul<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<Matrix<S>> {
    if a.cols != b.rows {
        return Err(Error::contract(format!(
            "matmul shape mismatch: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let cols = b.cols;
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * cols..(i + 1) * cols];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * cols..(k + 1) * cols];
            for j in 0..cols {
                orow[j] += aik * brow[j];
            }
        }
    }
    debug_assert!(out.all_finite(), "matmul produced a non-finite entry");
    Ok(out)
}

/// Multiply-accumulate count of `matmul(a, b)`; the cost counters use this at
/// every call site.
#[must_use]
pub fn mac_count(rows: usize, inner: usize, cols: usize) -> u64 {
    rows as u64 * inner as u64 * cols as u64
}

/// Row-wise softmax over a valid prefix of columns.
///
/// `valid_prefix[i]` gives the number of leading columns of row `i` that
/// participate; the rest are exactly zero in the output. Max-subtraction
/// keeps the exponentials in range; each row then sums to one up to rounding.
pub fn softmax_rows<S: Scalar>(m: &Matrix<S>, valid_prefix: &[usize]) -> Result<Matrix<S>> {
    if valid_prefix.len() != m.rows {
        return Err(Error::contract(format!(
            "mask length {} does not match {} rows",
            valid_prefix.len(),
            m.rows
        )));
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let v = valid_prefix[i];
        if v == 0 || v > m.cols {
            return Err(Error::contract(format!(
                "row {i} valid prefix {v} outside 1..={}",
                m.cols
            )));
        }
        let row = m.row(i);
        let mut max = row[0];
        for &x in &row[1..v] {
            if x > max {
                max = x;
            }
        }
        let orow = &mut out.data[i * m.cols..(i + 1) * m.cols];
        let mut sum = S::ZERO;
        for j in 0..v {
            let e = (row[j] - max).exp();
            orow[j] = e;
            sum += e;
        }
        for val in orow[..v].iter_mut() {
            *val /= sum;
        }
    }
    debug_assert!(out.all_finite(), "softmax produced a non-finite entry");
    Ok(out)
}

/// Root-mean-square normalization with a learned per-column gain.
///
/// Each row is divided by `sqrt(mean(x^2) + eps)`; the epsilon keeps all-zero
/// rows at exactly zero instead of dividing by zero.
pub fn rms_norm<S: Scalar>(m: &Matrix<S>, gain: &[S], eps: f64) -> Result<Matrix<S>> {
    if gain.len() != m.cols {
        return Err(Error::contract(format!(
            "gain length {} does not match {} columns",
            gain.len(),
            m.cols
        )));
    }
    let inv_n = S::from_f64(1.0 / m.cols as f64);
    let eps = S::from_f64(eps);
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let row = m.row(i);
        let mut sum_sq = S::ZERO;
        for &x in row {
            sum_sq += x * x;
        }
        let denom = (sum_sq * inv_n + eps).sqrt();
        let orow = &mut out.data[i * m.cols..(i + 1) * m.cols];
        for j in 0..m.cols {
            orow[j] = row[j] / denom * gain[j];
        }
    }
    debug_assert!(out.all_finite(), "rms_norm produced a non-finite entry");
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
