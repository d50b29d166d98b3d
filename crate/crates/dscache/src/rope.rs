//! Rotary position encoding, applied at use time rather than storage time.
//!
//! Adjacent dimension pairs `(2i, 2i+1)` of a head vector are rotated by
//! `position * base^(-2i / head_dim)`. Because a rotation acts orthogonally
//! on each pair, the dot product between a rotated query and a rotated key
//! depends only on their position difference — the property that lets a
//! cache store raw keys and re-address them with fresh positions later.
//!
//! Angles are always evaluated in `f64` (and cast to the scalar type for the
//! final multiplies), so the `f32` engine and the `f64` engine agree on the
//! rotation itself to within a cast.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Rotary encoding parameters shared by every head of a model.
#[derive(Clone, Debug)]
pub struct RopeParams {
    base: f64,
    head_dim: usize,
    max_position: u64,
    /// `base^(-2i / head_dim)` for pair `i`, precomputed at construction.
    inv_freq: Vec<f64>,
}

impl RopeParams {
    /// Conventional frequency base.
    pub const DEFAULT_BASE: f64 = 10_000.0;

    pub fn new(base: f64, head_dim: usize, max_position: u64) -> Result<Self> {
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::config(format!("rotary base must be positive, got {base}")));
        }
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::config(format!(
                "head_dim must be a positive even number, got {head_dim}"
            )));
        }
        let inv_freq = (0..head_dim / 2)
            .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(RopeParams { base, head_dim, max_position, inv_freq })
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Largest position this instance will encode; a guard, not a capability:
    /// bounded-cache policies are expected to stay far below it.
    pub fn max_position(&self) -> u64 {
        self.max_position
    }

    fn check_position(&self, position: u64) -> Result<()> {
        if position > self.max_position {
            return Err(Error::PositionOverflow { position, bound: self.max_position });
        }
        Ok(())
    }
}

/// Rotates one head vector (`head_dim` entries) in place.
pub fn rope_apply_inplace<S: Scalar>(x: &mut [S], position: u64, params: &RopeParams) -> Result<()> {
    if x.len() != params.head_dim {
        return Err(Error::contract(format!(
            "rotary input length {} does not match head_dim {}",
            x.len(),
            params.head_dim
        )));
    }
    params.check_position(position)?;
    if position == 0 {
        // Zero angle is the identity; skipping the arithmetic keeps the
        // position-0 round trip bitwise exact.
        return Ok(());
    }
    let pos = position as f64;
    for (i, &f) in params.inv_freq.iter().enumerate() {
        let (sin, cos) = (pos * f).sin_cos();
        let (c, s) = (S::from_f64(cos), S::from_f64(sin));
        let a = x[2 * i];
        let b = x[2 * i + 1];
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
    }
    Ok(())
}

/// Rotates one head vector, returning the result.
pub fn rope_apply<S: Scalar>(x: &[S], position: u64, params: &RopeParams) -> Result<Vec<S>> {
    let mut out = x.to_vec();
    rope_apply_inplace(&mut out, position, params)?;
    Ok(out)
}

/// Rotates a packed hidden row — `num_heads * head_dim` entries — by applying
/// the same position to each head-width segment.
///
/// Arithmetic per pair is identical to [`rope_apply_inplace`]; the angles are
/// just evaluated once and reused across heads.
pub fn rope_apply_hidden<S: Scalar>(row: &mut [S], position: u64, params: &RopeParams) -> Result<()> {
    if row.len() % params.head_dim != 0 {
        return Err(Error::contract(format!(
            "hidden row length {} is not a multiple of head_dim {}",
            row.len(),
            params.head_dim
        )));
    }
    params.check_position(position)?;
    if position == 0 {
        return Ok(());
    }
    let pos = position as f64;
    for (i, &f) in params.inv_freq.iter().enumerate() {
        let (sin, cos) = (pos * f).sin_cos();
        let (c, s) = (S::from_f64(cos), S::from_f64(sin));
        for head in row.chunks_mut(params.head_dim) {
            let a = head[2 * i];
            let b = head[2 * i + 1];
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
    Ok(())
}
