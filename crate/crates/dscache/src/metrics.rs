//! Measurements taken while policies run: compute cost, cache geometry,
//! value-vector similarity, and where attention mass lands.
//!
//! Everything here accumulates in `f64` regardless of the engine scalar, so
//! metric values are comparable across precisions.

use crate::error::{Error, Result};
use crate::kv::LayerKv;
use crate::tensor::Scalar;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Cost counters
// ---------------------------------------------------------------------------

/// Which half of query answering is being charged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Everything up to and including the first sampled token.
    Prefill,
    /// Each subsequent single-token step.
    Decode,
}

/// Multiply-accumulate totals, split by phase, charged at matmul call sites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    pub prefill_macs: u64,
    pub decode_macs: u64,
}

impl CostCounters {
    pub fn charge(&mut self, phase: Phase, macs: u64) {
        match phase {
            Phase::Prefill => self.prefill_macs += macs,
            Phase::Decode => self.decode_macs += macs,
        }
    }

    pub fn total(&self) -> u64 {
        self.prefill_macs + self.decode_macs
    }
}

// ---------------------------------------------------------------------------
// Attention mass
// ---------------------------------------------------------------------------

/// Splits one attention row's mass over the three cache regions
/// `[0, sink_end)`, `[sink_end, recent_start)`, `[recent_start, cache_end)`,
/// renormalized so the three fractions sum to one. Columns at or beyond
/// `cache_end` (the query's own tokens and decoded continuations) are
/// excluded. Returns `None` when the cache region is empty or carries no
/// mass.
pub fn mass_split<S: Scalar>(
    row: &[S],
    sink_end: usize,
    recent_start: usize,
    cache_end: usize,
) -> Option<(f64, f64, f64)> {
    if cache_end == 0 || sink_end > recent_start || recent_start > cache_end || cache_end > row.len()
    {
        return None;
    }
    let sum = |lo: usize, hi: usize| row[lo..hi].iter().map(|v| v.to_f64()).sum::<f64>();
    let sink = sum(0, sink_end);
    let past = sum(sink_end, recent_start);
    let recent = sum(recent_start, cache_end);
    let total = sink + past + recent;
    if total <= 0.0 {
        return None;
    }
    Some((sink / total, past / total, recent / total))
}

/// Mean of per-row [`mass_split`] fractions over recorded attention rows.
///
/// Every row (query token x head x layer) weighs equally; rows without cache
/// mass are skipped.
#[derive(Clone, Debug)]
pub struct MassProbe {
    sink_end: usize,
    recent_start: usize,
    cache_end: usize,
    sums: [f64; 3],
    rows: u64,
}

impl MassProbe {
    pub fn new(sink_end: usize, recent_start: usize, cache_end: usize) -> Result<Self> {
        if sink_end > recent_start || recent_start > cache_end {
            return Err(Error::contract(format!(
                "mass regions out of order: sink_end {sink_end}, recent_start {recent_start}, \
                 cache_end {cache_end}"
            )));
        }
        Ok(MassProbe { sink_end, recent_start, cache_end, sums: [0.0; 3], rows: 0 })
    }

    pub fn record<S: Scalar>(&mut self, row: &[S]) {
        if let Some((sink, past, recent)) =
            mass_split(row, self.sink_end, self.recent_start, self.cache_end)
        {
            self.sums[0] += sink;
            self.sums[1] += past;
            self.sums[2] += recent;
            self.rows += 1;
        }
    }

    pub fn rows_recorded(&self) -> u64 {
        self.rows
    }

    /// `(sink, past, recent)` fractions averaged over recorded rows.
    pub fn fractions(&self) -> Option<(f64, f64, f64)> {
        if self.rows == 0 {
            return None;
        }
        let n = self.rows as f64;
        Some((self.sums[0] / n, self.sums[1] / n, self.sums[2] / n))
    }
}

/// One-call form over explicitly recorded rows (a matrix of attention
/// probabilities, one row per recorded query token).
pub fn attention_mass<S: Scalar>(
    rows: &crate::tensor::Matrix<S>,
    sink_end: usize,
    recent_start: usize,
    cache_end: usize,
) -> Result<Option<(f64, f64, f64)>> {
    let mut probe = MassProbe::new(sink_end, recent_start, cache_end)?;
    for i in 0..rows.rows() {
        probe.record(rows.row(i));
    }
    Ok(probe.fractions())
}

// ---------------------------------------------------------------------------
// Value-vector similarity
// ---------------------------------------------------------------------------

/// Outcome of comparing two KV encodings of the same tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    /// Mean per-row cosine over all layers, in `[-1, 1]`.
    pub mean_cosine: f64,
    pub rows_compared: usize,
    /// Rows where either side had zero norm; excluded from the mean.
    pub rows_skipped: usize,
}

/// Mean cosine similarity between the value vectors of two encodings of the
/// same token rows (layer by layer, row by row).
pub fn value_cache_cosine<S: Scalar>(
    subject: &[LayerKv<S>],
    reference: &[LayerKv<S>],
) -> Result<CosineReport> {
    if subject.len() != reference.len() {
        return Err(Error::contract(format!(
            "layer count mismatch: {} vs {}",
            subject.len(),
            reference.len()
        )));
    }
    let mut sum = 0.0;
    let mut compared = 0usize;
    let mut skipped = 0usize;
    for (r, (a, b)) in subject.iter().zip(reference).enumerate() {
        if a.values.rows() != b.values.rows() || a.values.cols() != b.values.cols() {
            return Err(Error::contract(format!(
                "layer {r} value shape mismatch: {}x{} vs {}x{}",
                a.values.rows(),
                a.values.cols(),
                b.values.rows(),
                b.values.cols()
            )));
        }
        for i in 0..a.values.rows() {
            let (va, vb) = (a.values.row(i), b.values.row(i));
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for (x, y) in va.iter().zip(vb) {
                let (x, y) = (x.to_f64(), y.to_f64());
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                skipped += 1;
            } else {
                sum += dot / (na.sqrt() * nb.sqrt());
                compared += 1;
            }
        }
    }
    let mean = if compared == 0 { 0.0 } else { sum / compared as f64 };
    Ok(CosineReport { mean_cosine: mean, rows_compared: compared, rows_skipped: skipped })
}

// ---------------------------------------------------------------------------
// Per-query record
// ---------------------------------------------------------------------------

/// Everything measured while answering one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Stream step at which the query arrived.
    pub step: u64,
    /// Rows of the assembled cache per layer, before the query's own tokens.
    pub cache_rows: Vec<usize>,
    /// Largest row count any layer reached, transient decode rows included.
    pub peak_cache_rows: usize,
    /// Largest rotary position touched while answering.
    pub max_position_used: u64,
    pub prefill_macs: u64,
    pub decode_macs: u64,
    /// Latest frame-encoding similarity measured at or before this query.
    pub value_cosine_vs_reference: Option<f64>,
    pub attention_mass_sink: Option<f64>,
    pub attention_mass_past: Option<f64>,
    pub attention_mass_recent: Option<f64>,
}
