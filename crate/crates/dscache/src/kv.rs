//! Per-layer key/value caches and the operations policies compose.
//!
//! The central representation choice: by default a cache stores *raw* keys —
//! the key projection before any rotary encoding — and attention rotates them
//! when it reads them. Such position-agnostic segments are relocatable: they
//! can be concatenated in any order and addressed with fresh consecutive
//! positions, no matter where their tokens sat in the original stream. The
//! legacy [`StorageMode::PositionEncoded`] mode (keys rotated once, at
//! construction) is kept for equivalence experiments; encoded segments are
//! only combinable while their absolute positions stay contiguous.
//!
//! Every row carries a modality tag and the id of the block that produced it,
//! which is what text stripping and buffer-aligned eviction key off.

use crate::error::{Error, Result};
use crate::rope::{rope_apply_hidden, RopeParams};
use crate::tensor::{Matrix, Scalar};
use std::io::{Read, Write};

// ---------------------------------------------------------------------------
// Row metadata
// ---------------------------------------------------------------------------

/// Modality of the token behind a cache row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    /// Frame content; the default retention rules keep it.
    Visual,
    /// Query or response text; stripped from long-lived caches by default.
    Text,
}

impl Modality {
    fn to_byte(self) -> u8 {
        match self {
            Modality::Visual => 0,
            Modality::Text => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Modality::Visual),
            1 => Ok(Modality::Text),
            other => Err(Error::Parse(format!("unknown modality byte {other}"))),
        }
    }
}

/// How the keys of a cache are stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StorageMode {
    /// Raw keys; rotary encoding is applied by the consumer at use time.
    PositionAgnostic,
    /// Keys rotated once at construction; row `i` is fixed at absolute
    /// position `base_position + i` forever.
    PositionEncoded { base_position: u64 },
}

// ---------------------------------------------------------------------------
// LayerKv / KvCache
// ---------------------------------------------------------------------------

/// One layer's cache rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv<S> {
    pub keys: Matrix<S>,
    pub values: Matrix<S>,
    pub tags: Vec<Modality>,
    pub block_ids: Vec<u64>,
}

impl<S: Scalar> LayerKv<S> {
    pub fn empty(hidden: usize) -> Self {
        LayerKv {
            keys: Matrix::zeros(0, hidden),
            values: Matrix::zeros(0, hidden),
            tags: Vec::new(),
            block_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, hidden: usize) -> Result<()> {
        let n = self.keys.rows();
        if self.values.rows() != n || self.tags.len() != n || self.block_ids.len() != n {
            return Err(Error::contract(format!(
                "layer rows out of step: {} keys, {} values, {} tags, {} block ids",
                n,
                self.values.rows(),
                self.tags.len(),
                self.block_ids.len()
            )));
        }
        if self.keys.cols() != hidden || self.values.cols() != hidden {
            return Err(Error::contract(format!(
                "layer width {}x{} does not match hidden size {hidden}",
                self.keys.cols(),
                self.values.cols()
            )));
        }
        Ok(())
    }
}

/// A multi-layer KV cache with one storage mode across all layers.
///
/// All layers hold the same number of rows, and row `i` describes the same
/// token in every layer (same tag, same block id) — the uniformity that lets
/// eviction and stripping operate on the cache as a whole.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<S> {
    layers: Vec<LayerKv<S>>,
    hidden: usize,
    mode: StorageMode,
}

impl<S: Scalar> KvCache<S> {
    pub fn empty(num_layers: usize, hidden: usize, mode: StorageMode) -> Self {
        KvCache {
            layers: (0..num_layers).map(|_| LayerKv::empty(hidden)).collect(),
            hidden,
            mode,
        }
    }

    pub fn from_layers(layers: Vec<LayerKv<S>>, hidden: usize, mode: StorageMode) -> Result<Self> {
        let cache = KvCache { layers, hidden, mode };
        cache.validate()?;
        Ok(cache)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn mode(&self) -> StorageMode {
        self.mode
    }

    /// Row count, uniform across layers.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, r: usize) -> &LayerKv<S> {
        &self.layers[r]
    }

    pub fn layers(&self) -> &[LayerKv<S>] {
        &self.layers
    }

    /// Tags of the cached tokens (identical in every layer).
    pub fn tags(&self) -> &[Modality] {
        self.layers.first().map_or(&[], |l| &l.tags)
    }

    /// Block ids of the cached tokens (identical in every layer).
    pub fn block_ids(&self) -> &[u64] {
        self.layers.first().map_or(&[], |l| &l.block_ids)
    }

    /// Checks the cross-layer uniformity contract.
    pub fn validate(&self) -> Result<()> {
        let len = self.len();
        for (r, layer) in self.layers.iter().enumerate() {
            layer.validate(self.hidden)?;
            if layer.len() != len {
                return Err(Error::contract(format!(
                    "layer {r} holds {} rows, layer 0 holds {len}",
                    layer.len()
                )));
            }
            if layer.tags != self.layers[0].tags || layer.block_ids != self.layers[0].block_ids {
                return Err(Error::contract(format!(
                    "layer {r} row metadata diverges from layer 0"
                )));
            }
        }
        Ok(())
    }

    /// Appends freshly encoded rows, one [`LayerKv`] per layer.
    pub fn append(&mut self, new_rows: &[LayerKv<S>]) -> Result<()> {
        if new_rows.len() != self.layers.len() {
            return Err(Error::contract(format!(
                "append layer count {} does not match cache layer count {}",
                new_rows.len(),
                self.layers.len()
            )));
        }
        for (layer, new) in self.layers.iter_mut().zip(new_rows) {
            new.validate(self.hidden)?;
            layer.keys = Matrix::vstack(&[&layer.keys, &new.keys])?;
            layer.values = Matrix::vstack(&[&layer.values, &new.values])?;
            layer.tags.extend_from_slice(&new.tags);
            layer.block_ids.extend_from_slice(&new.block_ids);
        }
        Ok(())
    }

    /// Drops the oldest rows until at most `budget_rows` remain.
    ///
    /// Under [`StorageMode::PositionEncoded`] the base position advances by
    /// the evicted count: surviving keys keep the absolute positions they
    /// were rotated at.
    pub fn evict_fifo(&mut self, budget_rows: usize) {
        let len = self.len();
        if len <= budget_rows {
            return;
        }
        let drop = len - budget_rows;
        for layer in &mut self.layers {
            layer.keys = layer.keys.slice_rows(drop, len).expect("evict slice in range");
            layer.values = layer.values.slice_rows(drop, len).expect("evict slice in range");
            layer.tags.drain(..drop);
            layer.block_ids.drain(..drop);
        }
        if let StorageMode::PositionEncoded { base_position } = &mut self.mode {
            *base_position += drop as u64;
        }
    }

    /// Copies rows `from..to` into a new cache.
    pub fn slice(&self, from: usize, to: usize) -> Result<KvCache<S>> {
        if from > to || to > self.len() {
            return Err(Error::contract(format!(
                "slice {from}..{to} out of range for {} rows",
                self.len()
            )));
        }
        let mode = match self.mode {
            StorageMode::PositionAgnostic => StorageMode::PositionAgnostic,
            StorageMode::PositionEncoded { base_position } => {
                StorageMode::PositionEncoded { base_position: base_position + from as u64 }
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                Ok(LayerKv {
                    keys: layer.keys.slice_rows(from, to)?,
                    values: layer.values.slice_rows(from, to)?,
                    tags: layer.tags[from..to].to_vec(),
                    block_ids: layer.block_ids[from..to].to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(KvCache { layers, hidden: self.hidden, mode })
    }

    /// The most recent `rows` rows (the whole cache when shorter).
    pub fn subsample_recent(&self, rows: usize) -> KvCache<S> {
        let from = self.len().saturating_sub(rows);
        self.slice(from, self.len()).expect("suffix slice in range")
    }

    /// Keeps the newest row of every `stride`-sized group, counted from the
    /// newest end: of 10 rows at stride 2, rows 1, 3, 5, 7, 9 survive.
    pub fn subsample_stride(&self, stride: usize) -> Result<KvCache<S>> {
        if stride == 0 {
            return Err(Error::contract("subsample stride must be at least 1".to_string()));
        }
        let len = self.len();
        let indices: Vec<usize> = (0..len).filter(|i| (len - 1 - i) % stride == 0).collect();
        if let StorageMode::PositionEncoded { .. } = self.mode {
            return Err(Error::contract(
                "cannot subsample a position-encoded cache: surviving keys would keep \
                 non-consecutive absolute positions"
                    .to_string(),
            ));
        }
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                Ok(LayerKv {
                    keys: layer.keys.select_rows(&indices)?,
                    values: layer.values.select_rows(&indices)?,
                    tags: indices.iter().map(|&i| layer.tags[i]).collect(),
                    block_ids: indices.iter().map(|&i| layer.block_ids[i]).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(KvCache { layers, hidden: self.hidden, mode: self.mode })
    }

    /// Removes every text-tagged row from all layers.
    ///
    /// Only meaningful on position-agnostic caches: dropping interior rows of
    /// an encoded cache would leave gaps in its absolute positions.
    pub fn strip_text(&mut self) -> Result<usize> {
        if let StorageMode::PositionEncoded { .. } = self.mode {
            return Err(Error::contract(
                "cannot strip rows from a position-encoded cache".to_string(),
            ));
        }
        let keep: Vec<usize> = self
            .tags()
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == Modality::Visual)
            .map(|(i, _)| i)
            .collect();
        let removed = self.len() - keep.len();
        if removed == 0 {
            return Ok(0);
        }
        for layer in &mut self.layers {
            layer.keys = layer.keys.select_rows(&keep)?;
            layer.values = layer.values.select_rows(&keep)?;
            layer.tags = keep.iter().map(|&i| layer.tags[i]).collect();
            layer.block_ids = keep.iter().map(|&i| layer.block_ids[i]).collect();
        }
        Ok(removed)
    }

    /// Copies the rows produced by `block_id`, one [`LayerKv`] per layer;
    /// `None` when the block left no rows here.
    pub fn extract_block(&self, block_id: u64) -> Option<Vec<LayerKv<S>>> {
        let indices: Vec<usize> = self
            .block_ids()
            .iter()
            .enumerate()
            .filter(|(_, id)| **id == block_id)
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            return None;
        }
        let layers = self
            .layers
            .iter()
            .map(|layer| LayerKv {
                keys: layer.keys.select_rows(&indices).expect("indices in range"),
                values: layer.values.select_rows(&indices).expect("indices in range"),
                tags: indices.iter().map(|&i| layer.tags[i]).collect(),
                block_ids: indices.iter().map(|&i| layer.block_ids[i]).collect(),
            })
            .collect();
        Some(layers)
    }

    /// Drops all rows produced by `block_id` (buffer-aligned eviction).
    pub fn remove_block(&mut self, block_id: u64) -> Result<usize> {
        if let StorageMode::PositionEncoded { .. } = self.mode {
            return Err(Error::contract(
                "cannot remove rows from a position-encoded cache".to_string(),
            ));
        }
        let keep: Vec<usize> = self
            .block_ids()
            .iter()
            .enumerate()
            .filter(|(_, id)| **id != block_id)
            .map(|(i, _)| i)
            .collect();
        let removed = self.len() - keep.len();
        if removed == 0 {
            return Ok(0);
        }
        for layer in &mut self.layers {
            layer.keys = layer.keys.select_rows(&keep)?;
            layer.values = layer.values.select_rows(&keep)?;
            layer.tags = keep.iter().map(|&i| layer.tags[i]).collect();
            layer.block_ids = keep.iter().map(|&i| layer.block_ids[i]).collect();
        }
        Ok(removed)
    }
}

/// Concatenates caches left to right.
///
/// All parts must agree on layer count, hidden size, and storage mode.
/// Position-agnostic caches concatenate freely — that is the point of the
/// mode. Encoded caches are only accepted while their absolute positions
/// remain contiguous; anything else would splice keys whose rotations
/// disagree about where they sit.
pub fn concat<S: Scalar>(parts: &[&KvCache<S>]) -> Result<KvCache<S>> {
    let first = parts.first().ok_or_else(|| Error::contract("concat of zero caches".to_string()))?;
    // Empty segments carry no constraint: the result's mode comes from the
    // first non-empty part (an all-empty concat keeps the first part's
    // declared mode), and for encoded parts each later non-empty segment
    // must pick up exactly where the previous one stopped.
    let deciding = parts.iter().find(|p| !p.is_empty()).unwrap_or(first);
    let agnostic = deciding.mode() == StorageMode::PositionAgnostic;
    let mut expected_next: Option<u64> = None;
    let mut result_base: Option<u64> = None;
    for part in parts {
        if part.num_layers() != first.num_layers() || part.hidden() != first.hidden() {
            return Err(Error::contract(format!(
                "concat shape mismatch: {}x{} vs {}x{} (layers x hidden)",
                part.num_layers(),
                part.hidden(),
                first.num_layers(),
                first.hidden()
            )));
        }
        if part.is_empty() {
            continue;
        }
        match part.mode() {
            StorageMode::PositionAgnostic if agnostic => {}
            StorageMode::PositionEncoded { base_position } if !agnostic => {
                if let Some(next) = expected_next {
                    if base_position != next {
                        return Err(Error::contract(format!(
                            "cannot recombine position-encoded caches: segment starts at \
                             position {base_position}, expected {next}"
                        )));
                    }
                }
                result_base.get_or_insert(base_position);
                expected_next = Some(base_position + part.len() as u64);
            }
            _ => {
                return Err(Error::contract(
                    "cannot concatenate caches with different storage modes".to_string(),
                ));
            }
        }
    }
    let layers = (0..first.num_layers())
        .map(|r| {
            let keys: Vec<&Matrix<S>> = parts.iter().map(|p| &p.layer(r).keys).collect();
            let values: Vec<&Matrix<S>> = parts.iter().map(|p| &p.layer(r).values).collect();
            Ok(LayerKv {
                keys: Matrix::vstack(&keys)?,
                values: Matrix::vstack(&values)?,
                tags: parts.iter().flat_map(|p| p.layer(r).tags.iter().copied()).collect(),
                block_ids: parts.iter().flat_map(|p| p.layer(r).block_ids.iter().copied()).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let mode = if agnostic {
        StorageMode::PositionAgnostic
    } else {
        // Base of the first non-empty segment; an all-empty encoded concat
        // keeps the deciding part's declared base.
        StorageMode::PositionEncoded {
            base_position: result_base.unwrap_or(match deciding.mode() {
                StorageMode::PositionEncoded { base_position } => base_position,
                StorageMode::PositionAgnostic => unreachable!("agnostic handled above"),
            }),
        }
    };
    KvCache::from_layers(layers, first.hidden(), mode)
}

/// Rotates a position-agnostic cache's keys at consecutive positions starting
/// from `start`, leaving the source untouched.
///
/// The result is position-encoded and consumable by attention as-is; it is a
/// derived view for inspection and experiments, not a replacement for the
/// stored cache.
pub fn assign_positions<S: Scalar>(
    cache: &KvCache<S>,
    start: u64,
    rope: &RopeParams,
) -> Result<KvCache<S>> {
    if cache.mode() != StorageMode::PositionAgnostic {
        return Err(Error::contract(
            "assign_positions expects a position-agnostic cache".to_string(),
        ));
    }
    let layers = cache
        .layers
        .iter()
        .map(|layer| {
            let mut keys = layer.keys.clone();
            for i in 0..keys.rows() {
                rope_apply_hidden(keys.row_mut(i), start + i as u64, rope)?;
            }
            Ok(LayerKv {
                keys,
                values: layer.values.clone(),
                tags: layer.tags.clone(),
                block_ids: layer.block_ids.clone(),
            })
        })
        .collect::<Result<_>>()?;
    KvCache::from_layers(layers, cache.hidden(), StorageMode::PositionEncoded { base_position: start })
}

// ---------------------------------------------------------------------------
// Sink cache
// ---------------------------------------------------------------------------

/// The frozen attention-sink prefix: built once from the first tokens of a
/// stream, read-only afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct SinkCache<S>(KvCache<S>);

impl<S: Scalar> SinkCache<S> {
    pub fn new(cache: KvCache<S>) -> Result<Self> {
        cache.validate()?;
        Ok(SinkCache(cache))
    }

    /// An empty sink: every policy runs sink-free until the stream has
    /// delivered enough tokens to fill one. A sink always heads the cache,
    /// so an encoded sink declares base position 0 from the start.
    pub fn empty(num_layers: usize, hidden: usize, mode: StorageMode) -> Self {
        SinkCache(KvCache::empty(num_layers, hidden, mode))
    }

    pub fn cache(&self) -> &KvCache<S> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Position assignment
// ---------------------------------------------------------------------------

/// Where an assembled cache and the incoming query tokens sit on the rotary
/// axis.
///
/// The contiguity invariant — query positions continue the cache without a
/// gap — is what attention checks before computing; the one sanctioned
/// exception is the reversed-cache diagnostic used as a fault injection by
/// the equivalence checker's negative control.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionAssignment {
    pub cache_start: u64,
    pub query_start: u64,
    /// Fault injection: address cache row `i` at position `cache_start +
    /// (len - 1 - i)` instead. Breaks relative distances by design.
    pub reversed_cache: bool,
}

impl PositionAssignment {
    /// The standard assignment: cache rows at `cache_start..`, queries
    /// continuing right after.
    #[must_use]
    pub fn contiguous(cache_start: u64, cache_len: usize) -> Self {
        PositionAssignment {
            cache_start,
            query_start: cache_start + cache_len as u64,
            reversed_cache: false,
        }
    }

    /// Like [`PositionAssignment::contiguous`], but with cache rows addressed
    /// in reverse order. Exists so the equivalence checker has a knob that is
    /// guaranteed to change answers.
    #[must_use]
    pub fn reversed_diagnostic(cache_start: u64, cache_len: usize) -> Self {
        PositionAssignment {
            cache_start,
            query_start: cache_start + cache_len as u64,
            reversed_cache: true,
        }
    }

    /// Checks the contiguity invariant against an actual cache length.
    pub fn validate(&self, cache_len: usize) -> Result<()> {
        if self.query_start != self.cache_start + cache_len as u64 {
            return Err(Error::contract(format!(
                "query positions start at {} but the cache spans {}..{}",
                self.query_start,
                self.cache_start,
                self.cache_start + cache_len as u64
            )));
        }
        Ok(())
    }

    /// Rotary position of cache row `i`.
    #[must_use]
    pub fn cache_position(&self, i: usize, cache_len: usize) -> u64 {
        if self.reversed_cache {
            self.cache_start + (cache_len - 1 - i) as u64
        } else {
            self.cache_start + i as u64
        }
    }
}

// ---------------------------------------------------------------------------
// Snapshots
// ---------------------------------------------------------------------------

const SNAPSHOT_MAGIC: &[u8; 4] = b"DSKV";
const SNAPSHOT_VERSION: u16 = 1;

/// Writes the flat binary snapshot layout: a fixed header followed by, per
/// layer, key rows, value rows, tag bytes, and block ids (all little-endian).
pub fn write_snapshot<S: Scalar>(cache: &KvCache<S>, out: &mut impl Write) -> Result<()> {
    cache.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    buf.push(S::BYTES as u8);
    let (mode_byte, base) = match cache.mode() {
        StorageMode::PositionAgnostic => (0u8, 0u64),
        StorageMode::PositionEncoded { base_position } => (1u8, base_position),
    };
    buf.push(mode_byte);
    buf.extend_from_slice(&base.to_le_bytes());
    buf.extend_from_slice(&(cache.num_layers() as u32).to_le_bytes());
    buf.extend_from_slice(&(cache.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(cache.hidden() as u64).to_le_bytes());
    for layer in &cache.layers {
        for &v in layer.keys.data() {
            v.write_le(&mut buf);
        }
        for &v in layer.values.data() {
            v.write_le(&mut buf);
        }
        for &tag in &layer.tags {
            buf.push(tag.to_byte());
        }
        for &id in &layer.block_ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Serializes a cache to bytes; byte equality here is the strongest identity
/// the engine asserts between two caches.
pub fn snapshot_bytes<S: Scalar>(cache: &KvCache<S>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_snapshot(cache, &mut buf)?;
    Ok(buf)
}

/// Reads a snapshot written by [`write_snapshot`] with the same scalar type.
pub fn read_snapshot<S: Scalar>(input: &mut impl Read) -> Result<KvCache<S>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        let slice = bytes
            .get(*off..*off + n)
            .ok_or_else(|| Error::Parse("snapshot truncated".to_string()))?;
        *off += n;
        Ok(slice)
    };

    if take(&mut off, 4)? != SNAPSHOT_MAGIC {
        return Err(Error::Parse("not a cache snapshot (bad magic)".to_string()));
    }
    let version = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap());
    if version != SNAPSHOT_VERSION {
        return Err(Error::Parse(format!("unsupported snapshot version {version}")));
    }
    let width = take(&mut off, 1)?[0] as usize;
    if width != S::BYTES {
        return Err(Error::Parse(format!(
            "snapshot holds {width}-byte scalars, reader expects {}-byte {}",
            S::BYTES,
            S::NAME
        )));
    }
    let mode_byte = take(&mut off, 1)?[0];
    let base = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    let mode = match mode_byte {
        0 => StorageMode::PositionAgnostic,
        1 => StorageMode::PositionEncoded { base_position: base },
        other => return Err(Error::Parse(format!("unknown storage mode byte {other}"))),
    };
    let num_layers = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let len = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    let hidden = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;

    let read_matrix = |off: &mut usize| -> Result<Matrix<S>> {
        let mut data = Vec::with_capacity(len * hidden);
        for _ in 0..len * hidden {
            data.push(S::read_le(take(off, S::BYTES)?));
        }
        Matrix::from_vec(len, hidden, data)
    };

    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let keys = read_matrix(&mut off)?;
        let values = read_matrix(&mut off)?;
        let mut tags = Vec::with_capacity(len);
        for _ in 0..len {
            tags.push(Modality::from_byte(take(&mut off, 1)?[0])?);
        }
        let mut block_ids = Vec::with_capacity(len);
        for _ in 0..len {
            block_ids.push(u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
        }
        layers.push(LayerKv { keys, values, tags, block_ids });
    }
    if off != bytes.len() {
        return Err(Error::Parse(format!(
            "snapshot has {} trailing bytes",
            bytes.len() - off
        )));
    }
    KvCache::from_layers(layers, hidden, mode)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
