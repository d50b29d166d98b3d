//! Cache-construction policies: how an unbounded stream of frame blocks is
//! folded into a bounded KV cache that queries can attend over.
//!
//! All four policies share the same skeleton — a frozen sink built from the
//! first tokens of the stream, a retention rule over the most recent
//! `window_frames` frames, and transient query handling (query and response
//! KV never outlive the answer unless explicitly re-ingested). They differ in
//! *when* frames are encoded:
//!
//! - **Uniform** encodes every frame on arrival against the current cache and
//!   FIFO-evicts rows beyond the window. Cheap and incremental, but each
//!   cached row was computed against whatever happened to be in the window at
//!   its arrival — residue of evicted history accumulates in the values.
//! - **Offline** stores raw frames and re-encodes the whole window from
//!   scratch for every query: reference-quality caches at a per-query cost
//!   that grows with the window.
//! - **Dscache** decouples the two concerns. Arriving frames wait in a FIFO
//!   feature buffer of `buffer_frames` blocks; a frame is encoded only when
//!   evicted from the buffer, against the sink plus the most recent
//!   `active_frames` of the cumulative cache, and appended there. At query
//!   time an instant cache is rebuilt from the buffered frames against the
//!   sink alone — by construction independent of the cumulative contents —
//!   and attention runs over `[sink | cumulative | instant]` addressed with
//!   consecutive positions from zero.
//! - **DscacheApprox** keeps an incrementally maintained copy of the instant
//!   cache, rebuilding it only every `refresh_period` buffer insertions, so
//!   query prefill no longer pays for the rebuild.
//!
//! Policies are deterministic: replaying a stream reproduces every cache and
//! answer bit for bit.

use crate::error::{Error, Result};
use crate::kv::{
    concat, KvCache, LayerKv, Modality, PositionAssignment, SinkCache, StorageMode,
};
use crate::metrics::{MassProbe, RunMetrics};
use crate::model::{ExecContext, Model, QueryAnswer, TokenBlock};
use crate::tensor::{derive_seed, Matrix, Rng, Scalar};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// What happens to query/response text relative to the feature buffer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferTextPolicy {
    /// Text never enters the buffer (the default for frame streams).
    #[default]
    Exclude,
    /// Each answered response is re-embedded and pushed as a buffer block,
    /// flowing toward the cumulative cache like a frame.
    IncludeResponses,
}

/// Retention geometry shared by every policy. Counts are in frames; row
/// budgets multiply by `tokens_per_frame`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Tokens frozen into the attention sink from the start of the stream.
    pub sink_tokens: usize,
    /// Total retained frames (uniform/offline); for the decoupled policies
    /// this must equal `buffer_frames + cumulative_frames` when given.
    pub window_frames: usize,
    /// Feature-buffer capacity in blocks.
    pub buffer_frames: usize,
    /// Cumulative-cache budget in frames.
    pub cumulative_frames: usize,
    /// Frames of cumulative context visible to each cumulative update;
    /// defaults to `cumulative_frames`.
    pub active_frames: Option<usize>,
    pub tokens_per_frame: usize,
    /// DscacheApprox: rebuild the maintained instant cache every this many
    /// buffer insertions.
    pub refresh_period: usize,
    /// Token-count upscaling applied to the newest buffered frame when the
    /// instant cache is built; 1.0 leaves the frame untouched.
    pub resolution_multiplier: f64,
    /// Drop text rows instead of promoting them into the cumulative cache.
    pub strip_text_on_evict: bool,
    pub buffer_text_policy: BufferTextPolicy,
    /// Stride-subsample the cumulative cache at query time; 1 keeps all rows.
    pub decode_stride: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            sink_tokens: 0,
            window_frames: 0,
            buffer_frames: 0,
            cumulative_frames: 0,
            active_frames: None,
            tokens_per_frame: 8,
            refresh_period: 0,
            resolution_multiplier: 1.0,
            strip_text_on_evict: true,
            buffer_text_policy: BufferTextPolicy::Exclude,
            decode_stride: 1,
        }
    }
}

impl PolicyConfig {
    pub fn active_rows(&self) -> usize {
        self.active_frames.unwrap_or(self.cumulative_frames) * self.tokens_per_frame
    }

    pub fn cumulative_rows(&self) -> usize {
        self.cumulative_frames * self.tokens_per_frame
    }

    pub fn window_rows(&self) -> usize {
        self.window_frames * self.tokens_per_frame
    }

    /// Effective total frames retained by the decoupled policies.
    pub fn decoupled_window_frames(&self) -> usize {
        self.buffer_frames + self.cumulative_frames
    }

    fn validate_common(&self) -> Result<()> {
        if self.tokens_per_frame == 0 {
            return Err(Error::config("tokens_per_frame must be at least 1".to_string()));
        }
        if self.decode_stride == 0 {
            return Err(Error::config("decode_stride must be at least 1".to_string()));
        }
        if !(self.resolution_multiplier.is_finite() && self.resolution_multiplier >= 1.0) {
            return Err(Error::config(format!(
                "resolution_multiplier must be a finite value >= 1, got {}",
                self.resolution_multiplier
            )));
        }
        Ok(())
    }

    pub fn validate(&self, kind: PolicyKind) -> Result<()> {
        self.validate_common()?;
        match kind {
            PolicyKind::Uniform | PolicyKind::Offline => {
                if self.window_frames == 0 {
                    return Err(Error::config(format!(
                        "{kind:?} policy needs window_frames >= 1"
                    )));
                }
                if self.buffer_frames > self.window_frames {
                    return Err(Error::config(
                        "buffer_frames (the recent-region probe width) cannot exceed \
                         window_frames"
                            .to_string(),
                    ));
                }
                if self.buffer_text_policy != BufferTextPolicy::Exclude {
                    return Err(Error::config(format!(
                        "{kind:?} policy has no feature buffer to put responses in"
                    )));
                }
            }
            PolicyKind::Dscache | PolicyKind::DscacheApprox => {
                if self.decoupled_window_frames() == 0 {
                    return Err(Error::config(
                        "buffer_frames + cumulative_frames must be at least 1".to_string(),
                    ));
                }
                if self.window_frames != 0
                    && self.window_frames != self.decoupled_window_frames()
                {
                    return Err(Error::config(format!(
                        "window_frames {} contradicts buffer_frames {} + cumulative_frames {}",
                        self.window_frames, self.buffer_frames, self.cumulative_frames
                    )));
                }
                if let Some(active) = self.active_frames {
                    if active > self.cumulative_frames {
                        return Err(Error::config(format!(
                            "active_frames {active} exceeds cumulative_frames {}",
                            self.cumulative_frames
                        )));
                    }
                }
                if kind == PolicyKind::DscacheApprox && self.refresh_period == 0 {
                    return Err(Error::config(
                        "DscacheApprox needs refresh_period >= 1 (use Dscache for the \
                         always-fresh variant)"
                            .to_string(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Uniform,
    Offline,
    Dscache,
    DscacheApprox,
}

/// A policy instance as named in a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub id: String,
    pub kind: PolicyKind,
    /// Uniform only: legacy pipeline that rotates keys at construction time.
    #[serde(default)]
    pub position_encoded_storage: bool,
    /// Uniform only: fault injection that addresses cache rows in reverse.
    #[serde(default)]
    pub reversed_positions: bool,
    #[serde(default)]
    pub config: PolicyConfig,
}

/// Instantiates the policy a [`PolicySpec`] describes.
pub fn build_policy<S: Scalar>(
    model: Arc<Model<S>>,
    spec: &PolicySpec,
) -> Result<Box<dyn StreamPolicy<S>>> {
    if (spec.position_encoded_storage || spec.reversed_positions)
        && spec.kind != PolicyKind::Uniform
    {
        return Err(Error::config(format!(
            "policy '{}': storage and position diagnostics only apply to the uniform policy",
            spec.id
        )));
    }
    Ok(match spec.kind {
        PolicyKind::Uniform => Box::new(UniformPolicy::new(
            model,
            spec.config.clone(),
            spec.position_encoded_storage,
            spec.reversed_positions,
        )?),
        PolicyKind::Offline => Box::new(OfflinePolicy::new(model, spec.config.clone())?),
        PolicyKind::Dscache => Box::new(DscachePolicy::new(model, spec.config.clone())?),
        PolicyKind::DscacheApprox => Box::new(ApproxPolicy::new(model, spec.config.clone())?),
    })
}

// ---------------------------------------------------------------------------
// Shared reports
// ---------------------------------------------------------------------------

/// Bookkeeping for one ingested frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameReport {
    /// Multiply-accumulates spent ingesting (sink building, cumulative
    /// updates, approximate-instant maintenance; deferred response
    /// maintenance from an earlier query folds in here).
    pub ingest_macs: u64,
    /// KV rows held after the frame settled (sink + retained caches).
    pub persistent_rows: usize,
    /// Largest co-resident KV row count during the step.
    pub peak_rows: usize,
    pub max_position_used: u64,
}

/// A decoded answer plus everything measured while producing it.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutput<S> {
    pub tokens: Vec<u32>,
    /// Hidden rows that fed the head: query rows, then one per decode step.
    pub prelogit: Matrix<S>,
    pub metrics: RunMetrics,
}

/// The cache a query would attend over right now, plus where the stream
/// stands in absolute token coordinates.
#[derive(Clone, Debug)]
pub struct QueryView<S> {
    pub cache: KvCache<S>,
    /// Total stream tokens ingested so far — the absolute position one past
    /// the newest stream row. Re-ingested responses are not stream tokens
    /// and do not count.
    pub stream_tokens: u64,
}

/// The streaming interface every policy implements.
pub trait StreamPolicy<S: Scalar>: Send {
    fn kind(&self) -> PolicyKind;
    fn config(&self) -> &PolicyConfig;
    fn sink(&self) -> &SinkCache<S>;
    /// Feeds one frame block in arrival order.
    fn ingest(&mut self, block: &TokenBlock<S>) -> Result<FrameReport>;
    /// Answers a query transiently: persistent state is unchanged afterwards
    /// except for explicitly configured response re-ingestion.
    fn answer(
        &mut self,
        query: &TokenBlock<S>,
        max_new: usize,
        step: u64,
        capture_mass: bool,
    ) -> Result<QueryOutput<S>>;
    /// The policy's current KV rows for one ingested block, as a query would
    /// see them; `None` once the block has aged out.
    fn frame_encoding(&mut self, block_id: u64) -> Result<Option<Vec<LayerKv<S>>>>;
    /// A copy of the cache a query would attend over, with the absolute
    /// stream position. Costs nothing against any counter.
    fn query_view(&mut self) -> Result<QueryView<S>>;
    /// KV rows held between events (sink + retained caches).
    fn persistent_rows(&self) -> usize;
}

/// Position assignment for a query against `cache`, continuing its positions.
pub(crate) fn assignment_for<S: Scalar>(cache: &KvCache<S>) -> PositionAssignment {
    match cache.mode() {
        StorageMode::PositionAgnostic => PositionAssignment::contiguous(0, cache.len()),
        StorageMode::PositionEncoded { base_position } => {
            PositionAssignment::contiguous(base_position, cache.len())
        }
    }
}

fn metrics_from_ctx(
    step: u64,
    num_layers: usize,
    rows_before_query: usize,
    peak_rows: usize,
    ctx: &ExecContext,
) -> RunMetrics {
    let mass = ctx.probe.as_ref().and_then(MassProbe::fractions);
    RunMetrics {
        step,
        cache_rows: vec![rows_before_query; num_layers],
        peak_cache_rows: peak_rows,
        max_position_used: ctx.max_position_used,
        prefill_macs: ctx.counters.prefill_macs,
        decode_macs: ctx.counters.decode_macs,
        value_cosine_vs_reference: None,
        attention_mass_sink: mass.map(|m| m.0),
        attention_mass_past: mass.map(|m| m.1),
        attention_mass_recent: mass.map(|m| m.2),
    }
}

// ---------------------------------------------------------------------------
// Sink bootstrap
// ---------------------------------------------------------------------------

/// Collects the first `target` stream tokens and freezes them into the sink.
///
/// Until the target is met the sink stays empty (policies run sink-free) and
/// absorbed tokens are held back from the window entirely. A block straddling
/// the boundary is split; its tail flows on normally.
#[derive(Debug)]
struct SinkBuilder<S> {
    target: usize,
    mode: StorageMode,
    fill: Vec<TokenBlock<S>>,
    collected: usize,
    sink: SinkCache<S>,
}

impl<S: Scalar> SinkBuilder<S> {
    fn new(model: &Model<S>, target: usize, mode: StorageMode) -> Self {
        SinkBuilder {
            target,
            mode,
            fill: Vec::new(),
            collected: 0,
            sink: SinkCache::empty(model.num_layers(), model.hidden(), mode),
        }
    }

    fn built(&self) -> bool {
        self.collected >= self.target
    }

    fn sink(&self) -> &SinkCache<S> {
        &self.sink
    }

    /// Absorbs what the sink still needs; returns the remainder to process
    /// normally, if any.
    fn absorb(
        &mut self,
        model: &Model<S>,
        block: &TokenBlock<S>,
        ctx: &mut ExecContext,
    ) -> Result<Option<TokenBlock<S>>> {
        if self.built() {
            return Ok(Some(block.clone()));
        }
        let needed = self.target - self.collected;
        let (absorbed, rest) = if block.len() <= needed {
            (block.clone(), None)
        } else {
            let (head, tail) = block.split_at(needed)?;
            (head, Some(tail))
        };
        self.collected += absorbed.len();
        self.fill.push(absorbed);
        if self.built() {
            let mut cache = KvCache::empty(model.num_layers(), model.hidden(), self.mode);
            for part in self.fill.drain(..) {
                let kv = model.encode_to_kv(&part, &cache, &assignment_for(&cache), ctx)?;
                cache.append(&kv)?;
            }
            self.sink = SinkCache::new(cache)?;
        }
        Ok(rest)
    }
}

// ---------------------------------------------------------------------------
// Feature buffer
// ---------------------------------------------------------------------------

/// FIFO of raw token blocks awaiting encoding, bounded in blocks.
///
/// Pushing beyond capacity evicts and returns the oldest block; a
/// zero-capacity buffer hands every block straight back.
#[derive(Clone, Debug)]
pub struct FeatureBuffer<S> {
    blocks: VecDeque<TokenBlock<S>>,
    capacity: usize,
}

impl<S: Scalar> FeatureBuffer<S> {
    pub fn new(capacity: usize) -> Self {
        FeatureBuffer { blocks: VecDeque::new(), capacity }
    }

    pub fn push(&mut self, block: TokenBlock<S>) -> Option<TokenBlock<S>> {
        self.blocks.push_back(block);
        if self.blocks.len() > self.capacity {
            self.blocks.pop_front()
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &TokenBlock<S>> {
        self.blocks.iter()
    }

    pub fn newest(&self) -> Option<&TokenBlock<S>> {
        self.blocks.back()
    }

    pub fn total_tokens(&self) -> usize {
        self.blocks.iter().map(TokenBlock::len).sum()
    }
}

// ---------------------------------------------------------------------------
// Uniform streaming policy
// ---------------------------------------------------------------------------

/// Sink + FIFO window, every frame encoded on arrival.
pub struct UniformPolicy<S: Scalar> {
    model: Arc<Model<S>>,
    cfg: PolicyConfig,
    sink: SinkBuilder<S>,
    window: KvCache<S>,
    reversed: bool,
    stream_tokens: u64,
}

impl<S: Scalar> UniformPolicy<S> {
    pub fn new(
        model: Arc<Model<S>>,
        cfg: PolicyConfig,
        position_encoded_storage: bool,
        reversed_positions: bool,
    ) -> Result<Self> {
        cfg.validate(PolicyKind::Uniform)?;
        if reversed_positions && position_encoded_storage {
            return Err(Error::config(
                "the reversed-position diagnostic needs position-agnostic storage".to_string(),
            ));
        }
        let mode = if position_encoded_storage {
            StorageMode::PositionEncoded { base_position: 0 }
        } else {
            StorageMode::PositionAgnostic
        };
        // An encoded window starts right after the sink tokens.
        let window_mode = if position_encoded_storage {
            StorageMode::PositionEncoded { base_position: cfg.sink_tokens as u64 }
        } else {
            StorageMode::PositionAgnostic
        };
        Ok(UniformPolicy {
            sink: SinkBuilder::new(&model, cfg.sink_tokens, mode),
            window: KvCache::empty(model.num_layers(), model.hidden(), window_mode),
            model,
            cfg,
            reversed: reversed_positions,
            stream_tokens: 0,
        })
    }

    /// The window cache (for inspection and tests).
    pub fn window(&self) -> &KvCache<S> {
        &self.window
    }

    fn assembled(&self) -> Result<KvCache<S>> {
        concat(&[self.sink.sink().cache(), &self.window])
    }
}

impl<S: Scalar> StreamPolicy<S> for UniformPolicy<S> {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Uniform
    }

    fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    fn sink(&self) -> &SinkCache<S> {
        self.sink.sink()
    }

    fn ingest(&mut self, block: &TokenBlock<S>) -> Result<FrameReport> {
        let mut ctx = ExecContext::new();
        self.stream_tokens += block.len() as u64;
        if let Some(rest) = self.sink.absorb(&self.model, block, &mut ctx)? {
            let context = self.assembled()?;
            let kv =
                self.model.encode_to_kv(&rest, &context, &assignment_for(&context), &mut ctx)?;
            self.window.append(&kv)?;
            self.window.evict_fifo(self.cfg.window_rows());
        }
        Ok(FrameReport {
            ingest_macs: ctx.counters.total(),
            persistent_rows: self.persistent_rows(),
            peak_rows: ctx.peak_rows.max(self.persistent_rows()),
            max_position_used: ctx.max_position_used,
        })
    }

    fn answer(
        &mut self,
        query: &TokenBlock<S>,
        max_new: usize,
        step: u64,
        capture_mass: bool,
    ) -> Result<QueryOutput<S>> {
        let mut assembled = self.assembled()?;
        let rows_before = assembled.len();
        let assignment = if self.reversed {
            PositionAssignment::reversed_diagnostic(0, rows_before)
        } else {
            assignment_for(&assembled)
        };
        let mut ctx = ExecContext::new();
        if capture_mass {
            let sink_end = self.sink.sink().len();
            let recent_rows = self.cfg.buffer_frames * self.cfg.tokens_per_frame;
            let recent_start = rows_before.saturating_sub(recent_rows).max(sink_end);
            ctx.probe = Some(MassProbe::new(sink_end, recent_start, rows_before)?);
        }
        let QueryAnswer { tokens, prelogit } =
            self.model.answer_query(query, &mut assembled, &assignment, max_new, &mut ctx)?;
        let metrics = metrics_from_ctx(
            step,
            self.model.num_layers(),
            rows_before,
            ctx.peak_rows,
            &ctx,
        );
        Ok(QueryOutput { tokens, prelogit, metrics })
    }

    fn frame_encoding(&mut self, block_id: u64) -> Result<Option<Vec<LayerKv<S>>>> {
        Ok(self.window.extract_block(block_id))
    }

    fn query_view(&mut self) -> Result<QueryView<S>> {
        Ok(QueryView { cache: self.assembled()?, stream_tokens: self.stream_tokens })
    }

    fn persistent_rows(&self) -> usize {
        self.sink.sink().len() + self.window.len()
    }
}

// ---------------------------------------------------------------------------
// Offline sliding-window recompute
// ---------------------------------------------------------------------------

/// Sink + raw frame retention; every query re-encodes the window from
/// scratch. No KV persists between queries except the sink.
pub struct OfflinePolicy<S: Scalar> {
    model: Arc<Model<S>>,
    cfg: PolicyConfig,
    sink: SinkBuilder<S>,
    frames: VecDeque<TokenBlock<S>>,
    stream_tokens: u64,
}

impl<S: Scalar> OfflinePolicy<S> {
    pub fn new(model: Arc<Model<S>>, cfg: PolicyConfig) -> Result<Self> {
        cfg.validate(PolicyKind::Offline)?;
        Ok(OfflinePolicy {
            sink: SinkBuilder::new(&model, cfg.sink_tokens, StorageMode::PositionAgnostic),
            model,
            cfg,
            frames: VecDeque::new(),
            stream_tokens: 0,
        })
    }

    /// Re-encodes the retained frames against the sink, charging `ctx`.
    fn recompute(&self, ctx: &mut ExecContext) -> Result<KvCache<S>> {
        let mut cache = self.sink.sink().cache().clone();
        for frame in &self.frames {
            let kv = self.model.encode_to_kv(frame, &cache, &assignment_for(&cache), ctx)?;
            cache.append(&kv)?;
        }
        Ok(cache)
    }
}

impl<S: Scalar> StreamPolicy<S> for OfflinePolicy<S> {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Offline
    }

    fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    fn sink(&self) -> &SinkCache<S> {
        self.sink.sink()
    }

    fn ingest(&mut self, block: &TokenBlock<S>) -> Result<FrameReport> {
        let mut ctx = ExecContext::new();
        self.stream_tokens += block.len() as u64;
        if let Some(rest) = self.sink.absorb(&self.model, block, &mut ctx)? {
            self.frames.push_back(rest);
            while self.frames.len() > self.cfg.window_frames {
                self.frames.pop_front();
            }
        }
        Ok(FrameReport {
            ingest_macs: ctx.counters.total(),
            persistent_rows: self.persistent_rows(),
            peak_rows: ctx.peak_rows.max(self.persistent_rows()),
            max_position_used: ctx.max_position_used,
        })
    }

    fn answer(
        &mut self,
        query: &TokenBlock<S>,
        max_new: usize,
        step: u64,
        capture_mass: bool,
    ) -> Result<QueryOutput<S>> {
        let mut ctx = ExecContext::new();
        let mut assembled = self.recompute(&mut ctx)?;
        let rows_before = assembled.len();
        if capture_mass {
            let sink_end = self.sink.sink().len();
            let recent_rows = self.cfg.buffer_frames * self.cfg.tokens_per_frame;
            let recent_start = rows_before.saturating_sub(recent_rows).max(sink_end);
            ctx.probe = Some(MassProbe::new(sink_end, recent_start, rows_before)?);
        }
        let assignment = assignment_for(&assembled);
        let QueryAnswer { tokens, prelogit } =
            self.model.answer_query(query, &mut assembled, &assignment, max_new, &mut ctx)?;
        let metrics = metrics_from_ctx(
            step,
            self.model.num_layers(),
            rows_before,
            ctx.peak_rows,
            &ctx,
        );
        Ok(QueryOutput { tokens, prelogit, metrics })
    }

    fn frame_encoding(&mut self, block_id: u64) -> Result<Option<Vec<LayerKv<S>>>> {
        if !self.frames.iter().any(|f| f.block_id == block_id) {
            return Ok(None);
        }
        let mut ctx = ExecContext::new();
        let cache = self.recompute(&mut ctx)?;
        Ok(cache.extract_block(block_id))
    }

    fn query_view(&mut self) -> Result<QueryView<S>> {
        let mut ctx = ExecContext::new();
        Ok(QueryView { cache: self.recompute(&mut ctx)?, stream_tokens: self.stream_tokens })
    }

    fn persistent_rows(&self) -> usize {
        // Frames are held as embeddings, not KV; only the sink persists.
        self.sink.sink().len()
    }
}

// ---------------------------------------------------------------------------
// Decoupled policy (exact)
// ---------------------------------------------------------------------------

/// Block ids allocated to responses re-ingested into the buffer; far above
/// anything a stream generator hands out, so ids stay unique.
const RESPONSE_ID_BASE: u64 = 1 << 62;

/// Decoupled cumulative/instant construction, instant cache rebuilt fresh at
/// every query.
pub struct DscachePolicy<S: Scalar> {
    model: Arc<Model<S>>,
    cfg: PolicyConfig,
    sink: SinkBuilder<S>,
    buffer: FeatureBuffer<S>,
    cumulative: KvCache<S>,
    next_response_id: u64,
    stream_tokens: u64,
    /// Response maintenance done during `answer` is charged to the next
    /// frame's ingest report.
    deferred_ingest_macs: u64,
    deferred_max_position: u64,
}

impl<S: Scalar> DscachePolicy<S> {
    pub fn new(model: Arc<Model<S>>, cfg: PolicyConfig) -> Result<Self> {
        cfg.validate(PolicyKind::Dscache)?;
        Ok(DscachePolicy {
            sink: SinkBuilder::new(&model, cfg.sink_tokens, StorageMode::PositionAgnostic),
            buffer: FeatureBuffer::new(cfg.buffer_frames),
            cumulative: model.empty_cache(StorageMode::PositionAgnostic),
            model,
            cfg,
            next_response_id: RESPONSE_ID_BASE,
            stream_tokens: 0,
            deferred_ingest_macs: 0,
            deferred_max_position: 0,
        })
    }

    pub fn buffer(&self) -> &FeatureBuffer<S> {
        &self.buffer
    }

    pub fn cumulative(&self) -> &KvCache<S> {
        &self.cumulative
    }

    /// Restores the cumulative cache (checkpoint round trips, experiments).
    /// The replacement must match the model's shape and be position-agnostic.
    pub fn set_cumulative(&mut self, cache: KvCache<S>) -> Result<()> {
        if cache.num_layers() != self.model.num_layers()
            || cache.hidden() != self.model.hidden()
            || cache.mode() != StorageMode::PositionAgnostic
        {
            return Err(Error::contract(
                "replacement cumulative cache does not match the model".to_string(),
            ));
        }
        cache.validate()?;
        self.cumulative = cache;
        Ok(())
    }

    /// Builds the instant cache from the buffered frames against the sink
    /// alone. Reads nothing from the cumulative cache, so its bytes are a
    /// pure function of (sink, buffer, config).
    pub fn instant_build(&self, ctx: &mut ExecContext) -> Result<KvCache<S>> {
        let mut instant = self.model.empty_cache(StorageMode::PositionAgnostic);
        let total = self.buffer.len();
        for (idx, block) in self.buffer.blocks().enumerate() {
            let boosted;
            let block = if idx + 1 == total && self.cfg.resolution_multiplier > 1.0 {
                boosted = boost_resolution(block, self.cfg.resolution_multiplier)?;
                &boosted
            } else {
                block
            };
            let context = concat(&[self.sink.sink().cache(), &instant])?;
            let kv =
                self.model.encode_to_kv(block, &context, &assignment_for(&context), ctx)?;
            instant.append(&kv)?;
        }
        Ok(instant)
    }

    /// Encodes a buffer-evicted block against `[sink | recent cumulative]`
    /// and appends it to the cumulative cache.
    fn cumulative_update(&mut self, block: &TokenBlock<S>, ctx: &mut ExecContext) -> Result<()> {
        if block.tag == Modality::Text && self.cfg.strip_text_on_evict {
            // Stripped text never makes it into the cumulative cache;
            // appending and deleting would produce the same bytes at
            // encoding cost, so skip the encode entirely.
            return Ok(());
        }
        let zeta = self.cumulative.subsample_recent(self.cfg.active_rows());
        let context = concat(&[self.sink.sink().cache(), &zeta])?;
        let kv = self.model.encode_to_kv(block, &context, &assignment_for(&context), ctx)?;
        self.cumulative.append(&kv)?;
        self.cumulative.evict_fifo(self.cfg.cumulative_rows());
        Ok(())
    }

    /// Shared ingest path; reports what entered and what the buffer evicted.
    fn ingest_block(
        &mut self,
        block: &TokenBlock<S>,
        ctx: &mut ExecContext,
    ) -> Result<(bool, Option<TokenBlock<S>>)> {
        self.stream_tokens += block.len() as u64;
        match self.sink.absorb(&self.model, block, ctx)? {
            None => Ok((false, None)),
            Some(rest) => {
                let evicted = self.buffer.push(rest);
                if let Some(ev) = &evicted {
                    self.cumulative_update(ev, ctx)?;
                }
                Ok((true, evicted))
            }
        }
    }

    fn frame_report(&mut self, ctx: &ExecContext) -> FrameReport {
        let report = FrameReport {
            ingest_macs: ctx.counters.total() + self.deferred_ingest_macs,
            persistent_rows: self.persistent_rows(),
            peak_rows: ctx.peak_rows.max(self.persistent_rows()),
            max_position_used: ctx.max_position_used.max(self.deferred_max_position),
        };
        self.deferred_ingest_macs = 0;
        self.deferred_max_position = 0;
        report
    }

    /// Re-embeds an answer and pushes it through the buffer like a frame,
    /// returning the response block and whatever its insertion evicted. The
    /// maintenance cost is deferred onto the next frame's ingest report.
    fn reingest_response(
        &mut self,
        tokens: &[u32],
    ) -> Result<(TokenBlock<S>, Option<TokenBlock<S>>)> {
        let id = self.next_response_id;
        self.next_response_id += 1;
        let response = self.model.block_from_tokens(tokens, Modality::Text, id)?;
        let mut ctx = ExecContext::new();
        let evicted = self.buffer.push(response.clone());
        if let Some(ev) = &evicted {
            self.cumulative_update(ev, &mut ctx)?;
        }
        self.deferred_ingest_macs += ctx.counters.total();
        self.deferred_max_position = self.deferred_max_position.max(ctx.max_position_used);
        Ok((response, evicted))
    }

    fn assemble_for_query(&self, ctx: &mut ExecContext) -> Result<(KvCache<S>, usize, usize)> {
        let instant = self.instant_build(ctx)?;
        let zeta = if self.cfg.decode_stride > 1 {
            self.cumulative.subsample_stride(self.cfg.decode_stride)?
        } else {
            self.cumulative.clone()
        };
        let assembled = concat(&[self.sink.sink().cache(), &zeta, &instant])?;
        let sink_end = self.sink.sink().len();
        let recent_start = sink_end + zeta.len();
        Ok((assembled, sink_end, recent_start))
    }
}

impl<S: Scalar> StreamPolicy<S> for DscachePolicy<S> {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Dscache
    }

    fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    fn sink(&self) -> &SinkCache<S> {
        self.sink.sink()
    }

    fn ingest(&mut self, block: &TokenBlock<S>) -> Result<FrameReport> {
        let mut ctx = ExecContext::new();
        self.ingest_block(block, &mut ctx)?;
        Ok(self.frame_report(&ctx))
    }

    fn answer(
        &mut self,
        query: &TokenBlock<S>,
        max_new: usize,
        step: u64,
        capture_mass: bool,
    ) -> Result<QueryOutput<S>> {
        let mut ctx = ExecContext::new();
        let (mut assembled, sink_end, recent_start) = self.assemble_for_query(&mut ctx)?;
        let rows_before = assembled.len();
        if capture_mass {
            ctx.probe = Some(MassProbe::new(sink_end, recent_start, rows_before)?);
        }
        let assignment = assignment_for(&assembled);
        let QueryAnswer { tokens, prelogit } =
            self.model.answer_query(query, &mut assembled, &assignment, max_new, &mut ctx)?;
        let metrics = metrics_from_ctx(
            step,
            self.model.num_layers(),
            rows_before,
            ctx.peak_rows.max(self.persistent_rows()),
            &ctx,
        );
        if self.cfg.buffer_text_policy == BufferTextPolicy::IncludeResponses {
            self.reingest_response(&tokens)?;
        }
        Ok(QueryOutput { tokens, prelogit, metrics })
    }

    fn frame_encoding(&mut self, block_id: u64) -> Result<Option<Vec<LayerKv<S>>>> {
        if self.buffer.blocks().any(|b| b.block_id == block_id) {
            let mut ctx = ExecContext::new();
            let instant = self.instant_build(&mut ctx)?;
            return Ok(instant.extract_block(block_id));
        }
        Ok(self.cumulative.extract_block(block_id))
    }

    fn query_view(&mut self) -> Result<QueryView<S>> {
        let mut ctx = ExecContext::new();
        let (cache, _, _) = self.assemble_for_query(&mut ctx)?;
        Ok(QueryView { cache, stream_tokens: self.stream_tokens })
    }

    fn persistent_rows(&self) -> usize {
        self.sink.sink().len() + self.cumulative.len()
    }
}

// ---------------------------------------------------------------------------
// Decoupled policy (approximate instant maintenance)
// ---------------------------------------------------------------------------

/// Decoupled construction with the instant cache maintained incrementally:
/// on each buffer insertion the evicted block's rows are dropped and the new
/// block is encoded against `[sink | maintained cache]`; a full rebuild runs
/// every `refresh_period` insertions. Query prefill therefore skips the
/// rebuild entirely.
///
/// The newest-frame resolution boost only appears in refreshed states — the
/// incremental extension encodes blocks at native resolution.
pub struct ApproxPolicy<S: Scalar> {
    base: DscachePolicy<S>,
    recent: KvCache<S>,
    insertions: u64,
}

impl<S: Scalar> ApproxPolicy<S> {
    pub fn new(model: Arc<Model<S>>, cfg: PolicyConfig) -> Result<Self> {
        cfg.validate(PolicyKind::DscacheApprox)?;
        let recent = model.empty_cache(StorageMode::PositionAgnostic);
        // The base policy re-validates as Dscache; the shared geometry is
        // identical, refresh_period is simply unused there.
        let base = DscachePolicy::new(model, cfg)?;
        Ok(ApproxPolicy { base, recent, insertions: 0 })
    }

    /// The maintained approximation of the instant cache.
    pub fn maintained_instant(&self) -> &KvCache<S> {
        &self.recent
    }

    /// Mirrors one buffer insertion into the maintained cache. With a
    /// zero-capacity buffer nothing is ever held, so there is nothing to
    /// maintain.
    fn maintain(
        &mut self,
        entered: &TokenBlock<S>,
        evicted: Option<&TokenBlock<S>>,
        ctx: &mut ExecContext,
    ) -> Result<()> {
        if self.base.cfg.buffer_frames == 0 {
            return Ok(());
        }
        self.insertions += 1;
        if self.insertions % self.base.cfg.refresh_period as u64 == 0 {
            self.recent = self.base.instant_build(ctx)?;
            return Ok(());
        }
        if let Some(ev) = evicted {
            self.recent.remove_block(ev.block_id)?;
        }
        let context = concat(&[self.base.sink.sink().cache(), &self.recent])?;
        let kv = self.base.model.encode_to_kv(entered, &context, &assignment_for(&context), ctx)?;
        self.recent.append(&kv)?;
        Ok(())
    }
}

impl<S: Scalar> StreamPolicy<S> for ApproxPolicy<S> {
    fn kind(&self) -> PolicyKind {
        PolicyKind::DscacheApprox
    }

    fn config(&self) -> &PolicyConfig {
        &self.base.cfg
    }

    fn sink(&self) -> &SinkCache<S> {
        self.base.sink.sink()
    }

    fn ingest(&mut self, block: &TokenBlock<S>) -> Result<FrameReport> {
        let mut ctx = ExecContext::new();
        let (entered, evicted) = self.base.ingest_block(block, &mut ctx)?;
        if entered && self.base.cfg.buffer_frames > 0 {
            let newest = self.base.buffer.newest().cloned().expect("just inserted");
            self.maintain(&newest, evicted.as_ref(), &mut ctx)?;
        }
        Ok(self.base.frame_report(&ctx))
    }

    fn answer(
        &mut self,
        query: &TokenBlock<S>,
        max_new: usize,
        step: u64,
        capture_mass: bool,
    ) -> Result<QueryOutput<S>> {
        let mut ctx = ExecContext::new();
        let zeta = if self.base.cfg.decode_stride > 1 {
            self.base.cumulative.subsample_stride(self.base.cfg.decode_stride)?
        } else {
            self.base.cumulative.clone()
        };
        let mut assembled =
            concat(&[self.base.sink.sink().cache(), &zeta, &self.recent])?;
        let rows_before = assembled.len();
        let sink_end = self.base.sink.sink().len();
        if capture_mass {
            ctx.probe = Some(MassProbe::new(sink_end, sink_end + zeta.len(), rows_before)?);
        }
        let assignment = assignment_for(&assembled);
        let QueryAnswer { tokens, prelogit } =
            self.base.model.answer_query(query, &mut assembled, &assignment, max_new, &mut ctx)?;
        let metrics = metrics_from_ctx(
            step,
            self.base.model.num_layers(),
            rows_before,
            ctx.peak_rows.max(self.persistent_rows()),
            &ctx,
        );
        if self.base.cfg.buffer_text_policy == BufferTextPolicy::IncludeResponses {
            let (response, evicted) = self.base.reingest_response(&tokens)?;
            let mut ctx = ExecContext::new();
            self.maintain(&response, evicted.as_ref(), &mut ctx)?;
            self.base.deferred_ingest_macs += ctx.counters.total();
            self.base.deferred_max_position =
                self.base.deferred_max_position.max(ctx.max_position_used);
        }
        Ok(QueryOutput { tokens, prelogit, metrics })
    }

    fn frame_encoding(&mut self, block_id: u64) -> Result<Option<Vec<LayerKv<S>>>> {
        if let Some(rows) = self.recent.extract_block(block_id) {
            return Ok(Some(rows));
        }
        Ok(self.base.cumulative.extract_block(block_id))
    }

    fn query_view(&mut self) -> Result<QueryView<S>> {
        let zeta = if self.base.cfg.decode_stride > 1 {
            self.base.cumulative.subsample_stride(self.base.cfg.decode_stride)?
        } else {
            self.base.cumulative.clone()
        };
        let cache = concat(&[self.base.sink.sink().cache(), &zeta, &self.recent])?;
        Ok(QueryView { cache, stream_tokens: self.base.stream_tokens })
    }

    fn persistent_rows(&self) -> usize {
        self.base.persistent_rows() + self.recent.len()
    }
}

// ---------------------------------------------------------------------------
// Resolution boost
// ---------------------------------------------------------------------------

const BOOST_PERTURB_SCALE: f64 = 0.01;
const BOOST_SEED_TAG: u64 = 0xB005;

/// Deterministic token-count upscaling: repeats the block's rows cyclically
/// up to `ceil(multiplier * len)` rows, adding a small Gaussian perturbation
/// seeded from the block id so repeated rows are not exact duplicates. A
/// multiplier of 1 returns the block unchanged, bit for bit.
pub fn boost_resolution<S: Scalar>(block: &TokenBlock<S>, multiplier: f64) -> Result<TokenBlock<S>> {
    if !(multiplier.is_finite() && multiplier >= 1.0) {
        return Err(Error::config(format!(
            "resolution multiplier must be a finite value >= 1, got {multiplier}"
        )));
    }
    let n = block.len();
    if multiplier == 1.0 || n == 0 {
        return Ok(block.clone());
    }
    let target = (multiplier * n as f64).ceil() as usize;
    let cols = block.embeddings.cols();
    let mut rng = Rng::new(derive_seed(BOOST_SEED_TAG, block.block_id));
    let mut data = Vec::with_capacity(target * cols);
    for j in 0..target {
        let src = block.embeddings.row(j % n);
        for &x in src {
            data.push(x + S::from_f64(rng.next_gaussian() * BOOST_PERTURB_SCALE));
        }
    }
    Ok(TokenBlock::new(Matrix::from_vec(target, cols, data)?, block.tag, block.block_id))
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::snapshot_bytes;
    use crate::model::ModelSpec;
    use crate::tensor::seeded_gaussian;

    const TPF: usize = 4;

    fn tiny_model(seed: u64) -> Arc<Model<f64>> {
        Arc::new(
            Model::new(ModelSpec {
                num_layers: 2,
                num_heads: 2,
                head_dim: 4,
                ffn_dim: 16,
                vocab_size: 11,
                rope_base: crate::rope::RopeParams::DEFAULT_BASE,
                max_position: Some(4096),
                train_length_analogue: 64,
                seed,
            })
            .unwrap(),
        )
    }

    fn frame(model: &Model<f64>, seed: u64, block_id: u64) -> TokenBlock<f64> {
        TokenBlock::new(
            seeded_gaussian(&mut Rng::new(seed), TPF, model.hidden(), 1.0),
            Modality::Visual,
            block_id,
        )
    }

    fn query(model: &Model<f64>, seed: u64, block_id: u64) -> TokenBlock<f64> {
        TokenBlock::new(
            seeded_gaussian(&mut Rng::new(seed), 3, model.hidden(), 1.0),
            Modality::Text,
            block_id,
        )
    }

    fn cfg(sink: usize, window: usize, buffer: usize, cumulative: usize) -> PolicyConfig {
        PolicyConfig {
            sink_tokens: sink,
            window_frames: window,
            buffer_frames: buffer,
            cumulative_frames: cumulative,
            tokens_per_frame: TPF,
            ..PolicyConfig::default()
        }
    }

    /// Streams `n` frames into a policy, returning the blocks.
    fn stream_frames(
        policy: &mut dyn StreamPolicy<f64>,
        model: &Model<f64>,
        n: u64,
        seed0: u64,
    ) -> Vec<TokenBlock<f64>> {
        (0..n)
            .map(|i| {
                let block = frame(model, seed0 + i, i);
                policy.ingest(&block).unwrap();
                block
            })
            .collect()
    }

    #[test]
    fn buffer_evicts_in_arrival_order() {
        let model = tiny_model(1);
        let mut buf = FeatureBuffer::new(2);
        assert!(buf.push(frame(&model, 1, 10)).is_none());
        assert!(buf.push(frame(&model, 2, 11)).is_none());
        let evicted = buf.push(frame(&model, 3, 12)).expect("over capacity");
        assert_eq!(evicted.block_id, 10);
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.newest().unwrap().block_id, 12);

        // Zero capacity: blocks pass straight through.
        let mut zero = FeatureBuffer::new(0);
        let back = zero.push(frame(&model, 4, 13)).expect("immediately evicted");
        assert_eq!(back.block_id, 13);
        assert!(zero.is_empty());
    }

    #[test]
    fn sink_fills_once_then_freezes() {
        let model = tiny_model(2);
        // Sink of 6 tokens, frames of 4: second frame is split 2 + 2.
        let mut policy = UniformPolicy::new(model.clone(), cfg(6, 3, 0, 0), false, false).unwrap();
        assert!(policy.sink().is_empty());
        policy.ingest(&frame(&model, 10, 0)).unwrap();
        assert!(policy.sink().is_empty(), "4 of 6 tokens collected");
        assert_eq!(policy.window().len(), 0);
        policy.ingest(&frame(&model, 11, 1)).unwrap();
        assert_eq!(policy.sink().len(), 6);
        assert_eq!(policy.window().len(), 2, "tail of the split block flows on");

        let frozen = snapshot_bytes(policy.sink().cache()).unwrap();
        policy.ingest(&frame(&model, 12, 2)).unwrap();
        policy.answer(&query(&model, 13, 100), 2, 2, false).unwrap();
        assert_eq!(snapshot_bytes(policy.sink().cache()).unwrap(), frozen);
    }

    #[test]
    fn uniform_window_keeps_the_last_frames_only() {
        let model = tiny_model(3);
        let mut policy = UniformPolicy::new(model.clone(), cfg(0, 3, 0, 0), false, false).unwrap();
        stream_frames(&mut policy, &model, 5, 20);
        assert_eq!(policy.window().len(), 3 * TPF);
        let ids: Vec<u64> = policy.window().block_ids().to_vec();
        assert_eq!(ids[0], 2);
        assert_eq!(ids[ids.len() - 1], 4);
        assert_eq!(policy.persistent_rows(), 3 * TPF);
    }

    #[test]
    fn uniform_ingest_cost_is_flat_once_the_window_is_full() {
        let model = tiny_model(4);
        let mut policy = UniformPolicy::new(model.clone(), cfg(0, 3, 0, 0), false, false).unwrap();
        let mut reports = Vec::new();
        for i in 0..6 {
            reports.push(policy.ingest(&frame(&model, 30 + i, i)).unwrap());
        }
        // Frames 3.. all encode against a full window: identical cost.
        assert_eq!(reports[3].ingest_macs, reports[4].ingest_macs);
        assert_eq!(reports[4].ingest_macs, reports[5].ingest_macs);
        assert!(reports[0].ingest_macs < reports[3].ingest_macs);
    }

    #[test]
    fn offline_query_cost_grows_with_the_window() {
        let model = tiny_model(5);
        let mut prefills = Vec::new();
        for window in [2usize, 4, 8] {
            let mut policy = OfflinePolicy::new(model.clone(), cfg(0, window, 0, 0)).unwrap();
            stream_frames(&mut policy, &model, 10, 40);
            let out = policy.answer(&query(&model, 50, 100), 2, 10, false).unwrap();
            prefills.push(out.metrics.prefill_macs);
            assert_eq!(policy.persistent_rows(), 0, "no KV persists between queries");
        }
        assert!(prefills[0] < prefills[1] && prefills[1] < prefills[2]);
        // Roughly linear: doubling the window should not quadruple the cost.
        assert!(prefills[2] < prefills[1] * 3);
    }

    #[test]
    fn decoupled_buffer_delays_cumulative_entry() {
        let model = tiny_model(6);
        let mut policy = DscachePolicy::new(model.clone(), cfg(0, 0, 2, 4)).unwrap();
        policy.ingest(&frame(&model, 60, 0)).unwrap();
        policy.ingest(&frame(&model, 61, 1)).unwrap();
        assert_eq!(policy.cumulative().len(), 0, "both frames still buffered");
        assert_eq!(policy.buffer().len(), 2);

        policy.ingest(&frame(&model, 62, 2)).unwrap();
        assert_eq!(policy.cumulative().len(), TPF, "frame 0 was evicted and encoded");
        assert_eq!(policy.cumulative().block_ids(), &[0; TPF]);
        assert_eq!(policy.buffer().newest().unwrap().block_id, 2);
    }

    #[test]
    fn cumulative_cache_respects_its_row_budget() {
        let model = tiny_model(7);
        let mut policy = DscachePolicy::new(model.clone(), cfg(0, 0, 2, 3)).unwrap();
        stream_frames(&mut policy, &model, 12, 70);
        assert_eq!(policy.cumulative().len(), 3 * TPF);
        // Newest cumulative rows come from the most recently evicted frame.
        let ids = policy.cumulative().block_ids();
        assert_eq!(ids[ids.len() - 1], 12 - 2 - 1);
    }

    #[test]
    fn instant_cache_is_independent_of_cumulative_contents() {
        let model = tiny_model(8);
        let mut policy = DscachePolicy::new(model.clone(), cfg(4, 0, 3, 5)).unwrap();
        stream_frames(&mut policy, &model, 10, 80);

        let mut ctx = ExecContext::new();
        let baseline = snapshot_bytes(&policy.instant_build(&mut ctx).unwrap()).unwrap();
        for seed in 0..5u64 {
            let mut rng = Rng::new(seed);
            let rows = 1 + (seed as usize) % 7;
            let layers = (0..model.num_layers())
                .map(|_| LayerKv {
                    keys: seeded_gaussian(&mut rng, rows, model.hidden(), 1.0),
                    values: seeded_gaussian(&mut rng, rows, model.hidden(), 1.0),
                    tags: vec![Modality::Visual; rows],
                    block_ids: vec![777; rows],
                })
                .collect();
            let random = KvCache::from_layers(layers, model.hidden(), StorageMode::PositionAgnostic)
                .unwrap();
            policy.set_cumulative(random).unwrap();
            let mut ctx = ExecContext::new();
            let rebuilt = snapshot_bytes(&policy.instant_build(&mut ctx).unwrap()).unwrap();
            assert_eq!(rebuilt, baseline, "instant bytes moved with cumulative contents");
        }
    }

    #[test]
    fn zero_buffer_reduces_to_uniform() {
        let model = tiny_model(9);
        let mut uniform = UniformPolicy::new(model.clone(), cfg(4, 5, 0, 0), false, false).unwrap();
        let mut decoupled = DscachePolicy::new(model.clone(), cfg(4, 0, 0, 5)).unwrap();
        for i in 0..9u64 {
            let block = frame(&model, 90 + i, i);
            uniform.ingest(&block).unwrap();
            decoupled.ingest(&block).unwrap();
        }
        let q = query(&model, 99, 100);
        let a = uniform.answer(&q, 3, 9, false).unwrap();
        let b = decoupled.answer(&q, 3, 9, false).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.prelogit, b.prelogit, "reduction must be bitwise, not approximate");
    }

    #[test]
    fn zero_cumulative_reduces_to_offline() {
        let model = tiny_model(10);
        let mut offline = OfflinePolicy::new(model.clone(), cfg(4, 5, 0, 0)).unwrap();
        let mut decoupled = DscachePolicy::new(model.clone(), cfg(4, 0, 5, 0)).unwrap();
        for i in 0..9u64 {
            let block = frame(&model, 110 + i, i);
            offline.ingest(&block).unwrap();
            decoupled.ingest(&block).unwrap();
        }
        let q = query(&model, 119, 100);
        let a = offline.answer(&q, 3, 9, false).unwrap();
        let b = decoupled.answer(&q, 3, 9, false).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.prelogit, b.prelogit);
    }

    #[test]
    fn approx_matches_exact_right_after_a_refresh() {
        let model = tiny_model(11);
        let mut exact = DscachePolicy::new(model.clone(), cfg(4, 0, 3, 4)).unwrap();
        let approx_cfg = PolicyConfig { refresh_period: 2, ..cfg(4, 0, 3, 4) };
        let mut approx = ApproxPolicy::new(model.clone(), approx_cfg).unwrap();
        let mut inserted = 0u64;
        for i in 0..11u64 {
            let block = frame(&model, 120 + i, i);
            exact.ingest(&block).unwrap();
            approx.ingest(&block).unwrap();
            if i > 0 {
                inserted += 1; // first block filled the sink entirely
            }
        }
        assert_eq!(inserted % 2, 0, "test must query at a refresh boundary");
        let q = query(&model, 131, 100);
        let a = exact.answer(&q, 3, 11, false).unwrap();
        let b = approx.answer(&q, 3, 11, false).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.prelogit, b.prelogit);
        // And the maintained cache is byte-identical to a fresh rebuild.
        let mut ctx = ExecContext::new();
        assert_eq!(
            snapshot_bytes(approx.maintained_instant()).unwrap(),
            snapshot_bytes(&exact.instant_build(&mut ctx).unwrap()).unwrap()
        );
    }

    #[test]
    fn approx_maintained_cache_stays_buffer_aligned() {
        let model = tiny_model(12);
        let approx_cfg = PolicyConfig { refresh_period: 4, ..cfg(0, 0, 3, 4) };
        let mut approx = ApproxPolicy::new(model.clone(), approx_cfg).unwrap();
        for i in 0..10u64 {
            approx.ingest(&frame(&model, 140 + i, i)).unwrap();
            let buffered: Vec<u64> =
                approx.base.buffer.blocks().map(|b| b.block_id).collect();
            let mut maintained: Vec<u64> = approx.maintained_instant().block_ids().to_vec();
            maintained.dedup();
            assert_eq!(maintained, buffered, "after frame {i}");
        }
    }

    #[test]
    fn approx_query_prefill_skips_the_rebuild() {
        let model = tiny_model(13);
        let mut exact = DscachePolicy::new(model.clone(), cfg(0, 0, 3, 4)).unwrap();
        let approx_cfg = PolicyConfig { refresh_period: 3, ..cfg(0, 0, 3, 4) };
        let mut approx = ApproxPolicy::new(model.clone(), approx_cfg).unwrap();
        let mut uniform = UniformPolicy::new(model.clone(), cfg(0, 7, 0, 0), false, false).unwrap();
        for i in 0..9u64 {
            let block = frame(&model, 160 + i, i);
            exact.ingest(&block).unwrap();
            approx.ingest(&block).unwrap();
            uniform.ingest(&block).unwrap();
        }
        let q = query(&model, 170, 100);
        let pu = uniform.answer(&q, 2, 9, false).unwrap().metrics.prefill_macs;
        let pa = approx.answer(&q, 2, 9, false).unwrap().metrics.prefill_macs;
        let pe = exact.answer(&q, 2, 9, false).unwrap().metrics.prefill_macs;
        assert!(pu <= pa, "uniform {pu} must not exceed approx {pa}");
        assert!(pa < pe, "approx {pa} must undercut exact {pe}");
    }

    #[test]
    fn boost_repeats_rows_with_seeded_perturbation() {
        let model = tiny_model(14);
        let block = frame(&model, 180, 42);
        let boosted = boost_resolution(&block, 1.5).unwrap();
        assert_eq!(boosted.len(), 6); // ceil(1.5 * 4)
        assert_eq!(boosted.block_id, 42);
        for j in 0..6 {
            let src = block.embeddings.row(j % 4);
            let got = boosted.embeddings.row(j);
            for (g, s) in got.iter().zip(src) {
                let d = (g - s).abs();
                assert!(d > 0.0 && d < 0.1, "perturbation out of range: {d}");
            }
        }
        // Deterministic, and a unit multiplier is the bitwise identity.
        assert_eq!(boost_resolution(&block, 1.5).unwrap(), boosted);
        assert_eq!(boost_resolution(&block, 1.0).unwrap(), block);
        assert!(boost_resolution(&block, 0.5).is_err());
    }

    #[test]
    fn responses_enter_the_buffer_only_when_asked() {
        let model = tiny_model(15);
        let base = cfg(0, 0, 2, 4);
        let include = PolicyConfig {
            buffer_text_policy: BufferTextPolicy::IncludeResponses,
            ..base.clone()
        };
        let mut excl = DscachePolicy::new(model.clone(), base).unwrap();
        let mut incl = DscachePolicy::new(model.clone(), include).unwrap();
        for i in 0..3u64 {
            let block = frame(&model, 190 + i, i);
            excl.ingest(&block).unwrap();
            incl.ingest(&block).unwrap();
        }
        let q = query(&model, 200, 100);
        excl.answer(&q, 2, 3, false).unwrap();
        incl.answer(&q, 2, 3, false).unwrap();
        assert!(excl.buffer().blocks().all(|b| b.tag == Modality::Visual));
        let tags: Vec<Modality> = incl.buffer().blocks().map(|b| b.tag).collect();
        assert_eq!(tags, vec![Modality::Visual, Modality::Text]);
        assert!(incl.buffer().newest().unwrap().block_id >= RESPONSE_ID_BASE);
    }

    #[test]
    fn stripping_keeps_text_out_of_the_cumulative_cache() {
        let model = tiny_model(16);
        let strip = PolicyConfig {
            buffer_text_policy: BufferTextPolicy::IncludeResponses,
            ..cfg(0, 0, 1, 6)
        };
        let keep = PolicyConfig { strip_text_on_evict: false, ..strip.clone() };
        let mut stripping = DscachePolicy::new(model.clone(), strip).unwrap();
        let mut keeping = DscachePolicy::new(model.clone(), keep).unwrap();
        for policy in [&mut stripping, &mut keeping] {
            for i in 0..2u64 {
                policy.ingest(&frame(&model, 210 + i, i)).unwrap();
            }
            // Buffer capacity 1: the response evicts frame 1, the next frame
            // evicts the response.
            policy.answer(&query(&model, 220, 100), 2, 2, false).unwrap();
            policy.ingest(&frame(&model, 230, 5)).unwrap();
        }
        assert!(
            stripping.cumulative().tags().iter().all(|t| *t == Modality::Visual),
            "stripped cumulative cache must stay visual-only"
        );
        assert!(
            keeping.cumulative().tags().iter().any(|t| *t == Modality::Text),
            "without stripping the response rows must appear"
        );
    }

    #[test]
    fn queries_leave_persistent_state_untouched() {
        let model = tiny_model(17);
        let mut policies: Vec<Box<dyn StreamPolicy<f64>>> = vec![
            Box::new(UniformPolicy::new(model.clone(), cfg(4, 4, 0, 0), false, false).unwrap()),
            Box::new(OfflinePolicy::new(model.clone(), cfg(4, 4, 0, 0)).unwrap()),
            Box::new(DscachePolicy::new(model.clone(), cfg(4, 0, 2, 2)).unwrap()),
            Box::new(
                ApproxPolicy::new(
                    model.clone(),
                    PolicyConfig { refresh_period: 2, ..cfg(4, 0, 2, 2) },
                )
                .unwrap(),
            ),
        ];
        for policy in &mut policies {
            stream_frames(policy.as_mut(), &model, 7, 240);
            let q = query(&model, 250, 100);
            let first = policy.answer(&q, 3, 7, false).unwrap();
            let second = policy.answer(&q, 3, 7, false).unwrap();
            assert_eq!(first.tokens, second.tokens, "{:?}", policy.kind());
            assert_eq!(first.prelogit, second.prelogit, "{:?}", policy.kind());
        }
    }

    #[test]
    fn persistent_rows_and_positions_stay_bounded() {
        let model = tiny_model(18);
        let mut policy = DscachePolicy::new(model.clone(), cfg(4, 0, 2, 3)).unwrap();
        let mut peak_rows = Vec::new();
        let mut peak_pos = Vec::new();
        for i in 0..40u64 {
            let r = policy.ingest(&frame(&model, 300 + i, i)).unwrap();
            peak_rows.push(r.persistent_rows);
            peak_pos.push(r.max_position_used);
        }
        let warm = &peak_rows[10..];
        assert!(warm.iter().all(|&r| r == warm[0]), "rows must plateau: {warm:?}");
        assert_eq!(warm[0], 4 + 3 * TPF);
        let pos = &peak_pos[10..];
        assert!(pos.iter().all(|&p| p == pos[0]), "positions must plateau: {pos:?}");
        assert!(pos[0] < 64, "positions must stay near the window size");
    }

    #[test]
    fn config_validation_catches_contradictions() {
        let ok = cfg(0, 0, 2, 3);
        assert!(ok.validate(PolicyKind::Dscache).is_ok());

        let contradicted = PolicyConfig { window_frames: 4, ..cfg(0, 0, 2, 3) };
        assert!(contradicted.validate(PolicyKind::Dscache).is_err());

        let no_window = cfg(0, 0, 0, 0);
        assert!(no_window.validate(PolicyKind::Uniform).is_err());
        assert!(no_window.validate(PolicyKind::Dscache).is_err());

        let overactive = PolicyConfig { active_frames: Some(5), ..cfg(0, 0, 2, 3) };
        assert!(overactive.validate(PolicyKind::Dscache).is_err());

        let approx_needs_period = cfg(0, 0, 2, 3);
        assert!(approx_needs_period.validate(PolicyKind::DscacheApprox).is_err());
        let with_period = PolicyConfig { refresh_period: 2, ..cfg(0, 0, 2, 3) };
        assert!(with_period.validate(PolicyKind::DscacheApprox).is_ok());

        let bad_stride = PolicyConfig { decode_stride: 0, ..cfg(0, 4, 0, 0) };
        assert!(bad_stride.validate(PolicyKind::Uniform).is_err());

        let text_on_uniform = PolicyConfig {
            buffer_text_policy: BufferTextPolicy::IncludeResponses,
            ..cfg(0, 4, 0, 0)
        };
        assert!(text_on_uniform.validate(PolicyKind::Uniform).is_err());
    }

    #[test]
    fn build_policy_rejects_misapplied_diagnostics() {
        let model = tiny_model(19);
        let spec = PolicySpec {
            id: "x".to_string(),
            kind: PolicyKind::Dscache,
            position_encoded_storage: true,
            reversed_positions: false,
            config: cfg(0, 0, 2, 3),
        };
        assert!(build_policy(model.clone(), &spec).is_err());
        let ok = PolicySpec {
            id: "u".to_string(),
            kind: PolicyKind::Uniform,
            position_encoded_storage: false,
            reversed_positions: true,
            config: cfg(0, 4, 0, 0),
        };
        assert!(build_policy(model, &ok).is_ok());
    }
}
