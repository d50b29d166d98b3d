//! A small pre-norm RoPE transformer, deterministic end to end.
//!
//! The model exists to *execute* cache-construction policies, not to be good
//! at language: weights are seeded Gaussians, inputs are embedding blocks,
//! and greedy decoding ties are broken by index. What matters is that every
//! forward pass is a pure function of (spec, inputs, positions) — layer
//! arithmetic runs in a fixed order, rotary angles come from an explicit
//! [`PositionAssignment`], and all matmul costs are charged to an
//! [`ExecContext`] at the call site.
//!
//! [`Model::encode_block`] is the one forward primitive: it runs a token
//! block against a read-only context cache and returns both the final hidden
//! states and the block's new KV rows. Appending those rows and calling it
//! again is bit-identical to encoding the concatenation in one call, which is
//! the property that makes incremental cache construction exact rather than
//! approximate.

use crate::error::{Error, Result};
use crate::kv::{KvCache, LayerKv, Modality, PositionAssignment, StorageMode};
use crate::metrics::{CostCounters, MassProbe, Phase};
use crate::rope::{rope_apply_hidden, RopeParams};
use crate::tensor::{mac_count, matmul, rms_norm, seeded_gaussian, softmax_rows, Matrix, Rng, Scalar};
use serde::{Deserialize, Serialize};

const RMS_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Token blocks
// ---------------------------------------------------------------------------

/// A contiguous group of tokens entering the model together: one stream
/// frame, one query, or one response.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBlock<S> {
    pub embeddings: Matrix<S>,
    pub tag: Modality,
    /// Monotone within a stream; buffer-aligned eviction keys off it.
    pub block_id: u64,
}

impl<S: Scalar> TokenBlock<S> {
    pub fn new(embeddings: Matrix<S>, tag: Modality, block_id: u64) -> Self {
        TokenBlock { embeddings, tag, block_id }
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Splits off the first `n` tokens (used when the sink boundary lands
    /// inside a block). Both halves keep the original block id.
    pub fn split_at(&self, n: usize) -> Result<(TokenBlock<S>, TokenBlock<S>)> {
        let head = self.embeddings.slice_rows(0, n)?;
        let tail = self.embeddings.slice_rows(n, self.len())?;
        Ok((
            TokenBlock::new(head, self.tag, self.block_id),
            TokenBlock::new(tail, self.tag, self.block_id),
        ))
    }
}

// ---------------------------------------------------------------------------
// Model specification
// ---------------------------------------------------------------------------

fn default_rope_base() -> f64 {
    RopeParams::DEFAULT_BASE
}

/// Everything needed to reconstruct a model bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Hard rotary bound; defaults to four times `train_length_analogue`.
    #[serde(default)]
    pub max_position: Option<u64>,
    /// The context length the model is nominally comfortable at. Policies
    /// size their windows against it; the rotary guard defaults to a small
    /// multiple of it.
    pub train_length_analogue: u64,
    pub seed: u64,
}

impl ModelSpec {
    /// The configuration the integration suite runs: 4 layers x 4 heads x 16
    /// dims, feed-forward 128, vocabulary 256.
    pub fn reference(seed: u64) -> Self {
        ModelSpec {
            num_layers: 4,
            num_heads: 4,
            head_dim: 16,
            ffn_dim: 128,
            vocab_size: 256,
            rope_base: RopeParams::DEFAULT_BASE,
            max_position: None,
            train_length_analogue: 512,
            seed,
        }
    }

    pub fn hidden(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn rope_bound(&self) -> u64 {
        self.max_position.unwrap_or(4 * self.train_length_analogue)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.num_heads == 0
            || self.head_dim == 0
            || self.ffn_dim == 0
            || self.vocab_size == 0
        {
            return Err(Error::config("model dimensions must all be positive".to_string()));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::config(format!(
                "head_dim must be even for rotary pairs, got {}",
                self.head_dim
            )));
        }
        if self.train_length_analogue == 0 {
            return Err(Error::config("train_length_analogue must be positive".to_string()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
struct LayerWeights<S> {
    w_q: Matrix<S>,
    w_k: Matrix<S>,
    w_v: Matrix<S>,
    w_o: Matrix<S>,
    w_up: Matrix<S>,
    w_down: Matrix<S>,
    attn_gain: Vec<S>,
    ffn_gain: Vec<S>,
}

/// The instantiated model: spec, rotary table, and seeded weights.
#[derive(Clone, Debug)]
pub struct Model<S> {
    spec: ModelSpec,
    rope: RopeParams,
    embed: Matrix<S>,
    lm_head: Matrix<S>,
    layers: Vec<LayerWeights<S>>,
}

// Weight-stream tags: each matrix draws from its own child stream, so the
// model is a pure function of the spec regardless of construction order.
const TAG_EMBED: u64 = 1 << 40;
const TAG_LM_HEAD: u64 = (1 << 40) + 1;
const SLOTS_PER_LAYER: u64 = 8;

impl<S: Scalar> Model<S> {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let rope = RopeParams::new(spec.rope_base, spec.head_dim, spec.rope_bound())?;
        let hidden = spec.hidden();
        let root = Rng::new(spec.seed);
        let gauss = |tag: u64, rows: usize, cols: usize, scale: f64| -> Matrix<S> {
            seeded_gaussian(&mut root.split(tag), rows, cols, scale)
        };
        let attn_scale = 1.0 / (hidden as f64).sqrt();
        let layers = (0..spec.num_layers)
            .map(|r| {
                let base = r as u64 * SLOTS_PER_LAYER;
                LayerWeights {
                    w_q: gauss(base, hidden, hidden, attn_scale),
                    w_k: gauss(base + 1, hidden, hidden, attn_scale),
                    w_v: gauss(base + 2, hidden, hidden, attn_scale),
                    w_o: gauss(base + 3, hidden, hidden, attn_scale),
                    w_up: gauss(base + 4, hidden, spec.ffn_dim, attn_scale),
                    w_down: gauss(base + 5, spec.ffn_dim, hidden, 1.0 / (spec.ffn_dim as f64).sqrt()),
                    attn_gain: vec![S::ONE; hidden],
                    ffn_gain: vec![S::ONE; hidden],
                }
            })
            .collect();
        Ok(Model {
            embed: gauss(TAG_EMBED, spec.vocab_size, hidden, 1.0),
            lm_head: gauss(TAG_LM_HEAD, hidden, spec.vocab_size, attn_scale),
            spec,
            rope,
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn rope(&self) -> &RopeParams {
        &self.rope
    }

    pub fn hidden(&self) -> usize {
        self.spec.hidden()
    }

    pub fn num_layers(&self) -> usize {
        self.spec.num_layers
    }

    /// An empty cache shaped for this model.
    pub fn empty_cache(&self, mode: StorageMode) -> KvCache<S> {
        KvCache::empty(self.spec.num_layers, self.hidden(), mode)
    }

    /// Looks up embedding rows for token ids.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Matrix<S>> {
        let mut data = Vec::with_capacity(ids.len() * self.hidden());
        for &id in ids {
            if id as usize >= self.spec.vocab_size {
                return Err(Error::contract(format!(
                    "token id {id} outside vocabulary of {}",
                    self.spec.vocab_size
                )));
            }
            data.extend_from_slice(self.embed.row(id as usize));
        }
        Matrix::from_vec(ids.len(), self.hidden(), data)
    }

    /// Builds a token block from ids (response re-ingestion path).
    pub fn block_from_tokens(&self, ids: &[u32], tag: Modality, block_id: u64) -> Result<TokenBlock<S>> {
        Ok(TokenBlock::new(self.embed_tokens(ids)?, tag, block_id))
    }
}

// ---------------------------------------------------------------------------
// Execution context
// ---------------------------------------------------------------------------

/// Mutable side-channel threaded through forward passes: phase-split cost
/// counters, the largest rotary position touched, and an optional attention
/// mass probe.
#[derive(Debug, Default)]
pub struct ExecContext {
    pub phase_is_decode: bool,
    pub counters: CostCounters,
    pub max_position_used: u64,
    /// Largest number of KV rows co-resident in one attention call
    /// (context rows plus the block's own rows).
    pub peak_rows: usize,
    pub probe: Option<MassProbe>,
}

impl ExecContext {
    pub fn new() -> Self {
        ExecContext::default()
    }

    fn phase(&self) -> Phase {
        if self.phase_is_decode {
            Phase::Decode
        } else {
            Phase::Prefill
        }
    }

    fn charge(&mut self, macs: u64) {
        self.counters.charge(self.phase(), macs);
    }

    fn note_position(&mut self, p: u64) {
        if p > self.max_position_used {
            self.max_position_used = p;
        }
    }

    fn note_rows(&mut self, rows: usize) {
        if rows > self.peak_rows {
            self.peak_rows = rows;
        }
    }
}

/// Result of encoding one block against a context cache.
#[derive(Clone, Debug)]
pub struct BlockOutput<S> {
    /// Final hidden states of the block's tokens, one row per token.
    pub hidden: Matrix<S>,
    /// The block's new KV rows, one [`LayerKv`] per layer, stored in the
    /// same mode as the context they were computed against.
    pub kv: Vec<LayerKv<S>>,
}

/// A greedy-decoded answer.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryAnswer<S> {
    pub tokens: Vec<u32>,
    /// Hidden rows that fed the language-model head: every query token's
    /// final hidden state, then one row per decode step.
    pub prelogit: Matrix<S>,
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

impl<S: Scalar> Model<S> {
    /// Encodes `block` against a read-only `context` cache.
    ///
    /// Cache keys are addressed at `positions.cache_position(i)`; the block's
    /// tokens sit at `positions.query_start + i` and attend causally to the
    /// whole cache plus their own predecessors. For a position-agnostic
    /// context the new keys are returned raw; for an encoded context they are
    /// returned rotated, and `positions.cache_start` must match the context's
    /// base position.
    pub fn encode_block(
        &self,
        block: &TokenBlock<S>,
        context: &KvCache<S>,
        positions: &PositionAssignment,
        ctx: &mut ExecContext,
    ) -> Result<BlockOutput<S>> {
        let hidden = self.hidden();
        let (heads, d) = (self.spec.num_heads, self.spec.head_dim);
        if block.embeddings.cols() != hidden {
            return Err(Error::contract(format!(
                "block width {} does not match hidden size {hidden}",
                block.embeddings.cols()
            )));
        }
        if context.num_layers() != self.spec.num_layers || context.hidden() != hidden {
            return Err(Error::contract(format!(
                "context cache is {}x{}, model wants {}x{}",
                context.num_layers(),
                context.hidden(),
                self.spec.num_layers,
                hidden
            )));
        }
        let cache_len = context.len();
        positions.validate(cache_len)?;
        let agnostic = match context.mode() {
            StorageMode::PositionAgnostic => true,
            StorageMode::PositionEncoded { base_position } => {
                if positions.cache_start != base_position {
                    return Err(Error::contract(format!(
                        "encoded context sits at base position {base_position}, assignment \
                         says {}",
                        positions.cache_start
                    )));
                }
                if positions.reversed_cache {
                    return Err(Error::contract(
                        "reversed-cache diagnostic requires a position-agnostic context"
                            .to_string(),
                    ));
                }
                false
            }
        };

        let n = block.len();
        let total = cache_len + n;
        ctx.note_rows(total);
        // Causal mask: block token i sees the whole cache plus tokens 0..=i.
        let valid: Vec<usize> = (0..n).map(|i| cache_len + i + 1).collect();
        let scale = S::from_f64(1.0 / (d as f64).sqrt());

        if cache_len > 0 {
            ctx.note_position(positions.cache_position(cache_len - 1, cache_len).max(
                positions.cache_position(0, cache_len),
            ));
        }
        if n > 0 {
            ctx.note_position(positions.query_start + n as u64 - 1);
        }

        let mut z = block.embeddings.clone();
        let mut new_kv = Vec::with_capacity(self.spec.num_layers);
        for (r, w) in self.layers.iter().enumerate() {
            let layer_cache = context.layer(r);

            // Attention sublayer.
            let normed = rms_norm(&z, &w.attn_gain, RMS_EPS)?;
            let mut q = matmul(&normed, &w.w_q)?;
            ctx.charge(mac_count(n, hidden, hidden));
            let k_raw = matmul(&normed, &w.w_k)?;
            ctx.charge(mac_count(n, hidden, hidden));
            let v = matmul(&normed, &w.w_v)?;
            ctx.charge(mac_count(n, hidden, hidden));

            for i in 0..n {
                rope_apply_hidden(q.row_mut(i), positions.query_start + i as u64, &self.rope)?;
            }
            // Keys for attention: cache rows rotated at their assigned
            // positions (or used as stored when already encoded), then the
            // block's own keys at the query positions.
            let mut k_attn = Matrix::zeros(total, hidden);
            for i in 0..cache_len {
                let row = k_attn.row_mut(i);
                row.copy_from_slice(layer_cache.keys.row(i));
                if agnostic {
                    rope_apply_hidden(row, positions.cache_position(i, cache_len), &self.rope)?;
                }
            }
            for i in 0..n {
                let row = k_attn.row_mut(cache_len + i);
                row.copy_from_slice(k_raw.row(i));
                rope_apply_hidden(row, positions.query_start + i as u64, &self.rope)?;
            }

            let mut attn_out = Matrix::zeros(n, hidden);
            for h in 0..heads {
                let qh = take_head(&q, h, d);
                let kh = take_head(&k_attn, h, d);
                let mut scores = matmul(&qh, &kh.transpose())?;
                ctx.charge(mac_count(n, d, total));
                for i in 0..n {
                    for s in scores.row_mut(i) {
                        *s *= scale;
                    }
                }
                let probs = softmax_rows(&scores, &valid)?;
                if let Some(probe) = ctx.probe.as_mut() {
                    for i in 0..n {
                        probe.record(probs.row(i));
                    }
                }
                let vh = {
                    let mut m = Matrix::zeros(total, d);
                    for i in 0..cache_len {
                        m.row_mut(i).copy_from_slice(&layer_cache.values.row(i)[h * d..(h + 1) * d]);
                    }
                    for i in 0..n {
                        m.row_mut(cache_len + i).copy_from_slice(&v.row(i)[h * d..(h + 1) * d]);
                    }
                    m
                };
                let oh = matmul(&probs, &vh)?;
                ctx.charge(mac_count(n, total, d));
                for i in 0..n {
                    attn_out.row_mut(i)[h * d..(h + 1) * d].copy_from_slice(oh.row(i));
                }
            }
            let projected = matmul(&attn_out, &w.w_o)?;
            ctx.charge(mac_count(n, hidden, hidden));
            for i in 0..n {
                for (zi, pi) in z.row_mut(i).iter_mut().zip(projected.row(i)) {
                    *zi += *pi;
                }
            }

            // Feed-forward sublayer.
            let normed = rms_norm(&z, &w.ffn_gain, RMS_EPS)?;
            let mut up = matmul(&normed, &w.w_up)?;
            ctx.charge(mac_count(n, hidden, self.spec.ffn_dim));
            silu_inplace(&mut up);
            let down = matmul(&up, &w.w_down)?;
            ctx.charge(mac_count(n, self.spec.ffn_dim, hidden));
            for i in 0..n {
                for (zi, di) in z.row_mut(i).iter_mut().zip(down.row(i)) {
                    *zi += *di;
                }
            }

            // New KV rows: raw keys for agnostic storage, rotated for encoded.
            let keys = if agnostic {
                k_raw
            } else {
                let mut rotated = k_raw;
                for i in 0..n {
                    rope_apply_hidden(rotated.row_mut(i), positions.query_start + i as u64, &self.rope)?;
                }
                rotated
            };
            new_kv.push(LayerKv {
                keys,
                values: v,
                tags: vec![block.tag; n],
                block_ids: vec![block.block_id; n],
            });
        }
        Ok(BlockOutput { hidden: z, kv: new_kv })
    }

    /// Encodes a block purely for its KV rows (stream ingestion).
    pub fn encode_to_kv(
        &self,
        block: &TokenBlock<S>,
        context: &KvCache<S>,
        positions: &PositionAssignment,
        ctx: &mut ExecContext,
    ) -> Result<Vec<LayerKv<S>>> {
        Ok(self.encode_block(block, context, positions, ctx)?.kv)
    }

    /// Runs one block and samples a token from its last row.
    fn forward_and_sample(
        &self,
        block: &TokenBlock<S>,
        cache: &mut KvCache<S>,
        positions: &PositionAssignment,
        ctx: &mut ExecContext,
    ) -> Result<(Matrix<S>, u32)> {
        let out = self.encode_block(block, cache, positions, ctx)?;
        cache.append(&out.kv)?;
        let last = out.hidden.slice_rows(out.hidden.rows() - 1, out.hidden.rows())?;
        let logits = matmul(&last, &self.lm_head)?;
        ctx.charge(mac_count(1, self.hidden(), self.spec.vocab_size));
        Ok((out.hidden, argmax(logits.row(0))))
    }

    /// Greedy decode: encodes the query against `cache`, then feeds each
    /// sampled token back, appending all new rows to `cache` as it goes.
    ///
    /// Prefill covers the query block and the head matmul that samples the
    /// first token; every later step charges as decode. Ties in the argmax
    /// break toward the lowest token id.
    pub fn answer_query(
        &self,
        query: &TokenBlock<S>,
        cache: &mut KvCache<S>,
        positions: &PositionAssignment,
        max_new: usize,
        ctx: &mut ExecContext,
    ) -> Result<QueryAnswer<S>> {
        if max_new == 0 {
            return Err(Error::config("max_new must be at least 1".to_string()));
        }
        ctx.phase_is_decode = false;
        let (query_hidden, first) = self.forward_and_sample(query, cache, positions, ctx)?;
        let mut tokens = vec![first];
        let mut prelogit_rows = vec![query_hidden];

        ctx.phase_is_decode = true;
        for _ in 1..max_new {
            let prev = *tokens.last().expect("at least one token");
            let step_block =
                TokenBlock::new(self.embed_tokens(&[prev])?, Modality::Text, query.block_id);
            let step_positions = if positions.reversed_cache {
                PositionAssignment::reversed_diagnostic(positions.cache_start, cache.len())
            } else {
                PositionAssignment::contiguous(positions.cache_start, cache.len())
            };
            let (hidden, next) = self.forward_and_sample(&step_block, cache, &step_positions, ctx)?;
            prelogit_rows.push(hidden);
            tokens.push(next);
        }
        ctx.phase_is_decode = false;
        let refs: Vec<&Matrix<S>> = prelogit_rows.iter().collect();
        Ok(QueryAnswer { tokens, prelogit: Matrix::vstack(&refs)? })
    }
}

fn silu_inplace<S: Scalar>(m: &mut Matrix<S>) {
    for i in 0..m.rows() {
        for x in m.row_mut(i) {
            *x = *x / (S::ONE + (-*x).exp());
        }
    }
}

fn argmax<S: Scalar>(row: &[S]) -> u32 {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best as u32
}

/// Copies head `h`'s columns of a packed-hidden matrix.
fn take_head<S: Scalar>(m: &Matrix<S>, h: usize, d: usize) -> Matrix<S> {
    let mut out = Matrix::zeros(m.rows(), d);
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&m.row(i)[h * d..(h + 1) * d]);
    }
    out
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
