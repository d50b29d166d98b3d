//! Scenario-driven experiment harness.
//!
//! A [`Scenario`] describes one reproducible experiment: a model, a seeded
//! synthetic frame stream, a query schedule, a set of named policies, and the
//! cross-policy comparisons to verify. [`run_scenario`] generates the event
//! stream once, replays it against every policy (fanning out across threads —
//! runs are independent and each is fully deterministic), and evaluates the
//! comparisons into pass/fail [`Verdict`]s. Everything observable lands in a
//! flat list of [`ReportRecord`]s that serializes to JSON Lines or CSV.

use crate::error::{Error, Result};
use crate::kv::{Modality, PositionAssignment};
use crate::metrics::{value_cache_cosine, RunMetrics};
use crate::model::{ExecContext, Model, ModelSpec, TokenBlock};
use crate::policy::{
    assignment_for, build_policy, FrameReport, PolicyKind, PolicySpec, StreamPolicy,
};
use crate::tensor::{derive_seed, seeded_gaussian, Matrix, Rng, Scalar};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

// ---------------------------------------------------------------------------
// Scenario description
// ---------------------------------------------------------------------------

/// Numeric width the scenario runs at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// The synthetic frame stream. Frame `t` is a block of `tokens_per_frame`
/// embedding rows; with `frame_correlation` ρ ≠ 0 consecutive frames follow a
/// stationary AR(1) process `x_t = ρ·x_{t-1} + sqrt(1-ρ²)·ε_t`, mimicking the
/// slow drift of adjacent video frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub frames: u64,
    pub tokens_per_frame: usize,
    pub frame_correlation: f64,
    pub embedding_scale: f64,
    /// Emit a frame record every N frames (0 = none).
    pub record_frames_every: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            frames: 0,
            tokens_per_frame: 8,
            frame_correlation: 0.0,
            embedding_scale: 1.0,
            record_frames_every: 0,
        }
    }
}

/// When queries fire and what they look like. A query at step `s` runs right
/// after the `s`-th frame (1-based) has been ingested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuerySchedule {
    /// Explicit steps, merged with the `every_frames` cadence.
    pub at_steps: Vec<u64>,
    /// Fire every N frames starting at `start_step` (0 = disabled).
    pub every_frames: u64,
    pub start_step: u64,
    /// Query length in tokens.
    pub tokens: usize,
    /// Greedy decode length.
    pub max_new: usize,
    /// Record attention-mass fractions over (sink, past, recent).
    pub capture_mass: bool,
}

impl Default for QuerySchedule {
    fn default() -> Self {
        QuerySchedule {
            at_steps: Vec::new(),
            every_frames: 0,
            start_step: 1,
            tokens: 4,
            max_new: 8,
            capture_mass: false,
        }
    }
}

impl QuerySchedule {
    /// All query steps for a stream of `frames` frames, sorted and deduplicated.
    pub fn steps(&self, frames: u64) -> Vec<u64> {
        let mut steps: BTreeSet<u64> = self.at_steps.iter().copied().collect();
        if self.every_frames > 0 {
            let mut t = self.start_step.max(1);
            while t <= frames {
                steps.insert(t);
                t += self.every_frames;
            }
        }
        steps.into_iter().collect()
    }
}

/// Compare each policy's retained encoding of a past frame against a fresh
/// context-free encoding of the same frame (against the sink alone). The
/// mean per-row cosine over value rows quantifies how far the retained rows
/// have drifted from reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineMeasurement {
    pub at_steps: Vec<u64>,
    /// Measure the frame ingested `block_offset` steps before the
    /// measurement step (1 = the previous frame).
    #[serde(default = "default_block_offset")]
    pub block_offset: u64,
}

fn default_block_offset() -> u64 {
    1
}

fn default_tolerance() -> f64 {
    1e-10
}

/// A scalar each policy run can be reduced to, for ordering comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Mean prefill multiply-accumulates per query.
    PrefillMacs,
    /// Mean decode multiply-accumulates per query.
    DecodeMacs,
    /// Mean prefill + decode per query.
    QueryMacs,
    /// Total multiply-accumulates spent ingesting the whole stream.
    IngestMacs,
    /// Mean retained-vs-reference value cosine over measurements.
    ValueCosine,
    /// Mean attention mass on the sink region.
    MassSink,
    /// Mean attention mass on the past (cumulative/history) region.
    MassPast,
    /// Mean attention mass on the recent (buffer window) region.
    MassRecent,
    /// KV rows held after the last frame.
    PersistentRows,
    /// Largest co-resident KV row count anywhere in the run.
    PeakRows,
    /// Largest rotary position touched anywhere in the run.
    MaxPosition,
}

/// A cross-policy check the harness turns into a [`Verdict`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Comparison {
    /// `a` and `b` must produce identical tokens and prelogit rows within
    /// `tolerance` at every query step — or, with `expect_divergence`, must
    /// differ somewhere (the negative control proving a check has teeth).
    Equivalence {
        a: String,
        b: String,
        #[serde(default = "default_tolerance")]
        tolerance: f64,
        #[serde(default)]
        expect_divergence: bool,
    },
    /// Each listed policy's value of `metric` must not exceed the next one's
    /// (`strict` demands strictly-less).
    Ordering {
        metric: MetricKind,
        ascending: Vec<String>,
        #[serde(default)]
        strict: bool,
    },
    /// Re-based (positions from 0) and absolute (stream-coordinate)
    /// addressing of the policy's cache must encode queries identically
    /// within `tolerance` at every query step. Requires a sink-free,
    /// position-agnostic uniform policy, where the cache holds exactly the
    /// most recent stream tokens. The negative control re-addresses the
    /// cache in reverse and must exceed the tolerance.
    ShiftEquivalence {
        policy: String,
        #[serde(default = "default_tolerance")]
        tolerance: f64,
        #[serde(default)]
        negative_control: bool,
    },
}

impl Comparison {
    /// Every policy id this comparison needs a run for.
    pub fn involved_ids(&self) -> Vec<&str> {
        match self {
            Comparison::Equivalence { a, b, .. } => vec![a, b],
            Comparison::Ordering { ascending, .. } => {
                ascending.iter().map(String::as_str).collect()
            }
            Comparison::ShiftEquivalence { policy, .. } => vec![policy],
        }
    }
}

/// One reproducible experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    /// Seeds the stream and query content (the model has its own seed).
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSpec,
    #[serde(default)]
    pub precision: Precision,
    pub stream: StreamSpec,
    #[serde(default)]
    pub queries: QuerySchedule,
    #[serde(default)]
    pub measure: Option<CosineMeasurement>,
    pub policies: Vec<PolicySpec>,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
}

impl Scenario {
    pub fn from_json(json: &str) -> Result<Scenario> {
        let scenario: Scenario =
            serde_json::from_str(json).map_err(|e| Error::Parse(format!("scenario: {e}")))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_file(path: &Path) -> Result<Scenario> {
        Scenario::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    fn policy(&self, id: &str) -> Option<&PolicySpec> {
        self.policies.iter().find(|p| p.id == id)
    }

    fn check_policy_ref(&self, id: &str, role: &str) -> Result<()> {
        if self.policy(id).is_none() {
            return Err(Error::config(format!(
                "comparison {role} references unknown policy '{id}'"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::config("scenario id must not be empty".to_string()));
        }
        self.model.validate()?;
        if self.stream.frames == 0 {
            return Err(Error::config("stream.frames must be at least 1".to_string()));
        }
        if self.stream.tokens_per_frame == 0 {
            return Err(Error::config("stream.tokens_per_frame must be at least 1".to_string()));
        }
        if !(self.stream.frame_correlation.is_finite()
            && self.stream.frame_correlation.abs() < 1.0)
        {
            return Err(Error::config(format!(
                "stream.frame_correlation must lie in (-1, 1), got {}",
                self.stream.frame_correlation
            )));
        }
        if !(self.stream.embedding_scale.is_finite() && self.stream.embedding_scale > 0.0) {
            return Err(Error::config("stream.embedding_scale must be positive".to_string()));
        }
        if self.queries.tokens == 0 || self.queries.max_new == 0 {
            return Err(Error::config(
                "queries need at least one token and one decode step".to_string(),
            ));
        }
        for &s in &self.queries.at_steps {
            if s == 0 || s > self.stream.frames {
                return Err(Error::config(format!(
                    "query step {s} outside the stream (1..={})",
                    self.stream.frames
                )));
            }
        }
        if let Some(m) = &self.measure {
            for &s in &m.at_steps {
                if s == 0 || s > self.stream.frames {
                    return Err(Error::config(format!(
                        "measurement step {s} outside the stream (1..={})",
                        self.stream.frames
                    )));
                }
            }
        }
        if self.policies.is_empty() {
            return Err(Error::config("scenario needs at least one policy".to_string()));
        }
        let mut seen = BTreeSet::new();
        for spec in &self.policies {
            if spec.id.is_empty() {
                return Err(Error::config("policy id must not be empty".to_string()));
            }
            if !seen.insert(spec.id.as_str()) {
                return Err(Error::config(format!("duplicate policy id '{}'", spec.id)));
            }
            let mut cfg = spec.config.clone();
            cfg.tokens_per_frame = self.stream.tokens_per_frame;
            cfg.validate(spec.kind)?;
        }
        for cmp in &self.comparisons {
            match cmp {
                Comparison::Equivalence { a, b, tolerance, .. } => {
                    self.check_policy_ref(a, "equivalence")?;
                    self.check_policy_ref(b, "equivalence")?;
                    if a == b {
                        return Err(Error::config(format!(
                            "equivalence of '{a}' with itself is vacuous"
                        )));
                    }
                    if !(tolerance.is_finite() && *tolerance >= 0.0) {
                        return Err(Error::config("tolerance must be non-negative".to_string()));
                    }
                }
                Comparison::Ordering { ascending, .. } => {
                    if ascending.len() < 2 {
                        return Err(Error::config(
                            "ordering needs at least two policies".to_string(),
                        ));
                    }
                    for id in ascending {
                        self.check_policy_ref(id, "ordering")?;
                    }
                }
                Comparison::ShiftEquivalence { policy, tolerance, .. } => {
                    self.check_policy_ref(policy, "shift_equivalence")?;
                    let spec = self.policy(policy).expect("just checked");
                    if spec.kind != PolicyKind::Uniform
                        || spec.config.sink_tokens != 0
                        || spec.position_encoded_storage
                        || spec.reversed_positions
                    {
                        return Err(Error::config(format!(
                            "shift_equivalence needs '{policy}' to be a sink-free, \
                             position-agnostic uniform policy"
                        )));
                    }
                    if !(tolerance.is_finite() && *tolerance >= 0.0) {
                        return Err(Error::config("tolerance must be non-negative".to_string()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Policy specs with the stream's frame geometry stamped in: the stream
    /// owns `tokens_per_frame`, so per-policy values are overridden.
    fn normalized_policies(&self) -> Vec<PolicySpec> {
        self.policies
            .iter()
            .map(|spec| {
                let mut spec = spec.clone();
                spec.config.tokens_per_frame = self.stream.tokens_per_frame;
                spec
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Event plan
// ---------------------------------------------------------------------------

/// Block ids for query blocks; stream frames use 0.. and responses live
/// above `1 << 62`, so the ranges never collide.
pub const QUERY_ID_BASE: u64 = 1 << 61;

const STREAM_SEED_TAG: u64 = 0x5354_5245_414D; // "STREAM" in ASCII
const QUERY_SEED_TAG: u64 = 0x51_5545_5259; // "QUERY" in ASCII

/// The fully materialized event stream every policy replays: identical
/// blocks, identical order, one construction.
pub struct EventPlan<S> {
    pub frames: Vec<TokenBlock<S>>,
    /// `(step, query block)` sorted by step.
    pub queries: Vec<(u64, TokenBlock<S>)>,
    pub measure_steps: Vec<u64>,
    pub measure_offset: u64,
    pub record_frames_every: u64,
    pub capture_mass: bool,
    pub max_new: usize,
}

/// Generates the deterministic event stream for a scenario. Every block's
/// content is a pure function of `(scenario.seed, block id)`, so plans can be
/// rebuilt independently and still agree bit for bit.
pub fn build_event_plan<S: Scalar>(scenario: &Scenario, hidden: usize) -> Result<EventPlan<S>> {
    let stream_root = derive_seed(scenario.seed, STREAM_SEED_TAG);
    let query_root = derive_seed(scenario.seed, QUERY_SEED_TAG);
    let tpf = scenario.stream.tokens_per_frame;
    let scale = scenario.stream.embedding_scale;
    let rho = scenario.stream.frame_correlation;

    let mut frames = Vec::with_capacity(scenario.stream.frames as usize);
    let mut prev: Option<Matrix<S>> = None;
    for t in 0..scenario.stream.frames {
        let mut rng = Rng::new(derive_seed(stream_root, t));
        let fresh = seeded_gaussian::<S>(&mut rng, tpf, hidden, scale);
        let embeddings = match &prev {
            Some(p) if rho != 0.0 => ar1_step(p, &fresh, rho)?,
            _ => fresh,
        };
        prev = Some(embeddings.clone());
        frames.push(TokenBlock::new(embeddings, Modality::Visual, t));
    }

    let queries = scenario
        .queries
        .steps(scenario.stream.frames)
        .into_iter()
        .map(|step| {
            let mut rng = Rng::new(derive_seed(query_root, step));
            let embeddings =
                seeded_gaussian::<S>(&mut rng, scenario.queries.tokens, hidden, scale);
            (step, TokenBlock::new(embeddings, Modality::Text, QUERY_ID_BASE + step))
        })
        .collect();

    let measure_steps = scenario
        .measure
        .as_ref()
        .map(|m| {
            let set: BTreeSet<u64> = m.at_steps.iter().copied().collect();
            set.into_iter().collect()
        })
        .unwrap_or_default();

    Ok(EventPlan {
        frames,
        queries,
        measure_steps,
        measure_offset: scenario.measure.as_ref().map_or(1, |m| m.block_offset),
        record_frames_every: scenario.stream.record_frames_every,
        capture_mass: scenario.queries.capture_mass,
        max_new: scenario.queries.max_new,
    })
}

/// One AR(1) transition, elementwise `ρ·prev + sqrt(1-ρ²)·fresh`.
fn ar1_step<S: Scalar>(prev: &Matrix<S>, fresh: &Matrix<S>, rho: f64) -> Result<Matrix<S>> {
    let a = S::from_f64(rho);
    let b = S::from_f64((1.0 - rho * rho).sqrt());
    let data = prev
        .data()
        .iter()
        .zip(fresh.data())
        .map(|(&p, &f)| a * p + b * f)
        .collect();
    Matrix::from_vec(prev.rows(), prev.cols(), data)
}

// ---------------------------------------------------------------------------
// Per-policy run results
// ---------------------------------------------------------------------------

/// One answered query with everything needed for later equivalence checks.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord<S> {
    pub step: u64,
    pub tokens: Vec<u32>,
    pub prelogit: Matrix<S>,
    pub metrics: RunMetrics,
}

/// One retained-vs-reference value-cosine measurement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSample {
    pub step: u64,
    pub block_id: u64,
    pub mean_cosine: f64,
    pub rows_compared: usize,
}

/// One re-based vs absolute addressing check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSample {
    pub step: u64,
    /// Max absolute difference between hidden outputs under re-based and
    /// absolute position assignments.
    pub rebase_diff: f64,
    /// Same comparison against the reversed-addressing fault injection.
    pub control_diff: Option<f64>,
}

/// Stream-side aggregates accumulated over every frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunTotals {
    pub total_ingest_macs: u64,
    pub final_persistent_rows: usize,
    pub max_peak_rows: usize,
    pub max_position_used: u64,
}

/// Everything one policy produced over the whole event stream.
pub struct PolicyRun<S> {
    pub id: String,
    pub kind: PolicyKind,
    pub queries: Vec<QueryRecord<S>>,
    pub frame_samples: Vec<(u64, FrameReport)>,
    pub cosines: Vec<CosineSample>,
    pub shifts: Vec<ShiftSample>,
    pub totals: RunTotals,
}

/// A comparison's outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub comparison: String,
    pub passed: bool,
    pub detail: String,
}

/// The full result of [`run_scenario`].
pub struct ScenarioOutcome<S> {
    pub runs: Vec<PolicyRun<S>>,
    pub verdicts: Vec<Verdict>,
    pub records: Vec<ReportRecord>,
}

impl<S> ScenarioOutcome<S> {
    pub fn all_passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

/// Environment variable capping the fan-out thread count.
pub const THREADS_ENV: &str = "DSCACHE_THREADS";

fn default_threads(policies: usize) -> usize {
    let available = std::thread::available_parallelism().map(usize::from).unwrap_or(1);
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n >= 1).unwrap_or(1),
        Err(_) => available.min(policies).max(1),
    }
}

/// Runs a scenario with the default thread cap (the `DSCACHE_THREADS`
/// environment variable, else one thread per policy up to the hardware).
pub fn run_scenario<S: Scalar>(scenario: &Scenario) -> Result<ScenarioOutcome<S>> {
    run_scenario_with_threads(scenario, default_threads(scenario.policies.len()))
}

/// Runs a scenario with an explicit fan-out width. Results are identical for
/// any width; only wall-clock time changes.
pub fn run_scenario_with_threads<S: Scalar>(
    scenario: &Scenario,
    threads: usize,
) -> Result<ScenarioOutcome<S>> {
    scenario.validate()?;
    let model = Arc::new(Model::<S>::new(scenario.model.clone())?);
    let plan = build_event_plan::<S>(scenario, model.hidden())?;
    let specs = scenario.normalized_policies();

    // Which policies need shift sampling, and whether with the control.
    let shift_flags: Vec<Option<bool>> = specs
        .iter()
        .map(|spec| {
            let mut wanted = None;
            for cmp in &scenario.comparisons {
                if let Comparison::ShiftEquivalence { policy, negative_control, .. } = cmp {
                    if *policy == spec.id {
                        wanted = Some(wanted.unwrap_or(false) || *negative_control);
                    }
                }
            }
            wanted
        })
        .collect();

    let runs = fan_out(&model, &specs, &plan, &shift_flags, threads.max(1))?;
    let verdicts = evaluate_comparisons(&scenario.comparisons, &runs);
    let records = collect_records(&runs, &verdicts);
    Ok(ScenarioOutcome { runs, verdicts, records })
}

fn fan_out<S: Scalar>(
    model: &Arc<Model<S>>,
    specs: &[PolicySpec],
    plan: &EventPlan<S>,
    shift_flags: &[Option<bool>],
    threads: usize,
) -> Result<Vec<PolicyRun<S>>> {
    if threads <= 1 || specs.len() <= 1 {
        return specs
            .iter()
            .zip(shift_flags)
            .map(|(spec, &shift)| run_policy(model, spec, plan, shift))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<PolicyRun<S>>>>> =
        specs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads.min(specs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= specs.len() {
                    break;
                }
                let run = run_policy(model, &specs[i], plan, shift_flags[i]);
                *slots[i].lock().expect("result slot") = Some(run);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot").expect("every index was claimed"))
        .collect()
}

/// Replays the whole event stream against one policy.
fn run_policy<S: Scalar>(
    model: &Arc<Model<S>>,
    spec: &PolicySpec,
    plan: &EventPlan<S>,
    shift_control: Option<bool>,
) -> Result<PolicyRun<S>> {
    let mut policy = build_policy(model.clone(), spec)?;
    let mut queries = Vec::new();
    let mut frame_samples = Vec::new();
    let mut cosines = Vec::new();
    let mut shifts = Vec::new();
    let mut totals = RunTotals::default();
    let mut q_idx = 0;
    let mut m_idx = 0;

    for (t, frame) in plan.frames.iter().enumerate() {
        let step = t as u64 + 1;
        let report = policy.ingest(frame)?;
        totals.total_ingest_macs += report.ingest_macs;
        totals.final_persistent_rows = report.persistent_rows;
        totals.max_peak_rows = totals.max_peak_rows.max(report.peak_rows);
        totals.max_position_used = totals.max_position_used.max(report.max_position_used);
        if plan.record_frames_every > 0 && step % plan.record_frames_every == 0 {
            frame_samples.push((step, report));
        }
        if m_idx < plan.measure_steps.len() && plan.measure_steps[m_idx] == step {
            if let Some(sample) = measure_cosine(model, policy.as_mut(), plan, step)? {
                cosines.push(sample);
            }
            m_idx += 1;
        }
        if q_idx < plan.queries.len() && plan.queries[q_idx].0 == step {
            let (_, query) = &plan.queries[q_idx];
            if let Some(control) = shift_control {
                shifts.push(shift_sample(model, policy.as_mut(), query, step, control)?);
            }
            let out = policy.answer(query, plan.max_new, step, plan.capture_mass)?;
            queries.push(QueryRecord {
                step,
                tokens: out.tokens,
                prelogit: out.prelogit,
                metrics: out.metrics,
            });
            q_idx += 1;
        }
    }

    // Each query reports the latest measurement at or before it.
    for q in &mut queries {
        q.metrics.value_cosine_vs_reference =
            cosines.iter().take_while(|c| c.step <= q.step).last().map(|c| c.mean_cosine);
    }

    Ok(PolicyRun {
        id: spec.id.clone(),
        kind: spec.kind,
        queries,
        frame_samples,
        cosines,
        shifts,
        totals,
    })
}

/// Compares a policy's retained rows for one past frame against a fresh
/// encoding of that frame computed with no stream context beyond the sink.
/// Skips silently when the frame has aged out, was swallowed by the sink, or
/// is held at boosted resolution (row counts would not line up).
fn measure_cosine<S: Scalar>(
    model: &Model<S>,
    policy: &mut dyn StreamPolicy<S>,
    plan: &EventPlan<S>,
    step: u64,
) -> Result<Option<CosineSample>> {
    let Some(block_id) = (step - 1).checked_sub(plan.measure_offset) else {
        return Ok(None);
    };
    let block = &plan.frames[block_id as usize];
    let Some(rows) = policy.frame_encoding(block_id)? else {
        return Ok(None);
    };
    let sink = policy.sink().cache();
    let mut scratch = ExecContext::new();
    let reference = model.encode_to_kv(block, sink, &assignment_for(sink), &mut scratch)?;
    if rows.first().map(|l| l.len()) != reference.first().map(|l| l.len()) {
        return Ok(None);
    }
    let report = value_cache_cosine(&rows, &reference)?;
    Ok(Some(CosineSample {
        step,
        block_id,
        mean_cosine: report.mean_cosine,
        rows_compared: report.rows_compared,
    }))
}

/// Encodes the query against the policy's cache under re-based and absolute
/// position assignments and measures how far the hidden outputs drift; the
/// optional control does the same with reversed addressing, which must NOT
/// agree.
fn shift_sample<S: Scalar>(
    model: &Model<S>,
    policy: &mut dyn StreamPolicy<S>,
    query: &TokenBlock<S>,
    step: u64,
    control: bool,
) -> Result<ShiftSample> {
    let view = policy.query_view()?;
    let len = view.cache.len();
    let mut scratch = ExecContext::new();
    let rebased = model.encode_block(
        query,
        &view.cache,
        &PositionAssignment::contiguous(0, len),
        &mut scratch,
    )?;
    let absolute_start = view.stream_tokens - len as u64;
    let absolute = model.encode_block(
        query,
        &view.cache,
        &PositionAssignment::contiguous(absolute_start, len),
        &mut scratch,
    )?;
    let rebase_diff = rebased.hidden.max_abs_diff(&absolute.hidden);
    let control_diff = if control {
        let reversed = model.encode_block(
            query,
            &view.cache,
            &PositionAssignment::reversed_diagnostic(0, len),
            &mut scratch,
        )?;
        Some(reversed.hidden.max_abs_diff(&rebased.hidden))
    } else {
        None
    };
    Ok(ShiftSample { step, rebase_diff, control_diff })
}

// ---------------------------------------------------------------------------
// Comparison evaluation
// ---------------------------------------------------------------------------

fn find_run<'a, S>(runs: &'a [PolicyRun<S>], id: &str) -> &'a PolicyRun<S> {
    runs.iter().find(|r| r.id == id).expect("validated policy id")
}

fn metric_value<S: Scalar>(run: &PolicyRun<S>, metric: MetricKind) -> Option<f64> {
    fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }
    match metric {
        MetricKind::PrefillMacs => mean(run.queries.iter().map(|q| q.metrics.prefill_macs as f64)),
        MetricKind::DecodeMacs => mean(run.queries.iter().map(|q| q.metrics.decode_macs as f64)),
        MetricKind::QueryMacs => mean(
            run.queries.iter().map(|q| (q.metrics.prefill_macs + q.metrics.decode_macs) as f64),
        ),
        MetricKind::IngestMacs => Some(run.totals.total_ingest_macs as f64),
        MetricKind::ValueCosine => mean(run.cosines.iter().map(|c| c.mean_cosine)),
        MetricKind::MassSink => mean(run.queries.iter().filter_map(|q| q.metrics.attention_mass_sink)),
        MetricKind::MassPast => mean(run.queries.iter().filter_map(|q| q.metrics.attention_mass_past)),
        MetricKind::MassRecent => {
            mean(run.queries.iter().filter_map(|q| q.metrics.attention_mass_recent))
        }
        MetricKind::PersistentRows => Some(run.totals.final_persistent_rows as f64),
        MetricKind::PeakRows => {
            let query_peak = run.queries.iter().map(|q| q.metrics.peak_cache_rows).max().unwrap_or(0);
            Some(run.totals.max_peak_rows.max(query_peak) as f64)
        }
        MetricKind::MaxPosition => {
            let query_max = run.queries.iter().map(|q| q.metrics.max_position_used).max().unwrap_or(0);
            Some(run.totals.max_position_used.max(query_max) as f64)
        }
    }
}

fn metric_name(metric: MetricKind) -> &'static str {
    match metric {
        MetricKind::PrefillMacs => "prefill_macs",
        MetricKind::DecodeMacs => "decode_macs",
        MetricKind::QueryMacs => "query_macs",
        MetricKind::IngestMacs => "ingest_macs",
        MetricKind::ValueCosine => "value_cosine",
        MetricKind::MassSink => "mass_sink",
        MetricKind::MassPast => "mass_past",
        MetricKind::MassRecent => "mass_recent",
        MetricKind::PersistentRows => "persistent_rows",
        MetricKind::PeakRows => "peak_rows",
        MetricKind::MaxPosition => "max_position",
    }
}

/// Evaluates every comparison against the finished runs.
pub fn evaluate_comparisons<S: Scalar>(
    comparisons: &[Comparison],
    runs: &[PolicyRun<S>],
) -> Vec<Verdict> {
    comparisons
        .iter()
        .map(|cmp| match cmp {
            Comparison::Equivalence { a, b, tolerance, expect_divergence } => {
                evaluate_equivalence(runs, a, b, *tolerance, *expect_divergence)
            }
            Comparison::Ordering { metric, ascending, strict } => {
                evaluate_ordering(runs, *metric, ascending, *strict)
            }
            Comparison::ShiftEquivalence { policy, tolerance, negative_control } => {
                evaluate_shift(runs, policy, *tolerance, *negative_control)
            }
        })
        .collect()
}

fn evaluate_equivalence<S: Scalar>(
    runs: &[PolicyRun<S>],
    a: &str,
    b: &str,
    tolerance: f64,
    expect_divergence: bool,
) -> Verdict {
    let label = if expect_divergence {
        format!("divergence({a}, {b})")
    } else {
        format!("equivalence({a}, {b}, tol {tolerance:.1e})")
    };
    let ra = find_run(runs, a);
    let rb = find_run(runs, b);
    if ra.queries.len() != rb.queries.len() {
        return Verdict {
            comparison: label,
            passed: false,
            detail: format!(
                "query counts differ: {} vs {}",
                ra.queries.len(),
                rb.queries.len()
            ),
        };
    }
    if ra.queries.is_empty() {
        return Verdict {
            comparison: label,
            passed: false,
            detail: "no query steps to compare".to_string(),
        };
    }
    let mut max_diff = 0.0f64;
    let mut first_divergence: Option<(u64, String)> = None;
    for (qa, qb) in ra.queries.iter().zip(&rb.queries) {
        if qa.tokens != qb.tokens {
            first_divergence.get_or_insert((qa.step, "decoded tokens differ".to_string()));
            max_diff = f64::INFINITY;
            continue;
        }
        let diff = qa.prelogit.max_abs_diff(&qb.prelogit);
        max_diff = max_diff.max(diff);
        if diff > tolerance {
            first_divergence
                .get_or_insert((qa.step, format!("prelogit diff {diff:.3e} > {tolerance:.1e}")));
        }
    }
    let diverged = first_divergence.is_some();
    if expect_divergence {
        Verdict {
            comparison: label,
            passed: diverged,
            detail: match first_divergence {
                Some((step, why)) => format!("diverged at step {step} as expected ({why})"),
                None => format!(
                    "no divergence found over {} steps (max diff {max_diff:.3e})",
                    ra.queries.len()
                ),
            },
        }
    } else {
        Verdict {
            comparison: label,
            passed: !diverged,
            detail: match first_divergence {
                Some((step, why)) => format!("diverged at step {step}: {why}"),
                None => format!(
                    "{} steps agree, max prelogit diff {max_diff:.3e}",
                    ra.queries.len()
                ),
            },
        }
    }
}

fn evaluate_ordering<S: Scalar>(
    runs: &[PolicyRun<S>],
    metric: MetricKind,
    ascending: &[String],
    strict: bool,
) -> Verdict {
    let label = format!("ordering({}: {})", metric_name(metric), ascending.join(" <= "));
    let mut values = Vec::with_capacity(ascending.len());
    for id in ascending {
        match metric_value(find_run(runs, id), metric) {
            Some(v) => values.push(v),
            None => {
                return Verdict {
                    comparison: label,
                    passed: false,
                    detail: format!("policy '{id}' recorded no samples for {}", metric_name(metric)),
                }
            }
        }
    }
    let ok = values.windows(2).all(|w| if strict { w[0] < w[1] } else { w[0] <= w[1] });
    let detail = ascending
        .iter()
        .zip(&values)
        .map(|(id, v)| format!("{id}={v:.6e}"))
        .collect::<Vec<_>>()
        .join(if strict { " < " } else { " <= " });
    Verdict { comparison: label, passed: ok, detail }
}

fn evaluate_shift<S: Scalar>(
    runs: &[PolicyRun<S>],
    policy: &str,
    tolerance: f64,
    negative_control: bool,
) -> Verdict {
    let label = format!("shift_equivalence({policy}, tol {tolerance:.1e})");
    let run = find_run(runs, policy);
    if run.shifts.is_empty() {
        return Verdict {
            comparison: label,
            passed: false,
            detail: "no query steps sampled".to_string(),
        };
    }
    let max_rebase = run.shifts.iter().map(|s| s.rebase_diff).fold(0.0f64, f64::max);
    let mut passed = max_rebase <= tolerance;
    let mut detail = format!(
        "max re-base diff {max_rebase:.3e} over {} steps",
        run.shifts.len()
    );
    if negative_control {
        let min_control = run
            .shifts
            .iter()
            .filter_map(|s| s.control_diff)
            .fold(f64::INFINITY, f64::min);
        let control_ok = min_control.is_finite() && min_control > tolerance;
        passed = passed && control_ok;
        detail.push_str(&format!("; min reversed-control diff {min_control:.3e}"));
    }
    Verdict { comparison: label, passed, detail }
}

// ---------------------------------------------------------------------------
// Report records
// ---------------------------------------------------------------------------

/// One line of a run report. The `record` tag discriminates flavors so a
/// report stays a flat, greppable stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportRecord {
    Query {
        policy: String,
        step: u64,
        tokens: Vec<u32>,
        metrics: RunMetrics,
    },
    Frame {
        policy: String,
        step: u64,
        report: FrameReport,
    },
    ValueCosine {
        policy: String,
        step: u64,
        block_id: u64,
        mean_cosine: f64,
        rows_compared: usize,
    },
    Shift {
        policy: String,
        step: u64,
        rebase_diff: f64,
        control_diff: Option<f64>,
    },
    Verdict {
        comparison: String,
        passed: bool,
        detail: String,
    },
}

fn collect_records<S: Scalar>(runs: &[PolicyRun<S>], verdicts: &[Verdict]) -> Vec<ReportRecord> {
    let mut records = Vec::new();
    for run in runs {
        for (step, report) in &run.frame_samples {
            records.push(ReportRecord::Frame { policy: run.id.clone(), step: *step, report: *report });
        }
        for q in &run.queries {
            records.push(ReportRecord::Query {
                policy: run.id.clone(),
                step: q.step,
                tokens: q.tokens.clone(),
                metrics: q.metrics.clone(),
            });
        }
        for c in &run.cosines {
            records.push(ReportRecord::ValueCosine {
                policy: run.id.clone(),
                step: c.step,
                block_id: c.block_id,
                mean_cosine: c.mean_cosine,
                rows_compared: c.rows_compared,
            });
        }
        for s in &run.shifts {
            records.push(ReportRecord::Shift {
                policy: run.id.clone(),
                step: s.step,
                rebase_diff: s.rebase_diff,
                control_diff: s.control_diff,
            });
        }
    }
    for v in verdicts {
        records.push(ReportRecord::Verdict {
            comparison: v.comparison.clone(),
            passed: v.passed,
            detail: v.detail.clone(),
        });
    }
    records
}

/// Report serialization format.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Jsonl,
    Csv,
}

/// Serializes records as JSON Lines (one record per line).
pub fn emit_jsonl(records: &[ReportRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses a JSON Lines report back into records. Blank lines are skipped.
pub fn parse_jsonl(text: &str) -> Result<Vec<ReportRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::Parse(format!("report line {}: {e}", i + 1)))
        })
        .collect()
}

/// Column header emitted as the first line of every CSV report.
pub const CSV_HEADER: &str = "record,policy,step,block_id,tokens,prefill_macs,decode_macs,\
ingest_macs,persistent_rows,peak_rows,max_position,mass_sink,mass_past,mass_recent,\
value_cosine,rows_compared,rebase_diff,control_diff,comparison,passed,detail";

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Serializes records as a flat CSV with one sparse row per record; columns
/// that do not apply to a record's flavor stay empty.
pub fn emit_csv(records: &[ReportRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for record in records {
        let mut cols = vec![String::new(); 21];
        match record {
            ReportRecord::Query { policy, step, tokens, metrics } => {
                cols[0] = "query".to_string();
                cols[1] = policy.clone();
                cols[2] = step.to_string();
                cols[4] = tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(";");
                cols[5] = metrics.prefill_macs.to_string();
                cols[6] = metrics.decode_macs.to_string();
                cols[8] = metrics.cache_rows.first().map(usize::to_string).unwrap_or_default();
                cols[9] = metrics.peak_cache_rows.to_string();
                cols[10] = metrics.max_position_used.to_string();
                cols[11] = opt_f64(metrics.attention_mass_sink);
                cols[12] = opt_f64(metrics.attention_mass_past);
                cols[13] = opt_f64(metrics.attention_mass_recent);
                cols[14] = opt_f64(metrics.value_cosine_vs_reference);
            }
            ReportRecord::Frame { policy, step, report } => {
                cols[0] = "frame".to_string();
                cols[1] = policy.clone();
                cols[2] = step.to_string();
                cols[7] = report.ingest_macs.to_string();
                cols[8] = report.persistent_rows.to_string();
                cols[9] = report.peak_rows.to_string();
                cols[10] = report.max_position_used.to_string();
            }
            ReportRecord::ValueCosine { policy, step, block_id, mean_cosine, rows_compared } => {
                cols[0] = "value_cosine".to_string();
                cols[1] = policy.clone();
                cols[2] = step.to_string();
                cols[3] = block_id.to_string();
                cols[14] = mean_cosine.to_string();
                cols[15] = rows_compared.to_string();
            }
            ReportRecord::Shift { policy, step, rebase_diff, control_diff } => {
                cols[0] = "shift".to_string();
                cols[1] = policy.clone();
                cols[2] = step.to_string();
                cols[16] = rebase_diff.to_string();
                cols[17] = opt_f64(*control_diff);
            }
            ReportRecord::Verdict { comparison, passed, detail } => {
                cols[0] = "verdict".to_string();
                cols[18] = comparison.clone();
                cols[19] = passed.to_string();
                cols[20] = detail.clone();
            }
        }
        let row: Vec<String> = cols.iter().map(|c| csv_escape(c)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Serializes records in the requested format.
pub fn emit_report(records: &[ReportRecord], format: ReportFormat) -> String {
    match format {
        ReportFormat::Jsonl => emit_jsonl(records),
        ReportFormat::Csv => emit_csv(records),
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            num_layers: 2,
            num_heads: 2,
            head_dim: 4,
            ffn_dim: 16,
            vocab_size: 11,
            rope_base: crate::rope::RopeParams::DEFAULT_BASE,
            max_position: Some(4096),
            train_length_analogue: 64,
            seed: 7,
        }
    }

    fn uniform_spec(id: &str, window: usize) -> PolicySpec {
        PolicySpec {
            id: id.to_string(),
            kind: PolicyKind::Uniform,
            position_encoded_storage: false,
            reversed_positions: false,
            config: PolicyConfig { window_frames: window, ..PolicyConfig::default() },
        }
    }

    fn offline_spec(id: &str, window: usize) -> PolicySpec {
        PolicySpec {
            id: id.to_string(),
            kind: PolicyKind::Offline,
            position_encoded_storage: false,
            reversed_positions: false,
            config: PolicyConfig { window_frames: window, ..PolicyConfig::default() },
        }
    }

    fn dscache_spec(id: &str, buffer: usize, cumulative: usize) -> PolicySpec {
        PolicySpec {
            id: id.to_string(),
            kind: PolicyKind::Dscache,
            position_encoded_storage: false,
            reversed_positions: false,
            config: PolicyConfig {
                buffer_frames: buffer,
                cumulative_frames: cumulative,
                ..PolicyConfig::default()
            },
        }
    }

    fn base_scenario(policies: Vec<PolicySpec>, comparisons: Vec<Comparison>) -> Scenario {
        Scenario {
            id: "test".to_string(),
            seed: 11,
            model: tiny_spec(),
            precision: Precision::F64,
            stream: StreamSpec { frames: 12, tokens_per_frame: 4, ..StreamSpec::default() },
            queries: QuerySchedule {
                at_steps: vec![6, 12],
                tokens: 3,
                max_new: 3,
                ..QuerySchedule::default()
            },
            measure: None,
            policies,
            comparisons,
        }
    }

    #[test]
    fn query_schedule_merges_explicit_and_periodic_steps() {
        let schedule = QuerySchedule {
            at_steps: vec![7, 3, 7],
            every_frames: 5,
            start_step: 5,
            ..QuerySchedule::default()
        };
        assert_eq!(schedule.steps(17), vec![3, 5, 7, 10, 15]);
        assert_eq!(QuerySchedule::default().steps(100), Vec::<u64>::new());
    }

    #[test]
    fn event_plan_is_reproducible_and_correlation_shapes_frames() {
        let mut scenario = base_scenario(vec![uniform_spec("u", 3)], vec![]);
        scenario.stream.frame_correlation = 0.95;
        let a = build_event_plan::<f64>(&scenario, 8).unwrap();
        let b = build_event_plan::<f64>(&scenario, 8).unwrap();
        assert_eq!(a.frames.len(), 12);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.embeddings, fb.embeddings, "plans must replay bit for bit");
        }
        assert_eq!(a.queries.len(), 2);
        assert_eq!(a.queries[0].0, 6);
        assert!(a.queries[0].1.block_id >= QUERY_ID_BASE);

        // Correlated consecutive frames point the same way; independent ones
        // do not.
        let cosine = |x: &Matrix<f64>, y: &Matrix<f64>| {
            let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
            for (a, b) in x.data().iter().zip(y.data()) {
                dot += a * b;
                nx += a * a;
                ny += b * b;
            }
            dot / (nx.sqrt() * ny.sqrt())
        };
        let correlated = cosine(&a.frames[5].embeddings, &a.frames[6].embeddings);
        assert!(correlated > 0.7, "rho=0.95 frames should align, cosine {correlated}");

        scenario.stream.frame_correlation = 0.0;
        let iid = build_event_plan::<f64>(&scenario, 8).unwrap();
        let independent = cosine(&iid.frames[5].embeddings, &iid.frames[6].embeddings);
        assert!(independent.abs() < 0.5, "iid frames should not align, cosine {independent}");
    }

    #[test]
    fn scenario_json_applies_defaults_and_rejects_junk() {
        let json = r#"{
            "id": "demo",
            "model": {
                "num_layers": 2, "num_heads": 2, "head_dim": 4, "ffn_dim": 16,
                "vocab_size": 11, "train_length_analogue": 64, "seed": 7
            },
            "stream": { "frames": 10, "tokens_per_frame": 4 },
            "queries": { "at_steps": [10], "tokens": 2, "max_new": 2 },
            "policies": [
                { "id": "u", "kind": "uniform", "config": { "window_frames": 3 } }
            ]
        }"#;
        let scenario = Scenario::from_json(json).unwrap();
        assert_eq!(scenario.seed, 0);
        assert_eq!(scenario.precision, Precision::F64);
        assert_eq!(scenario.stream.frame_correlation, 0.0);
        assert!(scenario.comparisons.is_empty());

        let reparsed = Scenario::from_json(&scenario.to_json()).unwrap();
        assert_eq!(reparsed, scenario);

        let junk = json.replace("\"frames\": 10", "\"frames\": 10, \"bogus\": 1");
        assert!(Scenario::from_json(&junk).is_err(), "unknown stream field must be rejected");

        let dangling = json.replace(
            "\"policies\"",
            "\"comparisons\": [ {\"type\": \"equivalence\", \"a\": \"u\", \"b\": \"ghost\"} ], \"policies\"",
        );
        assert!(Scenario::from_json(&dangling).is_err(), "unknown policy reference must fail");
    }

    #[test]
    fn identical_policies_agree_bitwise_at_any_thread_count() {
        let scenario = base_scenario(
            vec![uniform_spec("left", 3), uniform_spec("right", 3)],
            vec![Comparison::Equivalence {
                a: "left".to_string(),
                b: "right".to_string(),
                tolerance: 0.0,
                expect_divergence: false,
            }],
        );
        let single = run_scenario_with_threads::<f64>(&scenario, 1).unwrap();
        let fanned = run_scenario_with_threads::<f64>(&scenario, 3).unwrap();
        assert!(single.all_passed(), "{:?}", single.verdicts);
        assert_eq!(single.records, fanned.records, "thread count must not change results");
        assert_eq!(
            single.runs[0].queries[0].prelogit, single.runs[1].queries[0].prelogit,
            "same config, same stream: bitwise-identical answers"
        );
    }

    #[test]
    fn ordering_verdict_ranks_query_cost() {
        let scenario = base_scenario(
            vec![uniform_spec("stream", 4), offline_spec("recompute", 4)],
            vec![
                Comparison::Ordering {
                    metric: MetricKind::PrefillMacs,
                    ascending: vec!["stream".to_string(), "recompute".to_string()],
                    strict: true,
                },
                Comparison::Ordering {
                    metric: MetricKind::PrefillMacs,
                    ascending: vec!["recompute".to_string(), "stream".to_string()],
                    strict: false,
                },
            ],
        );
        let outcome = run_scenario::<f64>(&scenario).unwrap();
        assert!(outcome.verdicts[0].passed, "{:?}", outcome.verdicts[0]);
        assert!(!outcome.verdicts[1].passed, "reversed ordering must fail");
    }

    #[test]
    fn shift_equivalence_holds_for_sink_free_windows() {
        let scenario = base_scenario(
            vec![uniform_spec("window", 3)],
            vec![Comparison::ShiftEquivalence {
                policy: "window".to_string(),
                tolerance: 1e-10,
                negative_control: true,
            }],
        );
        let outcome = run_scenario::<f64>(&scenario).unwrap();
        assert!(outcome.all_passed(), "{:?}", outcome.verdicts);
        let run = &outcome.runs[0];
        assert_eq!(run.shifts.len(), 2);
        for s in &run.shifts {
            assert!(s.rebase_diff <= 1e-10, "re-base diff {}", s.rebase_diff);
            assert!(s.control_diff.unwrap() > 1e-6, "control too weak: {:?}", s.control_diff);
        }
    }

    #[test]
    fn shift_equivalence_rejects_sinked_policies() {
        let mut sinked = uniform_spec("w", 3);
        sinked.config.sink_tokens = 4;
        let scenario = base_scenario(
            vec![sinked],
            vec![Comparison::ShiftEquivalence {
                policy: "w".to_string(),
                tolerance: 1e-10,
                negative_control: false,
            }],
        );
        assert!(scenario.validate().is_err());
    }

    #[test]
    fn divergence_control_distinguishes_window_sizes() {
        let scenario = base_scenario(
            vec![uniform_spec("narrow", 2), uniform_spec("wide", 4)],
            vec![Comparison::Equivalence {
                a: "narrow".to_string(),
                b: "wide".to_string(),
                tolerance: 1e-10,
                expect_divergence: true,
            }],
        );
        let outcome = run_scenario::<f64>(&scenario).unwrap();
        assert!(outcome.all_passed(), "{:?}", outcome.verdicts);
    }

    #[test]
    fn measurements_merge_into_later_query_metrics() {
        let mut scenario = base_scenario(
            vec![uniform_spec("u", 4), dscache_spec("d", 2, 2)],
            vec![],
        );
        scenario.measure = Some(CosineMeasurement { at_steps: vec![8], block_offset: 1 });
        scenario.stream.record_frames_every = 6;
        let outcome = run_scenario::<f64>(&scenario).unwrap();
        for run in &outcome.runs {
            assert_eq!(run.cosines.len(), 1, "policy {}", run.id);
            let c = &run.cosines[0];
            assert_eq!(c.block_id, 6, "step 8 offset 1 measures block 6");
            assert!(c.mean_cosine.is_finite() && c.mean_cosine <= 1.0 + 1e-12);
            assert!(c.rows_compared > 0);
            // Query at step 6 precedes the measurement; query at step 12 sees it.
            assert_eq!(run.queries[0].metrics.value_cosine_vs_reference, None);
            assert_eq!(
                run.queries[1].metrics.value_cosine_vs_reference,
                Some(c.mean_cosine)
            );
            assert_eq!(run.frame_samples.len(), 2, "frames 6 and 12 are sampled");
        }
    }

    #[test]
    fn report_round_trips_jsonl_and_shapes_csv() {
        let scenario = base_scenario(
            vec![uniform_spec("window", 3)],
            vec![Comparison::ShiftEquivalence {
                policy: "window".to_string(),
                tolerance: 1e-10,
                negative_control: true,
            }],
        );
        let outcome = run_scenario::<f64>(&scenario).unwrap();
        assert!(!outcome.records.is_empty());

        let jsonl = emit_jsonl(&outcome.records);
        let parsed = parse_jsonl(&jsonl).unwrap();
        assert_eq!(parsed, outcome.records);

        let csv = emit_csv(&outcome.records);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), outcome.records.len() + 1);
        assert!(lines[0].starts_with("record,policy,step"));
        assert!(lines.iter().skip(1).any(|l| l.starts_with("query,window")));
        assert!(lines.iter().skip(1).any(|l| l.starts_with("verdict,")));

        // Fields with embedded commas stay one CSV column via quoting.
        let quoted = emit_csv(&[ReportRecord::Verdict {
            comparison: "equivalence(a, b)".to_string(),
            passed: true,
            detail: "says \"fine\", twice".to_string(),
        }]);
        let row = quoted.lines().nth(1).unwrap();
        assert!(row.contains("\"equivalence(a, b)\""));
        assert!(row.contains("\"says \"\"fine\"\", twice\""));

        assert!(parse_jsonl("{not json}").is_err());
    }

    #[test]
    fn empty_report_emits_header_only_csv() {
        let csv = emit_csv(&[]);
        assert_eq!(csv.lines().count(), 1);
        assert_eq!(emit_jsonl(&[]), "");
    }
}
