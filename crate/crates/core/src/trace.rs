//! Full-cache attention traces: recording, the `CORMTRC1` file format, and
//! offline replay of eviction policies.
//!
//! # File layout
//!
//! All integers and floats are little-endian.
//!
//! | section     | size (bytes)                         | contents |
//! |-------------|--------------------------------------|----------|
//! | magic       | 8                                    | `CORMTRC1` |
//! | version     | 4                                    | u32, currently 1 |
//! | meta length | 4                                    | u32, always 44 |
//! | metadata    | 44                                   | n_layers, n_heads, n_kv_heads, head_dim, vocab_size, pe code (u32 each); rope base (f64); seed (u64); n_steps T (u32) |
//! | tokens      | 4 T                                  | u32 token ids |
//! | payload     | 4 L H (T d_h + T(T+1)/2)             | step t = 1..T, then layer, then query head: query (d_h f32), row (t f32) |
//! | trailer     | 4 (T + 2)                            | CRC32 of everything before the payload, CRC32 of each step block, CRC32 of all preceding bytes |
//!
//! PE codes: 0 none, 1 rope, 2 alibi, 3 absolute sinusoidal, 4 absolute learned.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionRow;
use crate::error::{CormError, Result, TraceError};
use crate::kv_cache::{mean_compression_rate, EvictionTracker, PolicyConfig, ThresholdMode};
use crate::model::{DecoderState, HeadAttention, Model};

pub const TRACE_MAGIC: &[u8; 8] = b"CORMTRC1";
pub const TRACE_VERSION: u32 = 1;
const META_LEN: u32 = 44;
const PREFIX_LEN: u64 = 16 + META_LEN as u64;
/// Default refusal threshold for recording.
pub const DEFAULT_TRACE_CAP: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceMeta {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub pe_code: u32,
    pub rope_base: f64,
    pub seed: u64,
}

impl TraceMeta {
    pub fn from_model(model: &Model) -> Self {
        let c = model.config();
        TraceMeta {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            n_kv_heads: c.n_kv_heads,
            head_dim: c.head_dim(),
            vocab_size: c.vocab_size,
            pe_code: c.pe.code(),
            rope_base: match c.pe {
                crate::position::PeKind::Rope { base } => base,
                _ => 0.0,
            },
            seed: c.seed,
        }
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    fn validate(&self) -> std::result::Result<(), TraceError> {
        if self.n_layers == 0 || self.n_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return Err(TraceError::Malformed("zero-sized model metadata".into()));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(TraceError::Malformed(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        Ok(())
    }

    fn heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    fn step_floats(&self, t: usize) -> usize {
        self.heads() * (self.head_dim + t)
    }
}

/// Closed-form size in bytes of a serialized trace with `steps` steps.
pub fn trace_file_size(meta: &TraceMeta, steps: usize) -> u64 {
    let (l, h, d, t) = (
        meta.n_layers as u64,
        meta.n_heads as u64,
        meta.head_dim as u64,
        steps as u64,
    );
    PREFIX_LEN + 4 * t + 4 * l * h * (t * d + t * (t + 1) / 2) + 4 * (t + 2)
}

/// Rows and queries of every query head at every step, recorded with the
/// full cache so that row `t` has exactly `t` scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    meta: TraceMeta,
    tokens: Vec<u32>,
    /// One flat block per step, laid out as in the file payload.
    steps: Vec<Vec<f32>>,
}

impl AttentionTrace {
    pub fn new(meta: TraceMeta) -> Result<Self> {
        meta.validate()?;
        Ok(AttentionTrace {
            meta,
            tokens: Vec::new(),
            steps: Vec::new(),
        })
    }

    pub fn meta(&self) -> &TraceMeta {
        &self.meta
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Appends step `len() + 1`. `queries` and `rows` are indexed by
    /// `layer * n_heads + head`; each row must hold `len() + 1` scores.
    pub fn push_step(&mut self, token: u32, queries: &[Vec<f64>], rows: &[Vec<f64>]) -> Result<()> {
        let t = self.len() + 1;
        let heads = self.meta.heads();
        if queries.len() != heads || rows.len() != heads {
            return Err(CormError::LengthMismatch {
                what: "trace step heads",
                left: queries.len().min(rows.len()),
                right: heads,
            });
        }
        let mut block = Vec::with_capacity(self.meta.step_floats(t));
        for (q, r) in queries.iter().zip(rows) {
            if q.len() != self.meta.head_dim {
                return Err(CormError::LengthMismatch {
                    what: "trace query",
                    left: q.len(),
                    right: self.meta.head_dim,
                });
            }
            if r.len() != t {
                return Err(CormError::LengthMismatch {
                    what: "trace row",
                    left: r.len(),
                    right: t,
                });
            }
            block.extend(q.iter().map(|&x| x as f32));
            block.extend(r.iter().map(|&x| x as f32));
        }
        self.tokens.push(token);
        self.steps.push(block);
        Ok(())
    }

    fn offset(&self, t: usize, layer: usize, head: usize) -> usize {
        (layer * self.meta.n_heads + head) * (self.meta.head_dim + t)
    }

    /// Scores of the query at 1-based step `t` over positions `1..=t`.
    pub fn row(&self, t: usize, layer: usize, head: usize) -> &[f32] {
        let o = self.offset(t, layer, head) + self.meta.head_dim;
        &self.steps[t - 1][o..o + t]
    }

    pub fn query(&self, t: usize, layer: usize, head: usize) -> &[f32] {
        let o = self.offset(t, layer, head);
        &self.steps[t - 1][o..o + self.meta.head_dim]
    }

    /// The first `steps` steps (all of them if the trace is shorter).
    pub fn truncated(&self, steps: usize) -> AttentionTrace {
        let n = steps.min(self.len());
        AttentionTrace {
            meta: self.meta,
            tokens: self.tokens[..n].to_vec(),
            steps: self.steps[..n].to_vec(),
        }
    }

    pub fn file_size(&self) -> u64 {
        trace_file_size(&self.meta, self.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.file_size() as usize);
        out.extend_from_slice(TRACE_MAGIC);
        out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
        out.extend_from_slice(&META_LEN.to_le_bytes());
        let m = &self.meta;
        for v in [
            m.n_layers,
            m.n_heads,
            m.n_kv_heads,
            m.head_dim,
            m.vocab_size,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&m.pe_code.to_le_bytes());
        out.extend_from_slice(&m.rope_base.to_le_bytes());
        out.extend_from_slice(&m.seed.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        let head_crc = crc32fast::hash(&out);
        let mut step_crcs = Vec::with_capacity(self.len());
        for block in &self.steps {
            let start = out.len();
            for x in block {
                out.extend_from_slice(&x.to_le_bytes());
            }
            step_crcs.push(crc32fast::hash(&out[start..]));
        }
        out.extend_from_slice(&head_crc.to_le_bytes());
        for c in step_crcs {
            out.extend_from_slice(&c.to_le_bytes());
        }
        let file_crc = crc32fast::hash(&out);
        out.extend_from_slice(&file_crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, TraceError> {
        let len = bytes.len() as u64;
        if bytes.len() < 8 {
            return Err(TraceError::Checksum {
                start: 0,
                end: len,
                detail: format!("file truncated to {len} bytes"),
            });
        }
        if &bytes[..8] != TRACE_MAGIC {
            return Err(TraceError::BadMagic {
                found: bytes[..8].to_vec(),
            });
        }
        if bytes.len() < 12 {
            return Err(TraceError::Checksum {
                start: 8,
                end: len,
                detail: "file truncated inside the header".into(),
            });
        }
        let version = u32_at(bytes, 8);
        if version != TRACE_VERSION {
            return Err(TraceError::UnsupportedVersion {
                found: version,
                supported: TRACE_VERSION,
            });
        }
        if bytes.len() < PREFIX_LEN as usize + 4 {
            return Err(TraceError::Checksum {
                start: 12,
                end: len,
                detail: "file truncated inside the metadata".into(),
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32_at(bytes, bytes.len() - 4);
        if crc32fast::hash(body) != stored {
            return Err(locate_corruption(bytes));
        }
        let (meta, steps) = parse_prefix(bytes)?;
        let expected = trace_file_size(&meta, steps);
        if expected != len {
            return Err(TraceError::Malformed(format!(
                "header describes {expected} bytes but the file has {len}"
            )));
        }
        let mut pos = PREFIX_LEN as usize;
        let tokens: Vec<u32> = (0..steps).map(|i| u32_at(bytes, pos + 4 * i)).collect();
        pos += 4 * steps;
        let mut blocks = Vec::with_capacity(steps);
        for t in 1..=steps {
            let n = meta.step_floats(t);
            let block: Vec<f32> = bytes[pos..pos + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos += 4 * n;
            blocks.push(block);
        }
        Ok(AttentionTrace {
            meta,
            tokens,
            steps: blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CormError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CormError::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Appends one recorded decoder step. `heads` must come from a
    /// full-cache run.
    pub fn push_heads(&mut self, token: u32, heads: &[HeadAttention]) -> Result<()> {
        let queries: Vec<Vec<f64>> = heads.iter().map(|h| h.query.0.clone()).collect();
        let rows: Vec<Vec<f64>> = heads.iter().map(|h| h.row.scores.clone()).collect();
        self.push_step(token, &queries, &rows)
    }
}

fn u32_at(bytes: &[u8], pos: usize) -> u32 {
    u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"))
}

fn u64_at(bytes: &[u8], pos: usize) -> u64 {
    u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes"))
}

fn parse_prefix(bytes: &[u8]) -> std::result::Result<(TraceMeta, usize), TraceError> {
    let meta_len = u32_at(bytes, 12);
    if meta_len != META_LEN {
        return Err(TraceError::Malformed(format!(
            "metadata length {meta_len}, expected {META_LEN}"
        )));
    }
    let w = |i: usize| u32_at(bytes, 16 + 4 * i) as usize;
    let meta = TraceMeta {
        n_layers: w(0),
        n_heads: w(1),
        n_kv_heads: w(2),
        head_dim: w(3),
        vocab_size: w(4),
        pe_code: u32_at(bytes, 36),
        rope_base: f64::from_bits(u64_at(bytes, 40)),
        seed: u64_at(bytes, 48),
    };
    meta.validate()?;
    Ok((meta, u32_at(bytes, 56) as usize))
}

/// Narrows a failed whole-file checksum down to a byte region using the
/// per-region checksums, when the header is still readable.
fn locate_corruption(bytes: &[u8]) -> TraceError {
    let len = bytes.len() as u64;
    let whole = |detail: &str| TraceError::Checksum {
        start: 0,
        end: len,
        detail: detail.to_string(),
    };
    let Ok((meta, steps)) = parse_prefix(bytes) else {
        return whole("file checksum mismatch; metadata unreadable");
    };
    if steps > 1 << 20 {
        return whole("file checksum mismatch; step count implausible");
    }
    let expected = trace_file_size(&meta, steps);
    if expected != len {
        return TraceError::Checksum {
            start: expected.min(len),
            end: expected.max(len),
            detail: format!(
                "file is {len} bytes but its header describes {expected} (truncated or extended)"
            ),
        };
    }
    let payload_start = PREFIX_LEN as usize + 4 * steps;
    let payload_len: usize = (1..=steps).map(|t| 4 * meta.step_floats(t)).sum();
    let trailer = payload_start + payload_len;
    if crc32fast::hash(&bytes[..payload_start]) != u32_at(bytes, trailer) {
        return TraceError::Checksum {
            start: 0,
            end: payload_start as u64,
            detail: "metadata or token region corrupted".into(),
        };
    }
    let mut pos = payload_start;
    for t in 1..=steps {
        let n = 4 * meta.step_floats(t);
        if crc32fast::hash(&bytes[pos..pos + n]) != u32_at(bytes, trailer + 4 * t) {
            return TraceError::Checksum {
                start: pos as u64,
                end: (pos + n) as u64,
                detail: format!("payload of step {t} corrupted"),
            };
        }
        pos += n;
    }
    TraceError::Checksum {
        start: trailer as u64,
        end: len,
        detail: "checksum trailer corrupted".into(),
    }
}

/// Records a full-cache run. Refuses inputs whose serialized trace would
/// exceed `max_bytes`.
pub fn record(model: &Model, tokens: &[u32], max_bytes: u64) -> Result<AttentionTrace> {
    if tokens.is_empty() {
        return Err(CormError::EmptySequence);
    }
    model.check_tokens(tokens)?;
    let meta = TraceMeta::from_model(model);
    let required = trace_file_size(&meta, tokens.len());
    if required > max_bytes {
        return Err(TraceError::TooLarge {
            required,
            cap: max_bytes,
        }
        .into());
    }
    let mut trace = AttentionTrace::new(meta)?;
    let mut state = DecoderState::new(model, PolicyConfig::Full, ThresholdMode::AbsoluteStep)?;
    for &tok in tokens {
        let out = model.forward_step(&mut state, tok)?;
        trace.push_heads(tok, &out.heads)?;
    }
    Ok(trace)
}

/// How replay turns a recorded full-cache row into a row over survivors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Restrict to surviving positions and renormalize to sum to 1.
    #[default]
    Renormalized,
    /// Restrict to surviving positions and keep the recorded values.
    Recorded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReplayOptions {
    pub threshold: ThresholdMode,
    pub scores: ScoreMode,
}

/// Surviving positions of every cache after every step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeptTimeline {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    /// `steps[t - 1][layer * n_kv_heads + kv_head]`, ascending positions.
    pub steps: Vec<Vec<Vec<u32>>>,
}

impl KeptTimeline {
    pub fn new(n_layers: usize, n_kv_heads: usize) -> Self {
        KeptTimeline {
            n_layers,
            n_kv_heads,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn kept(&self, t: usize, layer: usize, kv_head: usize) -> &[u32] {
        &self.steps[t - 1][layer * self.n_kv_heads + kv_head]
    }

    /// Mean over caches of `1 - size / t` at each step.
    pub fn rates(&self) -> Vec<f64> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, caches)| mean_compression_rate(caches.iter().map(Vec::len), i + 1))
            .collect()
    }

    pub fn max_cache_size(&self) -> usize {
        self.steps.iter().flatten().map(Vec::len).max().unwrap_or(0)
    }

    fn push_state(&mut self, state: &DecoderState) {
        self.steps.push(
            state
                .caches()
                .iter()
                .flatten()
                .map(|c| c.positions().iter().map(|&p| p as u32).collect())
                .collect(),
        );
    }
}

/// Step-by-step policy simulation over full-cache rows. Shared by offline
/// replay and the shadow bookkeeping of a live full-cache run.
#[derive(Debug, Clone)]
pub struct ReplayState {
    meta: TraceMeta,
    options: ReplayOptions,
    trackers: Vec<EvictionTracker>,
    timeline: KeptTimeline,
    step: usize,
}

impl ReplayState {
    pub fn new(meta: TraceMeta, policy: PolicyConfig, options: ReplayOptions) -> Result<Self> {
        if let PolicyConfig::CormGqa { group_size, .. } = policy {
            if group_size != meta.group_size() {
                return Err(CormError::GroupMismatch(format!(
                    "policy group size {group_size} but the trace has {} query heads per kv head",
                    meta.group_size()
                )));
            }
        }
        let trackers = (0..meta.n_layers * meta.n_kv_heads)
            .map(|_| EvictionTracker::new(policy, options.threshold))
            .collect::<Result<Vec<_>>>()?;
        Ok(ReplayState {
            meta,
            options,
            trackers,
            timeline: KeptTimeline::new(meta.n_layers, meta.n_kv_heads),
            step: 0,
        })
    }

    /// Runs one step. `full_row(layer, head)` yields the query head's scores
    /// over all positions `1..=t`.
    pub fn observe<'a>(&mut self, full_row: impl Fn(usize, usize) -> &'a [f32]) -> Result<()> {
        let t = self.step + 1;
        let group = self.meta.group_size();
        let mut snapshot = Vec::with_capacity(self.trackers.len());
        for layer in 0..self.meta.n_layers {
            for kv in 0..self.meta.n_kv_heads {
                let tracker = &mut self.trackers[layer * self.meta.n_kv_heads + kv];
                tracker.admit(t)?;
                let rows = (kv * group..(kv + 1) * group)
                    .map(|head| {
                        let full = full_row(layer, head);
                        if full.len() != t {
                            return Err(CormError::LengthMismatch {
                                what: "recorded row",
                                left: full.len(),
                                right: t,
                            });
                        }
                        Ok(survivor_row(
                            t,
                            full,
                            tracker.positions(),
                            self.options.scores,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                tracker.observe(&rows)?;
                snapshot.push(tracker.positions().iter().map(|&p| p as u32).collect());
            }
        }
        self.timeline.steps.push(snapshot);
        self.step = t;
        Ok(())
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn timeline(&self) -> &KeptTimeline {
        &self.timeline
    }

    pub fn into_timeline(self) -> KeptTimeline {
        self.timeline
    }
}

fn survivor_row(t: usize, full: &[f32], positions: &[usize], mode: ScoreMode) -> AttentionRow {
    let picked: Vec<f64> = positions.iter().map(|&p| f64::from(full[p - 1])).collect();
    let scores = match mode {
        ScoreMode::Recorded => picked,
        ScoreMode::Renormalized => {
            let total: f64 = picked.iter().sum();
            if total > 0.0 {
                picked.iter().map(|s| s / total).collect()
            } else {
                vec![1.0 / picked.len() as f64; picked.len()]
            }
        }
    };
    AttentionRow::new(t, scores)
}

/// Kept-set timeline and compression curve of one replayed policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayResult {
    pub policy: PolicyConfig,
    pub timeline: KeptTimeline,
    pub rates: Vec<f64>,
}

pub fn replay_policy(
    trace: &AttentionTrace,
    policy: PolicyConfig,
    options: ReplayOptions,
) -> Result<ReplayResult> {
    let mut state = ReplayState::new(*trace.meta(), policy, options)?;
    for t in 1..=trace.len() {
        state.observe(|layer, head| trace.row(t, layer, head))?;
    }
    let timeline = state.into_timeline();
    Ok(ReplayResult {
        policy,
        rates: timeline.rates(),
        timeline,
    })
}

/// Live full-cache decode with the policy's bookkeeping run on the side.
/// Rows are rounded to trace precision (f32) before the shadow sees them, so
/// the decisions match [`replay_policy`] on the recorded trace exactly.
pub fn shadow_replay(
    model: &Model,
    tokens: &[u32],
    policy: PolicyConfig,
    options: ReplayOptions,
) -> Result<ReplayResult> {
    model.check_tokens(tokens)?;
    let meta = TraceMeta::from_model(model);
    let mut shadow = ReplayState::new(meta, policy, options)?;
    let mut state = DecoderState::new(model, PolicyConfig::Full, ThresholdMode::AbsoluteStep)?;
    for &tok in tokens {
        let out = model.forward_step(&mut state, tok)?;
        let rows: Vec<Vec<f32>> = out
            .heads
            .iter()
            .map(|h| h.row.scores.iter().map(|&s| s as f32).collect())
            .collect();
        shadow.observe(|layer, head| rows[layer * meta.n_heads + head].as_slice())?;
    }
    let timeline = shadow.into_timeline();
    Ok(ReplayResult {
        policy,
        rates: timeline.rates(),
        timeline,
    })
}

/// Kept sets of a live run in which eviction really happens.
pub fn live_timeline(
    model: &Model,
    tokens: &[u32],
    policy: PolicyConfig,
    threshold: ThresholdMode,
) -> Result<KeptTimeline> {
    model.check_tokens(tokens)?;
    let c = model.config();
    let mut state = DecoderState::new(model, policy, threshold)?;
    let mut timeline = KeptTimeline::new(c.n_layers, c.n_kv_heads);
    for &tok in tokens {
        model.forward_step(&mut state, tok)?;
        timeline.push_state(&state);
    }
    Ok(timeline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::synthetic_tokens;

    fn small_trace() -> (Model, AttentionTrace) {
        let model = Model::init(ModelConfig::toy(8)).unwrap();
        let tokens = synthetic_tokens(8, 16, 256);
        let trace = record(&model, &tokens, DEFAULT_TRACE_CAP).unwrap();
        (model, trace)
    }

    #[test]
    fn recorded_shape() {
        let (_, trace) = small_trace();
        assert_eq!(trace.len(), 16);
        let mut rows = 0;
        for t in 1..=16 {
            for l in 0..2 {
                for h in 0..4 {
                    assert_eq!(trace.row(t, l, h).len(), t);
                    assert_eq!(trace.query(t, l, h).len(), 16);
                    rows += 1;
                }
            }
        }
        assert_eq!(rows, 2 * 4 * 16);
    }

    #[test]
    fn serialized_size_matches_formula() {
        let (_, trace) = small_trace();
        let bytes = trace.to_bytes();
        // independent count: 8 magic + 4 version + 4 meta length + 44 meta,
        // tokens, then per step 8 heads of (16 query + t row) floats, then
        // header crc + 16 step crcs + file crc
        let payload: usize = (1..=16).map(|t| 8 * (16 + t) * 4).sum();
        assert_eq!(bytes.len(), 60 + 16 * 4 + payload + 18 * 4);
        assert_eq!(bytes.len() as u64, trace.file_size());
    }

    #[test]
    fn recording_is_deterministic() {
        let (_, a) = small_trace();
        let (_, b) = small_trace();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn byte_cap_enforced() {
        let model = Model::init(ModelConfig::toy(8)).unwrap();
        let err = record(&model, &synthetic_tokens(1, 64, 256), 1000).unwrap_err();
        match err {
            CormError::Trace(TraceError::TooLarge { required, cap }) => {
                assert_eq!(cap, 1000);
                assert_eq!(
                    required,
                    trace_file_size(&TraceMeta::from_model(&model), 64)
                );
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn round_trip_and_error_kinds() {
        let (_, trace) = small_trace();
        let bytes = trace.to_bytes();
        assert_eq!(AttentionTrace::from_bytes(&bytes).unwrap(), trace);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            AttentionTrace::from_bytes(&bad),
            Err(TraceError::BadMagic { .. })
        ));

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            AttentionTrace::from_bytes(&bad),
            Err(TraceError::UnsupportedVersion { found: 9, .. })
        ));

        for cut in [3, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                AttentionTrace::from_bytes(&bytes[..cut]),
                Err(TraceError::Checksum { .. })
            ));
        }
    }

    #[test]
    fn corrupted_payload_byte_is_localized() {
        let (_, trace) = small_trace();
        let bytes = trace.to_bytes();
        let meta = trace.meta();
        let payload_start = 60 + 4 * 16;
        // a byte inside step 5's block
        let step5_start = payload_start + (1..5).map(|t| 4 * meta.step_floats(t)).sum::<usize>();
        let step5_end = step5_start + 4 * meta.step_floats(5);
        let mut bad = bytes.clone();
        bad[step5_start + 37] ^= 0x40;
        match AttentionTrace::from_bytes(&bad) {
            Err(TraceError::Checksum { start, end, detail }) => {
                assert_eq!((start, end), (step5_start as u64, step5_end as u64));
                assert!(detail.contains("step 5"));
            }
            other => panic!("expected checksum error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        match AttentionTrace::from_bytes(&bad) {
            Err(TraceError::Checksum { start: 0, .. }) => {}
            other => panic!("expected metadata-region checksum error, got {other:?}"),
        }
    }

    #[test]
    fn replay_full_keeps_everything() {
        let (_, trace) = small_trace();
        let r = replay_policy(&trace, PolicyConfig::Full, ReplayOptions::default()).unwrap();
        for t in 1..=trace.len() {
            for l in 0..2 {
                for kv in 0..4 {
                    assert_eq!(
                        r.timeline.kept(t, l, kv),
                        (1..=t as u32).collect::<Vec<_>>().as_slice()
                    );
                }
            }
        }
        assert!(r.rates.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn replay_streaming_one_plus_one() {
        let (_, trace) = small_trace();
        let r = replay_policy(
            &trace,
            PolicyConfig::StreamingLlm { sink: 1, recent: 1 },
            ReplayOptions::default(),
        )
        .unwrap();
        for t in 2..=trace.len() {
            assert_eq!(r.timeline.kept(t, 1, 2), &[1, t as u32]);
        }
    }

    #[test]
    fn shadow_run_matches_offline_replay() {
        let (model, trace) = small_trace();
        for policy in [
            PolicyConfig::Corm { w: 2, r: 2 },
            PolicyConfig::H2o {
                heavy: 3,
                recent: 2,
            },
            PolicyConfig::Scissorhands {
                budget: 3,
                window: 3,
                recent: 2,
            },
            PolicyConfig::Tova { budget: 4 },
        ] {
            let replay = replay_policy(&trace, policy, ReplayOptions::default()).unwrap();
            let shadow =
                shadow_replay(&model, trace.tokens(), policy, ReplayOptions::default()).unwrap();
            assert_eq!(replay, shadow, "{policy}");
        }
    }

    #[test]
    fn group_shape_checked() {
        let (_, trace) = small_trace();
        let err = replay_policy(
            &trace,
            PolicyConfig::CormGqa {
                w: 2,
                r: 2,
                group_size: 2,
            },
            ReplayOptions::default(),
        );
        assert!(matches!(err, Err(CormError::GroupMismatch(_))));
    }

    #[test]
    fn live_full_timeline() {
        let (model, trace) = small_trace();
        let live = live_timeline(
            &model,
            trace.tokens(),
            PolicyConfig::Full,
            ThresholdMode::AbsoluteStep,
        )
        .unwrap();
        let replay = replay_policy(&trace, PolicyConfig::Full, ReplayOptions::default()).unwrap();
        assert_eq!(live, replay.timeline);
    }
}
