//! Per-head (or per-group, under GQA) eviction policies.
//!
//! Each step a cache admits the fresh key/value at its absolute position,
//! the attention rows of its query heads are computed over the whole cache,
//! and only then does the policy observe those rows and decide which entries
//! survive. Survivors are compacted; their original positions are retained.

mod baselines;
mod corm;
mod message;
mod policy;

pub use baselines::{h2o_update, scissorhands_update, streaming_update, tova_update};
pub use corm::{
    classify_important, classify_important_with, corm_update, gqa_corm_update, union_mask,
};
pub use message::ImportanceMessage;
pub use policy::{PolicyConfig, ThresholdMode, POLICY_NAMES, UNBOUNDED};

use crate::attention::{AttentionRow, HeadVector};
use crate::error::{CormError, Result};

/// Bookkeeping for one cache: entry positions, the importance message and the
/// accumulated scores, without the key/value payload. Trace replay drives
/// this directly; [`KvCacheState`] wraps it together with the vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EvictionTracker {
    policy: PolicyConfig,
    threshold: ThresholdMode,
    positions: Vec<usize>,
    message: ImportanceMessage,
    accumulated: Vec<f64>,
    step: usize,
}

impl EvictionTracker {
    pub fn new(policy: PolicyConfig, threshold: ThresholdMode) -> Result<Self> {
        policy.validate()?;
        Ok(EvictionTracker {
            policy,
            threshold,
            positions: Vec::new(),
            message: ImportanceMessage::new(policy.message_window()),
            accumulated: Vec::new(),
            step: 0,
        })
    }

    pub fn policy(&self) -> PolicyConfig {
        self.policy
    }

    pub fn threshold(&self) -> ThresholdMode {
        self.threshold
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn message(&self) -> &ImportanceMessage {
        &self.message
    }

    /// Accumulated attention mass per entry (maintained for H2O).
    pub fn accumulated(&self) -> &[f64] {
        &self.accumulated
    }

    /// Adds the entry for absolute step `position`, which also becomes the
    /// current step.
    pub fn admit(&mut self, position: usize) -> Result<()> {
        if position == 0 || position <= self.step {
            return Err(CormError::InvalidPolicy(format!(
                "positions must be 1-based and strictly increasing: got {position} after {}",
                self.step
            )));
        }
        self.positions.push(position);
        self.message.pad();
        self.accumulated.push(0.0);
        self.step = position;
        Ok(())
    }

    /// Runs the policy on the rows of every query head that reads this cache.
    /// Returns the retained indices when something was evicted.
    pub fn observe(&mut self, rows: &[AttentionRow]) -> Result<Option<Vec<usize>>> {
        if rows.is_empty() {
            return Err(CormError::GroupMismatch(
                "no attention rows supplied".into(),
            ));
        }
        for row in rows {
            if row.len() != self.len() {
                return Err(CormError::LengthMismatch {
                    what: "attention row",
                    left: row.len(),
                    right: self.len(),
                });
            }
            if row.step != self.step {
                return Err(CormError::InvalidPolicy(format!(
                    "row for step {} observed at step {}",
                    row.step, self.step
                )));
            }
        }
        match self.policy {
            PolicyConfig::Full => Ok(None),
            PolicyConfig::StreamingLlm { sink, recent } => Ok(streaming_update(self, sink, recent)),
            PolicyConfig::H2o { heavy, recent } => Ok(h2o_update(self, rows, heavy, recent)),
            PolicyConfig::Scissorhands {
                budget,
                window,
                recent,
            } => Ok(scissorhands_update(self, rows, budget, window, recent)),
            PolicyConfig::Tova { budget } => Ok(tova_update(self, rows, budget)),
            PolicyConfig::Corm { w, r } => {
                let mask = union_mask(rows, self.threshold);
                corm::apply_mask(self, mask, w, r)
            }
            PolicyConfig::CormGqa { w, r, group_size } => {
                gqa_corm_update(self, rows, w, r, group_size)
            }
        }
    }

    /// Keeps the entries at ascending `indices`.
    pub(crate) fn retain(&mut self, indices: &[usize]) {
        self.positions = indices.iter().map(|&i| self.positions[i]).collect();
        self.accumulated = indices.iter().map(|&i| self.accumulated[i]).collect();
        self.message.retain_columns(indices);
    }

    pub(crate) fn message_mut(&mut self) -> &mut ImportanceMessage {
        &mut self.message
    }

    pub(crate) fn accumulated_mut(&mut self) -> &mut [f64] {
        &mut self.accumulated
    }

    /// True if the entry at `position` lies in the last `recent` steps.
    pub(crate) fn is_recent(&self, position: usize, recent: usize) -> bool {
        position.saturating_add(recent) > self.step
    }
}

/// Surviving keys and values of one (layer, kv-head) together with their
/// eviction bookkeeping.
#[derive(Debug, Clone)]
pub struct KvCacheState {
    keys: Vec<HeadVector>,
    values: Vec<HeadVector>,
    tracker: EvictionTracker,
}

impl KvCacheState {
    pub fn new(policy: PolicyConfig, threshold: ThresholdMode) -> Result<Self> {
        Ok(KvCacheState {
            keys: Vec::new(),
            values: Vec::new(),
            tracker: EvictionTracker::new(policy, threshold)?,
        })
    }

    pub fn push(&mut self, key: HeadVector, value: HeadVector, position: usize) -> Result<()> {
        self.tracker.admit(position)?;
        self.keys.push(key);
        self.values.push(value);
        Ok(())
    }

    /// Lets the policy evict after the current step's attention has been
    /// computed over the full cache.
    pub fn observe(&mut self, rows: &[AttentionRow]) -> Result<Option<Vec<usize>>> {
        let kept = self.tracker.observe(rows)?;
        if let Some(indices) = &kept {
            self.keys = indices.iter().map(|&i| self.keys[i].clone()).collect();
            self.values = indices.iter().map(|&i| self.values[i].clone()).collect();
        }
        Ok(kept)
    }

    pub fn keys(&self) -> &[HeadVector] {
        &self.keys
    }

    pub fn values(&self) -> &[HeadVector] {
        &self.values
    }

    pub fn positions(&self) -> &[usize] {
        self.tracker.positions()
    }

    pub fn tracker(&self) -> &EvictionTracker {
        &self.tracker
    }

    pub fn message(&self) -> &ImportanceMessage {
        self.tracker.message()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn step(&self) -> usize {
        self.tracker.step()
    }
}

/// `1 - size / t` for a single cache.
pub fn compression_rate(cache_len: usize, t: usize) -> f64 {
    assert!(t >= 1, "compression rate needs t >= 1");
    1.0 - cache_len as f64 / t as f64
}

/// Compression rate averaged over several caches at the same step.
pub fn mean_compression_rate(cache_lens: impl IntoIterator<Item = usize>, t: usize) -> f64 {
    let (sum, n) = cache_lens.into_iter().fold((0.0, 0usize), |(s, n), len| {
        (s + compression_rate(len, t), n + 1)
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_policy_is_identity() {
        let mut cache = KvCacheState::new(PolicyConfig::Full, ThresholdMode::AbsoluteStep).unwrap();
        for t in 1..=20 {
            cache
                .push(HeadVector::zeros(2), HeadVector::zeros(2), t)
                .unwrap();
            let row = AttentionRow::new(t, vec![1.0 / t as f64; t]);
            assert!(cache.observe(&[row]).unwrap().is_none());
            assert_eq!(cache.len(), t);
            assert_eq!(compression_rate(cache.len(), t), 0.0);
        }
    }

    #[test]
    fn rejects_misaligned_rows() {
        let mut tracker = EvictionTracker::new(
            PolicyConfig::Corm { w: 2, r: 1 },
            ThresholdMode::AbsoluteStep,
        )
        .unwrap();
        tracker.admit(1).unwrap();
        assert!(tracker
            .observe(&[AttentionRow::new(1, vec![0.5, 0.5])])
            .is_err());
        assert!(tracker.observe(&[AttentionRow::new(2, vec![1.0])]).is_err());
        assert!(tracker.observe(&[]).is_err());
        assert!(tracker.admit(1).is_err());
    }

    #[test]
    fn streaming_reference_rate() {
        // 4 + 1020 entries survive out of 2048 positions
        assert_eq!(compression_rate(1024, 2048), 0.5);
        assert_eq!(mean_compression_rate([1024, 1024], 2048), 0.5);
    }
}
