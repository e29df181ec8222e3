//! Recent-message eviction.
//!
//! Each step appends the current query's important-key mask to a rolling
//! window of `w` rows. Until the window is full nothing is evicted. Once it
//! is full, an entry survives if at least one of the `w` rows flags it, or if
//! it was admitted within the last `r` steps. Message columns are pruned with
//! the same index set as the keys and values so rows stay aligned with the
//! cache.

use super::{EvictionTracker, ThresholdMode};
use crate::attention::AttentionRow;
use crate::error::{CormError, Result};

/// `score_i >= 1/t`, with `t` the absolute step.
pub fn classify_important(row: &AttentionRow, t: usize) -> Vec<bool> {
    let threshold = 1.0 / t as f64;
    row.scores.iter().map(|&s| s >= threshold).collect()
}

pub fn classify_important_with(row: &AttentionRow, mode: ThresholdMode) -> Vec<bool> {
    match mode {
        ThresholdMode::AbsoluteStep => classify_important(row, row.step),
        ThresholdMode::CacheSize => classify_important(row, row.len()),
    }
}

/// Entry-wise OR of the masks of several query heads.
pub fn union_mask(rows: &[AttentionRow], mode: ThresholdMode) -> Vec<bool> {
    let mut out = vec![false; rows.first().map_or(0, AttentionRow::len)];
    for row in rows {
        for (o, flag) in out.iter_mut().zip(classify_important_with(row, mode)) {
            *o |= flag;
        }
    }
    out
}

pub(crate) fn apply_mask(
    tracker: &mut EvictionTracker,
    mask: Vec<bool>,
    w: usize,
    r: usize,
) -> Result<Option<Vec<usize>>> {
    if w < 1 || r < 1 {
        return Err(CormError::InvalidPolicy(format!(
            "corm window and recent sizes must be >= 1, got w={w} r={r}"
        )));
    }
    let message = tracker.message_mut();
    if message.window() != w {
        return Err(CormError::InvalidPolicy(format!(
            "tracker keeps {} message rows but w={w}",
            message.window()
        )));
    }
    message.push(mask);
    if message.len() < w {
        return Ok(None);
    }
    let flagged = message.any();
    let keep: Vec<usize> = tracker
        .positions()
        .iter()
        .zip(&flagged)
        .enumerate()
        .filter(|(_, (&pos, &important))| important || tracker.is_recent(pos, r))
        .map(|(i, _)| i)
        .collect();
    if keep.len() == tracker.len() {
        return Ok(None);
    }
    tracker.retain(&keep);
    Ok(Some(keep))
}

/// Single-head update with the current row.
pub fn corm_update(
    tracker: &mut EvictionTracker,
    row: &AttentionRow,
    w: usize,
    r: usize,
) -> Result<Option<Vec<usize>>> {
    let mask = classify_important_with(row, tracker.threshold());
    apply_mask(tracker, mask, w, r)
}

/// Shared-cache update for a GQA group: an entry counts as important at this
/// step if any query head of the group flags it.
pub fn gqa_corm_update(
    tracker: &mut EvictionTracker,
    rows: &[AttentionRow],
    w: usize,
    r: usize,
    group_size: usize,
) -> Result<Option<Vec<usize>>> {
    if rows.len() != group_size {
        return Err(CormError::GroupMismatch(format!(
            "expected {group_size} query-head rows for the group, got {}",
            rows.len()
        )));
    }
    let mask = union_mask(rows, tracker.threshold());
    apply_mask(tracker, mask, w, r)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::kv_cache::PolicyConfig;

    fn tracker(w: usize, r: usize) -> EvictionTracker {
        EvictionTracker::new(PolicyConfig::Corm { w, r }, ThresholdMode::AbsoluteStep).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let row = AttentionRow::new(4, vec![0.4, 0.3, 0.2, 0.1]);
        assert_eq!(classify_important(&row, 4), vec![true, true, false, false]);
        assert_eq!(
            classify_important(&AttentionRow::new(1, vec![1.0]), 1),
            vec![true]
        );
        let uniform = AttentionRow::new(9, vec![1.0 / 5.0; 5]);
        assert!(classify_important(&uniform, 9).iter().all(|&b| b));
    }

    #[test]
    fn cache_size_threshold_mode() {
        let row = AttentionRow::new(10, vec![0.15, 0.35, 0.5]);
        assert_eq!(
            classify_important_with(&row, ThresholdMode::AbsoluteStep),
            vec![true; 3]
        );
        assert_eq!(
            classify_important_with(&row, ThresholdMode::CacheSize),
            vec![false, true, true]
        );
    }

    #[test]
    fn no_eviction_before_window_fills() {
        let w = 5;
        let mut tr = tracker(w, 1);
        for t in 1..w {
            tr.admit(t).unwrap();
            let mut scores = vec![0.0; t];
            scores[0] = 1.0;
            assert!(corm_update(&mut tr, &AttentionRow::new(t, scores), w, 1)
                .unwrap()
                .is_none());
            assert_eq!(tr.len(), t);
        }
    }

    // Hand simulation with w=2, r=1 over four steps. Position 2 is flagged
    // only at step 2; by step 4 both stored rows (steps 3 and 4) call it minor.
    #[test]
    fn hand_simulation_evicts_long_term_minor_key() {
        let rows = [
            vec![1.0],
            vec![0.3, 0.7],
            vec![0.6, 0.1, 0.3],
            vec![0.3, 0.1, 0.3, 0.3],
        ];
        let mut tr = tracker(2, 1);
        let mut outcomes = Vec::new();
        for (i, scores) in rows.iter().enumerate() {
            let t = i + 1;
            tr.admit(t).unwrap();
            outcomes
                .push(corm_update(&mut tr, &AttentionRow::new(t, scores.clone()), 2, 1).unwrap());
        }
        assert_eq!(outcomes[..3], [None, None, None]);
        assert_eq!(outcomes[3], Some(vec![0, 2, 3]));
        assert_eq!(tr.positions(), &[1, 3, 4]);
        assert!(tr.message().rows().all(|r| r.len() == 3));
    }

    #[test]
    fn gqa_or_mask_keeps_key_seen_by_one_head() {
        let policy = PolicyConfig::CormGqa {
            w: 1,
            r: 1,
            group_size: 2,
        };
        let mut tr = EvictionTracker::new(policy, ThresholdMode::AbsoluteStep).unwrap();
        tr.admit(1).unwrap();
        tr.observe(&[
            AttentionRow::new(1, vec![1.0]),
            AttentionRow::new(1, vec![1.0]),
        ])
        .unwrap();
        tr.admit(2).unwrap();
        tr.observe(&[
            AttentionRow::new(2, vec![0.5, 0.5]),
            AttentionRow::new(2, vec![0.5, 0.5]),
        ])
        .unwrap();
        tr.admit(3).unwrap();
        // head A flags position 1, head B flags only position 3
        let a = AttentionRow::new(3, vec![0.6, 0.1, 0.3]);
        let b = AttentionRow::new(3, vec![0.1, 0.2, 0.7]);
        let kept = gqa_corm_update(&mut tr, &[a.clone(), b.clone()], 1, 1, 2).unwrap();
        assert_eq!(kept, Some(vec![0, 2]));
        assert_eq!(tr.positions(), &[1, 3]);
        assert!(gqa_corm_update(&mut tr, &[a], 1, 1, 2).is_err());
    }

    #[test]
    fn group_of_one_matches_single_head() {
        let mut single = tracker(2, 1);
        let mut grouped = EvictionTracker::new(
            PolicyConfig::CormGqa {
                w: 2,
                r: 1,
                group_size: 1,
            },
            ThresholdMode::AbsoluteStep,
        )
        .unwrap();
        for t in 1..30usize {
            single.admit(t).unwrap();
            grouped.admit(t).unwrap();
            let n = single.len();
            let scores: Vec<f64> = (0..n).map(|i| ((i * 7 + t * 3) % 5) as f64 + 0.5).collect();
            let total: f64 = scores.iter().sum();
            let row = AttentionRow::new(t, scores.iter().map(|s| s / total).collect());
            let a = corm_update(&mut single, &row, 2, 1).unwrap();
            let b = gqa_corm_update(&mut grouped, &[row], 2, 1, 1).unwrap();
            assert_eq!(a, b);
            assert_eq!(single.positions(), grouped.positions());
        }
    }

    #[test]
    fn rejects_zero_sizes() {
        let mut tr = tracker(2, 1);
        tr.admit(1).unwrap();
        assert!(corm_update(&mut tr, &AttentionRow::new(1, vec![1.0]), 0, 1).is_err());
        assert!(corm_update(&mut tr, &AttentionRow::new(1, vec![1.0]), 2, 0).is_err());
    }

    /// Kept set recomputed from flags by position, independently of the
    /// tracker's column bookkeeping.
    #[test]
    fn matches_set_characterization_on_pseudo_random_rows() {
        let (w, r) = (3, 2);
        let mut tr = tracker(w, r);
        let mut flagged_at: Vec<BTreeSet<usize>> = vec![BTreeSet::new()];
        let mut alive: BTreeSet<usize> = BTreeSet::new();
        let mut state = 12345u64;
        for t in 1..=60usize {
            tr.admit(t).unwrap();
            alive.insert(t);
            let raw: Vec<f64> = alive
                .iter()
                .map(|_| {
                    state = state
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    ((state >> 33) as f64 / (1u64 << 31) as f64).powi(4)
                })
                .collect();
            let total: f64 = raw.iter().sum();
            let scores: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let flags: BTreeSet<usize> = alive
                .iter()
                .zip(&scores)
                .filter(|(_, &s)| s >= 1.0 / t as f64)
                .map(|(&p, _)| p)
                .collect();
            flagged_at.push(flags);
            corm_update(&mut tr, &AttentionRow::new(t, scores), w, r).unwrap();
            if t >= w {
                alive.retain(|&p| p + r > t || (t + 1 - w..=t).any(|s| flagged_at[s].contains(&p)));
            }
            assert_eq!(
                tr.positions(),
                alive.iter().copied().collect::<Vec<_>>().as_slice()
            );
        }
    }
}
