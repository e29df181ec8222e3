//! Fixed-budget baselines.
//!
//! Under GQA a cache is read by several query heads. Score-based baselines
//! use the mean of the group's rows; importance-count baselines use the OR of
//! the group's masks. All ties evict the lowest original position first.

use super::corm::union_mask;
use super::EvictionTracker;
use crate::attention::AttentionRow;

fn mean_scores(rows: &[AttentionRow]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut out = vec![0.0; rows[0].len()];
    for row in rows {
        for (o, s) in out.iter_mut().zip(&row.scores) {
            *o += s;
        }
    }
    if rows.len() > 1 {
        out.iter_mut().for_each(|o| *o /= n);
    }
    out
}

/// Index of the lowest `key` among entries accepted by `eligible`; the first
/// (lowest-position) entry wins ties.
fn argmin_by<K: PartialOrd + Copy>(keys: &[K], eligible: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..keys.len() {
        if !eligible(i) {
            continue;
        }
        match best {
            Some(b) if keys[i] >= keys[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

fn evict_one(tracker: &mut EvictionTracker, victim: usize) -> Vec<usize> {
    let keep: Vec<usize> = (0..tracker.len()).filter(|&i| i != victim).collect();
    tracker.retain(&keep);
    keep
}

/// Compose successive single-entry evictions into one index map relative to
/// the cache as it was before the update.
fn compose(outer: Option<Vec<usize>>, inner: Vec<usize>) -> Vec<usize> {
    match outer {
        None => inner,
        Some(prev) => inner.into_iter().map(|i| prev[i]).collect(),
    }
}

/// Keeps the first `sink` positions and the last `recent` positions.
pub fn streaming_update(
    tracker: &mut EvictionTracker,
    sink: usize,
    recent: usize,
) -> Option<Vec<usize>> {
    let keep: Vec<usize> = tracker
        .positions()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p <= sink || tracker.is_recent(p, recent))
        .map(|(i, _)| i)
        .collect();
    if keep.len() == tracker.len() {
        return None;
    }
    tracker.retain(&keep);
    Some(keep)
}

/// Accumulates attention mass per entry and, above `heavy + recent` entries,
/// evicts the non-recent entry with the least accumulated mass.
pub fn h2o_update(
    tracker: &mut EvictionTracker,
    rows: &[AttentionRow],
    heavy: usize,
    recent: usize,
) -> Option<Vec<usize>> {
    let scores = mean_scores(rows);
    for (acc, s) in tracker.accumulated_mut().iter_mut().zip(&scores) {
        *acc += s;
    }
    let bound = heavy.saturating_add(recent);
    let mut kept = None;
    while tracker.len() > bound {
        let positions = tracker.positions().to_vec();
        let acc = tracker.accumulated().to_vec();
        let victim = argmin_by(&acc, |i| !tracker.is_recent(positions[i], recent))?;
        kept = Some(compose(kept, evict_one(tracker, victim)));
    }
    kept
}

/// Counts how many of the last `window` steps flagged each entry important
/// and, above `budget + recent` entries, evicts the non-recent entry with the
/// lowest count.
pub fn scissorhands_update(
    tracker: &mut EvictionTracker,
    rows: &[AttentionRow],
    budget: usize,
    window: usize,
    recent: usize,
) -> Option<Vec<usize>> {
    debug_assert_eq!(tracker.message().window(), window);
    let mask = union_mask(rows, tracker.threshold());
    tracker.message_mut().push(mask);
    let bound = budget.saturating_add(recent);
    let mut kept = None;
    while tracker.len() > bound {
        let positions = tracker.positions().to_vec();
        let counts = tracker.message().counts();
        let victim = argmin_by(&counts, |i| !tracker.is_recent(positions[i], recent))?;
        kept = Some(compose(kept, evict_one(tracker, victim)));
    }
    kept
}

/// Above `budget` entries, evicts the entry with the lowest score in the
/// current row.
pub fn tova_update(
    tracker: &mut EvictionTracker,
    rows: &[AttentionRow],
    budget: usize,
) -> Option<Vec<usize>> {
    let mut scores = mean_scores(rows);
    let mut kept: Option<Vec<usize>> = None;
    while tracker.len() > budget {
        let victim = argmin_by(&scores, |_| true)?;
        let inner = evict_one(tracker, victim);
        scores = inner.iter().map(|&i| scores[i]).collect();
        kept = Some(compose(kept, inner));
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_cache::{PolicyConfig, ThresholdMode};

    fn run(policy: PolicyConfig, rows: &[Vec<f64>]) -> Vec<Vec<usize>> {
        let mut tr = EvictionTracker::new(policy, ThresholdMode::AbsoluteStep).unwrap();
        let mut history = Vec::new();
        for (i, scores) in rows.iter().enumerate() {
            let t = i + 1;
            tr.admit(t).unwrap();
            assert_eq!(
                scores.len(),
                tr.len(),
                "fixture row {t} sized for the wrong cache"
            );
            tr.observe(&[AttentionRow::new(t, scores.clone())]).unwrap();
            history.push(tr.positions().to_vec());
        }
        history
    }

    fn uniform_rows(policy: PolicyConfig, steps: usize) -> Vec<Vec<usize>> {
        let mut tr = EvictionTracker::new(policy, ThresholdMode::AbsoluteStep).unwrap();
        let mut history = Vec::new();
        for t in 1..=steps {
            tr.admit(t).unwrap();
            let n = tr.len();
            tr.observe(&[AttentionRow::new(t, vec![1.0 / n as f64; n])])
                .unwrap();
            history.push(tr.positions().to_vec());
        }
        history
    }

    #[test]
    fn streaming_examples() {
        let h = uniform_rows(PolicyConfig::StreamingLlm { sink: 1, recent: 1 }, 3);
        assert_eq!(h[2], vec![1, 3]);
        let h = uniform_rows(
            PolicyConfig::StreamingLlm {
                sink: 4,
                recent: 1020,
            },
            1024,
        );
        assert!(h.iter().enumerate().all(|(i, kept)| kept.len() == i + 1));
        let h = uniform_rows(PolicyConfig::StreamingLlm { sink: 3, recent: 5 }, 100);
        for (i, kept) in h.iter().enumerate() {
            assert_eq!(kept.len(), (i + 1).min(8));
        }
    }

    #[test]
    fn h2o_evicts_least_accumulated() {
        // heavy=1, recent=1: at step 3 the non-recent candidates are
        // positions 1 and 2 with accumulations 1.0+0.8+0.5 and 0.2+0.1.
        let rows = vec![vec![1.0], vec![0.8, 0.2], vec![0.5, 0.1, 0.4]];
        let h = run(
            PolicyConfig::H2o {
                heavy: 1,
                recent: 1,
            },
            &rows,
        );
        assert_eq!(h[1], vec![1, 2]);
        assert_eq!(h[2], vec![1, 3]);
    }

    #[test]
    fn h2o_under_budget_is_full() {
        let h = uniform_rows(
            PolicyConfig::H2o {
                heavy: 50,
                recent: 50,
            },
            100,
        );
        assert!(h.iter().enumerate().all(|(i, kept)| kept.len() == i + 1));
    }

    #[test]
    fn h2o_ties_evict_lower_position() {
        let rows = vec![vec![1.0], vec![0.5, 0.5], vec![0.25, 0.25, 0.5]];
        // accumulations 1.75 vs 0.75
        let h = run(
            PolicyConfig::H2o {
                heavy: 1,
                recent: 1,
            },
            &rows,
        );
        assert_eq!(h[2], vec![1, 3]);
        let rows = vec![vec![1.0], vec![0.0, 1.0], vec![0.0, 0.0, 1.0]];
        // accumulations tie at 1.0 for p1 and p2: lower position evicted
        let h = run(
            PolicyConfig::H2o {
                heavy: 1,
                recent: 1,
            },
            &rows,
        );
        assert_eq!(h[2], vec![2, 3]);
    }

    // budget=2, recent=1, window=3: hand counts at step 4 (rows 2..4) are
    // p1: 3, p2: 0, p3: 2 so p2 is evicted; at step 5 (rows 3..5) the
    // non-recent counts are p1: 3, p3: 3, p4: 0 and p4 goes.
    #[test]
    fn scissorhands_hand_fixture() {
        let rows = vec![
            vec![1.0],
            vec![0.9, 0.1],
            vec![0.5, 0.1, 0.4],
            vec![0.5, 0.1, 0.3, 0.1],
            vec![0.4, 0.3, 0.1, 0.2],
        ];
        let policy = PolicyConfig::Scissorhands {
            budget: 2,
            window: 3,
            recent: 1,
        };
        let h = run(policy, &rows);
        assert_eq!(h[2], vec![1, 2, 3]);
        assert_eq!(h[3], vec![1, 3, 4]);
        assert_eq!(h[4], vec![1, 3, 5]);
    }

    #[test]
    fn scissorhands_keeps_always_important() {
        let mut tr = EvictionTracker::new(
            PolicyConfig::Scissorhands {
                budget: 2,
                window: 4,
                recent: 2,
            },
            ThresholdMode::AbsoluteStep,
        )
        .unwrap();
        for t in 1..=40 {
            tr.admit(t).unwrap();
            let n = tr.len();
            let mut scores = vec![0.0; n];
            scores[0] = 0.9;
            scores[n - 1] += 0.1;
            tr.observe(&[AttentionRow::new(t, scores)]).unwrap();
            assert_eq!(tr.positions()[0], 1);
            assert!(tr.len() <= 4);
        }
    }

    #[test]
    fn tova_evicts_current_argmin() {
        let rows = vec![vec![1.0], vec![0.6, 0.4], vec![0.2, 0.5, 0.3]];
        let h = run(PolicyConfig::Tova { budget: 2 }, &rows);
        assert_eq!(h[2], vec![2, 3]);
        let h = uniform_rows(PolicyConfig::Tova { budget: 5 }, 50);
        // uniform rows: ties always drop the oldest, keeping the latest five
        assert_eq!(h[49], vec![46, 47, 48, 49, 50]);
        assert!(h.iter().all(|k| k.len() <= 5));
    }

    #[test]
    fn gqa_groups_use_mean_scores() {
        let mut tr = EvictionTracker::new(
            PolicyConfig::Tova { budget: 1 },
            ThresholdMode::AbsoluteStep,
        )
        .unwrap();
        tr.admit(1).unwrap();
        tr.observe(&[
            AttentionRow::new(1, vec![1.0]),
            AttentionRow::new(1, vec![1.0]),
        ])
        .unwrap();
        tr.admit(2).unwrap();
        let kept = tr
            .observe(&[
                AttentionRow::new(2, vec![0.9, 0.1]),
                AttentionRow::new(2, vec![0.2, 0.8]),
            ])
            .unwrap();
        // means 0.55 / 0.45
        assert_eq!(kept, Some(vec![0]));
    }
}
