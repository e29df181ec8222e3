//! Measurements over traces and live runs: sparsity, query similarity,
//! important-key overlap, compression curves and output divergence.
//!
//! Everything that reads a trace works on its f32 rows and queries. Scores
//! are compared against `1/t` after rounding both to f32, which matches the
//! f64 comparison except for scores within one f32 ulp of the threshold.
//!
//! CSV schemas (header line first, one record per line):
//!
//! - sparsity: `layer,head,important_fraction`
//! - layer sparsity: `layer,mean_important_fraction`
//! - similarity / overlap grids: `n` rows of `n` cells, row `i` holding the
//!   entries for `j = 1..=n`; cells with `j >= i` are empty
//! - recent fraction: `layer,head,k,fraction`
//! - compression: `t,rate`
//! - divergence: `step,top1_agree,kl`

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{CormError, Result};
use crate::kv_cache::{PolicyConfig, ThresholdMode};
use crate::model::Model;
use crate::trace::{AttentionTrace, KeptTimeline};

/// Fraction of a row's scores at or above the average `1/t`.
pub fn important_fraction(row: &[f32], t: usize) -> f64 {
    let threshold = 1.0f32 / t as f32;
    row.iter().filter(|&&s| s >= threshold).count() as f64 / row.len() as f64
}

/// Per (layer, head) mean over steps of the important-key fraction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityProfile {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Indexed by `layer * n_heads + head`.
    pub per_head: Vec<f64>,
}

impl SparsityProfile {
    pub fn head(&self, layer: usize, head: usize) -> f64 {
        self.per_head[layer * self.n_heads + head]
    }

    /// Mean over each layer's heads.
    pub fn layer_means(&self) -> Vec<f64> {
        self.per_head
            .chunks(self.n_heads)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// Ratio of the largest to the smallest layer mean.
    pub fn layer_spread(&self) -> f64 {
        let means = self.layer_means();
        let max = means.iter().copied().fold(f64::MIN, f64::max);
        let min = means.iter().copied().fold(f64::MAX, f64::min);
        max / min
    }

    /// Entry-wise mean of profiles from several texts.
    pub fn average(profiles: &[SparsityProfile]) -> Result<SparsityProfile> {
        let first = profiles.first().ok_or(CormError::EmptyInput)?;
        let mut per_head = vec![0.0; first.per_head.len()];
        for p in profiles {
            if (p.n_layers, p.n_heads) != (first.n_layers, first.n_heads) {
                return Err(CormError::LengthMismatch {
                    what: "sparsity profile heads",
                    left: p.per_head.len(),
                    right: first.per_head.len(),
                });
            }
            per_head
                .iter_mut()
                .zip(&p.per_head)
                .for_each(|(a, b)| *a += b);
        }
        per_head
            .iter_mut()
            .for_each(|a| *a /= profiles.len() as f64);
        Ok(SparsityProfile {
            n_layers: first.n_layers,
            n_heads: first.n_heads,
            per_head,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,important_fraction\n");
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                let _ = writeln!(out, "{l},{h},{}", self.head(l, h));
            }
        }
        out
    }

    pub fn layers_to_csv(&self) -> String {
        let mut out = String::from("layer,mean_important_fraction\n");
        for (l, m) in self.layer_means().iter().enumerate() {
            let _ = writeln!(out, "{l},{m}");
        }
        out
    }
}

pub fn sparsity_profile(trace: &AttentionTrace) -> SparsityProfile {
    let meta = trace.meta();
    let mut per_head = vec![0.0; meta.n_layers * meta.n_heads];
    for t in 1..=trace.len() {
        for l in 0..meta.n_layers {
            for h in 0..meta.n_heads {
                per_head[l * meta.n_heads + h] += important_fraction(trace.row(t, l, h), t);
            }
        }
    }
    let steps = trace.len().max(1) as f64;
    per_head.iter_mut().for_each(|x| *x /= steps);
    SparsityProfile {
        n_layers: meta.n_layers,
        n_heads: meta.n_heads,
        per_head,
    }
}

/// Same quantity computed during a full-cache decode, from f64 rows.
pub fn sparsity_profile_live(model: &Model, tokens: &[u32]) -> Result<SparsityProfile> {
    let c = model.config();
    let mut state =
        crate::model::DecoderState::new(model, PolicyConfig::Full, ThresholdMode::AbsoluteStep)?;
    let mut per_head = vec![0.0; c.n_layers * c.n_heads];
    for &tok in tokens {
        let out = model.forward_step(&mut state, tok)?;
        let t = out.step;
        for ha in &out.heads {
            let mask = crate::kv_cache::classify_important(&ha.row, t);
            per_head[ha.layer * c.n_heads + ha.head] +=
                mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        }
    }
    let steps = tokens.len().max(1) as f64;
    per_head.iter_mut().for_each(|x| *x /= steps);
    Ok(SparsityProfile {
        n_layers: c.n_layers,
        n_heads: c.n_heads,
        per_head,
    })
}

fn cosine_f32(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Strictly lower-triangular matrix over 1-based positions; entry `(i, j)`
/// exists for `1 <= j < i <= n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerTriangle {
    pub n: usize,
    data: Vec<f64>,
}

impl LowerTriangle {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 2..=n {
            for j in 1..i {
                data.push(f(i, j));
            }
        }
        LowerTriangle { n, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(
            j >= 1 && j < i && i <= self.n,
            "({i}, {j}) outside the lower triangle of {}",
            self.n
        );
        self.data[(i - 1) * (i - 2) / 2 + (j - 1)]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 1..=self.n {
            for j in 1..=self.n {
                if j > 1 {
                    out.push(',');
                }
                if j < i {
                    let _ = write!(out, "{}", self.get(i, j));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Cosine similarity between queries; zero vectors compare as 0.
pub type SimilarityMap = LowerTriangle;

pub fn query_similarity_map(trace: &AttentionTrace, layer: usize, head: usize) -> SimilarityMap {
    LowerTriangle::from_fn(trace.len(), |i, j| {
        cosine_f32(trace.query(i, layer, head), trace.query(j, layer, head))
    })
}

/// Fraction of rows `i >= 2` whose most similar earlier query lies within
/// `k` positions. Ties go to the nearest query.
pub fn recent_similarity_fraction(map: &SimilarityMap, k: usize) -> f64 {
    if map.n < 2 {
        return 1.0;
    }
    let hits = (2..=map.n)
        .filter(|&i| {
            let mut best = i - 1;
            for j in (1..i - 1).rev() {
                if map.get(i, j) > map.get(i, best) {
                    best = j;
                }
            }
            i - best <= k
        })
        .count();
    hits as f64 / (map.n - 1) as f64
}

/// Mean `recent_similarity_fraction` over every head of a trace.
pub fn mean_recent_similarity_fraction(trace: &AttentionTrace, k: usize) -> f64 {
    let meta = trace.meta();
    let mut total = 0.0;
    for l in 0..meta.n_layers {
        for h in 0..meta.n_heads {
            total += recent_similarity_fraction(&query_similarity_map(trace, l, h), k);
        }
    }
    total / (meta.n_layers * meta.n_heads) as f64
}

/// Jaccard index of two masks; two empty masks are identical.
pub fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn prefix_mask(row: &[f32], t: usize, len: usize) -> Vec<bool> {
    let threshold = 1.0f32 / t as f32;
    row[..len].iter().map(|&s| s >= threshold).collect()
}

/// Jaccard overlap of the important-key masks of queries `i` and `j`, over
/// the keys both can see except the later query's own: positions `1..min(i, j)`.
pub fn importance_overlap(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    i: usize,
    j: usize,
) -> f64 {
    if i == j {
        return 1.0;
    }
    let m = i.min(j) - 1;
    jaccard(
        &prefix_mask(trace.row(i, layer, head), i, m),
        &prefix_mask(trace.row(j, layer, head), j, m),
    )
}

pub fn overlap_map(trace: &AttentionTrace, layer: usize, head: usize) -> LowerTriangle {
    LowerTriangle::from_fn(trace.len(), |i, j| {
        importance_overlap(trace, layer, head, i, j)
    })
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(CormError::LengthMismatch {
            what: "spearman samples",
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(CormError::EmptyInput);
    }
    Ok(pearson(&ranks(x), &ranks(y)))
}

/// Rank correlation between query cosine similarity and importance overlap
/// over all pairs `j < i` with `j >= min_step`. Samples from every head.
pub fn overlap_similarity_correlation(trace: &AttentionTrace, min_step: usize) -> Result<f64> {
    let meta = trace.meta();
    let (mut sims, mut overlaps) = (Vec::new(), Vec::new());
    for l in 0..meta.n_layers {
        for h in 0..meta.n_heads {
            for i in min_step.max(2)..=trace.len() {
                for j in min_step.max(2)..i {
                    sims.push(cosine_f32(trace.query(i, l, h), trace.query(j, l, h)));
                    overlaps.push(importance_overlap(trace, l, h, i, j));
                }
            }
        }
    }
    spearman(&sims, &overlaps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OutputDivergence {
    pub top1_agreement: f64,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDivergence {
    pub step: usize,
    pub top1_agree: bool,
    pub kl: f64,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Per-step top-1 agreement and KL(full || policy) of the next-token
/// distributions.
pub fn step_divergence(full: &[Vec<f64>], policy: &[Vec<f64>]) -> Result<Vec<StepDivergence>> {
    if full.len() != policy.len() {
        return Err(CormError::LengthMismatch {
            what: "logit steps",
            left: full.len(),
            right: policy.len(),
        });
    }
    full.iter()
        .zip(policy)
        .enumerate()
        .map(|(i, (p, q))| {
            if p.len() != q.len() {
                return Err(CormError::LengthMismatch {
                    what: "logit width",
                    left: p.len(),
                    right: q.len(),
                });
            }
            let (lp, lq) = (log_softmax(p), log_softmax(q));
            let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
            Ok(StepDivergence {
                step: i + 1,
                top1_agree: argmax(p) == argmax(q),
                kl: kl.max(0.0),
            })
        })
        .collect()
}

pub fn output_divergence(full: &[Vec<f64>], policy: &[Vec<f64>]) -> Result<OutputDivergence> {
    let steps = step_divergence(full, policy)?;
    if steps.is_empty() {
        return Err(CormError::EmptyInput);
    }
    let n = steps.len() as f64;
    Ok(OutputDivergence {
        top1_agreement: steps.iter().filter(|s| s.top1_agree).count() as f64 / n,
        mean_kl: steps.iter().map(|s| s.kl).sum::<f64>() / n,
    })
}

pub fn divergence_to_csv(steps: &[StepDivergence]) -> String {
    let mut out = String::from("step,top1_agree,kl\n");
    for s in steps {
        let _ = writeln!(out, "{},{},{}", s.step, u8::from(s.top1_agree), s.kl);
    }
    out
}

fn check_checkpoints(checkpoints: &[usize], len: usize) -> Result<()> {
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CormError::InvalidConfig(
            "checkpoints must be strictly ascending".into(),
        ));
    }
    if let Some(&bad) = checkpoints.iter().find(|&&c| c == 0 || c > len) {
        return Err(CormError::InvalidConfig(format!(
            "checkpoint {bad} outside 1..={len}"
        )));
    }
    Ok(())
}

/// Picks `(t, rate)` pairs from a per-step rate series (`rates[t - 1]`).
pub fn curve_from_rates(rates: &[f64], checkpoints: &[usize]) -> Result<Vec<(usize, f64)>> {
    check_checkpoints(checkpoints, rates.len())?;
    Ok(checkpoints.iter().map(|&t| (t, rates[t - 1])).collect())
}

/// Compression rate at each checkpoint while prefilling `tokens`, averaged
/// over every cache.
pub fn compression_curve(
    model: &Model,
    tokens: &[u32],
    policy: PolicyConfig,
    threshold: ThresholdMode,
    checkpoints: &[usize],
) -> Result<Vec<(usize, f64)>> {
    check_checkpoints(checkpoints, tokens.len())?;
    let state = model.prefill_with(tokens, policy, threshold)?;
    curve_from_rates(state.rates(), checkpoints)
}

/// Checkpoint-wise mean of the curves of several texts.
pub fn mean_compression_curve(
    model: &Model,
    texts: &[Vec<u32>],
    policy: PolicyConfig,
    threshold: ThresholdMode,
    checkpoints: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if texts.is_empty() {
        return Err(CormError::EmptyInput);
    }
    let mut acc: Vec<(usize, f64)> = checkpoints.iter().map(|&t| (t, 0.0)).collect();
    for text in texts {
        let curve = compression_curve(model, text, policy, threshold, checkpoints)?;
        acc.iter_mut().zip(curve).for_each(|(a, (_, r))| a.1 += r);
    }
    acc.iter_mut().for_each(|a| a.1 /= texts.len() as f64);
    Ok(acc)
}

pub fn curve_to_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("t,rate\n");
    for (t, r) in curve {
        let _ = writeln!(out, "{t},{r}");
    }
    out
}

/// Mean Jaccard index of kept sets across all steps and caches.
pub fn timeline_agreement(a: &KeptTimeline, b: &KeptTimeline) -> Result<f64> {
    if a.steps.len() != b.steps.len() || (a.n_layers, a.n_kv_heads) != (b.n_layers, b.n_kv_heads) {
        return Err(CormError::LengthMismatch {
            what: "timeline steps",
            left: a.steps.len(),
            right: b.steps.len(),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (sa, sb) in a.steps.iter().zip(&b.steps) {
        for (ka, kb) in sa.iter().zip(sb) {
            let inter = ka.iter().filter(|p| kb.binary_search(p).is_ok()).count();
            let union = ka.len() + kb.len() - inter;
            total += if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            };
            count += 1;
        }
    }
    Ok(if count == 0 {
        1.0
    } else {
        total / count as f64
    })
}
