//! Scaled dot-product attention math shared by the decoder and the analysis
//! suite.
//!
//! Everything here works in `f64`, regardless of the precision the model
//! weights are stored in. The importance threshold `score >= 1/t` is compared
//! against these values, and near-equality cases are common for short rows.

use std::cmp::Ordering;
use std::ops::{Deref, DerefMut};

use crate::error::{CormError, Result};

/// One head's query, key or value vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadVector(pub Vec<f64>);

impl HeadVector {
    pub fn new(values: Vec<f64>) -> Self {
        HeadVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        HeadVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &HeadVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, factor: f64) -> HeadVector {
        HeadVector(self.0.iter().map(|x| x * factor).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Deref for HeadVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for HeadVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for HeadVector {
    fn from(values: Vec<f64>) -> Self {
        HeadVector(values)
    }
}

/// Normalized attention scores of the query at `step` over the entries
/// currently held in a cache.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub step: usize,
    pub scores: Vec<f64>,
}

impl AttentionRow {
    pub fn new(step: usize, scores: Vec<f64>) -> Self {
        AttentionRow { step, scores }
    }

    /// Builds a row by softmax-normalizing raw attention weights.
    pub fn from_weights(step: usize, weights: &[f64]) -> Result<Self> {
        Ok(AttentionRow {
            step,
            scores: softmax_normalize(weights)?,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Keeps only the scores at `indices` and renormalizes them to sum to 1.
    pub fn restrict(&self, indices: &[usize]) -> AttentionRow {
        let picked: Vec<f64> = indices.iter().map(|&i| self.scores[i]).collect();
        let total: f64 = picked.iter().sum();
        let scores = if total > 0.0 {
            picked.iter().map(|s| s / total).collect()
        } else {
            vec![1.0 / picked.len() as f64; picked.len()]
        };
        AttentionRow {
            step: self.step,
            scores,
        }
    }
}

/// `q . k_i / sqrt(d_h)` for every key, in order.
pub fn scaled_dot_scores(q: &HeadVector, keys: &[HeadVector], d_h: usize) -> Result<Vec<f64>> {
    if q.dim() != d_h {
        return Err(CormError::DimensionMismatch {
            index: 0,
            expected: d_h,
            actual: q.dim(),
        });
    }
    let scale = 1.0 / (d_h as f64).sqrt();
    keys.iter()
        .enumerate()
        .map(|(i, k)| {
            if k.dim() != d_h {
                Err(CormError::DimensionMismatch {
                    index: i,
                    expected: d_h,
                    actual: k.dim(),
                })
            } else {
                Ok(q.dot(k) * scale)
            }
        })
        .collect()
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax_normalize(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(CormError::EmptyInput);
    }
    if let Some(index) = weights.iter().position(|w| !w.is_finite()) {
        return Err(CormError::NonFinite { index });
    }
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = weights.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn cosine_similarity(a: &HeadVector, b: &HeadVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(CormError::DimensionMismatch {
            index: 0,
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(CormError::ZeroVector);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `sum_i score_i * v_i`.
pub fn attention_output(row: &AttentionRow, values: &[HeadVector]) -> Result<HeadVector> {
    if row.len() != values.len() {
        return Err(CormError::LengthMismatch {
            what: "attention row",
            left: row.len(),
            right: values.len(),
        });
    }
    let dim = values.first().map_or(0, HeadVector::dim);
    let mut out = vec![0.0; dim];
    for (i, (score, v)) in row.scores.iter().zip(values).enumerate() {
        if v.dim() != dim {
            return Err(CormError::DimensionMismatch {
                index: i,
                expected: dim,
                actual: v.dim(),
            });
        }
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += score * x;
        }
    }
    Ok(HeadVector(out))
}

/// Indices ordered from highest to lowest value; ties keep the lower index
/// first.
pub fn argsort_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(Ordering::Equal));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dot_oracle(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += a[i] * b[i];
        }
        acc
    }

    fn hv(v: &[f64]) -> HeadVector {
        HeadVector(v.to_vec())
    }

    #[test]
    fn identity_keys_unit_scale() {
        let s =
            scaled_dot_scores(&hv(&[1.0, 0.0]), &[hv(&[1.0, 0.0]), hv(&[0.0, 1.0])], 2).unwrap();
        assert!((s[0] - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn unit_head_dim_matches_plain_dot() {
        let s = scaled_dot_scores(&hv(&[1.0]), &[hv(&[1.0]), hv(&[0.0])], 1).unwrap();
        assert_eq!(s, vec![1.0, 0.0]);
    }

    #[test]
    fn doubling_query_keeps_order() {
        let keys = [hv(&[1.0, 0.0]), hv(&[0.0, 1.0])];
        let a = scaled_dot_scores(&hv(&[1.0, 0.0]), &keys, 2).unwrap();
        let b = scaled_dot_scores(&hv(&[2.0, 0.0]), &keys, 2).unwrap();
        assert_eq!(argsort_descending(&a), argsort_descending(&b));
    }

    #[test]
    fn seeded_keys_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = [0.3, -0.7, 0.2];
        let keys: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let got =
            scaled_dot_scores(&hv(&q), &keys.iter().map(|k| hv(k)).collect::<Vec<_>>(), 3).unwrap();
        for (g, k) in got.iter().zip(&keys) {
            assert!((g - dot_oracle(&q, k) / 3f64.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_names_index() {
        let err =
            scaled_dot_scores(&hv(&[1.0, 0.0]), &[hv(&[1.0, 0.0]), hv(&[1.0])], 2).unwrap_err();
        assert!(matches!(err, CormError::DimensionMismatch { index: 1, .. }));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_normalize(&[5.0]).unwrap(), vec![1.0]);
        for c in [-3.0, 0.0, 17.5] {
            let s = softmax_normalize(&[c; 4]).unwrap();
            assert!(s.iter().all(|x| (x - 0.25).abs() < 1e-15));
        }
        // oracle: exp(x_i) / sum exp(x_j) without max subtraction
        let xs = [1.0f64, 2.0, 3.0];
        let denom: f64 = xs.iter().map(|x| x.exp()).sum();
        let expected: Vec<f64> = xs.iter().map(|x| x.exp() / denom).collect();
        let got = softmax_normalize(&xs).unwrap();
        for ((g, e), frozen) in got.iter().zip(&expected).zip([0.09003, 0.24473, 0.66524]) {
            assert!((g - e).abs() < 1e-12);
            assert!((g - frozen).abs() < 1e-4);
        }
        assert!(matches!(softmax_normalize(&[]), Err(CormError::EmptyInput)));
        assert!(matches!(
            softmax_normalize(&[1.0, f64::NAN]),
            Err(CormError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn cosine_examples() {
        let v = hv(&[0.4, -1.2, 3.0]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            cosine_similarity(&hv(&[1.0, 0.0]), &hv(&[0.0, 1.0])).unwrap(),
            0.0
        );
        let c = cosine_similarity(&hv(&[1.0, 2.0, 3.0]), &hv(&[-1.0, -2.0, -3.0])).unwrap();
        assert!((c + 1.0).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&hv(&[0.0, 0.0]), &hv(&[1.0, 0.0])),
            Err(CormError::ZeroVector)
        ));
    }

    #[test]
    fn output_examples() {
        let out = attention_output(&AttentionRow::new(1, vec![1.0]), &[hv(&[3.0, 4.0])]).unwrap();
        assert_eq!(out.0, vec![3.0, 4.0]);
        let out = attention_output(
            &AttentionRow::new(2, vec![0.5, 0.5]),
            &[hv(&[2.0, 0.0]), hv(&[0.0, 2.0])],
        )
        .unwrap();
        assert_eq!(out.0, vec![1.0, 1.0]);
        assert!(attention_output(&AttentionRow::new(2, vec![0.5, 0.5]), &[hv(&[1.0])]).is_err());
    }

    #[test]
    fn seeded_output_matches_accumulation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let raw: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let row = AttentionRow::from_weights(7, &raw).unwrap();
        let got =
            attention_output(&row, &values.iter().map(|v| hv(v)).collect::<Vec<_>>()).unwrap();
        for d in 0..4 {
            let acc: f64 = row.scores.iter().zip(&values).map(|(s, v)| s * v[d]).sum();
            assert!((got[d] - acc).abs() < 1e-9);
        }
    }

    #[test]
    fn restrict_renormalizes() {
        let row = AttentionRow::new(4, vec![0.1, 0.2, 0.3, 0.4]);
        let r = row.restrict(&[1, 3]);
        assert!((r.scores[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-50.0f64..50.0, len)
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_keeps_order(w in proptest::collection::vec(-30.0f64..30.0, 1..40)) {
            let s = softmax_normalize(&w).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(s.iter().all(|x| *x > 0.0 && *x <= 1.0));
            prop_assert_eq!(argsort_descending(&s), argsort_descending(&w));
        }

        #[test]
        fn cosine_symmetric_and_scale_free(
            (a, b) in (1usize..12).prop_flat_map(|n| (finite_vec(n), finite_vec(n))),
            m in 0.01f64..100.0,
        ) {
            let (a, b) = (HeadVector(a), HeadVector(b));
            prop_assume!(a.norm() > 1e-6 && b.norm() > 1e-6);
            let ab = cosine_similarity(&a, &b).unwrap();
            prop_assert!((ab - cosine_similarity(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert!((ab - cosine_similarity(&a.scaled(m), &b).unwrap()).abs() < 1e-9);
            prop_assert!((ab - cosine_similarity(&a, &b.scaled(m)).unwrap()).abs() < 1e-9);
        }
    }
}
