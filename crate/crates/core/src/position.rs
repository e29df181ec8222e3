//! Positional encodings: rotary (adjacent-pair convention), ALiBi linear
//! biases, and additive absolute embeddings (sinusoidal or a seeded learned
//! table).
//!
//! Positions passed to these functions are zero-based. The decoder encodes
//! 1-based step `t` at position `t - 1`.

use serde::{Deserialize, Serialize};

use crate::attention::HeadVector;
use crate::error::{CormError, Result};

pub const DEFAULT_ROPE_BASE: f64 = 10000.0;

fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}

/// Positional-encoding family used by a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PeKind {
    Rope {
        #[serde(default = "default_rope_base")]
        base: f64,
    },
    /// Per-head linear biases. An empty slope list means the standard
    /// geometric slopes for the model's head count.
    Alibi {
        #[serde(default)]
        slopes: Vec<f64>,
    },
    AbsoluteSinusoidal,
    /// Seeded random table added to token embeddings, standing in for a
    /// trained absolute-position table.
    AbsoluteLearned,
    None,
}

impl Default for PeKind {
    fn default() -> Self {
        PeKind::Rope {
            base: DEFAULT_ROPE_BASE,
        }
    }
}

impl PeKind {
    pub fn code(&self) -> u32 {
        match self {
            PeKind::None => 0,
            PeKind::Rope { .. } => 1,
            PeKind::Alibi { .. } => 2,
            PeKind::AbsoluteSinusoidal => 3,
            PeKind::AbsoluteLearned => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PeKind::None => "none",
            PeKind::Rope { .. } => "rope",
            PeKind::Alibi { .. } => "alibi",
            PeKind::AbsoluteSinusoidal => "absolute_sinusoidal",
            PeKind::AbsoluteLearned => "absolute_learned",
        }
    }

    /// Checks the encoding against the head layout.
    pub fn validate(&self, head_dim: usize, n_heads: usize) -> Result<()> {
        match self {
            PeKind::Rope { base } => {
                if !head_dim.is_multiple_of(2) {
                    return Err(CormError::OddDimension(head_dim));
                }
                if !(base.is_finite() && *base > 1.0) {
                    return Err(CormError::InvalidConfig(format!(
                        "rope base must be > 1, got {base}"
                    )));
                }
            }
            PeKind::Alibi { slopes } if !slopes.is_empty() && slopes.len() != n_heads => {
                return Err(CormError::InvalidConfig(format!(
                    "alibi has {} slopes for {n_heads} heads",
                    slopes.len()
                )));
            }
            _ => {}
        }
        Ok(())
    }

    /// Slopes in effect for `n_heads` heads, if this is ALiBi.
    pub fn alibi_slopes(&self, n_heads: usize) -> Option<Vec<f64>> {
        match self {
            PeKind::Alibi { slopes } if slopes.is_empty() => Some(default_alibi_slopes(n_heads)),
            PeKind::Alibi { slopes } => Some(slopes.clone()),
            _ => None,
        }
    }
}

/// Rotates each adjacent pair `(2j, 2j+1)` by `position * base^(-2j/d)`.
pub fn apply_rope(v: &HeadVector, position: usize, base: f64) -> Result<HeadVector> {
    let d = v.dim();
    if !d.is_multiple_of(2) {
        return Err(CormError::OddDimension(d));
    }
    let mut out = v.clone();
    rope_in_place(&mut out, position, base);
    Ok(out)
}

pub(crate) fn rope_in_place(v: &mut [f64], position: usize, base: f64) {
    let d = v.len();
    let p = position as f64;
    for j in 0..d / 2 {
        let theta = p * base.powf(-((2 * j) as f64) / d as f64);
        let (sin, cos) = theta.sin_cos();
        let (x0, x1) = (v[2 * j], v[2 * j + 1]);
        v[2 * j] = x0 * cos - x1 * sin;
        v[2 * j + 1] = x0 * sin + x1 * cos;
    }
}

/// `-slope * (query_pos - key_pos)`.
pub fn alibi_bias(head_slope: f64, query_pos: usize, key_pos: usize) -> Result<f64> {
    if key_pos > query_pos {
        return Err(CormError::Causality { query_pos, key_pos });
    }
    Ok(-head_slope * (query_pos - key_pos) as f64)
}

/// Standard ALiBi slopes. For a power-of-two head count `n` the slopes are
/// `2^(-8i/n)` for `i = 1..=n`; other counts take the slopes of the next
/// lower power of two and fill the rest with every other slope of twice that
/// count.
pub fn default_alibi_slopes(n_heads: usize) -> Vec<f64> {
    fn pow2_slopes(n: usize) -> Vec<f64> {
        let start = 2f64.powf(-8.0 / n as f64);
        (1..=n).map(|i| start.powi(i as i32)).collect()
    }
    if n_heads == 0 {
        return Vec::new();
    }
    if n_heads.is_power_of_two() {
        return pow2_slopes(n_heads);
    }
    let lower = 1usize << (usize::BITS - 1 - n_heads.leading_zeros());
    let mut slopes = pow2_slopes(lower);
    slopes.extend(
        pow2_slopes(2 * lower)
            .into_iter()
            .step_by(2)
            .take(n_heads - lower),
    );
    slopes
}

/// Interleaved sinusoidal embedding: index `2j` holds
/// `sin(pos / 10000^(2j/d))` and `2j+1` the matching cosine.
pub fn absolute_sinusoidal(position: usize, d_model: usize) -> Vec<f64> {
    let p = position as f64;
    (0..d_model)
        .map(|i| {
            let j = i / 2;
            let angle = p / 10000f64.powf((2 * j) as f64 / d_model as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rotation_oracle(x: [f64; 2], theta: f64) -> [f64; 2] {
        // [[cos, -sin], [sin, cos]] * x
        [
            theta.cos() * x[0] - theta.sin() * x[1],
            theta.sin() * x[0] + theta.cos() * x[1],
        ]
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let v = HeadVector(vec![0.3, -1.0, 2.5, 0.7]);
        assert_eq!(apply_rope(&v, 0, DEFAULT_ROPE_BASE).unwrap(), v);
    }

    #[test]
    fn rope_unit_vector_position_one() {
        let got = apply_rope(&HeadVector(vec![1.0, 0.0]), 1, 10000.0).unwrap();
        let want = rotation_oracle([1.0, 0.0], 1.0);
        assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        assert!((got[0] - 0.5403).abs() < 1e-4 && (got[1] - 0.8415).abs() < 1e-4);
    }

    #[test]
    fn rope_rejects_odd_dim() {
        assert!(matches!(
            apply_rope(&HeadVector(vec![1.0, 2.0, 3.0]), 4, 10000.0),
            Err(CormError::OddDimension(3))
        ));
    }

    #[test]
    fn alibi_examples() {
        assert_eq!(alibi_bias(0.5, 5, 3).unwrap(), -1.0);
        assert_eq!(alibi_bias(0.37, 9, 9).unwrap(), 0.0);
        assert!(matches!(
            alibi_bias(0.5, 3, 5),
            Err(CormError::Causality { .. })
        ));
    }

    #[test]
    fn alibi_slopes_eight_heads() {
        let slopes = default_alibi_slopes(8);
        for (i, s) in slopes.iter().enumerate() {
            assert!((s - 1.0 / 2f64.powi(i as i32 + 1)).abs() < 1e-15);
        }
    }

    #[test]
    fn alibi_slopes_non_power_of_two() {
        let s = default_alibi_slopes(6);
        assert_eq!(s.len(), 6);
        assert_eq!(&s[..4], &default_alibi_slopes(4)[..]);
        let eight = default_alibi_slopes(8);
        assert_eq!(s[4], eight[0]);
        assert_eq!(s[5], eight[2]);
    }

    #[test]
    fn sinusoidal_examples() {
        let zero = absolute_sinusoidal(0, 6);
        assert_eq!(zero, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let one = absolute_sinusoidal(1, 4);
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (g, w) in one.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!(absolute_sinusoidal(12345, 32)
            .iter()
            .all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn pe_validation() {
        assert!(PeKind::default().validate(7, 4).is_err());
        assert!(PeKind::Alibi {
            slopes: vec![0.5; 3]
        }
        .validate(8, 4)
        .is_err());
        assert!(PeKind::Alibi { slopes: vec![] }.validate(8, 4).is_ok());
    }

    proptest! {
        #[test]
        fn rope_preserves_norm(v in proptest::collection::vec(-10.0f64..10.0, 8), p in 0usize..5000) {
            let v = HeadVector(v);
            let r = apply_rope(&v, p, DEFAULT_ROPE_BASE).unwrap();
            prop_assert!((r.norm() - v.norm()).abs() < 1e-9);
        }

        #[test]
        fn rope_dot_depends_on_offset_only(
            q in proptest::collection::vec(-2.0f64..2.0, 8),
            k in proptest::collection::vec(-2.0f64..2.0, 8),
            p in 0usize..500, offset in 0usize..500, shift in 1usize..1000,
        ) {
            let (q, k) = (HeadVector(q), HeadVector(k));
            let a = apply_rope(&q, p + offset, 10000.0).unwrap().dot(&apply_rope(&k, p, 10000.0).unwrap());
            let b = apply_rope(&q, p + offset + shift, 10000.0).unwrap()
                .dot(&apply_rope(&k, p + shift, 10000.0).unwrap());
            prop_assert!((a - b).abs() < 1e-8);
        }

        #[test]
        fn alibi_translation_invariant(slope in 0.0f64..2.0, k in 0usize..100, d in 0usize..100, c in 0usize..100) {
            prop_assert_eq!(alibi_bias(slope, k + d, k).unwrap(), alibi_bias(slope, k + d + c, k + c).unwrap());
        }
    }
}
