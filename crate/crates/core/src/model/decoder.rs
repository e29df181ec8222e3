use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gelu, log_sum_exp, matvec, rms_norm, Model};
use crate::attention::{attention_output, scaled_dot_scores, AttentionRow, HeadVector};
use crate::error::{CormError, Result};
use crate::kv_cache::{mean_compression_rate, KvCacheState, PolicyConfig, ThresholdMode};
use crate::position::rope_in_place;

/// What one query head saw at one step: the cache positions it attended to,
/// its normalized scores over them (before the policy ran) and its
/// position-encoded query.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttention {
    pub layer: usize,
    pub head: usize,
    pub positions: Vec<usize>,
    pub row: AttentionRow,
    pub query: HeadVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub step: usize,
    pub logits: Vec<f64>,
    /// Ordered by layer, then query head.
    pub heads: Vec<HeadAttention>,
}

/// Per-sequence decoding state: one cache per (layer, kv head), the current
/// step, and the logits and compression rate after every step.
#[derive(Debug, Clone)]
pub struct DecoderState {
    policy: PolicyConfig,
    threshold: ThresholdMode,
    caches: Vec<Vec<KvCacheState>>,
    step: usize,
    logits: Vec<Vec<f64>>,
    rates: Vec<f64>,
}

impl DecoderState {
    pub fn new(model: &Model, policy: PolicyConfig, threshold: ThresholdMode) -> Result<Self> {
        let c = model.config();
        if let PolicyConfig::CormGqa { group_size, .. } = policy {
            if group_size != c.group_size() {
                return Err(CormError::GroupMismatch(format!(
                    "policy group size {group_size} but the model has {} query heads per kv head",
                    c.group_size()
                )));
            }
        }
        let caches = (0..c.n_layers)
            .map(|_| {
                (0..c.n_kv_heads)
                    .map(|_| KvCacheState::new(policy, threshold))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderState {
            policy,
            threshold,
            caches,
            step: 0,
            logits: Vec::new(),
            rates: Vec::new(),
        })
    }

    pub fn policy(&self) -> PolicyConfig {
        self.policy
    }

    pub fn threshold(&self) -> ThresholdMode {
        self.threshold
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Indexed `[layer][kv_head]`.
    pub fn caches(&self) -> &[Vec<KvCacheState>] {
        &self.caches
    }

    pub fn cache_sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.caches.iter().flatten().map(KvCacheState::len)
    }

    pub fn total_entries(&self) -> usize {
        self.cache_sizes().sum()
    }

    /// Mean over layers and kv heads of `1 - size / t`.
    pub fn compression_rate(&self) -> f64 {
        if self.step == 0 {
            return 0.0;
        }
        mean_compression_rate(self.cache_sizes(), self.step)
    }

    /// Logits after each processed step.
    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    /// Model-wide compression rate after each processed step.
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Surviving positions, indexed `[layer][kv_head]`.
    pub fn kept_positions(&self) -> Vec<Vec<Vec<usize>>> {
        self.caches
            .iter()
            .map(|layer| layer.iter().map(|c| c.positions().to_vec()).collect())
            .collect()
    }
}

impl Model {
    /// Runs the causal forward pass for one token at step `state.step + 1`
    /// and lets every cache's policy evict afterwards.
    pub fn forward_step(&self, state: &mut DecoderState, token: u32) -> Result<StepOutput> {
        self.check_tokens(&[token])?;
        let c = self.config();
        let t = state.step + 1;
        let d = c.d_model;
        let d_h = c.head_dim();
        let group = c.group_size();
        let q_dim = c.n_heads * d_h;
        let kv_dim = c.n_kv_heads * d_h;
        let rope = self.rope_base();

        let mut h = self.embed(token, t);
        let mut heads = Vec::with_capacity(c.n_layers * c.n_heads);
        for (l, lw) in self.weights.layers.iter().enumerate() {
            let a = rms_norm(&h, &lw.attn_norm, c.norm_eps);
            let q = matvec(&lw.wq, q_dim, d, &a);
            let k = matvec(&lw.wk, kv_dim, d, &a);
            let v = matvec(&lw.wv, kv_dim, d, &a);
            let mut mixed = vec![0.0; q_dim];
            for (kv, cache) in state.caches[l].iter_mut().enumerate() {
                let span = kv * d_h..(kv + 1) * d_h;
                let mut key = k[span.clone()].to_vec();
                if let Some(base) = rope {
                    rope_in_place(&mut key, t - 1, base);
                }
                cache.push(HeadVector(key), HeadVector(v[span].to_vec()), t)?;
                let mut rows = Vec::with_capacity(group);
                for head in kv * group..(kv + 1) * group {
                    let span = head * d_h..(head + 1) * d_h;
                    let mut query = q[span.clone()].to_vec();
                    if let Some(base) = rope {
                        rope_in_place(&mut query, t - 1, base);
                    }
                    let query = HeadVector(query);
                    let mut weights = scaled_dot_scores(&query, cache.keys(), d_h)?;
                    if self.alibi_slopes().is_some() {
                        for (w, &p) in weights.iter_mut().zip(cache.positions()) {
                            *w += self.attention_bias(head, t, p);
                        }
                    }
                    let row = AttentionRow::from_weights(t, &weights)?;
                    let out = attention_output(&row, cache.values())?;
                    mixed[span].copy_from_slice(&out);
                    heads.push(HeadAttention {
                        layer: l,
                        head,
                        positions: cache.positions().to_vec(),
                        row: row.clone(),
                        query,
                    });
                    rows.push(row);
                }
                cache.observe(&rows)?;
            }
            let o = matvec(&lw.wo, d, q_dim, &mixed);
            h.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
            let m = rms_norm(&h, &lw.mlp_norm, c.norm_eps);
            let up: Vec<f64> = matvec(&lw.w_up, c.ff_dim(), d, &m)
                .into_iter()
                .map(gelu)
                .collect();
            let down = matvec(&lw.w_down, d, c.ff_dim(), &up);
            h.iter_mut().zip(&down).for_each(|(x, y)| *x += y);
        }
        let f = rms_norm(&h, &self.weights.final_norm, c.norm_eps);
        let logits = matvec(&self.weights.lm_head, c.vocab_size, d, &f);

        state.step = t;
        state.logits.push(logits.clone());
        state.rates.push(state.compression_rate());
        Ok(StepOutput {
            step: t,
            logits,
            heads,
        })
    }

    /// Processes the prompt one position at a time, with eviction active.
    pub fn prefill(&self, tokens: &[u32], policy: PolicyConfig) -> Result<DecoderState> {
        self.prefill_with(tokens, policy, ThresholdMode::default())
    }

    pub fn prefill_with(
        &self,
        tokens: &[u32],
        policy: PolicyConfig,
        threshold: ThresholdMode,
    ) -> Result<DecoderState> {
        if tokens.is_empty() {
            return Err(CormError::EmptySequence);
        }
        self.check_tokens(tokens)?;
        let mut state = DecoderState::new(self, policy, threshold)?;
        for &tok in tokens {
            self.forward_step(&mut state, tok)?;
        }
        Ok(state)
    }

    /// One autoregressive step after at least one prefilled position.
    pub fn decode_step(&self, state: &mut DecoderState, token: u32) -> Result<StepOutput> {
        if state.step == 0 {
            return Err(CormError::EmptySequence);
        }
        self.forward_step(state, token)
    }
}

/// Logits after each token, teacher forced, with eviction active.
pub fn teacher_forced_logits(
    model: &Model,
    tokens: &[u32],
    policy: PolicyConfig,
    threshold: ThresholdMode,
) -> Result<Vec<Vec<f64>>> {
    Ok(model.prefill_with(tokens, policy, threshold)?.logits)
}

/// `exp(mean next-token NLL)` over `tokens`, teacher forced.
pub fn perplexity(
    model: &Model,
    tokens: &[u32],
    policy: PolicyConfig,
    threshold: ThresholdMode,
) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(CormError::LengthMismatch {
            what: "perplexity input",
            left: tokens.len(),
            right: 2,
        });
    }
    model.check_tokens(tokens)?;
    let mut state = DecoderState::new(model, policy, threshold)?;
    let mut total = 0.0;
    for (i, pair) in tokens.windows(2).enumerate() {
        let out = model.forward_step(&mut state, pair[0])?;
        let nll = log_sum_exp(&out.logits) - out.logits[pair[1] as usize];
        if !nll.is_finite() {
            return Err(CormError::NonFiniteLoss { step: i + 1 });
        }
        total += nll;
    }
    Ok((total / (tokens.len() - 1) as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    #[default]
    Greedy,
    /// Samples among the `k` most likely tokens with a dedicated seeded RNG.
    TopK { k: usize, seed: u64 },
}

/// Prompt plus generated continuation, with the logits that produced each
/// generated token and the model-wide compression rate after every step.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRun {
    pub prompt_len: usize,
    pub tokens: Vec<u32>,
    pub logits: Vec<Vec<f64>>,
    pub rates: Vec<f64>,
}

impl GenerationRun {
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
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

pub fn generate(
    model: &Model,
    prompt: &[u32],
    policy: PolicyConfig,
    threshold: ThresholdMode,
    new_tokens: usize,
    sampling: Sampling,
) -> Result<GenerationRun> {
    let mut state = model.prefill_with(prompt, policy, threshold)?;
    let mut rng = match sampling {
        Sampling::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Sampling::Greedy => None,
    };
    let mut tokens = prompt.to_vec();
    let mut logits = Vec::with_capacity(new_tokens);
    let mut next_logits = state.logits.last().cloned().expect("non-empty prefill");
    for i in 0..new_tokens {
        let next = match (sampling, rng.as_mut()) {
            (Sampling::TopK { k, .. }, Some(rng)) => sample_top_k(&next_logits, k.max(1), rng),
            _ => argmax(&next_logits),
        } as u32;
        tokens.push(next);
        logits.push(std::mem::take(&mut next_logits));
        if i + 1 < new_tokens {
            next_logits = model.decode_step(&mut state, next)?.logits;
        }
    }
    Ok(GenerationRun {
        prompt_len: prompt.len(),
        tokens,
        logits,
        rates: state.rates,
    })
}

fn sample_top_k(logits: &[f64], k: usize, rng: &mut ChaCha8Rng) -> usize {
    let order = crate::attention::argsort_descending(logits);
    let top = &order[..k.min(order.len())];
    let max = logits[top[0]];
    let weights: Vec<f64> = top.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in top.iter().zip(&weights) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    top[top.len() - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_cache::UNBOUNDED;
    use crate::model::ModelConfig;
    use crate::text::synthetic_tokens;

    fn toy() -> Model {
        Model::init(ModelConfig::toy(42)).unwrap()
    }

    #[test]
    fn full_policy_keeps_every_entry() {
        let m = toy();
        let tokens = synthetic_tokens(1, 40, 256);
        let state = m.prefill(&tokens, PolicyConfig::Full).unwrap();
        assert!(state.cache_sizes().all(|n| n == 40));
        assert_eq!(state.step(), 40);
        assert_eq!(state.compression_rate(), 0.0);
    }

    #[test]
    fn corm_with_unfilled_window_equals_full() {
        let m = toy();
        let tokens = synthetic_tokens(2, 30, 256);
        let full = m.prefill(&tokens, PolicyConfig::Full).unwrap();
        let corm = m
            .prefill(&tokens, PolicyConfig::Corm { w: 31, r: 1 })
            .unwrap();
        assert_eq!(full.kept_positions(), corm.kept_positions());
        assert_eq!(full.logits(), corm.logits());
    }

    #[test]
    fn eviction_happens_and_rows_cover_survivors() {
        let m = toy();
        let tokens = synthetic_tokens(3, 64, 256);
        let mut state = DecoderState::new(
            &m,
            PolicyConfig::Corm { w: 4, r: 4 },
            ThresholdMode::AbsoluteStep,
        )
        .unwrap();
        let mut last_kept = state.kept_positions();
        for &tok in &tokens {
            let out = m.forward_step(&mut state, tok).unwrap();
            for ha in &out.heads {
                // the row is over what survived the previous step, plus the new entry
                let kv = m.config().kv_head_of(ha.head);
                let mut expected = last_kept[ha.layer][kv].clone();
                expected.push(out.step);
                assert_eq!(ha.positions, expected);
                assert!((ha.row.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(ha.positions.iter().all(|&p| p <= out.step));
            }
            last_kept = state.kept_positions();
        }
        assert!(state.compression_rate() > 0.0);
    }

    #[test]
    fn unbounded_corm_is_bit_identical_to_full() {
        let m = toy();
        let tokens = synthetic_tokens(4, 50, 256);
        let a = teacher_forced_logits(&m, &tokens, PolicyConfig::Full, ThresholdMode::AbsoluteStep)
            .unwrap();
        let b = teacher_forced_logits(
            &m,
            &tokens,
            PolicyConfig::Corm {
                w: UNBOUNDED,
                r: UNBOUNDED,
            },
            ThresholdMode::AbsoluteStep,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let m = toy();
        assert!(matches!(
            m.prefill(&[], PolicyConfig::Full),
            Err(CormError::EmptySequence)
        ));
        assert!(matches!(
            m.prefill(&[1, 999], PolicyConfig::Full),
            Err(CormError::TokenOutOfRange { token: 999, .. })
        ));
        let mut fresh =
            DecoderState::new(&m, PolicyConfig::Full, ThresholdMode::AbsoluteStep).unwrap();
        assert!(m.decode_step(&mut fresh, 1).is_err());
        assert!(perplexity(&m, &[1], PolicyConfig::Full, ThresholdMode::AbsoluteStep).is_err());
        assert!(matches!(
            DecoderState::new(
                &m,
                PolicyConfig::CormGqa {
                    w: 2,
                    r: 2,
                    group_size: 2
                },
                ThresholdMode::AbsoluteStep
            ),
            Err(CormError::GroupMismatch(_))
        ));
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let mut m = toy();
        m.weights.lm_head.iter_mut().for_each(|w| *w = 0.0);
        let tokens = synthetic_tokens(5, 20, 256);
        let ppl = perplexity(&m, &tokens, PolicyConfig::Full, ThresholdMode::AbsoluteStep).unwrap();
        assert!((ppl - 256.0).abs() < 1e-3);
    }

    #[test]
    fn nan_loss_reports_step() {
        let mut m = toy();
        m.weights.lm_head[0] = f32::NAN;
        let err = perplexity(
            &m,
            &[1, 2, 3],
            PolicyConfig::Full,
            ThresholdMode::AbsoluteStep,
        )
        .unwrap_err();
        assert!(matches!(err, CormError::NonFiniteLoss { step: 1 }));
    }

    #[test]
    fn generation_is_deterministic() {
        let m = toy();
        let prompt = synthetic_tokens(6, 16, 256);
        let a = generate(
            &m,
            &prompt,
            PolicyConfig::Full,
            ThresholdMode::AbsoluteStep,
            24,
            Sampling::Greedy,
        )
        .unwrap();
        let b = generate(
            &m,
            &prompt,
            PolicyConfig::Full,
            ThresholdMode::AbsoluteStep,
            24,
            Sampling::Greedy,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.generated().len(), 24);
        assert_eq!(a.rates.len(), 16 + 23);
        let sampled = Sampling::TopK { k: 5, seed: 9 };
        let c = generate(
            &m,
            &prompt,
            PolicyConfig::Full,
            ThresholdMode::AbsoluteStep,
            24,
            sampled,
        )
        .unwrap();
        let d = generate(
            &m,
            &prompt,
            PolicyConfig::Full,
            ThresholdMode::AbsoluteStep,
            24,
            sampled,
        )
        .unwrap();
        assert_eq!(c.tokens, d.tokens);
    }
}
