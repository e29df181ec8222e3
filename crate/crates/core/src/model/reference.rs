//! Whole-sequence forward pass without any cache, used as the equivalence
//! oracle for incremental decoding. Each layer materializes all positions'
//! projections first and then evaluates the causal attention matrix.

use super::{gelu, matvec, rms_norm, Model};
use crate::error::Result;
use crate::position::rope_in_place;

/// Logits at every position of `tokens`.
pub fn forward_sequence(model: &Model, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
    model.check_tokens(tokens)?;
    let c = model.config();
    let n = tokens.len();
    let d = c.d_model;
    let d_h = c.head_dim();
    let q_dim = c.n_heads * d_h;
    let kv_dim = c.n_kv_heads * d_h;
    let scale = 1.0 / (d_h as f64).sqrt();
    let rope = model.rope_base();

    let mut hidden: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &tok)| model.embed(tok, i + 1))
        .collect();

    for lw in &model.weights.layers {
        let normed: Vec<Vec<f64>> = hidden
            .iter()
            .map(|h| rms_norm(h, &lw.attn_norm, c.norm_eps))
            .collect();
        let mut queries: Vec<Vec<f64>> =
            normed.iter().map(|a| matvec(&lw.wq, q_dim, d, a)).collect();
        let mut keys: Vec<Vec<f64>> = normed
            .iter()
            .map(|a| matvec(&lw.wk, kv_dim, d, a))
            .collect();
        let values: Vec<Vec<f64>> = normed
            .iter()
            .map(|a| matvec(&lw.wv, kv_dim, d, a))
            .collect();
        if let Some(base) = rope {
            for (i, (q, k)) in queries.iter_mut().zip(keys.iter_mut()).enumerate() {
                q.chunks_exact_mut(d_h)
                    .for_each(|hq| rope_in_place(hq, i, base));
                k.chunks_exact_mut(d_h)
                    .for_each(|hk| rope_in_place(hk, i, base));
            }
        }

        for i in 0..n {
            let mut mixed = vec![0.0; q_dim];
            for head in 0..c.n_heads {
                let kv = c.kv_head_of(head);
                let qh = &queries[i][head * d_h..(head + 1) * d_h];
                let logits: Vec<f64> = (0..=i)
                    .map(|j| {
                        let kh = &keys[j][kv * d_h..(kv + 1) * d_h];
                        let dot: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
                        dot * scale + model.attention_bias(head, i + 1, j + 1)
                    })
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    let p = e / total;
                    let vh = &values[j][kv * d_h..(kv + 1) * d_h];
                    for (m, v) in mixed[head * d_h..(head + 1) * d_h].iter_mut().zip(vh) {
                        *m += p * v;
                    }
                }
            }
            let o = matvec(&lw.wo, d, q_dim, &mixed);
            hidden[i].iter_mut().zip(&o).for_each(|(x, y)| *x += y);
        }

        for h in hidden.iter_mut() {
            let m = rms_norm(h, &lw.mlp_norm, c.norm_eps);
            let up: Vec<f64> = matvec(&lw.w_up, c.ff_dim(), d, &m)
                .into_iter()
                .map(gelu)
                .collect();
            let down = matvec(&lw.w_down, d, c.ff_dim(), &up);
            h.iter_mut().zip(&down).for_each(|(x, y)| *x += y);
        }
    }

    Ok(hidden
        .iter()
        .map(|h| {
            let f = rms_norm(h, &model.weights.final_norm, c.norm_eps);
            matvec(&model.weights.lm_head, c.vocab_size, d, &f)
        })
        .collect())
}
