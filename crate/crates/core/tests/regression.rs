//! Frozen end-to-end numbers on the toy model. A change here means model,
//! eviction or divergence arithmetic moved.

use corm::analysis::output_divergence;
use corm::model::{perplexity, teacher_forced_logits, Model, ModelConfig};
use corm::text::synthetic_tokens;
use corm::{PolicyConfig, ThresholdMode};

const PPL_FULL: f64 = 300.04307172484874;
const PPL_CORM_8_8: f64 = 300.0744529565799;
const TOP1_CORM_8_8: f64 = 0.9697265625;
const KL_CORM_8_8: f64 = 5.1756173546464055e-5;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1e-12)
}

#[test]
fn corm_8_8_on_1024_tokens_matches_frozen_values() {
    let model = Model::init(ModelConfig::toy(21)).unwrap();
    let tokens = synthetic_tokens(21, 1024, 256);
    let corm = PolicyConfig::Corm { w: 8, r: 8 };
    let step = ThresholdMode::AbsoluteStep;

    let full_ppl = perplexity(&model, &tokens, PolicyConfig::Full, step).unwrap();
    let corm_ppl = perplexity(&model, &tokens, corm, step).unwrap();
    assert!(close(full_ppl, PPL_FULL), "{full_ppl}");
    assert!(close(corm_ppl, PPL_CORM_8_8), "{corm_ppl}");
    assert!(full_ppl <= corm_ppl);

    let full = teacher_forced_logits(&model, &tokens, PolicyConfig::Full, step).unwrap();
    let evicted = teacher_forced_logits(&model, &tokens, corm, step).unwrap();
    let d = output_divergence(&full, &evicted).unwrap();
    assert_eq!(d.top1_agreement, TOP1_CORM_8_8);
    assert!(close(d.mean_kl, KL_CORM_8_8), "{}", d.mean_kl);
}
