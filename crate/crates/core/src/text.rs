//! Input helpers: byte-level tokenization, token-id files and a seeded
//! synthetic token stream.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CormError, Result};

/// One token per byte; needs a vocabulary of at least 256.
pub fn encode_bytes(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`encode_bytes`]; ids above 255 and invalid UTF-8 are replaced.
pub fn decode_bytes(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .map(|&t| u8::try_from(t).unwrap_or(b'?'))
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Whitespace-separated unsigned ids.
pub fn parse_token_ids(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .enumerate()
        .map(|(i, s)| {
            s.parse::<u32>().map_err(|_| {
                CormError::InvalidConfig(format!("token #{i} {s:?} is not an unsigned id"))
            })
        })
        .collect()
}

pub fn format_token_ids(tokens: &[u32]) -> String {
    let mut out = String::with_capacity(tokens.len() * 4);
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(if i % 32 == 0 { '\n' } else { ' ' });
        }
        out.push_str(&t.to_string());
    }
    out.push('\n');
    out
}

pub fn read_token_ids(path: &Path) -> Result<Vec<u32>> {
    let text = std::fs::read_to_string(path).map_err(|e| CormError::io(path, e))?;
    parse_token_ids(&text)
}

/// Text-like token stream from a seeded first-order Markov chain: every token
/// has four preferred successors taken with probability 0.85, otherwise a
/// uniformly random token follows. Repeated bigrams give queries something
/// to agree on, unlike i.i.d. noise.
pub fn synthetic_tokens(seed: u64, len: usize, vocab_size: usize) -> Vec<u32> {
    assert!(vocab_size > 0, "vocabulary must be non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e47);
    let vocab = vocab_size as u32;
    let successors: Vec<[u32; 4]> = (0..vocab)
        .map(|_| std::array::from_fn(|_| rng.random_range(0..vocab)))
        .collect();
    let mut tokens = Vec::with_capacity(len);
    let mut current = rng.random_range(0..vocab);
    for _ in 0..len {
        tokens.push(current);
        current = if rng.random::<f64>() < 0.85 {
            successors[current as usize][rng.random_range(0..4)]
        } else {
            rng.random_range(0..vocab)
        };
    }
    tokens
}
