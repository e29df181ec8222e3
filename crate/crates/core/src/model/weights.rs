//! Model parameters, their seeded initialization and the binary weights file.
//!
//! Weights file layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `CORMWTS1`                        |
//! | 8      | 4    | version (u32, currently 1)              |
//! | 12     | 32   | n_layers, n_heads, n_kv_heads, d_model, d_ff, vocab_size, position rows, reserved (u32 each) |
//! | 44     | ...  | f32 payload in draw order (below)       |
//!
//! Payload and draw order: token embedding `[vocab, d_model]`, position table
//! `[max_positions, d_model]` (learned encoding only), then per layer
//! `attn_norm [d_model]`, `wq [n_heads*d_h, d_model]`,
//! `wk [n_kv_heads*d_h, d_model]`, `wv [n_kv_heads*d_h, d_model]`,
//! `wo [d_model, n_heads*d_h]`, `mlp_norm [d_model]`, `w_up [d_ff, d_model]`,
//! `w_down [d_model, d_ff]`, then `final_norm [d_model]` and
//! `lm_head [vocab, d_model]`. Matrices are row-major `[out, in]`.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{CormError, Result};
use crate::position::PeKind;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"CORMWTS1";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub token_embedding: Vec<f32>,
    pub position_table: Option<Vec<f32>>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Vec<f32>,
}

struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    /// `len` values uniform in `[-scale, scale)`, computed in f64 from a
    /// 53-bit uniform draw and rounded to f32.
    fn uniform(&mut self, len: usize, scale: f64) -> Vec<f32> {
        (0..len)
            .map(|_| ((self.rng.random::<f64>() * 2.0 - 1.0) * scale) as f32)
            .collect()
    }
}

impl Weights {
    /// Seeded initialization with `ChaCha8Rng::seed_from_u64(config.seed)`.
    /// Embedding and position tables are uniform in `[-1, 1)`; projection
    /// matrices uniform in `[-1/sqrt(d_model), 1/sqrt(d_model))`; norm gains
    /// are 1 and consume no draws. Matrices are drawn in payload order.
    pub fn init(config: &ModelConfig) -> Self {
        let mut s = Sampler {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let d = config.d_model;
        let d_h = config.head_dim();
        let q_dim = config.n_heads * d_h;
        let kv_dim = config.n_kv_heads * d_h;
        let ff = config.ff_dim();
        let scale = 1.0 / (d as f64).sqrt();

        let token_embedding = s.uniform(config.vocab_size * d, 1.0);
        let position_table = matches!(config.pe, PeKind::AbsoluteLearned)
            .then(|| s.uniform(config.max_positions * d, 1.0));
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: s.uniform(q_dim * d, scale),
                wk: s.uniform(kv_dim * d, scale),
                wv: s.uniform(kv_dim * d, scale),
                wo: s.uniform(d * q_dim, scale),
                mlp_norm: vec![1.0; d],
                w_up: s.uniform(ff * d, scale),
                w_down: s.uniform(d * ff, scale),
            })
            .collect();
        let final_norm = vec![1.0; d];
        let lm_head = s.uniform(config.vocab_size * d, scale);
        Weights {
            token_embedding,
            position_table,
            layers,
            final_norm,
            lm_head,
        }
    }

    fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.token_embedding];
        if let Some(p) = &self.position_table {
            out.push(p);
        }
        for l in &self.layers {
            out.extend([
                &l.attn_norm[..],
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.mlp_norm,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out: Vec<&mut Vec<f32>> = vec![&mut self.token_embedding];
        if let Some(p) = &mut self.position_table {
            out.push(p);
        }
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// CRC32 over the little-endian payload.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for t in self.tensors() {
            for x in t {
                h.update(&x.to_le_bytes());
            }
        }
        h.finalize()
    }

    /// Expected tensor lengths in payload order.
    fn expected_lengths(config: &ModelConfig) -> Vec<usize> {
        let d = config.d_model;
        let d_h = config.head_dim();
        let q_dim = config.n_heads * d_h;
        let kv_dim = config.n_kv_heads * d_h;
        let ff = config.ff_dim();
        let mut lens = vec![config.vocab_size * d];
        if matches!(config.pe, PeKind::AbsoluteLearned) {
            lens.push(config.max_positions * d);
        }
        for _ in 0..config.n_layers {
            lens.extend([
                d,
                q_dim * d,
                kv_dim * d,
                kv_dim * d,
                d * q_dim,
                d,
                ff * d,
                d * ff,
            ]);
        }
        lens.push(d);
        lens.push(config.vocab_size * d);
        lens
    }

    pub fn check_shape(&self, config: &ModelConfig) -> Result<()> {
        let want = Self::expected_lengths(config);
        let got: Vec<usize> = self.tensors().iter().map(|t| t.len()).collect();
        if want != got {
            return Err(CormError::Weights(format!(
                "tensor lengths {got:?} do not match config {want:?}"
            )));
        }
        Ok(())
    }

    fn header(config: &ModelConfig) -> [u32; 8] {
        let position_rows = if matches!(config.pe, PeKind::AbsoluteLearned) {
            config.max_positions
        } else {
            0
        };
        [
            config.n_layers,
            config.n_heads,
            config.n_kv_heads,
            config.d_model,
            config.ff_dim(),
            config.vocab_size,
            position_rows,
            0,
        ]
        .map(|v| v as u32)
    }

    pub fn write_to(&self, config: &ModelConfig, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(WEIGHTS_MAGIC)?;
        out.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        for v in Self::header(config) {
            out.write_all(&v.to_le_bytes())?;
        }
        for t in self.tensors() {
            let bytes: Vec<u8> = t.iter().flat_map(|x| x.to_le_bytes()).collect();
            out.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn save(&self, config: &ModelConfig, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| CormError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(config, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| CormError::io(path, e))
    }

    pub fn read_from(config: &ModelConfig, mut input: impl Read) -> Result<Self> {
        let err = |m: String| CormError::Weights(m);
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|e| err(format!("reading magic: {e}")))?;
        if &magic != WEIGHTS_MAGIC {
            return Err(err(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        let mut read_u32 = |input: &mut dyn Read| -> Result<u32> {
            input
                .read_exact(&mut word)
                .map_err(|e| err(format!("reading header: {e}")))?;
            Ok(u32::from_le_bytes(word))
        };
        let version = read_u32(&mut input)?;
        if version != WEIGHTS_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let mut header = [0u32; 8];
        for h in &mut header {
            *h = read_u32(&mut input)?;
        }
        if header != Self::header(config) {
            return Err(err(format!(
                "header {header:?} does not match config {:?}",
                Self::header(config)
            )));
        }
        let mut weights = Weights::init_shapes(config);
        for t in weights.tensors_mut() {
            let mut bytes = vec![0u8; t.len() * 4];
            input
                .read_exact(&mut bytes)
                .map_err(|e| err(format!("reading payload: {e}")))?;
            for (x, chunk) in t.iter_mut().zip(bytes.chunks_exact(4)) {
                *x = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            }
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(|e| err(e.to_string()))? != 0 {
            return Err(err("trailing bytes after payload".into()));
        }
        Ok(weights)
    }

    pub fn load(config: &ModelConfig, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| CormError::io(path, e))?;
        Self::read_from(config, std::io::BufReader::new(file))
    }

    fn init_shapes(config: &ModelConfig) -> Self {
        let lens = Self::expected_lengths(config);
        let mut it = lens.into_iter().map(|n| vec![0.0f32; n]);
        let mut next = || it.next().expect("enough tensors");
        let token_embedding = next();
        let position_table = matches!(config.pe, PeKind::AbsoluteLearned).then(&mut next);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let final_norm = next();
        let lm_head = next();
        Weights {
            token_embedding,
            position_table,
            layers,
            final_norm,
            lm_head,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_bytes() {
        let mut config = ModelConfig::toy(3);
        config.pe = PeKind::AbsoluteLearned;
        config.max_positions = 32;
        config.n_kv_heads = 2;
        let w = Weights::init(&config);
        let mut bytes = Vec::new();
        w.write_to(&config, &mut bytes).unwrap();
        let expected_len: usize = 44 + Weights::expected_lengths(&config).iter().sum::<usize>() * 4;
        assert_eq!(bytes.len(), expected_len);
        assert_eq!(Weights::read_from(&config, &bytes[..]).unwrap(), w);
    }

    #[test]
    fn rejects_mismatched_files() {
        let config = ModelConfig::toy(3);
        let w = Weights::init(&config);
        let mut bytes = Vec::new();
        w.write_to(&config, &mut bytes).unwrap();
        let mut other = config.clone();
        other.n_layers = 3;
        assert!(Weights::read_from(&other, &bytes[..]).is_err());
        assert!(Weights::read_from(&config, &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Weights::read_from(&config, &bad[..]).is_err());
        bytes.push(0);
        assert!(Weights::read_from(&config, &bytes[..]).is_err());
    }

    #[test]
    fn init_scale_and_shapes() {
        let config = ModelConfig::toy(1);
        let w = Weights::init(&config);
        w.check_shape(&config).unwrap();
        let bound = 1.0 / 8.0;
        assert!(w.layers[0].wq.iter().all(|x| x.abs() <= bound));
        assert!(w.token_embedding.iter().all(|x| x.abs() <= 1.0));
        assert!(w.layers[1].attn_norm.iter().all(|&g| g == 1.0));
    }
}
