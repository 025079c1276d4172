//! Fixtures and criterion checks shared by the integration test targets.
#![allow(dead_code)]

pub mod criteria;
pub mod gradcheck;

use mlrm::data::{Dataset, PairConfig, SynthConfig};
use mlrm::model::{Mode, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result of one criterion: whether it held and what was measured.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub ok: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(ok: bool, detail: impl Into<String>) -> Self {
        Outcome {
            ok,
            detail: detail.into(),
        }
    }

    /// Conjunction of several sub-checks, details joined with `; `.
    pub fn all(parts: Vec<Outcome>) -> Self {
        let ok = parts.iter().all(|p| p.ok);
        let detail = parts
            .iter()
            .map(|p| {
                if p.ok {
                    p.detail.clone()
                } else {
                    format!("FAILED {}", p.detail)
                }
            })
            .collect::<Vec<_>>()
            .join("; ");
        Outcome { ok, detail }
    }

    pub fn assert(&self) {
        assert!(self.ok, "{}", self.detail);
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A model small enough for finite differences and quick training runs,
/// with the synthetic generator's image geometry (16 patches × 32).
pub fn tiny_config(mode: Mode, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        h_v: 16,
        h_t: 16,
        patches: 16,
        d_raw: 32,
        l_c: 4,
        lm_layers: 2,
        lm_heads: 2,
        vision_layers: 1,
        vision_heads: 2,
        connector_layers: 1,
        connector_heads: 2,
        ffn_mult: 2,
        vocab_size,
        max_positions: 320,
        out_dim: 8,
        freeze_vision: true,
        mode,
    }
}

/// 300 notes in 3 clusters with a 60-note evaluation pool.
pub fn small_dataset(seed: u64) -> Dataset {
    Dataset::generate(
        &SynthConfig::new(seed, 300, 3, 1.0),
        &PairConfig::default(),
        60,
    )
    .expect("small synthetic dataset")
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
