//! Minimal differentiable decoder-only transformer.
//!
//! Parameters live in one flat `f64` buffer with a fixed layout (token
//! embedding, positional embedding, per-layer attention + feed-forward
//! weights, output projection). The flat layout keeps the optimizer,
//! finite-difference probes and the checkpoint format trivial. All math is
//! 64-bit; there is no GPU path, no mixed precision and no KV-cache
//! inference — greedy decoding just re-runs the forward pass.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use net::{backward, forward, forward_cached, greedy_decode, SeqCache};
pub use train::{
    loss_and_grad, mean_cross_entropy, train, AdamState, CrossEntropyObjective, LogitObjective,
    TrainConfig,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UlabError};
use crate::math;

/// Pre-softmax scores over the vocabulary for one sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(pub Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(UlabError::ShapeMismatch(
                "logit vector contains non-finite entries".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_probs(&self) -> ProbVector {
        ProbVector::from_logits(&self.0)
    }
}

impl std::ops::Deref for LogitVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A probability distribution over the vocabulary: entries in [0,1] summing
/// to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        let ok = values.iter().all(|&p| (-1e-12..=1.0 + 1e-12).contains(&p))
            && (sum - 1.0).abs() <= 1e-9;
        if !ok {
            return Err(UlabError::ShapeMismatch(format!(
                "not a probability vector (sum {sum})"
            )));
        }
        Ok(Self(values))
    }

    /// Max-subtracted softmax; always yields a valid distribution.
    pub fn from_logits(logits: &[f64]) -> Self {
        Self(math::softmax(logits))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for ProbVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Architecture hyperparameters. `d_model` must divide evenly into heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub d_ff: usize,
}

impl ModelConfig {
    /// Default desk-scale architecture: 2 layers, 2 heads, width 32,
    /// context 16. Seconds-scale training, enough capacity to memorize a
    /// few hundred facts.
    pub fn desk_default(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
            d_ff: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.max_seq_len == 0
            || self.d_ff == 0
        {
            return Err(UlabError::Config("all model dimensions must be nonzero".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(UlabError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn layer_params(&self) -> usize {
        4 * self.d_model * self.d_model + 2 * self.d_model * self.d_ff
    }

    pub fn n_params(&self) -> usize {
        self.vocab_size * self.d_model
            + self.max_seq_len * self.d_model
            + self.n_layers * self.layer_params()
            + self.d_model * self.vocab_size
    }
}

/// Offsets of each named tensor inside the flat parameter buffer.
/// Field order is the serialization order of the checkpoint format.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    cfg: ModelConfig,
}

impl Layout {
    pub fn new(cfg: ModelConfig) -> Self {
        Self { cfg }
    }

    /// Token embedding, |V|×d row-major (row = token id).
    pub fn tok_embed(&self) -> std::ops::Range<usize> {
        0..self.cfg.vocab_size * self.cfg.d_model
    }

    /// Positional embedding, L_max×d row-major.
    pub fn pos_embed(&self) -> std::ops::Range<usize> {
        let start = self.tok_embed().end;
        start..start + self.cfg.max_seq_len * self.cfg.d_model
    }

    fn layer_base(&self, layer: usize) -> usize {
        self.pos_embed().end + layer * self.cfg.layer_params()
    }

    /// Attention projections, each d×d row-major, applied as y = W·x.
    pub fn wq(&self, layer: usize) -> std::ops::Range<usize> {
        let d = self.cfg.d_model;
        let base = self.layer_base(layer);
        base..base + d * d
    }

    pub fn wk(&self, layer: usize) -> std::ops::Range<usize> {
        let d = self.cfg.d_model;
        let base = self.layer_base(layer) + d * d;
        base..base + d * d
    }

    pub fn wv(&self, layer: usize) -> std::ops::Range<usize> {
        let d = self.cfg.d_model;
        let base = self.layer_base(layer) + 2 * d * d;
        base..base + d * d
    }

    pub fn wo(&self, layer: usize) -> std::ops::Range<usize> {
        let d = self.cfg.d_model;
        let base = self.layer_base(layer) + 3 * d * d;
        base..base + d * d
    }

    /// First feed-forward matrix, d_ff×d row-major.
    pub fn w1(&self, layer: usize) -> std::ops::Range<usize> {
        let d = self.cfg.d_model;
        let base = self.layer_base(layer) + 4 * d * d;
        base..base + self.cfg.d_ff * d
    }

    /// Second feed-forward matrix, d×d_ff row-major.
    pub fn w2(&self, layer: usize) -> std::ops::Range<usize> {
        let d = self.cfg.d_model;
        let base = self.layer_base(layer) + 4 * d * d + self.cfg.d_ff * d;
        base..base + d * self.cfg.d_ff
    }

    /// Output projection, d×|V| row-major, applied as logits_v = Σ_r x_r W[r,v].
    pub fn out_proj(&self) -> std::ops::Range<usize> {
        let start = self.layer_base(self.cfg.n_layers);
        start..start + self.cfg.d_model * self.cfg.vocab_size
    }
}

/// The model: a config plus its flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub data: Vec<f64>,
}

impl ModelParams {
    /// Seeded Gaussian initialization, σ = 0.02.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..config.n_params())
            .map(|_| math::gaussian(&mut rng, 0.02))
            .collect();
        Ok(Self { config, data })
    }

    /// All-zero parameters (the σ→0 limit; every logit is exactly zero).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            data: vec![0.0; config.n_params()],
            config,
        })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.config)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat gradient buffer with the same layout as the parameters.
    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_ranges_partition_the_buffer() {
        let cfg = ModelConfig::desk_default(37);
        let layout = Layout::new(cfg);
        let mut next = 0;
        let mut expect = |r: std::ops::Range<usize>| {
            assert_eq!(r.start, next, "ranges must be contiguous");
            next = r.end;
        };
        expect(layout.tok_embed());
        expect(layout.pos_embed());
        for l in 0..cfg.n_layers {
            expect(layout.wq(l));
            expect(layout.wk(l));
            expect(layout.wv(l));
            expect(layout.wo(l));
            expect(layout.w1(l));
            expect(layout.w2(l));
        }
        expect(layout.out_proj());
        assert_eq!(next, cfg.n_params());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::desk_default(20);
        let a = ModelParams::init(cfg, 5).unwrap();
        let b = ModelParams::init(cfg, 5).unwrap();
        let c = ModelParams::init(cfg, 6).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn prob_vector_rejects_bad_sums() {
        assert!(ProbVector::new(vec![0.5, 0.4]).is_err());
        assert!(ProbVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVector::new(vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::desk_default(10)
        };
        assert!(cfg.validate().is_err());
    }
}
