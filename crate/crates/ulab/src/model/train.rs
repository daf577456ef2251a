//! Adam training loop and the generic loss-and-gradient entry point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, UlabError};
use crate::math;

use super::{backward, forward, forward_cached, LogitVector, ModelParams};

/// Loss threshold beyond which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// A scalar objective over one sequence's per-position logits, together with
/// its analytic logit gradient. Implementations receive the index of the
/// sequence inside the batch so they can look up per-sequence context
/// (targets, frozen reference logits) captured at construction time.
pub trait LogitObjective {
    fn eval(&self, seq_index: usize, logits: &[LogitVector]) -> (f64, Vec<Vec<f64>>);
}

/// Next-token cross-entropy, averaged over the predicting positions of each
/// sequence.
pub struct CrossEntropyObjective<'a> {
    pub batch: &'a [Vec<usize>],
}

impl LogitObjective for CrossEntropyObjective<'_> {
    fn eval(&self, seq_index: usize, logits: &[LogitVector]) -> (f64, Vec<Vec<f64>>) {
        let seq = &self.batch[seq_index];
        let n_pred = seq.len().saturating_sub(1);
        let mut d_logits: Vec<Vec<f64>> = logits.iter().map(|lv| vec![0.0; lv.len()]).collect();
        if n_pred == 0 {
            return (0.0, d_logits);
        }
        let scale = 1.0 / n_pred as f64;
        let mut values = Vec::with_capacity(n_pred);
        for t in 0..n_pred {
            let target = seq[t + 1];
            let logp = math::log_softmax(&logits[t]);
            values.push(-logp[target]);
            let probs = math::softmax(&logits[t]);
            for (j, g) in d_logits[t].iter_mut().enumerate() {
                *g = probs[j] * scale;
            }
            d_logits[t][target] -= scale;
        }
        (math::mean(&values), d_logits)
    }
}

/// Evaluates `objective` on a batch of sequences and returns the batch-mean
/// loss with its gradient over the flat parameter buffer.
pub fn loss_and_grad(
    params: &ModelParams,
    objective: &dyn LogitObjective,
    batch: &[Vec<usize>],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(UlabError::Config("empty batch".into()));
    }
    let mut grad = params.zeros_like();
    let mut values = Vec::with_capacity(batch.len());
    let batch_scale = 1.0 / batch.len() as f64;
    for (i, seq) in batch.iter().enumerate() {
        let (logits, cache) = forward_cached(params, seq)?;
        let (value, mut d_logits) = objective.eval(i, &logits);
        if !value.is_finite() {
            return Err(UlabError::NonFiniteLoss { batch_index: i });
        }
        for row in &mut d_logits {
            for g in row.iter_mut() {
                *g *= batch_scale;
            }
        }
        backward(params, &cache, &d_logits, &mut grad);
        values.push(value);
    }
    Ok((math::mean(&values), grad))
}

/// Optimizer configuration for [`train`]. Adam moments are fixed at
/// (0.9, 0.999) with ε = 1e-8 and no weight decay; only the learning rate
/// is ever swept.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            epochs: 300,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Adam with bias correction over the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Seeded Fisher-Yates shuffle; the one shuffle used everywhere so training
/// order is reproducible from the seed alone.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Trains with next-token cross-entropy on the given facts. Deterministic
/// given the seed; `epochs = 0` returns the parameters unchanged.
pub fn train(mut params: ModelParams, facts: &[Vec<usize>], cfg: &TrainConfig) -> Result<ModelParams> {
    if facts.is_empty() {
        return Err(UlabError::Config("cannot train on an empty fact set".into()));
    }
    if cfg.epochs == 0 {
        return Ok(params);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(params.data.len());
    let mut order: Vec<usize> = (0..facts.len()).collect();
    let batch_size = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| facts[i].clone()).collect();
            let objective = CrossEntropyObjective { batch: &batch };
            let (loss, grad) = loss_and_grad(&params, &objective, &batch)?;
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                return Err(UlabError::Divergence { epoch, loss });
            }
            adam.step(&mut params.data, &grad, cfg.lr);
            epoch_losses.push(loss);
        }
        eprintln!("train epoch {epoch}: ce {:.6}", math::mean(&epoch_losses));
    }
    if !params.is_finite() {
        return Err(UlabError::Divergence {
            epoch: cfg.epochs - 1,
            loss: f64::NAN,
        });
    }
    Ok(params)
}

/// Mean next-token cross-entropy in nats/token, pooled over every predicting
/// position of every fact.
pub fn mean_cross_entropy(params: &ModelParams, facts: &[Vec<usize>]) -> Result<f64> {
    let mut values = Vec::new();
    for fact in facts {
        let logits = forward(params, fact)?;
        for t in 0..fact.len().saturating_sub(1) {
            let logp = math::log_softmax(&logits[t]);
            values.push(-logp[fact[t + 1]]);
        }
    }
    Ok(math::mean(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_facts() -> Vec<Vec<usize>> {
        // Six deterministic 5-token "facts" over a vocab of 12.
        (0..6)
            .map(|i| vec![0, 3 + i, 9, 3 + (i * 5) % 6, 1])
            .collect()
    }

    #[test]
    fn zero_epochs_returns_initialization_unchanged() {
        let cfg = ModelConfig::desk_default(12);
        let params = ModelParams::init(cfg, 3).unwrap();
        let before = params.data.clone();
        let trained = train(
            params,
            &toy_facts(),
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(trained.data, before);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cfg = ModelConfig::desk_default(12);
        let tc = TrainConfig {
            epochs: 5,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(ModelParams::init(cfg, 3).unwrap(), &toy_facts(), &tc).unwrap();
        let b = train(ModelParams::init(cfg, 3).unwrap(), &toy_facts(), &tc).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn training_memorizes_the_toy_facts() {
        let cfg = ModelConfig::desk_default(12);
        let facts = toy_facts();
        let trained = train(
            ModelParams::init(cfg, 3).unwrap(),
            &facts,
            &TrainConfig {
                epochs: 200,
                seed: 11,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let ce = mean_cross_entropy(&trained, &facts).unwrap();
        assert!(ce < 0.1, "expected memorization, got ce {ce}");
        // Trained-to-convergence argmax reproduces each fact's value token.
        for fact in &facts {
            let logits = forward(&trained, &fact[..3]).unwrap();
            let last = logits.last().unwrap();
            let pred = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(pred, fact[3]);
        }
    }

    #[test]
    fn divergence_reports_epoch() {
        let cfg = ModelConfig::desk_default(12);
        let params = ModelParams::init(cfg, 3).unwrap();
        // An absurd learning rate forces non-finite or exploding loss.
        let result = train(
            params,
            &toy_facts(),
            &TrainConfig {
                lr: 1e6,
                epochs: 50,
                ..TrainConfig::default()
            },
        );
        match result {
            Err(UlabError::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        struct Constant;
        impl LogitObjective for Constant {
            fn eval(&self, _: usize, logits: &[LogitVector]) -> (f64, Vec<Vec<f64>>) {
                (7.5, logits.iter().map(|lv| vec![0.0; lv.len()]).collect())
            }
        }
        let params = ModelParams::init(ModelConfig::desk_default(12), 3).unwrap();
        let (loss, grad) = loss_and_grad(&params, &Constant, &toy_facts()).unwrap();
        assert_eq!(loss, 7.5);
        assert!(grad.iter().all(|&g| g == 0.0));
    }
}
