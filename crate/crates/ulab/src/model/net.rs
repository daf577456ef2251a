//! Forward pass, activation cache and reverse-mode gradients.
//!
//! The backward pass takes d(loss)/d(logits) for every position and returns
//! gradients for the flat parameter buffer. Loss functions therefore only
//! need to supply their analytic logit gradient; everything below the logits
//! is handled here.

use crate::error::{Result, UlabError};
use crate::math;

use super::{LogitVector, ModelParams};

const RMS_EPS: f64 = 1e-8;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// y = W·x with W row-major rows×cols.
fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        y[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    y
}

/// Accumulates gradients for y = W·x: dW += dy⊗x, dx += Wᵀ·dy.
fn matvec_bwd(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], dx: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        let drow = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            drow[c] += g * x[c];
            dx[c] += row[c] * g;
        }
    }
}

/// y_c = Σ_r x_r·W[r,c] with W row-major rows×cols (the output projection).
fn matvec_t(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; cols];
    for r in 0..rows {
        let xv = x[r];
        if xv == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for c in 0..cols {
            y[c] += xv * row[c];
        }
    }
    y
}

fn matvec_t_bwd(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], dx: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let xv = x[r];
        let row = &w[r * cols..(r + 1) * cols];
        let drow = &mut dw[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            drow[c] += xv * dy[c];
            acc += row[c] * dy[c];
        }
        dx[r] += acc;
    }
}

/// Parameter-free RMS normalization. Returns (normed, 1/rms).
fn rmsnorm(x: &[f64]) -> (Vec<f64>, f64) {
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let ri = 1.0 / (ms + RMS_EPS).sqrt();
    (x.iter().map(|v| v * ri).collect(), ri)
}

fn rmsnorm_bwd(dy: &[f64], x: &[f64], ri: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let dot: f64 = dy.iter().zip(x).map(|(a, b)| a * b).sum();
    dy.iter()
        .zip(x)
        .map(|(dy_i, x_i)| ri * dy_i - (ri * ri * ri / n) * dot * x_i)
        .collect()
}

struct LayerCache {
    x_in: Vec<Vec<f64>>,
    norm1: Vec<Vec<f64>>,
    rms1: Vec<f64>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Attention rows per head: `aw[h][t]` has `t+1` weights.
    aw: Vec<Vec<Vec<f64>>>,
    head_concat: Vec<Vec<f64>>,
    x_mid: Vec<Vec<f64>>,
    norm2: Vec<Vec<f64>>,
    rms2: Vec<f64>,
    ff_pre: Vec<Vec<f64>>,
    ff_act: Vec<Vec<f64>>,
}

/// Activations recorded by [`forward_cached`] for one sequence.
pub struct SeqCache {
    ids: Vec<usize>,
    layers: Vec<LayerCache>,
    x_final: Vec<Vec<f64>>,
    final_norm: Vec<Vec<f64>>,
    final_rms: Vec<f64>,
}

impl SeqCache {
    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }
}

/// Causal forward pass: returns one logit vector per input position, where
/// position `t` saw only tokens `0..=t`.
pub fn forward(params: &ModelParams, context: &[usize]) -> Result<Vec<LogitVector>> {
    forward_cached(params, context).map(|(logits, _)| logits)
}

/// Forward pass that also records the activations needed by [`backward`].
pub fn forward_cached(params: &ModelParams, context: &[usize]) -> Result<(Vec<LogitVector>, SeqCache)> {
    let cfg = &params.config;
    let layout = params.layout();
    let t_len = context.len();
    if t_len > cfg.max_seq_len {
        return Err(UlabError::ContextTooLong {
            len: t_len,
            max: cfg.max_seq_len,
        });
    }
    for &id in context {
        if id >= cfg.vocab_size {
            return Err(UlabError::ShapeMismatch(format!(
                "token id {id} out of range for vocab of {}",
                cfg.vocab_size
            )));
        }
    }

    let d = cfg.d_model;
    let tok = &params.data[layout.tok_embed()];
    let pos = &params.data[layout.pos_embed()];

    let mut x: Vec<Vec<f64>> = context
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            let te = &tok[id * d..(id + 1) * d];
            let pe = &pos[t * d..(t + 1) * d];
            te.iter().zip(pe).map(|(a, b)| a + b).collect()
        })
        .collect();

    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);

    for l in 0..cfg.n_layers {
        let wq = &params.data[layout.wq(l)];
        let wk = &params.data[layout.wk(l)];
        let wv = &params.data[layout.wv(l)];
        let wo = &params.data[layout.wo(l)];
        let w1 = &params.data[layout.w1(l)];
        let w2 = &params.data[layout.w2(l)];

        let x_in = x.clone();
        let mut norm1 = Vec::with_capacity(t_len);
        let mut rms1 = Vec::with_capacity(t_len);
        for xt in &x_in {
            let (n, ri) = rmsnorm(xt);
            norm1.push(n);
            rms1.push(ri);
        }
        let q: Vec<Vec<f64>> = norm1.iter().map(|n| matvec(wq, n, d, d)).collect();
        let k: Vec<Vec<f64>> = norm1.iter().map(|n| matvec(wk, n, d, d)).collect();
        let v: Vec<Vec<f64>> = norm1.iter().map(|n| matvec(wv, n, d, d)).collect();

        let mut aw: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(t_len); heads];
        let mut head_concat = vec![vec![0.0; d]; t_len];
        for h in 0..heads {
            let span = h * hd..(h + 1) * hd;
            for t in 0..t_len {
                let qh = &q[t][span.clone()];
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        let kh = &k[s][span.clone()];
                        qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                let weights = math::softmax(&scores);
                for i in 0..hd {
                    head_concat[t][h * hd + i] = (0..=t)
                        .map(|s| weights[s] * v[s][h * hd + i])
                        .sum();
                }
                aw[h].push(weights);
            }
        }

        let mut x_mid = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let attn_out = matvec(wo, &head_concat[t], d, d);
            x_mid.push(x_in[t].iter().zip(&attn_out).map(|(a, b)| a + b).collect::<Vec<f64>>());
        }

        let mut norm2 = Vec::with_capacity(t_len);
        let mut rms2 = Vec::with_capacity(t_len);
        for xt in &x_mid {
            let (n, ri) = rmsnorm(xt);
            norm2.push(n);
            rms2.push(ri);
        }
        let ff_pre: Vec<Vec<f64>> = norm2.iter().map(|n| matvec(w1, n, cfg.d_ff, d)).collect();
        let ff_act: Vec<Vec<f64>> = ff_pre
            .iter()
            .map(|row| row.iter().map(|&p| gelu(p)).collect())
            .collect();

        let mut x_out = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let ff_out = matvec(w2, &ff_act[t], d, cfg.d_ff);
            x_out.push(x_mid[t].iter().zip(&ff_out).map(|(a, b)| a + b).collect::<Vec<f64>>());
        }

        layers.push(LayerCache {
            x_in,
            norm1,
            rms1,
            q,
            k,
            v,
            aw,
            head_concat,
            x_mid,
            norm2,
            rms2,
            ff_pre,
            ff_act,
        });
        x = x_out;
    }

    let x_final = x;
    let mut final_norm = Vec::with_capacity(t_len);
    let mut final_rms = Vec::with_capacity(t_len);
    for xt in &x_final {
        let (n, ri) = rmsnorm(xt);
        final_norm.push(n);
        final_rms.push(ri);
    }

    let w_out = &params.data[layout.out_proj()];
    let logits: Vec<LogitVector> = final_norm
        .iter()
        .map(|n| LogitVector(matvec_t(w_out, n, d, cfg.vocab_size)))
        .collect();

    let cache = SeqCache {
        ids: context.to_vec(),
        layers,
        x_final,
        final_norm,
        final_rms,
    };
    Ok((logits, cache))
}

/// Accumulates into `grad` the parameter gradient of any scalar whose
/// per-position logit gradients are `d_logits`.
pub fn backward(params: &ModelParams, cache: &SeqCache, d_logits: &[Vec<f64>], grad: &mut [f64]) {
    let cfg = &params.config;
    let layout = params.layout();
    let d = cfg.d_model;
    let t_len = cache.ids.len();
    assert_eq!(d_logits.len(), t_len, "one logit gradient per position");
    assert_eq!(grad.len(), params.data.len());

    let w_out = &params.data[layout.out_proj()];
    let out_range = layout.out_proj();

    // Output projection and final norm.
    let mut dx: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
    for t in 0..t_len {
        let mut d_fnorm = vec![0.0; d];
        matvec_t_bwd(
            w_out,
            &cache.final_norm[t],
            &d_logits[t],
            &mut grad[out_range.clone()],
            &mut d_fnorm,
            d,
            cfg.vocab_size,
        );
        dx[t] = rmsnorm_bwd(&d_fnorm, &cache.x_final[t], cache.final_rms[t]);
    }

    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];

        // MLP block: x_out = x_mid + W2·gelu(W1·norm2(x_mid)).
        let mut d_x_mid: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        for t in 0..t_len {
            let mut d_ff_act = vec![0.0; cfg.d_ff];
            {
                let w2 = &params.data[layout.w2(l)];
                let r = layout.w2(l);
                matvec_bwd(
                    w2,
                    &lc.ff_act[t],
                    &dx[t],
                    &mut grad[r],
                    &mut d_ff_act,
                    d,
                    cfg.d_ff,
                );
            }
            let d_ff_pre: Vec<f64> = d_ff_act
                .iter()
                .zip(&lc.ff_pre[t])
                .map(|(g, &p)| g * gelu_deriv(p))
                .collect();
            let mut d_norm2 = vec![0.0; d];
            {
                let w1 = &params.data[layout.w1(l)];
                let r = layout.w1(l);
                matvec_bwd(
                    w1,
                    &lc.norm2[t],
                    &d_ff_pre,
                    &mut grad[r],
                    &mut d_norm2,
                    cfg.d_ff,
                    d,
                );
            }
            let d_from_norm = rmsnorm_bwd(&d_norm2, &lc.x_mid[t], lc.rms2[t]);
            for i in 0..d {
                d_x_mid[t][i] = dx[t][i] + d_from_norm[i];
            }
        }

        // Attention block: x_mid = x_in + Wo·concat(heads(norm1(x_in))).
        let mut dq: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        let mut dk: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        let mut dv: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        let mut d_hc: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        for t in 0..t_len {
            let wo = &params.data[layout.wo(l)];
            let r = layout.wo(l);
            matvec_bwd(
                wo,
                &lc.head_concat[t],
                &d_x_mid[t],
                &mut grad[r],
                &mut d_hc[t],
                d,
                d,
            );
        }
        for h in 0..heads {
            let base = h * hd;
            for t in 0..t_len {
                let weights = &lc.aw[h][t];
                let mut d_aw = vec![0.0; t + 1];
                for s in 0..=t {
                    for i in 0..hd {
                        let g = d_hc[t][base + i];
                        d_aw[s] += g * lc.v[s][base + i];
                        dv[s][base + i] += weights[s] * g;
                    }
                }
                let dot: f64 = weights.iter().zip(&d_aw).map(|(a, b)| a * b).sum();
                for s in 0..=t {
                    let d_score = weights[s] * (d_aw[s] - dot);
                    for i in 0..hd {
                        dq[t][base + i] += d_score * lc.k[s][base + i] * scale;
                        dk[s][base + i] += d_score * lc.q[t][base + i] * scale;
                    }
                }
            }
        }

        for t in 0..t_len {
            let mut d_norm1 = vec![0.0; d];
            {
                let w = &params.data[layout.wq(l)];
                let r = layout.wq(l);
                matvec_bwd(w, &lc.norm1[t], &dq[t], &mut grad[r], &mut d_norm1, d, d);
            }
            {
                let w = &params.data[layout.wk(l)];
                let r = layout.wk(l);
                matvec_bwd(w, &lc.norm1[t], &dk[t], &mut grad[r], &mut d_norm1, d, d);
            }
            {
                let w = &params.data[layout.wv(l)];
                let r = layout.wv(l);
                matvec_bwd(w, &lc.norm1[t], &dv[t], &mut grad[r], &mut d_norm1, d, d);
            }
            let d_from_norm = rmsnorm_bwd(&d_norm1, &lc.x_in[t], lc.rms1[t]);
            for i in 0..d {
                dx[t][i] = d_x_mid[t][i] + d_from_norm[i];
            }
        }
    }

    // Embedding gradients.
    let tok_range = layout.tok_embed();
    let pos_range = layout.pos_embed();
    for t in 0..t_len {
        let id = cache.ids[t];
        for i in 0..d {
            grad[tok_range.start + id * d + i] += dx[t][i];
            grad[pos_range.start + t * d + i] += dx[t][i];
        }
    }
}

/// Greedy next-token decoding: appends the argmax token `steps` times (or
/// until the context window fills up) and returns only the new tokens.
pub fn greedy_decode(params: &ModelParams, context: &[usize], steps: usize) -> Result<Vec<usize>> {
    let mut ctx = context.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        if ctx.len() >= params.config.max_seq_len {
            break;
        }
        let logits = forward(params, &ctx)?;
        let last = logits.last().expect("nonempty context");
        let next = argmax(last);
        out.push(next);
        ctx.push(next);
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelParams {
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 8,
            d_ff: 16,
        };
        ModelParams::init(cfg, 42).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits_and_uniform_softmax() {
        let params = ModelParams::zeros(ModelConfig::desk_default(12)).unwrap();
        let logits = forward(&params, &[0, 3, 5]).unwrap();
        for lv in &logits {
            assert!(lv.iter().all(|&x| x == 0.0));
            let probs = lv.to_probs();
            for &p in probs.iter() {
                assert!((p - 1.0 / 12.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn causality_prefix_agreement() {
        let params = tiny();
        let a = forward(&params, &[1, 2, 3, 4, 5]).unwrap();
        let b = forward(&params, &[1, 2, 3, 9, 10]).unwrap();
        for t in 0..3 {
            assert_eq!(a[t].as_slice(), b[t].as_slice(), "position {t} saw identical prefixes");
        }
        assert_ne!(a[3].as_slice(), b[3].as_slice());
    }

    #[test]
    fn perturbing_a_late_token_leaves_earlier_logits_unchanged() {
        let params = tiny();
        let base = forward(&params, &[0, 1, 2, 3]).unwrap();
        for t in 1..4 {
            let mut ctx = vec![0, 1, 2, 3];
            ctx[t] = (ctx[t] + 5) % params.config.vocab_size;
            let perturbed = forward(&params, &ctx).unwrap();
            for earlier in 0..t {
                assert_eq!(base[earlier].as_slice(), perturbed[earlier].as_slice());
            }
        }
    }

    #[test]
    fn context_too_long_is_an_error() {
        let params = tiny();
        let ctx = vec![0usize; params.config.max_seq_len + 1];
        assert!(matches!(
            forward(&params, &ctx),
            Err(UlabError::ContextTooLong { .. })
        ));
    }

    #[test]
    fn softmax_of_logits_is_a_valid_distribution() {
        let params = tiny();
        let logits = forward(&params, &[3, 1, 4, 1, 5]).unwrap();
        for lv in &logits {
            let probs = lv.to_probs();
            let total: f64 = probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_cross_entropy() {
        // Smoke-level check here; the full multi-loss sweep lives in the
        // gradient-check integration suite.
        let params = tiny();
        let ctx = [1usize, 4, 7, 2];
        let targets = [4usize, 7, 2, 9];

        let loss_at = |p: &ModelParams| -> f64 {
            let logits = forward(p, &ctx).unwrap();
            let mut total = 0.0;
            for (t, lv) in logits.iter().enumerate() {
                let logp = crate::math::log_softmax(lv);
                total -= logp[targets[t]];
            }
            total / ctx.len() as f64
        };

        let (logits, cache) = forward_cached(&params, &ctx).unwrap();
        let mut d_logits = Vec::new();
        for (t, lv) in logits.iter().enumerate() {
            let probs = crate::math::softmax(lv);
            let mut g: Vec<f64> = probs.iter().map(|&p| p / ctx.len() as f64).collect();
            g[targets[t]] -= 1.0 / ctx.len() as f64;
            d_logits.push(g);
        }
        let mut grad = params.zeros_like();
        backward(&params, &cache, &d_logits, &mut grad);

        let mut rng_idx = 17usize;
        let h = 1e-4;
        for _ in 0..12 {
            rng_idx = (rng_idx * 7919 + 13) % params.data.len();
            let mut plus = params.clone();
            plus.data[rng_idx] += h;
            let mut minus = params.clone();
            minus.data[rng_idx] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let rel = (grad[rng_idx] - fd).abs() / (fd.abs() + 1e-8);
            assert!(
                rel < 1e-3,
                "coord {rng_idx}: analytic {} vs fd {fd} (rel {rel})",
                grad[rng_idx]
            );
        }
    }
}
