//! Plain SGD on next-token cross-entropy, used to turn a random init into a
//! fixture whose pruning decisions mean something.

use serde::{Deserialize, Serialize};

use crate::data::PAD;
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::rng::XorShift64Star;

use super::forward::{causal_attention, ffn_activations, rms_norm, sigmoid, FfnActivations, RopeTable};
use super::{FfnKind, LayerWeights, ToyTransformer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 0.5, seed: 0, batch_size: 4, seq_len: 64 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ToyTransformer,
    /// Mean loss on a fixed probe batch before training.
    pub initial_loss: f64,
    /// Same probe batch after training.
    pub final_loss: f64,
    /// Training-batch loss at every step, before that step's update.
    pub step_losses: Vec<f64>,
}

/// Mean next-token cross-entropy of `model` over `sequences` (PAD targets
/// skipped).
pub fn cross_entropy(model: &ToyTransformer, sequences: &[Vec<u32>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for seq in sequences {
        let logits = model.forward(seq)?;
        for t in 0..seq.len().saturating_sub(1) {
            let target = seq[t + 1];
            if target == PAD {
                continue;
            }
            nll += -log_softmax_at(logits.row(t), target as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoTargets);
    }
    Ok(nll / count as f64)
}

fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row[target] as f64 - lse
}

fn sample_batch(rng: &mut XorShift64Star, corpus: &[u32], batch: usize, seq_len: usize) -> Vec<Vec<u32>> {
    let span = corpus.len() - seq_len;
    (0..batch)
        .map(|_| {
            let start = rng.below(span as u64 + 1) as usize;
            corpus[start..start + seq_len].to_vec()
        })
        .collect()
}

/// Trains a copy of `model` with plain SGD: each step draws `batch_size`
/// windows of `seq_len` tokens at seeded offsets, averages the loss over
/// every non-PAD target and subtracts `lr` times the gradient.
pub fn train_toy(model: &ToyTransformer, corpus: &[u32], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.seq_len < 2 || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("training needs seq_len >= 2 and batch_size >= 1".into()));
    }
    if cfg.seq_len > model.config.max_context {
        return Err(Error::ContextOverflow { len: cfg.seq_len, max: model.config.max_context });
    }
    if corpus.len() < cfg.seq_len {
        return Err(Error::Corpus(format!(
            "training corpus has {} tokens, need at least {}",
            corpus.len(),
            cfg.seq_len
        )));
    }
    let mut probe_rng = XorShift64Star::new(cfg.seed ^ 0x5052_4F42_4521_u64);
    let probe = sample_batch(&mut probe_rng, corpus, cfg.batch_size.max(4), cfg.seq_len);

    let mut model = model.clone();
    let initial_loss = cross_entropy(&model, &probe)?;
    let mut rng = XorShift64Star::new(cfg.seed);
    let mut step_losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = sample_batch(&mut rng, corpus, cfg.batch_size, cfg.seq_len);
        let (loss, grad) = loss_and_grad(&model, &batch)?;
        step_losses.push(loss);
        for (p, g) in model.params_mut().into_iter().zip(grad.params()) {
            for (w, d) in p.iter_mut().zip(g) {
                *w -= cfg.lr * d;
            }
        }
    }
    if model.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("weights after training (lower the learning rate)".into()));
    }
    let final_loss = if cfg.steps == 0 { initial_loss } else { cross_entropy(&model, &probe)? };
    Ok(TrainOutcome { model, initial_loss, final_loss, step_losses })
}

impl ToyTransformer {
    /// Every trainable buffer in a fixed order.
    pub(crate) fn params(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.token_embedding.data()];
        for l in &self.layers {
            out.extend([l.wq.data(), l.wk.data(), l.wv.data(), l.wo.data()]);
            if let Some(g) = &l.gate {
                out.push(g.data());
            }
            out.extend([l.up.data(), l.down.data(), &l.attn_norm[..], &l.ffn_norm[..]]);
        }
        out.extend([&self.final_norm[..], self.lm_head.data()]);
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![self.token_embedding.data_mut()];
        for l in &mut self.layers {
            out.extend([l.wq.data_mut(), l.wk.data_mut(), l.wv.data_mut(), l.wo.data_mut()]);
            if let Some(g) = &mut l.gate {
                out.push(g.data_mut());
            }
            out.extend([l.up.data_mut(), l.down.data_mut(), &mut l.attn_norm[..], &mut l.ffn_norm[..]]);
        }
        out.extend([&mut self.final_norm[..], self.lm_head.data_mut()]);
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.fill(0.0);
        }
        z
    }
}

struct LayerCache {
    x_in: Matrix,
    inv_a: Vec<f64>,
    h_a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Vec<f64>>,
    ctx: Matrix,
    x_mid: Matrix,
    inv_f: Vec<f64>,
    h_f: Matrix,
    ffn: Option<FfnActivations>,
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    dst.add_assign(src).expect("gradient shapes match parameters");
}

fn add_vec(dst: &mut [f32], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s as f32;
    }
}

/// Gradient of RMSNorm given upstream `dy`; returns `dx` and the scale
/// gradient.
fn rms_norm_backward(x: &Matrix, scale: &[f32], inv: &[f64], dy: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols();
    let mut dx = Matrix::zeros(x.rows(), d);
    let mut dscale = vec![0.0f64; d];
    for r in 0..x.rows() {
        let (xr, dyr, k) = (x.row(r), dy.row(r), inv[r]);
        let mut proj = 0.0f64;
        for j in 0..d {
            let (xj, dyj) = (xr[j] as f64, dyr[j] as f64);
            proj += dyj * scale[j] as f64 * xj;
            dscale[j] += dyj * xj * k;
        }
        let c = k * k * k * proj / d as f64;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = (k * dyr[j] as f64 * scale[j] as f64 - c * xr[j] as f64) as f32;
        }
    }
    (dx, dscale)
}

fn attention_backward(
    cache: &LayerCache,
    dctx: &Matrix,
    group: usize,
    head_dim: usize,
) -> (Matrix, Matrix, Matrix) {
    let t_len = cache.q.rows();
    let (q, k, v) = (&cache.q, &cache.k, &cache.v);
    let mut dq = vec![0.0f64; q.len()];
    let mut dk = vec![0.0f64; k.len()];
    let mut dv = vec![0.0f64; v.len()];
    let (qw, kw) = (q.cols(), k.cols());
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    let mut dp = vec![0.0f64; t_len];
    for (qh, probs) in cache.probs.iter().enumerate() {
        let j = qh / group;
        let qc = qh * head_dim;
        let kc = j * head_dim;
        for t in 0..t_len {
            let d_out = &dctx.row(t)[qc..qc + head_dim];
            let p_row = &probs[t * t_len..t * t_len + t + 1];
            let mut mean = 0.0f64;
            for u in 0..=t {
                let vu = &v.row(u)[kc..kc + head_dim];
                let s: f64 = d_out.iter().zip(vu).map(|(&a, &b)| a as f64 * b as f64).sum();
                dp[u] = s;
                mean += p_row[u] * s;
                for (i, &g) in d_out.iter().enumerate() {
                    dv[u * kw + kc + i] += p_row[u] * g as f64;
                }
            }
            let qt = &q.row(t)[qc..qc + head_dim];
            for u in 0..=t {
                let ds = p_row[u] * (dp[u] - mean) * inv_sqrt;
                if ds == 0.0 {
                    continue;
                }
                let ku = &k.row(u)[kc..kc + head_dim];
                for i in 0..head_dim {
                    dq[t * qw + qc + i] += ds * ku[i] as f64;
                    dk[u * kw + kc + i] += ds * qt[i] as f64;
                }
            }
        }
    }
    let to_m = |rows, cols, d: &[f64]| Matrix::from_f64(rows, cols, d).expect("finite gradients");
    (to_m(t_len, qw, &dq), to_m(t_len, kw, &dk), to_m(t_len, kw, &dv))
}

fn ffn_backward(
    lw: &LayerWeights,
    kind: FfnKind,
    acts: &FfnActivations,
    h_f: &Matrix,
    dout: &Matrix,
    grad: &mut LayerWeights,
) -> Result<Matrix> {
    add_into(&mut grad.down, &matmul_tn(&acts.z, dout)?);
    let dz = matmul_nt(dout, &lw.down)?;
    let mut du = Matrix::zeros(dz.rows(), dz.cols());
    let mut dh = match kind {
        FfnKind::Gated => {
            let gate_pre = acts.gate_pre.as_ref().expect("gated activations");
            let mut dg = Matrix::zeros(dz.rows(), dz.cols());
            for i in 0..dz.len() {
                let g = gate_pre.data()[i] as f64;
                let u = acts.up_pre.data()[i] as f64;
                let d = dz.data()[i] as f64;
                let s = sigmoid(g);
                du.data_mut()[i] = (d * g * s) as f32;
                dg.data_mut()[i] = (d * u * s * (1.0 + g * (1.0 - s))) as f32;
            }
            let gate = lw.gate.as_ref().expect("gated layer");
            add_into(grad.gate.as_mut().expect("gated grad"), &matmul_tn(h_f, &dg)?);
            matmul_nt(&dg, gate)?
        }
        FfnKind::Plain => {
            for i in 0..dz.len() {
                if acts.up_pre.data()[i] > 0.0 {
                    du.data_mut()[i] = dz.data()[i];
                }
            }
            Matrix::zeros(dz.rows(), h_f.cols())
        }
    };
    add_into(&mut grad.up, &matmul_tn(h_f, &du)?);
    add_into(&mut dh, &matmul_nt(&du, &lw.up)?);
    Ok(dh)
}

/// Mean cross-entropy over the batch and its gradient, laid out as a model.
pub(crate) fn loss_and_grad(model: &ToyTransformer, batch: &[Vec<u32>]) -> Result<(f64, ToyTransformer)> {
    let c = &model.config;
    let count: usize = batch
        .iter()
        .map(|s| s.iter().skip(1).filter(|&&t| t != PAD).count())
        .sum();
    if count == 0 {
        return Err(Error::NoTargets);
    }
    let mut grad = model.zeros_like();
    let mut total_nll = 0.0f64;
    let g = c.group_size();

    for seq in batch {
        let t_len = seq.len();
        let rope = RopeTable::new(t_len, c.head_dim, c.rope_theta);
        let mut x = model.embed(seq)?;
        let mut caches = Vec::with_capacity(model.layers.len());
        for lw in &model.layers {
            let x_in = x.clone();
            let (h_a, inv_a) = rms_norm(&x, &lw.attn_norm, c.norm_eps);
            let mut cache = LayerCache {
                x_in,
                inv_a,
                h_a,
                q: Matrix::zeros(0, 0),
                k: Matrix::zeros(0, 0),
                v: Matrix::zeros(0, 0),
                probs: Vec::new(),
                ctx: Matrix::zeros(0, 0),
                x_mid: Matrix::zeros(0, 0),
                inv_f: Vec::new(),
                h_f: Matrix::zeros(0, 0),
                ffn: None,
            };
            if lw.kv_live() > 0 {
                let mut q = matmul(&cache.h_a, &lw.wq)?;
                let mut k = matmul(&cache.h_a, &lw.wk)?;
                let v = matmul(&cache.h_a, &lw.wv)?;
                rope.apply(&mut q, false);
                rope.apply(&mut k, false);
                let active = vec![true; lw.kv_live()];
                let ctx = causal_attention(&q, &k, &v, &active, g, c.head_dim, Some(&mut cache.probs));
                x.add_assign(&matmul(&ctx, &lw.wo)?)?;
                cache.q = q;
                cache.k = k;
                cache.v = v;
                cache.ctx = ctx;
            }
            cache.x_mid = x.clone();
            let (h_f, inv_f) = rms_norm(&x, &lw.ffn_norm, c.norm_eps);
            if lw.ff_live() > 0 {
                let acts = ffn_activations(lw, c.ffn_kind, &h_f)?;
                x.add_assign(&matmul(&acts.z, &lw.down)?)?;
                cache.ffn = Some(acts);
            }
            cache.h_f = h_f;
            cache.inv_f = inv_f;
            caches.push(cache);
        }
        let (h_out, inv_out) = rms_norm(&x, &model.final_norm, c.norm_eps);
        let logits = matmul(&h_out, &model.lm_head)?;

        let mut dlogits = Matrix::zeros(t_len, c.vocab_size);
        for t in 0..t_len - 1 {
            let target = seq[t + 1];
            if target == PAD {
                continue;
            }
            let row = logits.row(t);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            total_nll += sum.ln() + max - row[target as usize] as f64;
            for (j, d) in dlogits.row_mut(t).iter_mut().enumerate() {
                let p = (row[j] as f64 - max).exp() / sum;
                let y = if j == target as usize { 1.0 } else { 0.0 };
                *d = ((p - y) / count as f64) as f32;
            }
        }

        add_into(&mut grad.lm_head, &matmul_tn(&h_out, &dlogits)?);
        let dh = matmul_nt(&dlogits, &model.lm_head)?;
        let (mut dx, dscale) = rms_norm_backward(&x, &model.final_norm, &inv_out, &dh);
        add_vec(&mut grad.final_norm, &dscale);

        for (li, (lw, cache)) in model.layers.iter().zip(&caches).enumerate().rev() {
            let gl = &mut grad.layers[li];
            if let Some(acts) = &cache.ffn {
                let dh_f = ffn_backward(lw, c.ffn_kind, acts, &cache.h_f, &dx, gl)?;
                let (dmid, dscale) = rms_norm_backward(&cache.x_mid, &lw.ffn_norm, &cache.inv_f, &dh_f);
                add_vec(&mut gl.ffn_norm, &dscale);
                dx.add_assign(&dmid)?;
            }
            if lw.kv_live() > 0 {
                add_into(&mut gl.wo, &matmul_tn(&cache.ctx, &dx)?);
                let dctx = matmul_nt(&dx, &lw.wo)?;
                let (mut dq, mut dk, dv) = attention_backward(cache, &dctx, g, c.head_dim);
                rope.apply(&mut dq, true);
                rope.apply(&mut dk, true);
                add_into(&mut gl.wq, &matmul_tn(&cache.h_a, &dq)?);
                add_into(&mut gl.wk, &matmul_tn(&cache.h_a, &dk)?);
                add_into(&mut gl.wv, &matmul_tn(&cache.h_a, &dv)?);
                let mut dh_a = matmul_nt(&dq, &lw.wq)?;
                dh_a.add_assign(&matmul_nt(&dk, &lw.wk)?)?;
                dh_a.add_assign(&matmul_nt(&dv, &lw.wv)?)?;
                let (din, dscale) = rms_norm_backward(&cache.x_in, &lw.attn_norm, &cache.inv_a, &dh_a);
                add_vec(&mut gl.attn_norm, &dscale);
                dx.add_assign(&din)?;
            }
        }
        for (t, &tok) in seq.iter().enumerate() {
            let row = grad.token_embedding.row_mut(tok as usize);
            for (r, &d) in row.iter_mut().zip(dx.row(t)) {
                *r += d;
            }
        }
    }
    Ok((total_nll / count as f64, grad))
}
