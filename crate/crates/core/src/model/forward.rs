use crate::error::{Error, Result};
use crate::linalg::{dot, matmul, Matrix};

use super::{FfnKind, HeadMask, LayerWeights, ToyTransformer};

/// Post-activation FFN intermediate of one layer, rows aligned with the
/// input tokens. This is exactly the input of the down projection.
pub type FfnTap = Matrix;

/// RMSNorm in `f64`: returns the normalized, scaled rows and each row's
/// reciprocal RMS.
pub(crate) fn rms_norm(x: &Matrix, scale: &[f32], eps: f64) -> (Matrix, Vec<f64>) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
        let k = 1.0 / (ms + eps).sqrt();
        inv.push(k);
        for ((o, &v), &s) in out.row_mut(r).iter_mut().zip(row).zip(scale) {
            *o = (v as f64 * k * s as f64) as f32;
        }
    }
    (out, inv)
}

/// Cosine and sine of every (position, frequency) pair.
pub(crate) struct RopeTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub(crate) fn new(positions: usize, head_dim: usize, theta: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for t in 0..positions {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = t as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates adjacent pairs `(2i, 2i+1)` of every head block in place.
    /// `inverse` applies the transpose rotation (used by backprop).
    pub(crate) fn apply(&self, m: &mut Matrix, inverse: bool) {
        let hd = self.half * 2;
        let n_heads = m.cols() / hd;
        for t in 0..m.rows() {
            let cos = &self.cos[t * self.half..(t + 1) * self.half];
            let sin = &self.sin[t * self.half..(t + 1) * self.half];
            let row = m.row_mut(t);
            for h in 0..n_heads {
                let block = &mut row[h * hd..(h + 1) * hd];
                for i in 0..self.half {
                    let (a, b) = (block[2 * i] as f64, block[2 * i + 1] as f64);
                    let s = if inverse { -sin[i] } else { sin[i] };
                    block[2 * i] = (a * cos[i] - b * s) as f32;
                    block[2 * i + 1] = (a * s + b * cos[i]) as f32;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Causal attention over already-rotated `q`, `k` and `v`.
///
/// `active[j]` says whether live KV head `j` participates; inactive heads
/// leave their query-group columns of the context at zero. When `probs` is
/// given, every query head's `T×T` attention matrix is stored there (rows
/// above the diagonal stay zero).
pub(crate) fn causal_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    active: &[bool],
    group: usize,
    head_dim: usize,
    mut probs: Option<&mut Vec<Vec<f64>>>,
) -> Matrix {
    let t_len = q.rows();
    let mut ctx = Matrix::zeros(t_len, q.cols());
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    let mut scores = vec![0.0f64; t_len];
    let mut acc = vec![0.0f64; head_dim];
    if let Some(p) = probs.as_deref_mut() {
        p.clear();
    }
    for (j, &on) in active.iter().enumerate() {
        let kv_cols = j * head_dim..(j + 1) * head_dim;
        for g in 0..group {
            let qh = j * group + g;
            let q_cols = qh * head_dim..(qh + 1) * head_dim;
            let mut head_probs = probs.as_ref().map(|_| vec![0.0f64; t_len * t_len]);
            if on {
                for t in 0..t_len {
                    let qt = &q.row(t)[q_cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for u in 0..=t {
                        let s = dot(qt, &k.row(u)[kv_cols.clone()]) * inv_sqrt;
                        scores[u] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0f64;
                    for s in &mut scores[..=t] {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    acc.fill(0.0);
                    for u in 0..=t {
                        let p = scores[u] / sum;
                        if let Some(hp) = head_probs.as_mut() {
                            hp[t * t_len + u] = p;
                        }
                        for (a, &vv) in acc.iter_mut().zip(&v.row(u)[kv_cols.clone()]) {
                            *a += p * vv as f64;
                        }
                    }
                    for (c, &a) in ctx.row_mut(t)[q_cols.clone()].iter_mut().zip(&acc) {
                        *c = a as f32;
                    }
                }
            }
            if let (Some(p), Some(hp)) = (probs.as_deref_mut(), head_probs) {
                p.push(hp);
            }
        }
    }
    ctx
}

/// FFN pre-activations and intermediate for normalized input `h`.
pub(crate) struct FfnActivations {
    pub gate_pre: Option<Matrix>,
    pub up_pre: Matrix,
    pub z: Matrix,
}

pub(crate) fn ffn_activations(layer: &LayerWeights, kind: FfnKind, h: &Matrix) -> Result<FfnActivations> {
    let up_pre = matmul(h, &layer.up)?;
    match kind {
        FfnKind::Gated => {
            let gate = layer.gate.as_ref().ok_or_else(|| Error::Header("gated layer without gate".into()))?;
            let gate_pre = matmul(h, gate)?;
            let mut z = Matrix::zeros(up_pre.rows(), up_pre.cols());
            for ((o, &g), &u) in z.data_mut().iter_mut().zip(gate_pre.data()).zip(up_pre.data()) {
                let g = g as f64;
                *o = (g * sigmoid(g) * u as f64) as f32;
            }
            Ok(FfnActivations { gate_pre: Some(gate_pre), up_pre, z })
        }
        FfnKind::Plain => {
            let mut z = up_pre.clone();
            for v in z.data_mut() {
                *v = v.max(0.0);
            }
            Ok(FfnActivations { gate_pre: None, up_pre, z })
        }
    }
}

impl ToyTransformer {
    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::ContextOverflow { len: tokens.len(), max: self.config.max_context });
        }
        let vocab = self.config.vocab_size;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange { token: bad, vocab });
        }
        Ok(())
    }

    /// Embedding rows for `tokens`: the residual stream entering layer 0.
    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        Ok(self.token_embedding.select_rows(&idx))
    }

    fn layer(&self, layer: usize) -> Result<&LayerWeights> {
        self.layers.get(layer).ok_or(Error::LayerOutOfRange(layer))
    }

    pub(crate) fn rope(&self, positions: usize) -> RopeTable {
        RopeTable::new(positions, self.config.head_dim, self.config.rope_theta)
    }

    /// `x + Attn(RMSNorm(x))` for one layer. `active` masks KV heads by
    /// original index; `None` means every live head.
    pub fn attention_residual(&self, layer: usize, x: &Matrix, active: Option<&[bool]>) -> Result<Matrix> {
        let lw = self.layer(layer)?;
        let flags: Vec<bool> = lw
            .kv_heads
            .iter()
            .map(|&orig| active.map_or(true, |a| a[orig]))
            .collect();
        let mut out = x.clone();
        if !flags.iter().any(|&f| f) {
            return Ok(out);
        }
        let c = &self.config;
        let (h, _) = rms_norm(x, &lw.attn_norm, c.norm_eps);
        let mut q = matmul(&h, &lw.wq)?;
        let mut k = matmul(&h, &lw.wk)?;
        let v = matmul(&h, &lw.wv)?;
        let rope = self.rope(x.rows());
        rope.apply(&mut q, false);
        rope.apply(&mut k, false);
        let ctx = causal_attention(&q, &k, &v, &flags, c.group_size(), c.head_dim, None);
        out.add_assign(&matmul(&ctx, &lw.wo)?)?;
        Ok(out)
    }

    /// The FFN intermediate `z` of one layer for residual-stream input `x`.
    pub fn ffn_intermediate(&self, layer: usize, x: &Matrix) -> Result<FfnTap> {
        let lw = self.layer(layer)?;
        let (h, _) = rms_norm(x, &lw.ffn_norm, self.config.norm_eps);
        Ok(ffn_activations(lw, self.config.ffn_kind, &h)?.z)
    }

    /// `x + z · down`, given this layer's intermediate `z`.
    pub fn ffn_residual_from(&self, layer: usize, x: &Matrix, z: &Matrix) -> Result<Matrix> {
        let lw = self.layer(layer)?;
        let mut out = x.clone();
        if lw.ff_live() > 0 {
            out.add_assign(&matmul(z, &lw.down)?)?;
        }
        Ok(out)
    }

    /// `x + FFN(RMSNorm(x))` for one layer.
    pub fn ffn_residual(&self, layer: usize, x: &Matrix) -> Result<Matrix> {
        if self.layer(layer)?.ff_live() == 0 {
            return Ok(x.clone());
        }
        let z = self.ffn_intermediate(layer, x)?;
        self.ffn_residual_from(layer, x, &z)
    }

    /// Final RMSNorm and LM head.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let (h, _) = rms_norm(x, &self.final_norm, self.config.norm_eps);
        matmul(&h, &self.lm_head)
    }

    fn run(&self, tokens: &[u32], mask: Option<&HeadMask>, tap: Option<usize>) -> Result<(Matrix, Option<Matrix>)> {
        if let Some(l) = tap {
            self.layer(l)?;
        }
        let mut x = self.embed(tokens)?;
        let mut z_tap = None;
        for l in 0..self.layers.len() {
            x = self.attention_residual(l, &x, mask.map(|m| m.layer(l)))?;
            if tap == Some(l) {
                let z = self.ffn_intermediate(l, &x)?;
                x = self.ffn_residual_from(l, &x, &z)?;
                z_tap = Some(z);
            } else {
                x = self.ffn_residual(l, &x)?;
            }
        }
        Ok((self.logits(&x)?, z_tap))
    }

    /// `T × vocab` logits for a token sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        Ok(self.run(tokens, None, None)?.0)
    }

    /// Logits plus the FFN intermediate of `layer` (`T × ff_live`).
    pub fn forward_with_tap(&self, tokens: &[u32], layer: usize) -> Result<(Matrix, FfnTap)> {
        let (logits, z) = self.run(tokens, None, Some(layer))?;
        Ok((logits, z.expect("tap layer validated")))
    }

    /// Forward with masked-off grouped heads contributing nothing, which is
    /// equivalent to physically removing them.
    pub fn apply_head_mask(&self, mask: &HeadMask, tokens: &[u32]) -> Result<Matrix> {
        mask.check(self)?;
        Ok(self.run(tokens, Some(mask), None)?.0)
    }
}
