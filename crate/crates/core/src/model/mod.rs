//! A small pre-norm GQA transformer (RMSNorm, RoPE, SwiGLU or ReLU FFN)
//! with activation taps, head masks, structural surgery, a training loop for
//! fixtures and a binary file format.

mod forward;
mod io;
mod mask;
mod surgery;
mod train;

pub use forward::FfnTap;
pub use io::{load, save, MAGIC, VERSION};
pub use mask::HeadMask;
pub use train::{cross_entropy, train_toy, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::XorShift64Star;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// `down(silu(x·gate) ⊙ (x·up))`
    Gated,
    /// `fc2(relu(x·fc1))`; `fc1` is stored in the `up` slot.
    Plain,
}

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

fn default_max_context() -> usize {
    256
}

fn default_ffn_kind() -> FfnKind {
    FfnKind::Gated
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_ffn_kind")]
    pub ffn_kind: FfnKind,
    #[serde(default = "default_max_context")]
    pub max_context: usize,
}

impl ModelConfig {
    /// The bundled desk-scale preset.
    pub fn tiny() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_q_heads: 8,
            n_kv_heads: 2,
            head_dim: 8,
            d_ff: 256,
            vocab_size: crate::data::VOCAB_SIZE,
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
            ffn_kind: FfnKind::Gated,
            max_context: default_max_context(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_q_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if self.d_model != self.n_q_heads * self.head_dim {
            return Err(Error::InvalidConfig(format!(
                "d_model ({}) must equal n_q_heads * head_dim ({})",
                self.d_model,
                self.n_q_heads * self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::InvalidConfig("head_dim must be even for RoPE".into()));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(Error::InvalidConfig("rope_theta must be positive".into()));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::InvalidConfig("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    /// Parameters removed with one grouped head: a K and a V slice plus G
    /// query slices and the matching output rows.
    pub fn params_per_kv_head(&self) -> usize {
        2 * self.d_model * self.head_dim * (1 + self.group_size())
    }

    /// Parameters removed with one FFN intermediate node.
    pub fn params_per_ffn_node(&self) -> usize {
        match self.ffn_kind {
            FfnKind::Gated => 3 * self.d_model,
            FfnKind::Plain => 2 * self.d_model,
        }
    }

    pub fn ffn_params_per_layer(&self) -> usize {
        self.params_per_ffn_node() * self.d_ff
    }

    pub fn attn_params_per_layer(&self) -> usize {
        2 * self.d_model * self.n_q_heads * self.head_dim
            + 2 * self.d_model * self.n_kv_heads * self.head_dim
    }
}

/// Prunable parameter counts: FFN (`F`) and attention (`A`) projections.
/// Embeddings, the LM head and norm scales are not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub ffn: u64,
    pub attn: u64,
}

impl ParamCounts {
    pub fn total(&self) -> u64 {
        self.ffn + self.attn
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    /// `d_model × (q_live·head_dim)`
    pub wq: Matrix,
    /// `d_model × (kv_live·head_dim)`
    pub wk: Matrix,
    pub wv: Matrix,
    /// `(q_live·head_dim) × d_model`
    pub wo: Matrix,
    /// `d_model × ff_live`; `None` for a plain FFN.
    pub gate: Option<Matrix>,
    /// `d_model × ff_live`; holds `fc1` for a plain FFN.
    pub up: Matrix,
    /// `ff_live × d_model`
    pub down: Matrix,
    pub attn_norm: Vec<f32>,
    pub ffn_norm: Vec<f32>,
    /// Original indices of the live KV heads, ascending.
    pub kv_heads: Vec<usize>,
    /// Original indices of the live FFN nodes, ascending.
    pub ffn_nodes: Vec<usize>,
}

impl LayerWeights {
    pub fn kv_live(&self) -> usize {
        self.kv_heads.len()
    }

    pub fn ff_live(&self) -> usize {
        self.ffn_nodes.len()
    }

    pub fn param_counts(&self) -> ParamCounts {
        let attn = self.wq.len() + self.wk.len() + self.wv.len() + self.wo.len();
        let ffn = self.gate.as_ref().map_or(0, Matrix::len) + self.up.len() + self.down.len();
        ParamCounts { ffn: ffn as u64, attn: attn as u64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTransformer {
    pub config: ModelConfig,
    /// `vocab × d_model`
    pub token_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `d_model × vocab`
    pub lm_head: Matrix,
}

fn uniform_matrix(rng: &mut XorShift64Star, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let scale = 1.0 / (fan_in as f32).sqrt();
    let data = (0..rows * cols).map(|_| rng.symmetric(scale)).collect();
    Matrix::new(rows, cols, data).expect("finite by construction")
}

impl ToyTransformer {
    /// Random initialization: every matrix entry is uniform in
    /// `[-1/√fan_in, 1/√fan_in)` from [`XorShift64Star`], drawn in a fixed
    /// order (embedding, then per layer wq, wk, wv, wo, gate, up, down, then
    /// the LM head). Norm scales start at 1.
    pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = XorShift64Star::new(seed);
        let token_embedding = uniform_matrix(&mut rng, c.vocab_size, c.d_model, c.d_model);
        let q_width = c.n_q_heads * c.head_dim;
        let kv_width = c.n_kv_heads * c.head_dim;
        let layers = (0..c.n_layers)
            .map(|_| LayerWeights {
                wq: uniform_matrix(&mut rng, c.d_model, q_width, c.d_model),
                wk: uniform_matrix(&mut rng, c.d_model, kv_width, c.d_model),
                wv: uniform_matrix(&mut rng, c.d_model, kv_width, c.d_model),
                wo: uniform_matrix(&mut rng, q_width, c.d_model, q_width),
                gate: match c.ffn_kind {
                    FfnKind::Gated => Some(uniform_matrix(&mut rng, c.d_model, c.d_ff, c.d_model)),
                    FfnKind::Plain => None,
                },
                up: uniform_matrix(&mut rng, c.d_model, c.d_ff, c.d_model),
                down: uniform_matrix(&mut rng, c.d_ff, c.d_model, c.d_ff),
                attn_norm: vec![1.0; c.d_model],
                ffn_norm: vec![1.0; c.d_model],
                kv_heads: (0..c.n_kv_heads).collect(),
                ffn_nodes: (0..c.d_ff).collect(),
            })
            .collect();
        let lm_head = uniform_matrix(&mut rng, c.d_model, c.vocab_size, c.d_model);
        Ok(Self {
            config: config.clone(),
            token_embedding,
            layers,
            final_norm: vec![1.0; c.d_model],
            lm_head,
        })
    }

    pub fn param_counts(&self) -> ParamCounts {
        self.layers.iter().fold(ParamCounts::default(), |acc, l| {
            let p = l.param_counts();
            ParamCounts { ffn: acc.ffn + p.ffn, attn: acc.attn + p.attn }
        })
    }

    /// Total live KV heads across layers.
    pub fn live_kv_heads(&self) -> usize {
        self.layers.iter().map(LayerWeights::kv_live).sum()
    }

    /// SHA-256 of the serialized model, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(io::to_bytes(self)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        io::to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        io::from_bytes(bytes)
    }

    /// Checks every per-layer shape against the config and live index lists.
    pub fn check_consistency(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let bad = |what: String| Err(Error::Header(what));
        if self.token_embedding.shape() != (c.vocab_size, c.d_model) {
            return bad(format!("token_embedding shape {:?}", self.token_embedding.shape()));
        }
        if self.lm_head.shape() != (c.d_model, c.vocab_size) {
            return bad(format!("lm_head shape {:?}", self.lm_head.shape()));
        }
        if self.final_norm.len() != c.d_model {
            return bad("final_norm length".into());
        }
        if self.layers.len() != c.n_layers {
            return bad(format!("{} layers for n_layers {}", self.layers.len(), c.n_layers));
        }
        let g = c.group_size();
        for (i, l) in self.layers.iter().enumerate() {
            if !strictly_ascending_below(&l.kv_heads, c.n_kv_heads) {
                return bad(format!("layer {i}: kv head list {:?}", l.kv_heads));
            }
            if !strictly_ascending_below(&l.ffn_nodes, c.d_ff) {
                return bad(format!("layer {i}: ffn node list invalid"));
            }
            let kv = l.kv_live() * c.head_dim;
            let q = l.kv_live() * g * c.head_dim;
            let ff = l.ff_live();
            let expect = [
                ("wq", l.wq.shape(), (c.d_model, q)),
                ("wk", l.wk.shape(), (c.d_model, kv)),
                ("wv", l.wv.shape(), (c.d_model, kv)),
                ("wo", l.wo.shape(), (q, c.d_model)),
                ("up", l.up.shape(), (c.d_model, ff)),
                ("down", l.down.shape(), (ff, c.d_model)),
            ];
            for (name, got, want) in expect {
                if got != want {
                    return bad(format!("layer {i}: {name} shape {got:?}, expected {want:?}"));
                }
            }
            match (&l.gate, c.ffn_kind) {
                (Some(gate), FfnKind::Gated) if gate.shape() == (c.d_model, ff) => {}
                (None, FfnKind::Plain) => {}
                _ => return bad(format!("layer {i}: gate does not match ffn_kind")),
            }
            if l.attn_norm.len() != c.d_model || l.ffn_norm.len() != c.d_model {
                return bad(format!("layer {i}: norm length"));
            }
        }
        Ok(())
    }
}

fn strictly_ascending_below(xs: &[usize], bound: usize) -> bool {
    xs.windows(2).all(|w| w[0] < w[1]) && xs.last().map_or(true, |&x| x < bound)
}
