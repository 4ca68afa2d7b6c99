use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Knobs for one pruning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Fraction of prunable parameters to remove, in `[0, 1)`.
    pub target_sparsity: f64,
    /// Scales the FFN/attention split of the budget.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// FFN nodes every layer keeps at minimum. 0 allows emptying a block.
    #[serde(default = "default_p_min")]
    pub p_min: usize,
    /// Heads removed per selection round; `None` means the model's KV head
    /// count.
    #[serde(default)]
    pub heads_per_iteration: Option<usize>,
    /// Calibration sequences used to score each head candidate.
    #[serde(default = "default_score_sequences")]
    pub score_sequences: usize,
    /// Starting ridge for the down-projection solve.
    #[serde(default)]
    pub ridge: f64,
    /// Slice `down` without re-solving it.
    #[serde(default)]
    pub no_ffn_update: bool,
    /// Take every FFN tap from the original model in one pass.
    #[serde(default)]
    pub parallel_update: bool,
    /// Remove whole attention blocks instead of individual grouped heads.
    #[serde(default)]
    pub full_attention: bool,
}

fn default_alpha() -> f64 {
    1.5
}

fn default_p_min() -> usize {
    1
}

fn default_score_sequences() -> usize {
    1
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self::with_sparsity(0.0)
    }
}

impl PruneConfig {
    pub fn with_sparsity(target_sparsity: f64) -> Self {
        Self {
            target_sparsity,
            alpha: default_alpha(),
            p_min: default_p_min(),
            heads_per_iteration: None,
            score_sequences: default_score_sequences(),
            ridge: 0.0,
            no_ffn_update: false,
            parallel_update: false,
            full_attention: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPruneConfig(m));
        let s = self.target_sparsity;
        if !(s.is_finite() && (0.0..1.0).contains(&s)) {
            return bad(format!("target sparsity must be in [0, 1), got {s}"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if self.heads_per_iteration == Some(0) {
            return bad("heads per iteration must be >= 1".into());
        }
        if self.score_sequences == 0 {
            return bad("score sequences must be >= 1".into());
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return bad(format!("ridge must be finite and >= 0, got {}", self.ridge));
        }
        Ok(())
    }
}
