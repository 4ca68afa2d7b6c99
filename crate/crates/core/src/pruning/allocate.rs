use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamCounts, ToyTransformer};

use super::PruneConfig;

/// Prunable parameter counts `(F, A)` of a model in its current state.
pub fn count_prunable_params(model: &ToyTransformer) -> ParamCounts {
    model.param_counts()
}

/// Rounds half away from zero (`0.5 → 1`, `2.5 → 3`).
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Attention-layer equivalents to prune: `round(L · s^(F / (α·A)))`.
pub fn attention_layer_budget(n_layers: usize, sparsity: f64, ffn_params: u64, attn_params: u64, alpha: f64) -> usize {
    if sparsity <= 0.0 || attn_params == 0 {
        return 0;
    }
    let exponent = ffn_params as f64 / (alpha * attn_params as f64);
    let n = round_half_away(n_layers as f64 * sparsity.powf(exponent));
    (n.max(0.0) as usize).min(n_layers)
}

/// KV heads to prune model-wide: `K · n_attn`, clamped to `[0, K·L]`.
pub fn kv_head_budget(n_kv_heads: usize, n_layers: usize, n_attn: usize) -> usize {
    (n_kv_heads * n_attn).min(n_kv_heads * n_layers)
}

/// Resolved pruning budget for one model and target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityAllocation {
    pub n_kv_heads_to_remove: usize,
    pub n_attn_layers_equiv: usize,
    /// FFN sparsity left over after the heads, before rounding to `P`.
    pub ffn_sparsity: f64,
    /// FFN nodes kept in every layer.
    pub keep_per_layer: usize,
    pub predicted_achieved_sparsity: f64,
    /// Counts of the unpruned model.
    pub param_counts: ParamCounts,
    pub max_achievable_sparsity: f64,
}

/// Sparsity reached by removing `heads` grouped heads and keeping `keep`
/// FFN nodes in each of `n_layers` layers.
pub fn sparsity_for(
    params: ParamCounts,
    n_layers: usize,
    d_ff: usize,
    per_head: usize,
    per_node: usize,
    heads: usize,
    keep: usize,
) -> f64 {
    let removed = (heads * per_head + n_layers * (d_ff - keep) * per_node) as u64;
    removed as f64 / params.total() as f64
}

/// Computes the budget for `model` at `config.target_sparsity`.
///
/// Heads come first from the layer-equivalent count; whatever the heads do
/// not cover is taken from the FFN blocks with one shared keep count `P`.
pub fn allocate(config: &PruneConfig, model: &ToyTransformer) -> Result<SparsityAllocation> {
    config.validate()?;
    let c = &model.config;
    let unpruned = model.layers.iter().all(|l| l.kv_live() == c.n_kv_heads && l.ff_live() == c.d_ff);
    if !unpruned {
        return Err(Error::InvalidPruneConfig("allocation expects an unpruned model".into()));
    }
    if config.p_min > c.d_ff {
        return Err(Error::InvalidPruneConfig(format!("p_min {} exceeds d_ff {}", config.p_min, c.d_ff)));
    }
    let params = count_prunable_params(model);
    let (f, a) = (params.ffn, params.attn);
    let total = params.total() as f64;
    let per_head = c.params_per_kv_head();
    let per_node = c.params_per_ffn_node();
    let l = c.n_layers;
    let s = config.target_sparsity;

    let max_achievable = sparsity_for(params, l, c.d_ff, per_head, per_node, c.n_kv_heads * l, config.p_min);
    if s > max_achievable {
        return Err(Error::Infeasible { target: s, max_achievable });
    }

    let n_attn = attention_layer_budget(l, s, f, a, config.alpha);
    let heads = kv_head_budget(c.n_kv_heads, l, n_attn);
    let ffn_sparsity = ((s * total - (heads * per_head) as f64) / f as f64).clamp(0.0, 1.0);
    let keep = (round_half_away((1.0 - ffn_sparsity) * c.d_ff as f64) as usize).clamp(config.p_min, c.d_ff);
    Ok(SparsityAllocation {
        n_kv_heads_to_remove: heads,
        n_attn_layers_equiv: n_attn,
        ffn_sparsity,
        keep_per_layer: keep,
        predicted_achieved_sparsity: sparsity_for(params, l, c.d_ff, per_head, per_node, heads, keep),
        param_counts: params,
        max_achievable_sparsity: max_achievable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ToyTransformer {
        ToyTransformer::init_random(&ModelConfig::tiny(), 0).unwrap()
    }

    #[test]
    fn prunable_counts_for_one_layer() {
        let c = ModelConfig { n_layers: 1, ..ModelConfig::tiny() };
        let mut m = ToyTransformer::init_random(&c, 0).unwrap();
        let p = count_prunable_params(&m);
        assert_eq!(p.attn, 64 * 64 + 64 * 16 + 64 * 16 + 64 * 64);
        assert_eq!(p.attn, 10240);
        assert_eq!(p.ffn, 3 * 64 * 256);
        m.remove_kv_head(0, 1).unwrap();
        assert_eq!(count_prunable_params(&m).attn, 10240 - 5120);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_away(0.5), 1.0);
        assert_eq!(round_half_away(1.5), 2.0);
        assert_eq!(round_half_away(2.5), 3.0);
        assert_eq!(round_half_away(2.4999), 2.0);
    }

    #[test]
    fn layer_budget_hand_values() {
        // F / (α·A) = 2, s = 0.5: round(4 · 0.25) = 1.
        assert_eq!(attention_layer_budget(4, 0.5, 300, 100, 1.5), 1);
        assert_eq!(kv_head_budget(2, 4, 1), 2);
        // 2 · 0.25 = 0.5 rounds up.
        assert_eq!(attention_layer_budget(2, 0.25, 100, 100, 1.0), 1);
        assert_eq!(attention_layer_budget(4, 0.0, 100, 100, 1.0), 0);
    }

    #[test]
    fn zero_target_keeps_everything() {
        let a = allocate(&PruneConfig::with_sparsity(0.0), &tiny()).unwrap();
        assert_eq!(a.n_attn_layers_equiv, 0);
        assert_eq!(a.n_kv_heads_to_remove, 0);
        assert_eq!(a.keep_per_layer, 256);
        assert_eq!(a.predicted_achieved_sparsity, 0.0);
    }

    #[test]
    fn tiny_preset_budgets() {
        // F = 196608, A = 40960, exponent 4.8 / 1.5 = 3.2.
        let m = tiny();
        let at = |s: f64| allocate(&PruneConfig::with_sparsity(s), &m).unwrap();
        let a = at(0.5);
        assert_eq!((a.n_attn_layers_equiv, a.n_kv_heads_to_remove), (0, 0));
        // (1 - 0.5 · 237568 / 196608) · 256 = 101.33
        assert_eq!(a.keep_per_layer, 101);
        let a = at(0.75);
        assert_eq!((a.n_attn_layers_equiv, a.n_kv_heads_to_remove), (2, 4));
        let a = at(0.95);
        assert_eq!((a.n_attn_layers_equiv, a.n_kv_heads_to_remove, a.keep_per_layer), (3, 6, 2));
        let expected = (6 * 5120 + 4 * 254 * 192) as f64 / 237568.0;
        assert_eq!(a.predicted_achieved_sparsity, expected);
    }

    #[test]
    fn alpha_shifts_budget_toward_attention() {
        let m = tiny();
        let mut c = PruneConfig::with_sparsity(0.75);
        c.alpha = 4.8;
        // Exponent 1: round(4 · 0.75) = 3 layers.
        assert_eq!(allocate(&c, &m).unwrap().n_attn_layers_equiv, 3);
    }

    #[test]
    fn infeasible_target_reports_ceiling() {
        let err = allocate(&PruneConfig::with_sparsity(0.999), &tiny()).unwrap_err();
        match err {
            Error::Infeasible { target, max_achievable } => {
                assert_eq!(target, 0.999);
                let expected = (8 * 5120 + 4 * 255 * 192) as f64 / 237568.0;
                assert_eq!(max_achievable, expected);
            }
            other => panic!("{other}"),
        }
        let mut c = PruneConfig::with_sparsity(0.999);
        c.p_min = 0;
        allocate(&c, &tiny()).unwrap();
    }

    #[test]
    fn refuses_pruned_model() {
        let mut m = tiny();
        m.remove_kv_head(0, 0).unwrap();
        assert!(allocate(&PruneConfig::with_sparsity(0.5), &m).is_err());
    }

    #[test]
    fn predicted_sparsity_recomputes_from_fields() {
        let m = tiny();
        let c = &m.config;
        for s in [0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let a = allocate(&PruneConfig::with_sparsity(s), &m).unwrap();
            let removed = a.n_kv_heads_to_remove * c.params_per_kv_head()
                + c.n_layers * (c.d_ff - a.keep_per_layer) * c.params_per_ffn_node();
            assert_eq!(a.predicted_achieved_sparsity, removed as f64 / a.param_counts.total() as f64);
            assert!(a.keep_per_layer >= 1 && a.keep_per_layer <= c.d_ff);
            assert!(a.n_kv_heads_to_remove <= c.n_kv_heads * c.n_layers);
        }
    }
}
