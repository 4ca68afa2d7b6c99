use serde::{Deserialize, Serialize};

use crate::data::CalibrationSet;
use crate::error::{Error, Result};
use crate::eval::{perplexity_masked, Perplexity};
use crate::model::{HeadMask, ToyTransformer};

use super::{PruneConfig, SparsityAllocation};

/// One committed grouped-head removal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRemoval {
    /// Selection round the head was removed in, from 0.
    pub round: usize,
    pub layer: usize,
    /// Original KV-head index.
    pub head: usize,
    /// Scoring perplexity with this head masked off.
    pub ppl: Perplexity,
}

/// Scoring perplexity of the model with each live grouped head masked off
/// in turn, sorted best first. Ties go to the lower `(layer, head)`.
pub fn rank_head_candidates(model: &ToyTransformer, sequences: &[Vec<u32>]) -> Result<Vec<(Perplexity, usize, usize)>> {
    let mut ranked = Vec::new();
    for (l, lw) in model.layers.iter().enumerate() {
        for &h in &lw.kv_heads {
            let mut mask = HeadMask::for_model(model);
            mask.deactivate(l, h);
            ranked.push((perplexity_masked(model, Some(&mask), sequences)?.value, l, h));
        }
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    Ok(ranked)
}

/// Same as [`rank_head_candidates`] for whole attention blocks: each layer
/// with live heads is scored with all of them masked.
pub fn rank_layer_candidates(model: &ToyTransformer, sequences: &[Vec<u32>]) -> Result<Vec<(Perplexity, usize)>> {
    let mut ranked = Vec::new();
    for (l, lw) in model.layers.iter().enumerate() {
        if lw.kv_live() == 0 {
            continue;
        }
        let mut mask = HeadMask::for_model(model);
        mask.deactivate_layer(l);
        ranked.push((perplexity_masked(model, Some(&mask), sequences)?.value, l));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked)
}

/// Removes `budget` grouped heads, `per_round` at a time, each round taking
/// the candidates whose masking gives the lowest scoring perplexity.
pub fn remove_heads(
    model: &ToyTransformer,
    sequences: &[Vec<u32>],
    budget: usize,
    per_round: usize,
) -> Result<(ToyTransformer, Vec<HeadRemoval>)> {
    let live = model.live_kv_heads();
    if budget > live {
        return Err(Error::HeadBudget { budget, live });
    }
    if per_round == 0 {
        return Err(Error::InvalidPruneConfig("heads per iteration must be >= 1".into()));
    }
    let mut current = model.clone();
    let mut removals = Vec::with_capacity(budget);
    let mut round = 0;
    while removals.len() < budget {
        let take = per_round.min(budget - removals.len());
        let ranked = rank_head_candidates(&current, sequences)?;
        for &(ppl, layer, head) in ranked.iter().take(take) {
            current.remove_kv_head(layer, head)?;
            removals.push(HeadRemoval { round, layer, head, ppl });
        }
        round += 1;
    }
    Ok((current, removals))
}

/// Removes `n_layers` entire attention blocks one at a time, each time the
/// block whose removal gives the lowest scoring perplexity.
pub fn remove_attention_layers(
    model: &ToyTransformer,
    sequences: &[Vec<u32>],
    n_layers: usize,
) -> Result<(ToyTransformer, Vec<HeadRemoval>)> {
    let live_layers = model.layers.iter().filter(|l| l.kv_live() > 0).count();
    if n_layers > live_layers {
        return Err(Error::HeadBudget { budget: n_layers * model.config.n_kv_heads, live: model.live_kv_heads() });
    }
    let mut current = model.clone();
    let mut removals = Vec::new();
    for round in 0..n_layers {
        let (ppl, layer) = rank_layer_candidates(&current, sequences)?[0];
        for head in current.layers[layer].kv_heads.clone() {
            current.remove_kv_head(layer, head)?;
            removals.push(HeadRemoval { round, layer, head, ppl });
        }
    }
    Ok((current, removals))
}

/// Attention stage of the pipeline, scored on the first
/// `cfg.score_sequences` calibration sequences.
pub fn prune_attention_heads(
    model: &ToyTransformer,
    calib: &CalibrationSet,
    allocation: &SparsityAllocation,
    cfg: &PruneConfig,
) -> Result<(ToyTransformer, Vec<HeadRemoval>)> {
    let scoring = calib.head(cfg.score_sequences);
    if cfg.full_attention {
        remove_attention_layers(model, scoring, allocation.n_attn_layers_equiv)
    } else {
        let per_round = cfg.heads_per_iteration.unwrap_or(model.config.n_kv_heads);
        remove_heads(model, scoring, allocation.n_kv_heads_to_remove, per_round)
    }
}
