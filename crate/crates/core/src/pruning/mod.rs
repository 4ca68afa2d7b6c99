//! Budget allocation, FFN node pruning with least-squares reconstruction,
//! grouped-head removal, and the end-to-end pipeline.

mod ablation;
mod allocate;
mod config;
mod ffn;
mod heads;
mod report;

pub use ablation::{ablation_csv, run_ablation, AblationRow, Variant, ABLATION_CSV_HEADER};
pub use allocate::{
    allocate, attention_layer_budget, count_prunable_params, kv_head_budget, round_half_away, sparsity_for,
    SparsityAllocation,
};
pub use config::PruneConfig;
pub use ffn::{prune_ffn_layers, prune_ffn_sequential, score_ffn_nodes, select_keep, FfnLayerReport};
pub use heads::{
    prune_attention_heads, rank_head_candidates, rank_layer_candidates, remove_attention_layers, remove_heads,
    HeadRemoval,
};
pub use report::{
    canonical_json, format_g6, DatasetInfo, LayerOutcome, PruneReport, RunStatus, SUMMARY_CSV_HEADER,
};

use crate::data::CalibrationSet;
use crate::error::{Error, Result};
use crate::model::ToyTransformer;

/// Full pipeline: allocate the budget, prune every FFN block front to back,
/// then remove grouped heads, and report perplexity on `eval` before and
/// after.
///
/// When the allocation keeps every FFN node the FFN stage is skipped, so a
/// zero target returns the input model unchanged. A failing perplexity
/// evaluation is recorded in the report rather than returned as an error.
pub fn putri(
    model: &ToyTransformer,
    calib: &CalibrationSet,
    eval: &CalibrationSet,
    cfg: &PruneConfig,
) -> Result<(ToyTransformer, PruneReport)> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::NoSequences);
    }
    calib.check_vocab(model.config.vocab_size)?;
    eval.check_vocab(model.config.vocab_size)?;
    let allocation = allocate(cfg, model)?;
    let (after_ffn, ffn_reports) = if allocation.keep_per_layer == model.config.d_ff {
        (model.clone(), Vec::new())
    } else {
        prune_ffn_sequential(model, calib, &allocation, cfg)?
    };
    let (pruned, removals) = prune_attention_heads(&after_ffn, calib, &allocation, cfg)?;
    let report = PruneReport::completed(model, &pruned, cfg, allocation, &ffn_reports, removals, calib, eval);
    Ok((pruned, report))
}
