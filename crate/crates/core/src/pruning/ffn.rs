use serde::{Deserialize, Serialize};

use crate::data::{CalibrationSet, PAD};
use crate::error::{Error, Result};
use crate::linalg::{column_sq_norms, matmul, residual_sq, solve_normal_equations, Matrix};
use crate::model::ToyTransformer;

use super::{PruneConfig, SparsityAllocation};

/// Node importance: squared L2 norm of each column of the stacked tap.
pub fn score_ffn_nodes(z: &Matrix) -> Vec<f64> {
    column_sq_norms(z)
}

/// Positions of the `keep` largest scores, ascending. Equal scores prefer
/// the lower index.
pub fn select_keep(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// What happened to one layer's FFN block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnLayerReport {
    pub layer: usize,
    /// Original indices of the kept nodes, ascending.
    pub kept: Vec<usize>,
    /// `‖Z·W − Z_P·W[keep]‖²` on the calibration tap.
    pub residual_sliced: f64,
    /// `‖Z·W − Z_P·Ŵ_P‖²`; absent when `down` was only sliced.
    pub residual_updated: Option<f64>,
    /// Ridge the solve ended up using.
    pub ridge: Option<f64>,
    pub ridge_escalations: u32,
}

/// Non-PAD positions of a sequence; only these rows enter the tap.
fn live_rows(seq: &[u32]) -> Vec<usize> {
    seq.iter().enumerate().filter(|(_, &t)| t != PAD).map(|(i, _)| i).collect()
}

fn stack_taps(taps: &[Matrix], rows: &[Vec<usize>]) -> Result<Matrix> {
    let parts: Vec<Matrix> = taps.iter().zip(rows).map(|(z, r)| z.select_rows(r)).collect();
    let z = Matrix::vstack(&parts)?;
    if z.rows() == 0 {
        return Err(Error::Corpus("calibration set has no non-PAD positions".into()));
    }
    Ok(z)
}

/// Prunes one layer's FFN to `keep` nodes given its stacked tap `z`.
fn prune_layer(model: &mut ToyTransformer, layer: usize, z: &Matrix, keep: usize, cfg: &PruneConfig) -> Result<FfnLayerReport> {
    let lw = &model.layers[layer];
    let down = &lw.down;
    let target = matmul(z, down)?;
    let local = select_keep(&score_ffn_nodes(z), keep);
    let kept: Vec<usize> = local.iter().map(|&i| lw.ffn_nodes[i]).collect();
    let z_keep = z.select_columns(&local);
    let sliced = down.select_rows(&local);
    let residual_sliced = residual_sq(&z_keep, &sliced, &target)?;

    let mut report = FfnLayerReport {
        layer,
        kept,
        residual_sliced,
        residual_updated: None,
        ridge: None,
        ridge_escalations: 0,
    };
    let solution = if cfg.no_ffn_update || keep == 0 {
        None
    } else {
        Some(solve_normal_equations(&z_keep, &target, cfg.ridge)?)
    };
    model.remove_ffn_nodes(layer, &report.kept)?;
    if let Some(sol) = solution {
        report.residual_updated = Some(residual_sq(&z_keep, &sol.weights, &target)?);
        report.ridge = Some(sol.ridge);
        report.ridge_escalations = sol.escalations;
        model.layers[layer].down = sol.weights;
    }
    Ok(report)
}

/// Prunes every FFN block to `keep` nodes, front to back.
///
/// Sequentially (the default) each layer's tap is taken from the model with
/// all earlier layers already pruned and reconstructed. With
/// `parallel_update` every tap comes from the original model instead. Only
/// `down` is re-solved; `gate`/`up` are sliced.
pub fn prune_ffn_layers(
    model: &ToyTransformer,
    sequences: &[Vec<u32>],
    keep: usize,
    cfg: &PruneConfig,
) -> Result<(ToyTransformer, Vec<FfnLayerReport>)> {
    if sequences.is_empty() {
        return Err(Error::NoSequences);
    }
    let rows: Vec<Vec<usize>> = sequences.iter().map(|s| live_rows(s)).collect();
    let mut current = model.clone();
    let mut states = sequences.iter().map(|s| model.embed(s)).collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::with_capacity(model.layers.len());
    for l in 0..model.layers.len() {
        if keep > model.layers[l].ff_live() {
            return Err(Error::InvalidKeep { layer: l, reason: format!("keep {keep} exceeds live nodes") });
        }
        let source = if cfg.parallel_update { model } else { &current };
        let post_attn = states
            .iter()
            .map(|x| source.attention_residual(l, x, None))
            .collect::<Result<Vec<_>>>()?;
        let taps = post_attn
            .iter()
            .map(|x| source.ffn_intermediate(l, x))
            .collect::<Result<Vec<_>>>()?;
        let z = stack_taps(&taps, &rows)?;
        reports.push(prune_layer(&mut current, l, &z, keep, cfg)?);
        if l + 1 < model.layers.len() {
            let source = if cfg.parallel_update { model } else { &current };
            states = post_attn
                .iter()
                .map(|x| source.ffn_residual(l, x))
                .collect::<Result<Vec<_>>>()?;
        }
    }
    Ok((current, reports))
}

/// FFN stage of the pipeline: [`prune_ffn_layers`] at the allocated keep
/// count over the whole calibration set.
pub fn prune_ffn_sequential(
    model: &ToyTransformer,
    calib: &CalibrationSet,
    allocation: &SparsityAllocation,
    cfg: &PruneConfig,
) -> Result<(ToyTransformer, Vec<FfnLayerReport>)> {
    prune_ffn_layers(model, &calib.sequences, allocation.keep_per_layer, cfg)
}
