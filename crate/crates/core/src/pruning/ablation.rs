use serde::{Deserialize, Serialize};

use crate::data::CalibrationSet;
use crate::error::Result;
use crate::eval::Perplexity;
use crate::model::ToyTransformer;

use super::report::format_g6;
use super::{putri, PruneConfig};

/// The pipeline and its three single-component ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Putri,
    NoFfnUpdate,
    ParallelUpdate,
    FullAttention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Putri, Variant::NoFfnUpdate, Variant::ParallelUpdate, Variant::FullAttention];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Putri => "putri",
            Variant::NoFfnUpdate => "no_ffn_update",
            Variant::ParallelUpdate => "parallel_update",
            Variant::FullAttention => "full_attention",
        }
    }

    /// `base` with this variant's flag switched on and the others off.
    pub fn configure(&self, base: &PruneConfig) -> PruneConfig {
        PruneConfig {
            no_ffn_update: *self == Variant::NoFfnUpdate,
            parallel_update: *self == Variant::ParallelUpdate,
            full_attention: *self == Variant::FullAttention,
            ..base.clone()
        }
    }
}

pub const ABLATION_CSV_HEADER: &str = "variant,sparsity,seed,achieved,ppl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub sparsity: f64,
    pub seed: u64,
    pub achieved: Option<f64>,
    /// `None` when the run or its evaluation failed.
    pub ppl: Option<Perplexity>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.variant.name(),
            format_g6(self.sparsity),
            self.seed,
            self.achieved.map_or_else(|| "nan".to_string(), format_g6),
            self.ppl.map_or_else(|| "nan".to_string(), |p| p.to_string()),
        )
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

/// Runs every variant at every sparsity for every calibration seed, in
/// `(variant, sparsity, seed)` order. A failed run becomes a row with no
/// perplexity instead of stopping the sweep; only building a calibration
/// set can fail the whole call.
pub fn run_ablation(
    model: &ToyTransformer,
    calib_for_seed: impl Fn(u64) -> Result<CalibrationSet>,
    eval: &CalibrationSet,
    base: &PruneConfig,
    sparsities: &[f64],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let calibs = seeds.iter().map(|&s| calib_for_seed(s)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        for &sparsity in sparsities {
            for (&seed, calib) in seeds.iter().zip(&calibs) {
                let cfg = variant.configure(&PruneConfig { target_sparsity: sparsity, ..base.clone() });
                let row = match putri(model, calib, eval, &cfg) {
                    Ok((_, report)) => AblationRow {
                        variant,
                        sparsity,
                        seed,
                        achieved: report.achieved_sparsity,
                        ppl: report.ppl_after,
                        error: report.eval_error,
                    },
                    Err(e) => AblationRow { variant, sparsity, seed, achieved: None, ppl: None, error: Some(e.to_string()) },
                };
                rows.push(row);
            }
        }
    }
    Ok(rows)
}
