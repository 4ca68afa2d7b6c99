use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::CalibrationSet;
use crate::error::{Error, Result};
use crate::eval::{format_sig6, Perplexity};
use crate::model::{ModelConfig, ParamCounts, ToyTransformer};

use super::{FfnLayerReport, HeadRemoval, PruneConfig, SparsityAllocation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Infeasible,
    Failed,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Infeasible => "infeasible",
            RunStatus::Failed => "failed",
        }
    }
}

/// Provenance of a token set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub source_digest: String,
    pub digest: String,
}

impl From<&CalibrationSet> for DatasetInfo {
    fn from(c: &CalibrationSet) -> Self {
        Self {
            n_sequences: c.len(),
            seq_len: c.seq_len,
            seed: c.seed,
            source_digest: c.source_digest.clone(),
            digest: c.digest(),
        }
    }
}

/// Final state of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOutcome {
    pub layer: usize,
    pub removed_kv_heads: Vec<usize>,
    pub kept_ffn_nodes: Vec<usize>,
    /// Calibration residuals from the FFN stage; absent when it was skipped.
    pub residual_sliced: Option<f64>,
    pub residual_updated: Option<f64>,
    pub ridge: Option<f64>,
    pub ridge_escalations: u32,
}

/// Everything needed to audit or reproduce one pruning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub status: RunStatus,
    pub error: Option<String>,
    pub config: PruneConfig,
    pub model_config: ModelConfig,
    pub model_digest_before: String,
    pub model_digest_after: Option<String>,
    pub allocation: Option<SparsityAllocation>,
    pub layers: Vec<LayerOutcome>,
    pub head_removals: Vec<HeadRemoval>,
    pub params_before: ParamCounts,
    pub params_after: Option<ParamCounts>,
    pub achieved_sparsity: Option<f64>,
    /// `None` when evaluation itself failed; see `eval_error`.
    pub ppl_before: Option<Perplexity>,
    pub ppl_after: Option<Perplexity>,
    pub eval_tokens: Option<usize>,
    pub eval_error: Option<String>,
    pub calibration: DatasetInfo,
    pub evaluation: DatasetInfo,
    /// Left out unless explicitly recorded so reports stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

pub const SUMMARY_CSV_HEADER: &str = "target,achieved,ppl_before,ppl_after,heads_removed,ffn_keep,status";

fn opt_ppl(p: Option<Perplexity>) -> String {
    p.map_or_else(|| "nan".to_string(), |p| p.to_string())
}

impl PruneReport {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn completed(
        before: &ToyTransformer,
        after: &ToyTransformer,
        config: &PruneConfig,
        allocation: SparsityAllocation,
        ffn: &[FfnLayerReport],
        head_removals: Vec<HeadRemoval>,
        calib: &CalibrationSet,
        eval: &CalibrationSet,
    ) -> Self {
        let layers = after
            .layers
            .iter()
            .enumerate()
            .map(|(l, lw)| {
                let f = ffn.iter().find(|r| r.layer == l);
                LayerOutcome {
                    layer: l,
                    removed_kv_heads: (0..after.config.n_kv_heads).filter(|h| !lw.kv_heads.contains(h)).collect(),
                    kept_ffn_nodes: lw.ffn_nodes.clone(),
                    residual_sliced: f.map(|r| r.residual_sliced),
                    residual_updated: f.and_then(|r| r.residual_updated),
                    ridge: f.and_then(|r| r.ridge),
                    ridge_escalations: f.map_or(0, |r| r.ridge_escalations),
                }
            })
            .collect();
        let params_before = before.param_counts();
        let params_after = after.param_counts();
        let (ppl_before, ppl_after, eval_tokens, eval_error) =
            match (crate::eval::perplexity(before, &eval.sequences), crate::eval::perplexity(after, &eval.sequences)) {
                (Ok(a), Ok(b)) => (Some(a.value), Some(b.value), Some(a.token_count), None),
                (Err(e), _) | (_, Err(e)) => (None, None, None, Some(e.to_string())),
            };
        Self {
            status: RunStatus::Ok,
            error: None,
            config: config.clone(),
            model_config: before.config.clone(),
            model_digest_before: before.digest(),
            model_digest_after: Some(after.digest()),
            allocation: Some(allocation),
            layers,
            head_removals,
            params_before,
            params_after: Some(params_after),
            achieved_sparsity: Some(crate::eval::sparsity_from_counts(params_before, params_after)),
            ppl_before,
            ppl_after,
            eval_tokens,
            eval_error,
            calibration: calib.into(),
            evaluation: eval.into(),
            wall_clock_seconds: None,
        }
    }

    /// Report for a run that stopped with `err` before producing a model.
    pub fn failed(
        model: &ToyTransformer,
        config: &PruneConfig,
        calib: &CalibrationSet,
        eval: &CalibrationSet,
        err: &Error,
    ) -> Self {
        let status = match err {
            Error::Infeasible { .. } => RunStatus::Infeasible,
            _ => RunStatus::Failed,
        };
        Self {
            status,
            error: Some(err.to_string()),
            config: config.clone(),
            model_config: model.config.clone(),
            model_digest_before: model.digest(),
            model_digest_after: None,
            allocation: None,
            layers: Vec::new(),
            head_removals: Vec::new(),
            params_before: model.param_counts(),
            params_after: None,
            achieved_sparsity: None,
            ppl_before: None,
            ppl_after: None,
            eval_tokens: None,
            eval_error: None,
            calibration: calib.into(),
            evaluation: eval.into(),
            wall_clock_seconds: None,
        }
    }

    pub fn to_canonical_json(&self) -> String {
        canonical_json(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row under [`SUMMARY_CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let achieved = self.achieved_sparsity.map_or_else(|| "nan".to_string(), format_g6);
        format!(
            "{},{},{},{},{},{},{}",
            format_g6(self.config.target_sparsity),
            achieved,
            opt_ppl(self.ppl_before),
            opt_ppl(self.ppl_after),
            self.head_removals.len(),
            self.allocation.as_ref().map_or_else(|| "nan".to_string(), |a| a.keep_per_layer.to_string()),
            self.status.as_str(),
        )
    }

    /// `target=… achieved=… ppl before→after` for the terminal.
    pub fn summary_line(&self) -> String {
        match self.status {
            RunStatus::Ok => format!(
                "target={} achieved={} ppl {} -> {}",
                format_g6(self.config.target_sparsity),
                self.achieved_sparsity.map_or_else(|| "nan".to_string(), format_g6),
                opt_ppl(self.ppl_before),
                opt_ppl(self.ppl_after),
            ),
            _ => format!(
                "target={} status={} error: {}",
                format_g6(self.config.target_sparsity),
                self.status.as_str(),
                self.error.as_deref().unwrap_or(""),
            ),
        }
    }
}

/// Like C's `%.6g`: six significant digits, trailing zeros dropped,
/// exponent form outside `[1e-4, 1e6)`.
pub fn format_g6(v: f64) -> String {
    if !v.is_finite() {
        return format_sig6(v);
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        trim(&format!("{v:.decimals$}"))
    }
}

/// JSON with object keys sorted, floats written by [`format_g6`] and
/// arrays of scalars kept on one line.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&mut out, &v, 0);
    out.push('\n');
    Ok(out)
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    match v {
        Value::Null | Value::Bool(_) | Value::String(_) => out.push_str(&v.to_string()),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&format_g6(n.as_f64().expect("f64")));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
            } else if items.iter().all(|i| !i.is_array() && !i.is_object()) {
                out.push('[');
                for (k, item) in items.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    write_value(out, item, indent);
                }
                out.push(']');
            } else {
                out.push_str("[\n");
                for (k, item) in items.iter().enumerate() {
                    pad(out, indent + 1);
                    write_value(out, item, indent + 1);
                    out.push_str(if k + 1 < items.len() { ",\n" } else { "\n" });
                }
                pad(out, indent);
                out.push(']');
            }
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (k, key) in keys.iter().enumerate() {
                pad(out, indent + 1);
                let _ = write!(out, "{}: ", Value::String((*key).clone()));
                write_value(out, &map[*key], indent + 1);
                out.push_str(if k + 1 < keys.len() { ",\n" } else { "\n" });
            }
            pad(out, indent);
            out.push('}');
        }
    }
}

fn pad(out: &mut String, indent: usize) {
    for _ in 0..indent {
        out.push_str("  ");
    }
}
