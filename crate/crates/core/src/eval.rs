//! Perplexity and sparsity accounting.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::PAD;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{HeadMask, ParamCounts, ToyTransformer};

/// A perplexity value, or the marker for a model whose outputs overflowed
/// or turned into NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perplexity {
    Finite(f64),
    Infinite,
}

impl Perplexity {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Perplexity::Finite(v) => v,
            Perplexity::Infinite => f64::INFINITY,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Perplexity::Finite(_))
    }

    /// Total order with `Infinite` above every finite value.
    pub fn total_cmp(&self, other: &Self) -> Ordering {
        self.as_f64().total_cmp(&other.as_f64())
    }
}

/// Six significant digits with trailing zeros kept (`259.000`, `1.00000`),
/// `inf` for the infinity marker.
impl fmt::Display for Perplexity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Perplexity::Finite(v) => f.write_str(&format_sig6(v)),
            Perplexity::Infinite => f.write_str("inf"),
        }
    }
}

/// Fixed six-significant-digit rendering used on the command line.
pub fn format_sig6(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0.00000".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        // Rounding can carry into a new digit (999999.5 -> 1000000).
        let digits = s.trim_start_matches('-').replace('.', "").trim_start_matches('0').len();
        if digits > 6 && decimals > 0 {
            let decimals = decimals - 1;
            return format!("{v:.decimals$}");
        }
        s
    } else {
        format!("{v:.5e}")
    }
}

impl Serialize for Perplexity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Perplexity::Finite(v) => s.serialize_f64(v),
            Perplexity::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Perplexity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Perplexity::Finite(v)),
            Repr::Str(s) if s == "inf" => Ok(Perplexity::Infinite),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad perplexity {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityResult {
    pub value: Perplexity,
    /// Number of scored (non-PAD) targets.
    pub token_count: usize,
    pub nll_sum: f64,
}

/// Summed NLL of `seq[1..]` under `logits[..T-1]`, skipping PAD targets.
/// Returns `None` if any scored row is not finite.
pub fn sequence_nll(logits: &Matrix, seq: &[u32]) -> Option<(f64, usize)> {
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for t in 0..seq.len().saturating_sub(1) {
        let target = seq[t + 1];
        if target == PAD {
            continue;
        }
        let row = logits.row(t);
        if row.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        nll += sum.ln() + max - row[target as usize] as f64;
        count += 1;
    }
    Some((nll, count))
}

/// Corpus-level perplexity: NLLs summed over every sequence, divided by the
/// number of scored targets, exponentiated once.
pub fn perplexity(model: &ToyTransformer, sequences: &[Vec<u32>]) -> Result<PerplexityResult> {
    perplexity_masked(model, None, sequences)
}

/// [`perplexity`] with some grouped heads masked off.
pub fn perplexity_masked(
    model: &ToyTransformer,
    mask: Option<&HeadMask>,
    sequences: &[Vec<u32>],
) -> Result<PerplexityResult> {
    if sequences.is_empty() {
        return Err(Error::NoSequences);
    }
    let mut nll_sum = 0.0f64;
    let mut token_count = 0usize;
    let mut overflow = false;
    for seq in sequences {
        if seq.len() < 2 {
            return Err(Error::Corpus("perplexity needs sequences of at least 2 tokens".into()));
        }
        let logits = match mask {
            Some(m) => model.apply_head_mask(m, seq)?,
            None => model.forward(seq)?,
        };
        match sequence_nll(&logits, seq) {
            Some((nll, count)) => {
                nll_sum += nll;
                token_count += count;
            }
            None => {
                overflow = true;
                token_count += seq[1..].iter().filter(|&&t| t != PAD).count();
            }
        }
    }
    if token_count == 0 {
        return Err(Error::NoTargets);
    }
    let value = if overflow {
        Perplexity::Infinite
    } else {
        let v = (nll_sum / token_count as f64).exp();
        if v.is_finite() {
            Perplexity::Finite(v)
        } else {
            Perplexity::Infinite
        }
    };
    Ok(PerplexityResult { value, token_count, nll_sum: if overflow { f64::INFINITY } else { nll_sum } })
}

/// `1 − (F_after + A_after) / (F_before + A_before)` from integer counts.
pub fn sparsity_from_counts(before: ParamCounts, after: ParamCounts) -> f64 {
    let total = before.total();
    if total == 0 {
        return 0.0;
    }
    (total - after.total().min(total)) as f64 / total as f64
}

pub fn achieved_sparsity(before: &ToyTransformer, after: &ToyTransformer) -> f64 {
    sparsity_from_counts(before.param_counts(), after.param_counts())
}
