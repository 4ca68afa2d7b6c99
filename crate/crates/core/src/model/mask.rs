use crate::error::{Error, Result};

use super::ToyTransformer;

/// Per-layer activity flags over ORIGINAL KV-head indices.
///
/// A `true` for a head that was already physically removed has no effect:
/// masks only ever switch heads off.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadMask {
    active: Vec<Vec<bool>>,
}

impl HeadMask {
    /// Every head on, for a model with the given layout.
    pub fn all_active(n_layers: usize, n_kv_heads: usize) -> Self {
        Self { active: vec![vec![true; n_kv_heads]; n_layers] }
    }

    pub fn for_model(model: &ToyTransformer) -> Self {
        Self::all_active(model.config.n_layers, model.config.n_kv_heads)
    }

    pub fn from_flags(active: Vec<Vec<bool>>) -> Self {
        Self { active }
    }

    pub fn deactivate(&mut self, layer: usize, head: usize) {
        self.active[layer][head] = false;
    }

    pub fn deactivate_layer(&mut self, layer: usize) {
        self.active[layer].fill(false);
    }

    pub fn is_active(&self, layer: usize, head: usize) -> bool {
        self.active[layer][head]
    }

    pub fn layer(&self, layer: usize) -> &[bool] {
        &self.active[layer]
    }

    pub fn check(&self, model: &ToyTransformer) -> Result<()> {
        let c = &model.config;
        if self.active.len() != c.n_layers {
            return Err(Error::MaskMismatch(format!(
                "{} layers in mask, model has {}",
                self.active.len(),
                c.n_layers
            )));
        }
        for (l, flags) in self.active.iter().enumerate() {
            if flags.len() != c.n_kv_heads {
                return Err(Error::MaskMismatch(format!(
                    "layer {l} has {} flags, expected {}",
                    flags.len(),
                    c.n_kv_heads
                )));
            }
        }
        Ok(())
    }
}
