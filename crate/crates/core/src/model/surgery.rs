use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::ToyTransformer;

fn without_columns(m: &Matrix, start: usize, width: usize) -> Matrix {
    let keep: Vec<usize> = (0..m.cols()).filter(|c| *c < start || *c >= start + width).collect();
    m.select_columns(&keep)
}

fn without_rows(m: &Matrix, start: usize, width: usize) -> Matrix {
    let keep: Vec<usize> = (0..m.rows()).filter(|r| *r < start || *r >= start + width).collect();
    m.select_rows(&keep)
}

impl ToyTransformer {
    /// Physically removes a grouped head: its K and V columns, the columns
    /// of its G query heads and the matching rows of `wo`.
    pub fn remove_kv_head(&mut self, layer: usize, head: usize) -> Result<()> {
        let hd = self.config.head_dim;
        let g = self.config.group_size();
        let lw = self.layers.get_mut(layer).ok_or(Error::LayerOutOfRange(layer))?;
        let pos = lw
            .kv_heads
            .iter()
            .position(|&h| h == head)
            .ok_or(Error::HeadNotLive { layer, head })?;
        lw.wk = without_columns(&lw.wk, pos * hd, hd);
        lw.wv = without_columns(&lw.wv, pos * hd, hd);
        lw.wq = without_columns(&lw.wq, pos * g * hd, g * hd);
        lw.wo = without_rows(&lw.wo, pos * g * hd, g * hd);
        lw.kv_heads.remove(pos);
        Ok(())
    }

    /// Keeps only the listed FFN nodes (ORIGINAL indices, strictly
    /// ascending, all currently live). An empty list empties the block,
    /// which then acts as the identity on the residual stream.
    pub fn remove_ffn_nodes(&mut self, layer: usize, keep: &[usize]) -> Result<()> {
        let lw = self.layers.get_mut(layer).ok_or(Error::LayerOutOfRange(layer))?;
        if !keep.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidKeep { layer, reason: "indices must be strictly ascending".into() });
        }
        let mut local = Vec::with_capacity(keep.len());
        for &k in keep {
            match lw.ffn_nodes.binary_search(&k) {
                Ok(pos) => local.push(pos),
                Err(_) => {
                    return Err(Error::InvalidKeep { layer, reason: format!("node {k} is not live") });
                }
            }
        }
        if local.len() == lw.ff_live() {
            return Ok(());
        }
        if let Some(gate) = lw.gate.as_mut() {
            *gate = gate.select_columns(&local);
        }
        lw.up = lw.up.select_columns(&local);
        lw.down = lw.down.select_rows(&local);
        lw.ffn_nodes = keep.to_vec();
        Ok(())
    }
}
