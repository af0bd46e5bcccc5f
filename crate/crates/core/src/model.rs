//! The trainable model (RMViT + projector + predictor) and its batch loss.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::heads;
use crate::loss::{self, BatchAnnotations, LossTerm, LossWeights};
use crate::nn::{Bound, ParamStore};
use crate::rmvit::{self, RmvitConfig};
use crate::tensor::Tensor;

/// Seeded parameters for the whole trainable model.
pub fn init_params(cfg: &RmvitConfig, seed: u64) -> Result<ParamStore> {
    let mut store = rmvit::init_params(cfg, seed)?;
    store.extend(heads::init_params(cfg.dim, seed.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    Ok(store)
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: Var,
    pub quality: LossTerm,
    /// `None` when no anchor shares a source with another full item.
    pub content: Option<LossTerm>,
}

/// Forward pass of a `2B` batch through RMViT and both heads, ending in the
/// combined contrastive loss. `items[i]` is the `T × D` frame-embedding
/// matrix of item `i`, laid out as in [`BatchAnnotations`].
pub fn batch_loss(
    g: &mut Graph,
    cfg: &RmvitConfig,
    p: &Bound,
    items: &[Tensor],
    ann: &BatchAnnotations,
    threshold: f64,
    weights: &LossWeights,
) -> Result<BatchLoss> {
    if items.len() != ann.len() {
        return Err(Error::Shape(format!("{} items for a batch of {}", items.len(), ann.len())));
    }
    let b = ann.full();
    let mut h_v = Vec::with_capacity(items.len());
    let mut h_c = Vec::with_capacity(b);
    let mut h_pred = Vec::with_capacity(b);
    for (i, frames) in items.iter().enumerate() {
        let f = g.constant(frames.clone());
        let out = rmvit::forward_video(g, cfg, p, f)?;
        h_v.push(out.h_v);
        if i < b {
            h_c.push(heads::content_embedding(g, out.last_frames_out)?);
            h_pred.push(heads::predict_content(g, p, out.mem_prev)?);
        }
    }
    let hv = g.concat_rows(&h_v)?;
    let z = heads::project(g, p, hv)?;
    let quality = loss::quality_loss(g, z, &ann.quality_positives(threshold), weights.tau)?;

    let content_sets = ann.content_positives();
    let content = if content_sets.iter().any(|s| !s.is_empty()) {
        let hc = g.concat_rows(&h_c)?;
        let hp = g.concat_rows(&h_pred)?;
        let c = heads::project(g, p, hc)?;
        let c_hat = heads::project(g, p, hp)?;
        Some(loss::content_loss(g, c, c_hat, &content_sets, weights.tau)?)
    } else {
        None
    };
    let total = loss::total_loss(g, &quality, content.as_ref(), weights.lambda1)?;
    Ok(BatchLoss { loss: total, quality, content })
}
