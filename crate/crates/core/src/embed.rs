//! Turning store rows into normalized embeddings in the shared space:
//! text rows go through the projection in eval mode, vision rows are used
//! as-is. Both are L2-normalized.

use ndarray::{s, Array2};

use crate::contrastive::normalize;
use crate::error::Result;
use crate::projection::ProjectionNet;
use crate::store::StoreHandle;

/// Rows per eval-mode forward pass.
pub const EMBED_CHUNK: usize = 1024;

pub fn vision_rows(store: &StoreHandle, rows: &[usize]) -> Result<Array2<f32>> {
    Ok(normalize(store.gather(rows).view())?.into_rows())
}

pub fn text_rows(net: &ProjectionNet<f32>, store: &StoreHandle, rows: &[usize]) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((rows.len(), net.config().output_dim));
    for (k, chunk) in rows.chunks(EMBED_CHUNK).enumerate() {
        let projected = net.forward_eval(store.gather(chunk).view())?;
        let z = normalize(projected.view())?;
        let start = k * EMBED_CHUNK;
        out.slice_mut(s![start..start + chunk.len(), ..]).assign(z.rows());
    }
    Ok(out)
}

/// Embeds images by id; absent ids are reported together.
pub fn vision_ids<S: AsRef<str>>(store: &StoreHandle, ids: &[S]) -> Result<Array2<f32>> {
    let rows = store.resolve(ids.iter().map(AsRef::as_ref))?;
    vision_rows(store, &rows)
}

pub fn text_ids<S: AsRef<str>>(net: &ProjectionNet<f32>, store: &StoreHandle, ids: &[S]) -> Result<Array2<f32>> {
    let rows = store.resolve(ids.iter().map(AsRef::as_ref))?;
    text_rows(net, store, &rows)
}
