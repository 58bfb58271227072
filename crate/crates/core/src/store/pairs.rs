use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tsv;

use super::StoreHandle;

/// Images from a vision store paired with one or more captions from a text
/// store. Ids are resolved to store rows up front.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    vision: Arc<StoreHandle>,
    text: Arc<StoreHandle>,
    image_ids: Vec<String>,
    image_rows: Vec<usize>,
    caption_ids: Vec<Vec<String>>,
    caption_rows: Vec<Vec<usize>>,
}

/// Parse `image_id<TAB>caption_id[,caption_id...]` lines.
pub fn parse_pair_manifest(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let rows = tsv::read_rows(path, 2)?;
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(rows.len());
    for (line, mut fields) in rows {
        let captions: Vec<String> = fields[1]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .collect();
        let image = std::mem::take(&mut fields[0]);
        if !seen.insert(image.clone()) {
            return Err(Error::Parse { path: path.to_path_buf(), line, reason: format!("image `{image}` listed twice") });
        }
        pairs.push((image, captions));
    }
    Ok(pairs)
}

impl PairedDataset {
    pub fn new(
        vision: Arc<StoreHandle>,
        text: Arc<StoreHandle>,
        pairs: Vec<(String, Vec<String>)>,
    ) -> Result<Self> {
        let mut image_ids = Vec::with_capacity(pairs.len());
        let mut image_rows = Vec::with_capacity(pairs.len());
        let mut caption_ids = Vec::with_capacity(pairs.len());
        let mut caption_rows = Vec::with_capacity(pairs.len());
        for (image, captions) in pairs {
            if captions.is_empty() {
                return Err(Error::EmptyCaptionList(image));
            }
            let row = vision
                .index_of(&image)
                .ok_or_else(|| Error::UnresolvedId { id: image.clone(), store: "vision" })?;
            let rows = captions
                .iter()
                .map(|c| text.index_of(c).ok_or_else(|| Error::UnresolvedId { id: c.clone(), store: "text" }))
                .collect::<Result<Vec<_>>>()?;
            image_ids.push(image);
            image_rows.push(row);
            caption_ids.push(captions);
            caption_rows.push(rows);
        }
        Ok(Self { vision, text, image_ids, image_rows, caption_ids, caption_rows })
    }

    pub fn from_manifest(vision: Arc<StoreHandle>, text: Arc<StoreHandle>, manifest: &Path) -> Result<Self> {
        Self::new(vision, text, parse_pair_manifest(manifest)?)
    }

    pub fn vision(&self) -> &Arc<StoreHandle> {
        &self.vision
    }

    pub fn text(&self) -> &Arc<StoreHandle> {
        &self.text
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn caption_count(&self) -> usize {
        self.caption_ids.iter().map(Vec::len).sum()
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn image_row(&self, i: usize) -> usize {
        self.image_rows[i]
    }

    pub fn caption_ids(&self, i: usize) -> &[String] {
        &self.caption_ids[i]
    }

    pub fn caption_rows(&self, i: usize) -> &[usize] {
        &self.caption_rows[i]
    }

    /// The images at `indices`, in that order, sharing the same stores.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            vision: Arc::clone(&self.vision),
            text: Arc::clone(&self.text),
            image_ids: indices.iter().map(|&i| self.image_ids[i].clone()).collect(),
            image_rows: indices.iter().map(|&i| self.image_rows[i]).collect(),
            caption_ids: indices.iter().map(|&i| self.caption_ids[i].clone()).collect(),
            caption_rows: indices.iter().map(|&i| self.caption_rows[i].clone()).collect(),
        }
    }
}

/// Open both stores and validate a manifest against them.
pub fn build_pairs(vision: Arc<StoreHandle>, text: Arc<StoreHandle>, manifest: &Path) -> Result<PairedDataset> {
    PairedDataset::from_manifest(vision, text, manifest)
}
