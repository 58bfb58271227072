//! Zero-shot evaluation: classification, cross-modal retrieval, Winoground
//! compositional pairs and binary caption choice.
//!
//! Every metric is a percentage in `[0, 100]`. Rankings break ties toward
//! the lower index; Winoground comparisons are strict, so ties count as
//! failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::class_reps::{predict, ClassifierMatrix};
use crate::embed;
use crate::error::{Error, Result};
use crate::projection::ProjectionNet;
use crate::store::StoreHandle;
use crate::tsv;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub dataset: String,
    pub metrics: BTreeMap<String, f64>,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    /// Per-item verdicts when requested (Winoground).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub items: Vec<serde_json::Value>,
}

impl EvalReport {
    fn new(task: &str, dataset: &str, samples: usize) -> Self {
        Self {
            task: task.to_owned(),
            dataset: dataset.to_owned(),
            metrics: BTreeMap::new(),
            samples,
            config_digest: None,
            items: Vec::new(),
        }
    }

    pub fn with_digest(mut self, digest: impl Into<String>) -> Self {
        self.config_digest = Some(digest.into());
        self
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{} on {} ({} samples)\n", self.task, self.dataset, self.samples);
        let width = self.metrics.keys().map(String::len).max().unwrap_or(0);
        for (name, value) in &self.metrics {
            let _ = writeln!(out, "  {name:<width$}  {value:7.2}");
        }
        out
    }
}

/// Hex SHA-256 of any serializable configuration, via its JSON form.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn pct(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationMode {
    Top1,
    /// Also report the mean of per-class accuracies; every class must have
    /// at least one sample.
    PerClassMean,
}

/// Images paired with a class index into the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub ids: Vec<String>,
    pub embeddings: Array2<f32>,
    pub labels: Vec<usize>,
}

/// `image_id<TAB>class_id` lines.
pub fn parse_label_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    Ok(tsv::read_rows(path, 2)?.into_iter().map(|(_, mut f)| (std::mem::take(&mut f[0]), std::mem::take(&mut f[1]))).collect())
}

impl LabeledImages {
    /// Resolve labels against `classes` and embed the images. Labels naming
    /// other classes are an error.
    pub fn load(vision: &StoreHandle, labels: &[(String, String)], classes: &[String]) -> Result<Self> {
        let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut ids = Vec::with_capacity(labels.len());
        let mut idx = Vec::with_capacity(labels.len());
        for (image, class) in labels {
            let c = *index
                .get(class.as_str())
                .ok_or_else(|| Error::CountMismatch(format!("image `{image}` labeled with unknown class `{class}`")))?;
            ids.push(image.clone());
            idx.push(c);
        }
        let embeddings = embed::vision_ids(vision, &ids)?;
        Ok(Self { ids, embeddings, labels: idx })
    }
}

/// Predicted class per image row.
pub fn classify(z_img: ArrayView2<f32>, classifier: &ClassifierMatrix) -> Result<Vec<usize>> {
    let scores = classifier.score_matrix(z_img)?;
    Ok((0..scores.nrows()).into_par_iter().map(|i| predict(scores.row(i))).collect())
}

pub fn eval_classification(
    images: &LabeledImages,
    classifier: &ClassifierMatrix,
    mode: ClassificationMode,
    dataset: &str,
) -> Result<EvalReport> {
    let n = images.labels.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if images.embeddings.nrows() != n {
        return Err(Error::ShapeMismatch(format!("{} embeddings for {n} labels", images.embeddings.nrows())));
    }
    let k = classifier.num_classes();
    if let Some(&bad) = images.labels.iter().find(|&&l| l >= k) {
        return Err(Error::ShapeMismatch(format!("label {bad} out of range for {k} classes")));
    }
    let predicted = classify(images.embeddings.view(), classifier)?;
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (&p, &l) in predicted.iter().zip(&images.labels) {
        counts[l] += 1;
        hits[l] += usize::from(p == l);
    }
    let mut report = EvalReport::new("classification", dataset, n);
    report.metrics.insert("top1".into(), pct(hits.iter().sum(), n));
    if mode == ClassificationMode::PerClassMean {
        if let Some(c) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyClass(classifier.classes()[c].clone()));
        }
        let mean = (0..k).map(|c| pct(hits[c], counts[c])).sum::<f64>() / k as f64;
        report.metrics.insert("per_class_mean".into(), mean);
    }
    Ok(report)
}

/// Rank of `target` in `scores` under descending order with ties broken
/// toward the lower index (0 = top).
fn rank_of(scores: &[f32], target: usize) -> usize {
    let t = scores[target];
    scores.iter().enumerate().filter(|&(j, &s)| s > t || (s == t && j < target)).count()
}

/// Recall@K both ways. `text_to_image[t]` is the row of the image caption
/// `t` describes. Text→image counts a hit when the matched image ranks in
/// the top K; image→text when any of the image's captions does.
pub fn eval_retrieval(
    z_img: ArrayView2<f32>,
    z_txt: ArrayView2<f32>,
    text_to_image: &[usize],
    k: usize,
    dataset: &str,
) -> Result<EvalReport> {
    let (n_img, n_txt) = (z_img.nrows(), z_txt.nrows());
    if n_img == 0 || n_txt == 0 {
        return Err(Error::EmptyInput);
    }
    if text_to_image.len() != n_txt || text_to_image.iter().any(|&i| i >= n_img) {
        return Err(Error::ShapeMismatch("text_to_image must map every caption to an image row".into()));
    }
    if z_img.ncols() != z_txt.ncols() {
        return Err(Error::DimMismatch(format!("image width {} vs text width {}", z_img.ncols(), z_txt.ncols())));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("K must be positive".into()));
    }
    if k > n_img || k > n_txt {
        return Err(Error::KExceedsCorpus { k, corpus: n_img.min(n_txt) });
    }
    let sims = z_txt.dot(&z_img.t()); // texts × images
    let t2i_hits: usize = (0..n_txt)
        .into_par_iter()
        .filter(|&t| rank_of(sims.row(t).as_slice().unwrap(), text_to_image[t]) < k)
        .count();

    let mut captions_of = vec![Vec::new(); n_img];
    for (t, &i) in text_to_image.iter().enumerate() {
        captions_of[i].push(t);
    }
    let sims_t = sims.t().as_standard_layout().into_owned(); // images × texts
    let i2t_hits: usize = (0..n_img)
        .into_par_iter()
        .filter(|&i| {
            let row = sims_t.row(i);
            let row = row.as_slice().unwrap();
            captions_of[i].iter().any(|&t| rank_of(row, t) < k)
        })
        .count();

    let mut report = EvalReport::new("retrieval", dataset, n_txt);
    report.metrics.insert(format!("t2i_recall@{k}"), pct(t2i_hits, n_txt));
    report.metrics.insert(format!("i2t_recall@{k}"), pct(i2t_hits, n_img));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinogroundItem {
    pub image0: String,
    pub image1: String,
    pub caption0: String,
    pub caption1: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinogroundVerdict {
    pub text: bool,
    pub image: bool,
    pub group: bool,
}

/// `sim[c][i] = ⟨caption_c, image_i⟩`.
pub fn winoground_verdict(sim: [[f32; 2]; 2]) -> WinogroundVerdict {
    let text = sim[0][0] > sim[1][0] && sim[1][1] > sim[0][1];
    let image = sim[0][0] > sim[0][1] && sim[1][1] > sim[1][0];
    WinogroundVerdict { text, image, group: text && image }
}

/// `image0<TAB>image1<TAB>caption0<TAB>caption1` lines.
pub fn parse_winoground_manifest(path: &Path) -> Result<Vec<WinogroundItem>> {
    tsv::read_rows(path, 4)?
        .into_iter()
        .map(|(line, f)| {
            if f[0] == f[1] || f[2] == f[3] {
                return Err(Error::Parse { path: path.to_path_buf(), line, reason: "item ids must be distinct".into() });
            }
            Ok(WinogroundItem { image0: f[0].clone(), image1: f[1].clone(), caption0: f[2].clone(), caption1: f[3].clone() })
        })
        .collect()
}

/// Resolve both id lists up front so every missing id is reported at once.
fn resolve_all(vision: &StoreHandle, text: &StoreHandle, images: &[&str], captions: &[&str]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut missing = Vec::new();
    let mut lookup = |store: &StoreHandle, ids: &[&str]| -> Vec<usize> {
        ids.iter()
            .filter_map(|id| {
                let r = store.index_of(id);
                if r.is_none() {
                    missing.push((*id).to_owned());
                }
                r
            })
            .collect()
    };
    let v = lookup(vision, images);
    let t = lookup(text, captions);
    if missing.is_empty() {
        Ok((v, t))
    } else {
        missing.sort();
        missing.dedup();
        Err(Error::MissingEmbedding(missing))
    }
}

pub fn winoground_from_verdicts(verdicts: &[WinogroundVerdict], dataset: &str, per_item: bool) -> Result<EvalReport> {
    let n = verdicts.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut report = EvalReport::new("winoground", dataset, n);
    report.metrics.insert("text".into(), pct(verdicts.iter().filter(|v| v.text).count(), n));
    report.metrics.insert("image".into(), pct(verdicts.iter().filter(|v| v.image).count(), n));
    report.metrics.insert("group".into(), pct(verdicts.iter().filter(|v| v.group).count(), n));
    if per_item {
        report.items = verdicts.iter().map(|v| serde_json::to_value(v).unwrap()).collect();
    }
    Ok(report)
}

pub fn eval_winoground(
    items: &[WinogroundItem],
    net: &ProjectionNet<f32>,
    vision: &StoreHandle,
    text: &StoreHandle,
    dataset: &str,
    per_item: bool,
) -> Result<EvalReport> {
    let images: Vec<&str> = items.iter().flat_map(|it| [it.image0.as_str(), it.image1.as_str()]).collect();
    let captions: Vec<&str> = items.iter().flat_map(|it| [it.caption0.as_str(), it.caption1.as_str()]).collect();
    let (v_rows, t_rows) = resolve_all(vision, text, &images, &captions)?;
    let zi = embed::vision_rows(vision, &v_rows)?;
    let zt = embed::text_rows(net, text, &t_rows)?;
    let verdicts: Vec<WinogroundVerdict> = (0..items.len())
        .map(|k| {
            let s = |c: usize, i: usize| zt.row(2 * k + c).dot(&zi.row(2 * k + i));
            winoground_verdict([[s(0, 0), s(0, 1)], [s(1, 0), s(1, 1)]])
        })
        .collect();
    let mut report = winoground_from_verdicts(&verdicts, dataset, per_item)?;
    if per_item {
        for (value, item) in report.items.iter_mut().zip(items) {
            value["image0"] = item.image0.clone().into();
            value["caption0"] = item.caption0.clone().into();
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionChoiceItem {
    pub image: String,
    pub positive: String,
    pub negative: String,
}

/// `image<TAB>positive<TAB>negative` lines.
pub fn parse_caption_choice_manifest(path: &Path) -> Result<Vec<CaptionChoiceItem>> {
    Ok(tsv::read_rows(path, 3)?
        .into_iter()
        .map(|(_, f)| CaptionChoiceItem { image: f[0].clone(), positive: f[1].clone(), negative: f[2].clone() })
        .collect())
}

/// Accuracy given `(⟨img, positive⟩, ⟨img, negative⟩)` pairs. Ties fail.
pub fn caption_choice_from_scores(scores: &[(f32, f32)], dataset: &str) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = scores.iter().filter(|(p, n)| p > n).count();
    let mut report = EvalReport::new("caption_choice", dataset, scores.len());
    report.metrics.insert("accuracy".into(), pct(hits, scores.len()));
    Ok(report)
}

pub fn eval_caption_choice(
    items: &[CaptionChoiceItem],
    net: &ProjectionNet<f32>,
    vision: &StoreHandle,
    text: &StoreHandle,
    dataset: &str,
) -> Result<EvalReport> {
    let images: Vec<&str> = items.iter().map(|it| it.image.as_str()).collect();
    let captions: Vec<&str> = items.iter().flat_map(|it| [it.positive.as_str(), it.negative.as_str()]).collect();
    let (v_rows, t_rows) = resolve_all(vision, text, &images, &captions)?;
    let zi = embed::vision_rows(vision, &v_rows)?;
    let zt = embed::text_rows(net, text, &t_rows)?;
    let scores: Vec<(f32, f32)> =
        (0..items.len()).map(|k| (zi.row(k).dot(&zt.row(2 * k)), zi.row(k).dot(&zt.row(2 * k + 1)))).collect();
    caption_choice_from_scores(&scores, dataset)
}
