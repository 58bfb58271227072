//! Textual class representations (prompt templates, descriptions, article
//! sentences) and score-level zero-shot classifiers built from them.
//!
//! On disk, a representation kind is a directory holding one UTF-8 file per
//! class, named by class id (any extension). Descriptions are one text per
//! non-empty line; articles are split into sentences. Each text gets the
//! feature id `<kind>/<class_id>#<index>`, which is the id the text store
//! must carry its embedding under.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::ProjectionNet;
use crate::store::StoreHandle;
use crate::tsv;

pub const PLACEHOLDER: &str = "{}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationKind {
    Templates,
    Description,
    ArticleSentences,
}

impl RepresentationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RepresentationKind::Templates => "templates",
            RepresentationKind::Description => "description",
            RepresentationKind::ArticleSentences => "article_sentences",
        }
    }
}

impl std::fmt::Display for RepresentationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn text_feature_id(kind: RepresentationKind, class_id: &str, index: usize) -> String {
    format!("{}/{class_id}#{index}", kind.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassName {
    pub id: String,
    pub name: String,
}

impl ClassName {
    pub fn new(id: impl Into<String>, name: impl Into<String>) -> Self {
        Self { id: id.into(), name: name.into() }
    }

    /// A class whose id is its name.
    pub fn named(name: impl Into<String>) -> Self {
        let name = name.into();
        Self { id: name.clone(), name }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassText {
    /// Feature id in the text store.
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRepresentationSet {
    pub kind: RepresentationKind,
    pub classes: Vec<String>,
    pub texts: Vec<Vec<ClassText>>,
}

impl ClassRepresentationSet {
    pub fn new(kind: RepresentationKind, classes: Vec<String>, texts: Vec<Vec<ClassText>>) -> Result<Self> {
        if classes.len() != texts.len() {
            return Err(Error::CountMismatch(format!("{} classes but {} text lists", classes.len(), texts.len())));
        }
        if let Some(i) = texts.iter().position(Vec::is_empty) {
            return Err(Error::CountMismatch(format!("class `{}` has no texts", classes[i])));
        }
        Ok(Self { kind, classes, texts })
    }

    /// Build from raw per-class texts, assigning feature ids.
    pub fn from_texts(kind: RepresentationKind, per_class: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut classes = Vec::with_capacity(per_class.len());
        let mut texts = Vec::with_capacity(per_class.len());
        for (class, list) in per_class {
            let entries = list
                .into_iter()
                .enumerate()
                .map(|(i, text)| ClassText { id: text_feature_id(kind, &class, i), text })
                .collect();
            classes.push(class);
            texts.push(entries);
        }
        Self::new(kind, classes, texts)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn text_count(&self) -> usize {
        self.texts.iter().map(Vec::len).sum()
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn texts_of(&self, class: &str) -> Option<&[ClassText]> {
        self.class_index(class).map(|i| self.texts[i].as_slice())
    }

    /// The classes in `order`, in that order.
    pub fn restrict(&self, order: &[String]) -> Result<Self> {
        let mut texts = Vec::with_capacity(order.len());
        for class in order {
            let list = self
                .texts_of(class)
                .ok_or_else(|| Error::CountMismatch(format!("no representation for class `{class}`")))?;
            texts.push(list.to_vec());
        }
        Self::new(self.kind, order.to_vec(), texts)
    }

    /// `feature_id<TAB>text` lines, for feeding a text feature extractor.
    pub fn to_text_manifest(&self) -> String {
        let mut out = String::new();
        for t in self.texts.iter().flatten() {
            let clean: String = t.text.chars().map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c }).collect();
            let _ = writeln!(out, "{}\t{}", t.id, clean);
        }
        out
    }

    /// Read a representation directory. With `classes`, exactly those
    /// classes are loaded in that order; otherwise every file, sorted by
    /// class id.
    pub fn load_dir(dir: &Path, kind: RepresentationKind, classes: Option<&[String]>) -> Result<Self> {
        let mut files = BTreeMap::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_file() {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    files.insert(stem.to_owned(), path);
                }
            }
        }
        let order: Vec<String> = match classes {
            Some(c) => c.to_vec(),
            None => files.keys().cloned().collect(),
        };
        let mut per_class = Vec::with_capacity(order.len());
        for class in order {
            let path = files.get(&class).ok_or_else(|| {
                Error::io(dir.join(&class), std::io::Error::new(std::io::ErrorKind::NotFound, "no representation file"))
            })?;
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let list = match kind {
                RepresentationKind::ArticleSentences => split_sentences(&text).map_err(|_| Error::Parse {
                    path: path.clone(),
                    line: 1,
                    reason: "empty article".into(),
                })?,
                _ => text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect(),
            };
            per_class.push((class, list));
        }
        Self::from_texts(kind, per_class)
    }
}

/// Substitute every class name into every template.
pub fn expand_templates<S: AsRef<str>>(classes: &[ClassName], templates: &[S]) -> Result<ClassRepresentationSet> {
    for t in templates {
        if t.as_ref().matches(PLACEHOLDER).count() != 1 {
            return Err(Error::BadTemplate(t.as_ref().to_owned()));
        }
    }
    if templates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let per_class = classes
        .iter()
        .map(|c| (c.id.clone(), templates.iter().map(|t| t.as_ref().replacen(PLACEHOLDER, &c.name, 1)).collect()))
        .collect();
    ClassRepresentationSet::from_texts(RepresentationKind::Templates, per_class)
}

/// One template per non-empty line.
pub fn load_templates(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(str::to_owned).collect())
}

/// `class_id<TAB>class name` lines.
pub fn load_class_names(path: &Path) -> Result<Vec<ClassName>> {
    Ok(tsv::read_rows(path, 2)?.into_iter().map(|(_, f)| ClassName::new(f[0].clone(), f[1].clone())).collect())
}

const ABBREVIATIONS: &[&str] = &[
    "e.g", "i.e", "etc", "vs", "cf", "al", "approx", "ca", "mr", "mrs", "ms", "dr", "prof", "st", "jr", "sr", "no",
    "fig", "figs", "inc", "ltd", "co", "corp", "mt", "ft", "sp", "spp", "var", "subsp", "ssp", "u.s", "u.k", "a.m",
    "p.m", "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec", "gen", "col", "lt",
    "sgt", "capt", "cmdr", "adm", "gov", "rev", "hon", "est", "dept", "univ", "vol", "ed", "eds",
];

/// True when the period at byte `end` closes an abbreviation or an initial.
fn is_abbreviation(text: &str, end: usize) -> bool {
    let before = &text[..end];
    let word_start = before.rfind(|c: char| c.is_whitespace() || c == '(' || c == '"').map_or(0, |i| i + 1);
    let word = before[word_start..].trim_start_matches(|c: char| !c.is_alphanumeric());
    if word.is_empty() {
        return false;
    }
    // single-letter initial such as "J." in "J. Smith"
    if word.chars().count() == 1 && word.chars().all(|c| c.is_alphabetic()) {
        return true;
    }
    let lower = word.to_lowercase();
    ABBREVIATIONS.contains(&lower.as_str())
}

/// Split on `.`, `!` or `?` (plus any closing quotes or brackets) followed
/// by whitespace, except after known abbreviations, initials, or when the
/// next word starts lowercase. Sentences are trimmed; none are empty.
pub fn split_sentences(article: &str) -> Result<Vec<String>> {
    if article.trim().is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = article.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '.' | '!' | '?' | '"' | '\'' | ')' | ']' | '”' | '’') {
                j += 1;
            }
            let boundary = j == chars.len() || chars[j].1.is_whitespace();
            if boundary {
                let next_word = chars[j..].iter().map(|&(_, c)| c).find(|c| !c.is_whitespace());
                let lower_next = next_word.is_some_and(|c| c.is_lowercase());
                let guarded = c == '.' && j == i + 1 && is_abbreviation(article, pos);
                if !(guarded || lower_next) {
                    let end = if j == chars.len() { article.len() } else { chars[j].0 };
                    let sentence = article[start..end].trim();
                    if !sentence.is_empty() {
                        out.push(sentence.to_owned());
                    }
                    start = end;
                }
            }
            i = j;
        } else {
            i += 1;
        }
    }
    let tail = article[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_owned());
    }
    Ok(out)
}

/// Projected, normalized text embeddings grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierMatrix {
    classes: Vec<String>,
    rows: Array2<f32>,
    /// `offsets[c]..offsets[c + 1]` are the rows of class `c`.
    offsets: Vec<usize>,
}

impl ClassifierMatrix {
    /// From per-class blocks of unit rows.
    pub fn from_blocks(classes: Vec<String>, blocks: &[Array2<f32>]) -> Result<Self> {
        if classes.len() != blocks.len() || blocks.is_empty() {
            return Err(Error::CountMismatch(format!("{} classes, {} row blocks", classes.len(), blocks.len())));
        }
        let dim = blocks[0].ncols();
        let mut offsets = vec![0];
        for b in blocks {
            if b.nrows() == 0 || b.ncols() != dim {
                return Err(Error::ShapeMismatch("class blocks must be non-empty and equally wide".into()));
            }
            offsets.push(offsets.last().unwrap() + b.nrows());
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let rows = ndarray::concatenate(Axis(0), &views).unwrap();
        if rows.rows().into_iter().any(|r| (r.dot(&r).sqrt() - 1.0).abs() > 1e-5) {
            return Err(Error::NotNormalized);
        }
        Ok(Self { classes, rows, offsets })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<f32> {
        &self.rows
    }

    pub fn class_rows(&self, class: usize) -> ArrayView2<'_, f32> {
        self.rows.slice(s![self.offsets[class]..self.offsets[class + 1], ..])
    }

    /// Per-class mean similarity for every image row: `images × classes`.
    pub fn score_matrix(&self, z_img: ArrayView2<f32>) -> Result<Array2<f32>> {
        if z_img.ncols() != self.dim() {
            return Err(Error::DimMismatch(format!("image width {} vs classifier width {}", z_img.ncols(), self.dim())));
        }
        let sims = z_img.dot(&self.rows.t());
        let mut scores = Array2::zeros((z_img.nrows(), self.num_classes()));
        for c in 0..self.num_classes() {
            let (a, b) = (self.offsets[c], self.offsets[c + 1]);
            let block = sims.slice(s![.., a..b]);
            scores.column_mut(c).assign(&(block.sum_axis(Axis(1)) / (b - a) as f32));
        }
        Ok(scores)
    }
}

/// Embed every text through the projection (eval mode) and normalize.
pub fn build_classifier(
    reps: &ClassRepresentationSet,
    net: &ProjectionNet<f32>,
    text_store: &StoreHandle,
) -> Result<ClassifierMatrix> {
    let ids: Vec<&str> = reps.texts.iter().flatten().map(|t| t.id.as_str()).collect();
    let rows = text_store.resolve(ids.iter().copied())?;
    let embedded = crate::embed::text_rows(net, text_store, &rows)?;
    let mut blocks = Vec::with_capacity(reps.len());
    let mut start = 0;
    for list in &reps.texts {
        blocks.push(embedded.slice(s![start..start + list.len(), ..]).to_owned());
        start += list.len();
    }
    ClassifierMatrix::from_blocks(reps.classes.clone(), &blocks)
}

/// `score(c) = mean_t ⟨z_img, z_t⟩` over the texts of class `c`.
pub fn score_classes(z_img: ArrayView1<f32>, classifier: &ClassifierMatrix) -> Result<Array1<f32>> {
    let scores = classifier.score_matrix(z_img.insert_axis(Axis(0)))?;
    Ok(scores.row(0).to_owned())
}

/// Index of the highest score; ties go to the lowest index.
pub fn predict(scores: ArrayView1<f32>) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}
