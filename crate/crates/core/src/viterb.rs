//! Vision-text transfer benchmark: train the projection on images of seen
//! classes paired with their class texts, then classify images of disjoint
//! unseen classes using only the unseen classes' texts.
//!
//! Leakage is checked twice: before training, on the declared image lists
//! and text ids, and after training, against every store row the trainer
//! actually read.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::class_reps::{build_classifier, ClassRepresentationSet, RepresentationKind};
use crate::error::{Error, Result};
use crate::eval::{eval_classification, ClassificationMode, EvalReport, LabeledImages};
use crate::optimizer::AdamConfig;
use crate::projection::{ProjectionConfig, ProjectionNet};
use crate::seed::{derive_rng, stream};
use crate::store::{PairedDataset, StoreHandle};
use crate::trainer::{split_train_val, AccessLog, TrainConfig, TrainReport, Trainer};
use crate::tsv;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViterbSplit {
    pub dataset: String,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    /// How the split was produced.
    pub provenance: String,
}

fn duplicates(list: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut dup = BTreeSet::new();
    for c in list {
        if !seen.insert(c) {
            dup.insert(c.clone());
        }
    }
    dup.into_iter().collect()
}

impl ViterbSplit {
    pub fn new(dataset: impl Into<String>, seen: Vec<String>, unseen: Vec<String>, provenance: impl Into<String>) -> Result<Self> {
        if seen.is_empty() || unseen.is_empty() {
            return Err(Error::CountMismatch(format!("{} seen and {} unseen classes", seen.len(), unseen.len())));
        }
        for list in [&seen, &unseen] {
            let dup = duplicates(list);
            if !dup.is_empty() {
                return Err(Error::CountMismatch(format!("duplicate classes: {}", dup.join(", "))));
            }
        }
        let s: BTreeSet<&String> = seen.iter().collect();
        let overlap: Vec<String> = unseen.iter().filter(|c| s.contains(c)).cloned().collect();
        if !overlap.is_empty() {
            return Err(Error::OverlapDetected(overlap));
        }
        Ok(Self { dataset: dataset.into(), seen, unseen, provenance: provenance.into() })
    }

    /// One class id per line under `seen` and `unseen` header lines
    /// (`seen`, `seen:` or `[seen]`). `#` starts a comment line.
    pub fn load(path: &Path, dataset: impl Into<String>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seen = Vec::new();
        let mut unseen = Vec::new();
        let mut current: Option<&mut Vec<String>> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let header = line.trim_start_matches('[').trim_end_matches([']', ':']).to_ascii_lowercase();
            match header.as_str() {
                "seen" => current = Some(&mut seen),
                "unseen" => current = Some(&mut unseen),
                _ => match current.as_deref_mut() {
                    Some(list) => list.push(line.to_owned()),
                    None => {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            line: n + 1,
                            reason: "class id before any `seen`/`unseen` header".into(),
                        })
                    }
                },
            }
        }
        Self::new(dataset, seen, unseen, format!("file {}", path.display()))
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::from("seen\n");
        for c in &self.seen {
            let _ = writeln!(out, "{c}");
        }
        out.push_str("unseen\n");
        for c in &self.unseen {
            let _ = writeln!(out, "{c}");
        }
        out
    }
}

/// How a dataset's seen/unseen split is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    File {
        path: PathBuf,
    },
    /// Seeded random partition of every class in `classes` (one id per
    /// line); `seen + unseen` must equal the class count.
    Random {
        classes: PathBuf,
        seen: usize,
        unseen: usize,
        seed: u64,
    },
    /// The given seen classes; the `unseen` most frequent other classes of
    /// `frequencies` (`class_id<TAB>count`) are unseen.
    MostPopulated {
        seen_classes: PathBuf,
        frequencies: PathBuf,
        unseen: usize,
    },
}

fn read_class_list(path: &Path) -> Result<Vec<String>> {
    Ok(tsv::read_rows(path, 1)?.into_iter().map(|(_, mut f)| f.remove(0)).collect())
}

pub fn random_split(dataset: &str, classes: &[String], seen: usize, unseen: usize, seed: u64) -> Result<ViterbSplit> {
    if seen + unseen != classes.len() {
        return Err(Error::CountMismatch(format!("{seen} seen + {unseen} unseen != {} classes", classes.len())));
    }
    let mut order = classes.to_vec();
    order.sort();
    order.shuffle(&mut derive_rng(seed, stream::SPLIT, 0));
    let unseen_part = order.split_off(seen);
    ViterbSplit::new(dataset, order, unseen_part, format!("random seed={seed} seen={seen} unseen={unseen}"))
}

/// Frequency ties are broken by class id.
pub fn most_populated_split(dataset: &str, seen: Vec<String>, frequencies: &[(String, u64)], unseen: usize) -> Result<ViterbSplit> {
    let s: HashSet<&String> = seen.iter().collect();
    let mut candidates: Vec<&(String, u64)> = frequencies.iter().filter(|(c, _)| !s.contains(c)).collect();
    if candidates.len() < unseen {
        return Err(Error::CountMismatch(format!("only {} candidate classes for {unseen} unseen", candidates.len())));
    }
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let unseen_list = candidates[..unseen].iter().map(|(c, _)| c.clone()).collect();
    ViterbSplit::new(dataset, seen, unseen_list, format!("most populated {unseen}"))
}

impl SplitSpec {
    /// Relative paths are resolved against `base`.
    pub fn resolve(&self, dataset: &str, base: &Path) -> Result<ViterbSplit> {
        match self {
            SplitSpec::File { path } => ViterbSplit::load(&base.join(path), dataset),
            SplitSpec::Random { classes, seen, unseen, seed } => {
                random_split(dataset, &read_class_list(&base.join(classes))?, *seen, *unseen, *seed)
            }
            SplitSpec::MostPopulated { seen_classes, frequencies, unseen } => {
                let path = base.join(frequencies);
                let freq = tsv::read_rows(&path, 2)?
                    .into_iter()
                    .map(|(line, f)| {
                        let count = f[1].parse::<u64>().map_err(|e| Error::Parse {
                            path: path.clone(),
                            line,
                            reason: format!("bad count `{}`: {e}", f[1]),
                        })?;
                        Ok((f[0].clone(), count))
                    })
                    .collect::<Result<Vec<_>>>()?;
                most_populated_split(dataset, read_class_list(&base.join(seen_classes))?, &freq, *unseen)
            }
        }
    }
}

/// Everything one benchmark dataset needs.
#[derive(Debug, Clone)]
pub struct ViterbTask {
    pub split: ViterbSplit,
    pub vision: Arc<StoreHandle>,
    pub text: Arc<StoreHandle>,
    /// `(image_id, class_id)`; every class must be seen.
    pub train_labels: Vec<(String, String)>,
    /// `(image_id, class_id)`; every class must be unseen.
    pub eval_labels: Vec<(String, String)>,
    /// Texts for at least every seen and unseen class.
    pub reps: ClassRepresentationSet,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViterbSettings {
    pub train: TrainConfig,
    pub projection: ProjectionConfig,
    pub optimizer: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViterbEntry {
    pub dataset: String,
    pub kind: RepresentationKind,
    /// Mean of per-class top-1 accuracies over unseen classes, in percent.
    pub unseen_accuracy: f64,
    pub unseen_top1: f64,
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub train_report: Option<TrainReport>,
}

/// Declared-data leak checks, run before any training.
pub fn check_leaks(task: &ViterbTask, seen_reps: &ClassRepresentationSet, unseen_reps: &ClassRepresentationSet) -> Result<()> {
    let seen: HashSet<&str> = task.split.seen.iter().map(String::as_str).collect();
    let unseen: HashSet<&str> = task.split.unseen.iter().map(String::as_str).collect();
    for (image, class) in &task.train_labels {
        if unseen.contains(class.as_str()) {
            return Err(Error::LeakDetected(format!("training image `{image}` is labeled with unseen class `{class}`")));
        }
        if !seen.contains(class.as_str()) {
            return Err(Error::CountMismatch(format!("training image `{image}` has class `{class}` outside the split")));
        }
    }
    for (image, class) in &task.eval_labels {
        if !unseen.contains(class.as_str()) {
            return Err(Error::CountMismatch(format!("evaluation image `{image}` has non-unseen class `{class}`")));
        }
    }
    let eval_images: HashSet<&str> = task.eval_labels.iter().map(|(i, _)| i.as_str()).collect();
    if let Some((image, _)) = task.train_labels.iter().find(|(i, _)| eval_images.contains(i.as_str())) {
        return Err(Error::LeakDetected(format!("image `{image}` is in both training and evaluation")));
    }
    let unseen_texts: HashSet<&str> = unseen_reps.texts.iter().flatten().map(|t| t.id.as_str()).collect();
    if let Some(t) = seen_reps.texts.iter().flatten().find(|t| unseen_texts.contains(t.id.as_str())) {
        return Err(Error::LeakDetected(format!("text `{}` belongs to both seen and unseen classes", t.id)));
    }
    Ok(())
}

/// Post-training audit: no forbidden store row may have been read.
pub fn audit_access(log: &AccessLog, forbidden_vision: &HashSet<usize>, forbidden_text: &HashSet<usize>) -> Result<()> {
    if let Some(r) = log.vision_rows.iter().find(|r| forbidden_vision.contains(r)) {
        return Err(Error::LeakDetected(format!("trainer read evaluation image row {r}")));
    }
    if let Some(r) = log.text_rows.iter().find(|r| forbidden_text.contains(r)) {
        return Err(Error::LeakDetected(format!("trainer read unseen-class text row {r}")));
    }
    Ok(())
}

/// Image-text pairs for training: each image with every text of its class.
fn seen_pairs(task: &ViterbTask, seen_reps: &ClassRepresentationSet) -> Result<PairedDataset> {
    let pairs = task
        .train_labels
        .iter()
        .map(|(image, class)| {
            let texts = seen_reps.texts_of(class).expect("checked against split").iter().map(|t| t.id.clone()).collect();
            (image.clone(), texts)
        })
        .collect();
    PairedDataset::new(task.vision.clone(), task.text.clone(), pairs)
}

/// Train on seen classes and score unseen ones. With `max_steps == 0` the
/// untrained (randomly initialized) projection is evaluated.
pub fn run_viterb(task: &ViterbTask, settings: &ViterbSettings) -> Result<(ViterbEntry, ProjectionNet<f32>)> {
    let seen_reps = task.reps.restrict(&task.split.seen)?;
    let unseen_reps = task.reps.restrict(&task.split.unseen)?;
    check_leaks(task, &seen_reps, &unseen_reps)?;
    if task.train_labels.is_empty() || task.eval_labels.is_empty() {
        return Err(Error::EmptyInput);
    }

    let (net, train_report) = if settings.train.max_steps == 0 {
        (ProjectionNet::<f32>::init(settings.projection.clone())?, None)
    } else {
        settings.train.validate()?;
        let dataset = seen_pairs(task, &seen_reps)?;
        let (train_set, val_set) = split_train_val(&dataset, settings.train.val_fraction, settings.train.seed)?;
        let mut trainer = Trainer::new(
            settings.train.clone(),
            settings.projection.clone(),
            settings.optimizer.clone(),
            train_set,
            Some(val_set),
        )?;
        trainer.record_access();
        let report = trainer.run(None)?;

        let forbidden_vision: HashSet<usize> =
            task.eval_labels.iter().filter_map(|(i, _)| task.vision.index_of(i)).collect();
        let forbidden_text: HashSet<usize> =
            unseen_reps.texts.iter().flatten().filter_map(|t| task.text.index_of(&t.id)).collect();
        audit_access(trainer.access_log().expect("recording enabled"), &forbidden_vision, &forbidden_text)?;
        (trainer.into_net(), Some(report))
    };

    let report = evaluate_unseen(task, &net, &unseen_reps)?;
    let entry = ViterbEntry {
        dataset: task.split.dataset.clone(),
        kind: task.reps.kind,
        unseen_accuracy: report.metric("per_class_mean").unwrap(),
        unseen_top1: report.metric("top1").unwrap(),
        seen_classes: task.split.seen.len(),
        unseen_classes: task.split.unseen.len(),
        train_images: task.train_labels.len(),
        eval_images: task.eval_labels.len(),
        train_report,
    };
    Ok((entry, net))
}

/// Per-class accuracy of `net` on the evaluation images, classifying among
/// the classes of `unseen_reps` (which must be the split's unseen classes,
/// in order).
pub fn evaluate_unseen(task: &ViterbTask, net: &ProjectionNet<f32>, unseen_reps: &ClassRepresentationSet) -> Result<EvalReport> {
    if unseen_reps.classes != task.split.unseen {
        return Err(Error::CountMismatch("representations must list the unseen classes in split order".into()));
    }
    let classifier = build_classifier(unseen_reps, net, &task.text)?;
    let images = LabeledImages::load(&task.vision, &task.eval_labels, &task.split.unseen)?;
    eval_classification(&images, &classifier, ClassificationMode::PerClassMean, &task.split.dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViterbResult {
    pub kind: RepresentationKind,
    pub entries: Vec<ViterbEntry>,
    /// Unweighted mean over datasets.
    pub average: f64,
}

impl ViterbResult {
    /// One row per representation kind, one column per dataset plus the
    /// average.
    pub fn to_table(&self) -> String {
        let mut header = String::from("| representation |");
        let mut row = format!("| {} |", self.kind);
        for e in &self.entries {
            let _ = write!(header, " {} |", e.dataset);
            let _ = write!(row, " {:.1} |", e.unseen_accuracy);
        }
        header.push_str(" average |");
        let _ = write!(row, " {:.1} |", self.average);
        let rule: String = header.chars().map(|c| if c == '|' { '|' } else { '-' }).collect();
        format!("{header}\n{rule}\n{row}\n")
    }
}

/// Combine per-dataset entries, in `expected` order. Every expected dataset
/// must be present exactly once, with a single representation kind.
pub fn aggregate(entries: Vec<ViterbEntry>, expected: &[String]) -> Result<ViterbResult> {
    let mut by_name: BTreeMap<String, ViterbEntry> = BTreeMap::new();
    for e in entries {
        if by_name.contains_key(&e.dataset) {
            return Err(Error::CountMismatch(format!("dataset `{}` reported twice", e.dataset)));
        }
        by_name.insert(e.dataset.clone(), e);
    }
    let missing: Vec<String> = expected.iter().filter(|d| !by_name.contains_key(*d)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingDataset(missing));
    }
    if by_name.len() != expected.len() {
        let extra: Vec<&String> = by_name.keys().filter(|d| !expected.contains(d)).collect();
        return Err(Error::CountMismatch(format!("unexpected datasets: {extra:?}")));
    }
    let entries: Vec<ViterbEntry> = expected.iter().map(|d| by_name.remove(d).unwrap()).collect();
    let kind = entries[0].kind;
    if entries.iter().any(|e| e.kind != kind) {
        return Err(Error::CountMismatch("datasets use different representation kinds".into()));
    }
    let average = entries.iter().map(|e| e.unseen_accuracy).sum::<f64>() / entries.len() as f64;
    Ok(ViterbResult { kind, entries, average })
}
