//! Config files. Relative paths are resolved against the directory of the
//! config file, and every input path is checked before any work starts.

use std::fs;
use std::path::{Path, PathBuf};

use frozen_align::class_reps::{expand_templates, load_class_names, load_templates, ClassRepresentationSet, RepresentationKind};
use frozen_align::eval::ClassificationMode;
use frozen_align::optimizer::AdamConfig;
use frozen_align::projection::ProjectionConfig;
use frozen_align::trainer::TrainConfig;
use frozen_align::viterb::{SplitSpec, ViterbSettings};
use frozen_align::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Flag overrides shared by the commands that train.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub max_steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub tau: Option<f64>,
}

impl Overrides {
    fn apply(&self, root_seed: &mut u64, train: &mut TrainConfig) {
        if let Some(s) = self.seed {
            *root_seed = s;
        }
        if let Some(n) = self.max_steps {
            train.max_steps = n;
        }
        if let Some(b) = self.batch_size {
            train.batch_size = b;
        }
        if let Some(t) = self.tau {
            train.tau = t;
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Absolute form of `path`, which must exist.
fn input(base: &Path, path: &Path) -> Result<PathBuf> {
    let p = base.join(path);
    if !p.exists() {
        return Err(Error::InvalidConfig(format!("input not found: {}", p.display())));
    }
    Ok(std::path::absolute(&p).unwrap_or(p))
}

/// Where class texts come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RepresentationSpec {
    /// Every template filled with every class name.
    Templates { class_names: PathBuf, templates: PathBuf },
    /// One file per class, one description per line.
    Description { dir: PathBuf },
    /// One article per class, split into sentences.
    ArticleSentences { dir: PathBuf },
}

impl RepresentationSpec {
    fn resolve(&self, base: &Path) -> Result<Self> {
        Ok(match self {
            Self::Templates { class_names, templates } => {
                Self::Templates { class_names: input(base, class_names)?, templates: input(base, templates)? }
            }
            Self::Description { dir } => Self::Description { dir: input(base, dir)? },
            Self::ArticleSentences { dir } => Self::ArticleSentences { dir: input(base, dir)? },
        })
    }

    /// Texts for `classes` (in that order) or, without it, for every class
    /// the source defines.
    pub fn load(&self, classes: Option<&[String]>) -> Result<ClassRepresentationSet> {
        match self {
            Self::Templates { class_names, templates } => {
                let set = expand_templates(&load_class_names(class_names)?, &load_templates(templates)?)?;
                match classes {
                    Some(c) => set.restrict(c),
                    None => Ok(set),
                }
            }
            Self::Description { dir } => ClassRepresentationSet::load_dir(dir, RepresentationKind::Description, classes),
            Self::ArticleSentences { dir } => ClassRepresentationSet::load_dir(dir, RepresentationKind::ArticleSentences, classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub vision_store: PathBuf,
    pub text_store: PathBuf,
    /// `image_id<TAB>caption_id[,caption_id...]`
    pub pairs: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub projection: ProjectionConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
}

impl TrainFile {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let mut c: Self = read_json(path)?;
        let base = base_dir(path);
        c.vision_store = input(&base, &c.vision_store)?;
        c.text_store = input(&base, &c.text_store)?;
        c.pairs = input(&base, &c.pairs)?;
        c.out = c.out.map(|o| base.join(o));
        overrides.apply(&mut c.seed, &mut c.train);
        c.train.seed = c.seed;
        c.projection.seed = c.seed;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Classification {
        dataset: String,
        /// `image_id<TAB>class_id`
        labels: PathBuf,
        representations: RepresentationSpec,
        #[serde(default = "default_mode")]
        mode: ClassificationMode,
    },
    Retrieval {
        dataset: String,
        /// Same format as the training pair manifest.
        pairs: PathBuf,
        #[serde(default = "default_k")]
        k: usize,
    },
    Winoground {
        dataset: String,
        items: PathBuf,
    },
    CaptionChoice {
        dataset: String,
        items: PathBuf,
    },
}

fn default_mode() -> ClassificationMode {
    ClassificationMode::PerClassMean
}

fn default_k() -> usize {
    5
}

impl TaskSpec {
    pub fn dataset(&self) -> &str {
        match self {
            Self::Classification { dataset, .. }
            | Self::Retrieval { dataset, .. }
            | Self::Winoground { dataset, .. }
            | Self::CaptionChoice { dataset, .. } => dataset,
        }
    }

    fn resolve(&self, base: &Path) -> Result<Self> {
        let mut t = self.clone();
        match &mut t {
            Self::Classification { labels, representations, .. } => {
                *labels = input(base, labels)?;
                *representations = representations.resolve(base)?;
            }
            Self::Retrieval { pairs, .. } => *pairs = input(base, pairs)?,
            Self::Winoground { items, .. } | Self::CaptionChoice { items, .. } => *items = input(base, items)?,
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    pub checkpoint: PathBuf,
    pub vision_store: PathBuf,
    pub text_store: PathBuf,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub tasks: Vec<TaskSpec>,
}

impl EvalFile {
    /// With `dataset`, only that dataset's tasks are kept.
    pub fn load(path: &Path, dataset: Option<&str>) -> Result<Self> {
        let mut c: Self = read_json(path)?;
        let base = base_dir(path);
        if let Some(d) = dataset {
            c.tasks.retain(|t| t.dataset() == d);
            if c.tasks.is_empty() {
                return Err(Error::InvalidConfig(format!("no task for dataset `{d}`")));
            }
        }
        if c.tasks.is_empty() {
            return Err(Error::InvalidConfig("no tasks configured".into()));
        }
        c.checkpoint = input(&base, &c.checkpoint)?;
        c.vision_store = input(&base, &c.vision_store)?;
        c.text_store = input(&base, &c.text_store)?;
        c.out = c.out.map(|o| base.join(o));
        c.tasks = c.tasks.iter().map(|t| t.resolve(&base)).collect::<Result<_>>()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViterbDataset {
    pub name: String,
    pub vision_store: PathBuf,
    pub text_store: PathBuf,
    pub split: SplitSpec,
    /// `image_id<TAB>class_id`, seen classes only.
    pub train_labels: PathBuf,
    /// `image_id<TAB>class_id`, unseen classes only.
    pub eval_labels: PathBuf,
    pub representations: RepresentationSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViterbFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub settings: ViterbSettings,
    pub datasets: Vec<ViterbDataset>,
}

impl ViterbFile {
    pub fn load(path: &Path, overrides: &Overrides, dataset: Option<&str>) -> Result<Self> {
        let mut c: Self = read_json(path)?;
        let base = base_dir(path);
        if let Some(d) = dataset {
            c.datasets.retain(|x| x.name == d);
            if c.datasets.is_empty() {
                return Err(Error::InvalidConfig(format!("no dataset named `{d}`")));
            }
        }
        if c.datasets.is_empty() {
            return Err(Error::InvalidConfig("no datasets configured".into()));
        }
        for d in &mut c.datasets {
            d.vision_store = input(&base, &d.vision_store)?;
            d.text_store = input(&base, &d.text_store)?;
            d.train_labels = input(&base, &d.train_labels)?;
            d.eval_labels = input(&base, &d.eval_labels)?;
            d.representations = d.representations.resolve(&base)?;
            d.split = match &d.split {
                SplitSpec::File { path } => SplitSpec::File { path: input(&base, path)? },
                SplitSpec::Random { classes, seen, unseen, seed } => {
                    SplitSpec::Random { classes: input(&base, classes)?, seen: *seen, unseen: *unseen, seed: *seed }
                }
                SplitSpec::MostPopulated { seen_classes, frequencies, unseen } => SplitSpec::MostPopulated {
                    seen_classes: input(&base, seen_classes)?,
                    frequencies: input(&base, frequencies)?,
                    unseen: *unseen,
                },
            };
        }
        c.out = c.out.map(|o| base.join(o));
        overrides.apply(&mut c.seed, &mut c.settings.train);
        c.settings.train.seed = c.seed;
        c.settings.projection.seed = c.seed;
        Ok(c)
    }
}
