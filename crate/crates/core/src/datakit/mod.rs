//! Dataset ingestion, split construction and batch loading.
//!
//! Datasets live on disk as one directory per class (`lung_aca`, `lung_scc`,
//! `lung_n`, `colon_aca`, `colon_n`) of PNG or JPEG images. Three binary
//! tasks are built from them; each draws a balanced sample, shuffles it per
//! class with a seeded stream, and carves 20% off for test and then 20% of
//! the remainder for validation.

pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPipeline;
use crate::error::{Error, Result};
use crate::exec;
use crate::imageio::{stack_batch, Image};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// The five tissue classes, named after their dataset directories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassName {
    LungAca,
    LungScc,
    LungN,
    ColonAca,
    ColonN,
}

impl ClassName {
    pub const ALL: [ClassName; 5] = [
        ClassName::LungAca,
        ClassName::LungScc,
        ClassName::LungN,
        ClassName::ColonAca,
        ClassName::ColonN,
    ];

    pub fn dir_name(&self) -> &'static str {
        match self {
            ClassName::LungAca => "lung_aca",
            ClassName::LungScc => "lung_scc",
            ClassName::LungN => "lung_n",
            ClassName::ColonAca => "colon_aca",
            ClassName::ColonN => "colon_n",
        }
    }

    pub fn from_dir_name(name: &str) -> Option<ClassName> {
        ClassName::ALL.iter().copied().find(|c| c.dir_name() == name)
    }

    fn ordinal(&self) -> u64 {
        ClassName::ALL.iter().position(|c| c == self).unwrap() as u64
    }
}

impl fmt::Display for ClassName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// The three binary classification tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    /// Malignant lung tissue (adenocarcinoma + squamous, label 1) vs benign.
    Lung,
    /// Lung adenocarcinoma (label 1) vs squamous cell carcinoma.
    LungSubtype,
    /// Colon adenocarcinoma (label 1) vs benign colon tissue.
    Colon,
}

impl TaskId {
    pub fn required_classes(&self) -> &'static [ClassName] {
        match self {
            TaskId::Lung => &[ClassName::LungAca, ClassName::LungScc, ClassName::LungN],
            TaskId::LungSubtype => &[ClassName::LungAca, ClassName::LungScc],
            TaskId::Colon => &[ClassName::ColonAca, ClassName::ColonN],
        }
    }

    pub fn label_for(&self, class: ClassName) -> u8 {
        match (self, class) {
            (TaskId::Lung, ClassName::LungAca | ClassName::LungScc) => 1,
            (TaskId::Lung, _) => 0,
            (TaskId::LungSubtype, ClassName::LungAca) => 1,
            (TaskId::LungSubtype, _) => 0,
            (TaskId::Colon, ClassName::ColonAca) => 1,
            (TaskId::Colon, _) => 0,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::Lung => "lung",
            TaskId::LungSubtype => "lung_subtype",
            TaskId::Colon => "colon",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-class image paths discovered under a dataset root.
#[derive(Debug, Clone, Default)]
pub struct Inventory {
    classes: BTreeMap<ClassName, Vec<PathBuf>>,
    pub warnings: Vec<String>,
}

impl Inventory {
    pub fn from_paths(classes: BTreeMap<ClassName, Vec<PathBuf>>) -> Self {
        Inventory {
            classes,
            warnings: Vec::new(),
        }
    }

    pub fn count(&self, class: ClassName) -> usize {
        self.classes.get(&class).map_or(0, Vec::len)
    }

    pub fn classes(&self) -> impl Iterator<Item = (ClassName, &[PathBuf])> {
        self.classes.iter().map(|(c, v)| (*c, v.as_slice()))
    }

    pub fn missing_classes(&self, task: TaskId) -> Vec<ClassName> {
        task.required_classes()
            .iter()
            .copied()
            .filter(|c| self.count(*c) == 0)
            .collect()
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Walk a dataset root and collect image paths per class directory.
///
/// Unknown subdirectories are skipped with a warning; a known class
/// directory with no images is an error, as is a root with no class
/// directories at all. Paths come out in lexicographic order.
pub fn scan_dataset(root: &Path) -> Result<Inventory> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();

    let mut inventory = Inventory::default();
    for dir in dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        let Some(class) = ClassName::from_dir_name(&name) else {
            inventory
                .warnings
                .push(format!("skipping unknown class directory {:?}", name));
            continue;
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Data(format!(
                "class directory {} contains no images",
                dir.display()
            )));
        }
        inventory.classes.insert(class, paths);
    }
    if inventory.classes.is_empty() {
        return Err(Error::Data(format!(
            "no class directories found under {}",
            root.display()
        )));
    }
    Ok(inventory)
}

/// One image with its task-specific binary label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub path: PathBuf,
    pub class_name: ClassName,
    pub label: u8,
}

/// Train/validation/test examples for one binary task.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub task: TaskId,
    pub seed: u64,
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl DatasetSplit {
    pub fn partition_counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    /// Count of examples of one class within a partition.
    pub fn class_count(partition: &[LabeledExample], class: ClassName) -> usize {
        partition.iter().filter(|e| e.class_name == class).count()
    }
}

/// How many examples each class contributes to a task given the available
/// counts: the lung task draws half as many of each malignant subtype as
/// benign images; two-class tasks draw balanced counts.
fn draw_counts(inventory: &Inventory, task: TaskId) -> BTreeMap<ClassName, usize> {
    let mut out = BTreeMap::new();
    match task {
        TaskId::Lung => {
            let m = (inventory.count(ClassName::LungN) / 2)
                .min(inventory.count(ClassName::LungAca))
                .min(inventory.count(ClassName::LungScc));
            out.insert(ClassName::LungAca, m);
            out.insert(ClassName::LungScc, m);
            out.insert(ClassName::LungN, 2 * m);
        }
        TaskId::LungSubtype | TaskId::Colon => {
            let classes = task.required_classes();
            let m = classes.iter().map(|&c| inventory.count(c)).min().unwrap();
            for &c in classes {
                out.insert(c, m);
            }
        }
    }
    out
}

/// Build the three-way split for one task.
///
/// Per class: sort paths, shuffle with a stream keyed by `(seed, class)`,
/// draw the task's sample, then take `floor(0.2 * n)` for test and
/// `floor(0.2 * remaining)` for validation.
pub fn build_split(inventory: &Inventory, task: TaskId, seed: u64) -> Result<DatasetSplit> {
    let missing = inventory.missing_classes(task);
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "task {task} is missing classes {:?}",
            missing.iter().map(|c| c.dir_name()).collect::<Vec<_>>()
        )));
    }
    let draws = draw_counts(inventory, task);
    for (&class, &n) in &draws {
        if n < 5 {
            return Err(Error::Data(format!(
                "task {task}: class {class} draws only {n} examples; at least 5 are needed to fill all partitions"
            )));
        }
    }

    let mut split = DatasetSplit {
        task,
        seed,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (&class, &draw) in &draws {
        let mut paths: Vec<PathBuf> = inventory
            .classes
            .get(&class)
            .expect("presence checked")
            .clone();
        paths.sort();
        let mut rng = rng::stream(seed, &[tag::SPLIT, class.ordinal()]);
        paths.shuffle(&mut rng);
        paths.truncate(draw);

        let label = task.label_for(class);
        let n_test = draw / 5;
        let n_val = (draw - n_test) / 5;
        for (i, path) in paths.into_iter().enumerate() {
            let example = LabeledExample {
                path,
                class_name: class,
                label,
            };
            if i < n_test {
                split.test.push(example);
            } else if i < n_test + n_val {
                split.validation.push(example);
            } else {
                split.train.push(example);
            }
        }
    }
    Ok(split)
}

/// Serialized form of a [`DatasetSplit`], with paths relative to the
/// dataset root so runs are reproducible and auditable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub task: TaskId,
    pub seed: u64,
    pub root: String,
    pub train: Vec<ManifestEntry>,
    pub validation: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub class: ClassName,
    pub label: u8,
}

fn to_entries(partition: &[LabeledExample], root: &Path) -> Vec<ManifestEntry> {
    partition
        .iter()
        .map(|e| ManifestEntry {
            path: e
                .path
                .strip_prefix(root)
                .unwrap_or(&e.path)
                .to_string_lossy()
                .replace('\\', "/"),
            class: e.class_name,
            label: e.label,
        })
        .collect()
}

fn from_entries(entries: &[ManifestEntry], root: &Path) -> Vec<LabeledExample> {
    entries
        .iter()
        .map(|e| LabeledExample {
            path: root.join(&e.path),
            class_name: e.class,
            label: e.label,
        })
        .collect()
}

impl SplitManifest {
    pub fn from_split(split: &DatasetSplit, root: &Path) -> SplitManifest {
        SplitManifest {
            task: split.task,
            seed: split.seed,
            root: root.to_string_lossy().into_owned(),
            train: to_entries(&split.train, root),
            validation: to_entries(&split.validation, root),
            test: to_entries(&split.test, root),
        }
    }

    /// Reconstruct the split, resolving paths against `root` (which may
    /// differ from the recorded one if the dataset moved).
    pub fn to_split(&self, root: &Path) -> DatasetSplit {
        DatasetSplit {
            task: self.task,
            seed: self.seed,
            train: from_entries(&self.train, root),
            validation: from_entries(&self.validation, root),
            test: from_entries(&self.test, root),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("cannot serialize manifest: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SplitManifest> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&json)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Decode a batch of examples into a `[N, 3, H, W]` tensor in `[0, 1]` plus
/// labels.
///
/// With `draws` supplied, the pipeline's augmentation steps run per image
/// keyed by the matching draw index; otherwise images only get the
/// deterministic crop to the pipeline's target size. Decoding and
/// augmentation run in parallel; output order is the input order.
pub fn load_batch(
    examples: &[LabeledExample],
    pipeline: &AugmentPipeline,
    draws: Option<&[u64]>,
) -> Result<(Tensor, Vec<u8>)> {
    if examples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(d) = draws {
        if d.len() != examples.len() {
            return Err(Error::Parameter(format!(
                "{} draw indices for {} examples",
                d.len(),
                examples.len()
            )));
        }
    }
    let tensors: Vec<Result<Tensor>> = exec::map_indexed(examples.len(), |i| {
        let img = Image::load(&examples[i].path)?;
        let prepared = match draws {
            Some(d) => pipeline.apply(&img, d[i])?,
            None => pipeline.prepare(&img)?,
        };
        Ok(prepared.to_tensor())
    });
    let tensors: Vec<Tensor> = tensors.into_iter().collect::<Result<_>>()?;
    let labels = examples.iter().map(|e| e.label).collect();
    Ok((stack_batch(&tensors)?, labels))
}
