use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct ImageSample {
    pub image: Image,
    pub class_id: usize,
    pub pseudo_class_id: Option<usize>,
    pub split: Split,
    pub is_anomalous: bool,
    pub mask: Option<Mask>,
    /// Path relative to the dataset root, `/`-separated.
    pub source_path: String,
}

impl ImageSample {
    pub fn label(&self, source: LabelSource) -> Option<usize> {
        match source {
            LabelSource::Raw => Some(self.class_id),
            LabelSource::Pseudo => self.pseudo_class_id,
        }
    }

    /// The ground-truth mask, or an all-zero mask for normal samples.
    pub fn mask_or_empty(&self) -> Mask {
        self.mask
            .clone()
            .unwrap_or_else(|| Mask::zeros(self.image.height(), self.image.width()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    #[default]
    Raw,
    Pseudo,
}

/// Immutable collection of train and test samples spanning `class_count` classes.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    samples: Vec<ImageSample>,
    class_names: Vec<String>,
}

impl DatasetIndex {
    pub fn new(samples: Vec<ImageSample>, class_names: Vec<String>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::invalid("a dataset needs at least one class"));
        }
        if let Some(s) = samples.iter().find(|s| s.class_id >= class_names.len()) {
            return Err(Error::invalid(format!(
                "sample {} has class id {} but only {} classes exist",
                s.source_path,
                s.class_id,
                class_names.len()
            )));
        }
        if let Some(s) = samples
            .iter()
            .find(|s| s.split == Split::Train && (s.is_anomalous || s.mask.is_some()))
        {
            return Err(Error::invalid(format!(
                "train sample {} must be normal and unmasked",
                s.source_path
            )));
        }
        Ok(Self {
            samples,
            class_names,
        })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &ImageSample {
        &self.samples[i]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Test)
    }

    pub fn train_count(&self) -> usize {
        self.samples.iter().filter(|s| s.split == Split::Train).count()
    }

    pub fn test_count(&self) -> usize {
        self.samples.iter().filter(|s| s.split == Split::Test).count()
    }

    fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Returns a copy with the given pseudo-labels attached to the train
    /// samples, in train order.
    pub fn with_pseudo_labels(&self, labels: &[usize]) -> Result<Self> {
        let train = self.train_indices();
        if train.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} pseudo-labels for {} train samples",
                labels.len(),
                train.len()
            )));
        }
        let mut out = self.clone();
        for (&i, &label) in train.iter().zip(labels) {
            out.samples[i].pseudo_class_id = Some(label);
        }
        Ok(out)
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect())
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_dir_sorted(dir)?.into_iter().filter(|p| p.is_dir()).collect())
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Scans an MVTec-style tree:
///
/// ```text
/// root/<class>/train/good/*.png
/// root/<class>/test/good/*.png
/// root/<class>/test/<defect>/*.png
/// root/<class>/ground_truth/<defect>/<stem>_mask.png
/// ```
pub fn scan_dataset(root: &Path, resolution: usize) -> Result<DatasetIndex> {
    if resolution == 0 {
        return Err(Error::invalid("resolution must be positive"));
    }
    if !root.is_dir() {
        return Err(Error::MalformedDataset {
            path: root.to_path_buf(),
            reason: "dataset root is not a directory".into(),
        });
    }
    let class_dirs = subdirs(root)?;
    if class_dirs.is_empty() {
        return Err(Error::MalformedDataset {
            path: root.to_path_buf(),
            reason: "no class directories".into(),
        });
    }

    let mut samples = Vec::new();
    let mut class_names = Vec::with_capacity(class_dirs.len());
    for (class_id, class_dir) in class_dirs.iter().enumerate() {
        let class_name = file_name(class_dir);
        let train_dir = class_dir.join("train").join("good");
        let test_dir = class_dir.join("test");
        for required in [&train_dir, &test_dir] {
            if !required.is_dir() {
                return Err(Error::MalformedDataset {
                    path: required.clone(),
                    reason: "missing split directory".into(),
                });
            }
        }

        let train_files = png_files(&train_dir)?;
        if train_files.is_empty() {
            return Err(Error::EmptyClass(class_name));
        }
        for path in train_files {
            samples.push(ImageSample {
                image: Image::load_png(&path, resolution)?,
                class_id,
                pseudo_class_id: None,
                split: Split::Train,
                is_anomalous: false,
                mask: None,
                source_path: relative(root, &path),
            });
        }

        for defect_dir in subdirs(&test_dir)? {
            let defect = file_name(&defect_dir);
            let anomalous = defect != "good";
            for path in png_files(&defect_dir)? {
                let mask = if anomalous {
                    let stem = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    let mask_path = class_dir
                        .join("ground_truth")
                        .join(&defect)
                        .join(format!("{stem}_mask.png"));
                    if !mask_path.is_file() {
                        return Err(Error::MalformedDataset {
                            path: mask_path,
                            reason: "missing ground-truth mask".into(),
                        });
                    }
                    let mask = Mask::load_png(&mask_path, resolution)?;
                    if mask.positive_count() == 0 {
                        return Err(Error::MalformedDataset {
                            path: mask_path,
                            reason: "anomalous sample has an empty mask".into(),
                        });
                    }
                    Some(mask)
                } else {
                    None
                };
                samples.push(ImageSample {
                    image: Image::load_png(&path, resolution)?,
                    class_id,
                    pseudo_class_id: None,
                    split: Split::Test,
                    is_anomalous: anomalous,
                    mask,
                    source_path: relative(root, &path),
                });
            }
        }
        class_names.push(class_name);
    }
    DatasetIndex::new(samples, class_names)
}

/// Content hash over the relative paths and byte sizes of every PNG under
/// the class directories of `root`.
pub fn dataset_fingerprint(root: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, u64)>) -> Result<()> {
        for path in read_dir_sorted(dir)? {
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                let len = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
                out.push((relative(root, &path), len));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    for class_dir in subdirs(root)? {
        walk(root, &class_dir, &mut files)?;
    }
    files.sort();
    let mut hasher = Sha256::new();
    for (path, len) in &files {
        hasher.update(path.as_bytes());
        hasher.update([0u8]);
        hasher.update(len.to_le_bytes());
    }
    Ok(hex::encode(hasher.finalize()))
}
