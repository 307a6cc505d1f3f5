//! On-disk dataset layout: `<root>/<case id>/image.{raw,json}`,
//! `<root>/<case id>/label.{raw,json}` and `<root>/split.json`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::io::{load_labels, load_volume, save_labels, save_volume};
use crate::volume::{preprocess, DatasetSplit, LabelMap, Volume};

pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Clone)]
pub struct DatasetDir {
    root: PathBuf,
}

/// A case ready for training or evaluation: preprocessed image plus labels.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub labels: LabelMap,
}

impl DatasetDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn case_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.case_dir(id).join("image.raw")
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.case_dir(id).join("label.raw")
    }

    pub fn split_path(&self) -> PathBuf {
        self.root.join(SPLIT_FILE)
    }

    pub fn load_split(&self) -> Result<DatasetSplit> {
        DatasetSplit::load(&self.split_path())
    }

    pub fn write_case(&self, id: &str, image: &Volume, labels: &LabelMap) -> Result<()> {
        let dir = self.case_dir(id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_volume(image, &self.image_path(id))?;
        save_labels(labels, &self.label_path(id))
    }

    /// Raw (unpreprocessed) image and labels.
    pub fn read_case_raw(&self, id: &str) -> Result<(Volume, LabelMap)> {
        let image = load_volume(&self.image_path(id))?;
        let labels = load_labels(&self.label_path(id))?;
        if image.shape() != labels.shape() {
            return Err(Error::Shape(format!(
                "case {id}: image {} and labels {} differ",
                image.shape(),
                labels.shape()
            )));
        }
        Ok((image, labels))
    }

    /// Loads and percentile-normalises one case.
    pub fn load_case(&self, id: &str) -> Result<Case> {
        let (raw, labels) = self.read_case_raw(id)?;
        let image = preprocess(&raw)?.volume;
        Ok(Case {
            id: id.to_string(),
            image,
            labels,
        })
    }

    pub fn load_cases(&self, ids: &[String]) -> Result<Vec<Case>> {
        let missing: Vec<String> = ids
            .iter()
            .filter(|id| !self.image_path(id).exists() || !self.label_path(id).exists())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingCases(missing));
        }
        ids.iter().map(|id| self.load_case(id)).collect()
    }
}
