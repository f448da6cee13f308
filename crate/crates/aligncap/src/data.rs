//! Training examples and their on-disk JSON form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frozen::SceneInput;
use crate::god::{BBox, Detection};

/// One desk-scale region-captioning example. `gt_tags` holds sorted, distinct
/// indices into the tag vocabulary (the stored form of a multi-hot vector).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub scene: SceneInput,
    pub target: BBox,
    pub detections: Vec<Detection>,
    pub gt_tags: Vec<usize>,
    pub gt_caption: String,
}

impl SyntheticExample {
    pub fn validate(&self, v_tag: usize) -> Result<()> {
        self.scene.validate()?;
        for d in &self.detections {
            d.validate()?;
        }
        if self.gt_caption.trim().is_empty() {
            return Err(Error::Precondition("example gt_caption is empty".into()));
        }
        if self.gt_tags.is_empty() {
            return Err(Error::Precondition("example needs at least one positive tag".into()));
        }
        if let Some(w) = self.gt_tags.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Precondition(format!(
                "gt_tags must be sorted and distinct, got {} then {}",
                w[0], w[1]
            )));
        }
        let last = *self.gt_tags.last().expect("non-empty");
        if last >= v_tag {
            return Err(Error::Precondition(format!(
                "gt_tag index {last} out of range for tag vocabulary of {v_tag}"
            )));
        }
        Ok(())
    }

    /// Dense 0/1 labels over the tag vocabulary.
    pub fn multi_hot(&self, v_tag: usize) -> Vec<f64> {
        let mut y = vec![0.0; v_tag];
        for &i in &self.gt_tags {
            y[i] = 1.0;
        }
        y
    }
}

pub fn save_dataset(path: &Path, examples: &[SyntheticExample]) -> Result<()> {
    let text = serde_json::to_string(examples)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads and validates a JSON dataset; `v_tag` bounds the tag indices.
/// An empty list is an error: nothing can be trained or evaluated on it.
pub fn load_dataset(path: &Path, v_tag: usize) -> Result<Vec<SyntheticExample>> {
    let text = std::fs::read_to_string(path)?;
    let examples: Vec<SyntheticExample> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if examples.is_empty() {
        return Err(Error::Precondition(format!("{}: dataset is empty", path.display())));
    }
    for (i, ex) in examples.iter().enumerate() {
        ex.validate(v_tag).map_err(|e| {
            Error::Precondition(format!("{} example {i}: {e}", path.display()))
        })?;
    }
    Ok(examples)
}
