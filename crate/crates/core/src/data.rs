//! In-memory dataset samples and the on-disk dataset directory layout:
//! `images/NNNN.png` plus `annotations.json` and `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::Box2D;
use crate::detector::GroundTruthSet;
use crate::image::{Image, ImageError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// One training or evaluation sample. `forced_background` regions carry
/// extra suppress-everything supervision during training; they are produced
/// by disappearance-style poisoning.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub gt: GroundTruthSet,
    pub poisoned: bool,
    pub forced_background: Vec<Box2D>,
}

impl Sample {
    pub fn clean(image: Image, gt: GroundTruthSet) -> Self {
        Self {
            image,
            gt,
            poisoned: false,
            forced_background: Vec::new(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectRecord {
    #[serde(rename = "box")]
    box_: Box2D,
    label: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRecord {
    objects: Vec<ObjectRecord>,
    poisoned: bool,
    forced_background: Vec<Box2D>,
}

/// Writes `samples` into `dir` in the dataset directory layout. `manifest`
/// is stored verbatim as `manifest.json`.
pub fn save_dataset(
    dir: &Path,
    samples: &[Sample],
    manifest: &serde_json::Value,
) -> Result<(), DataError> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        s.image.save_png(&images.join(format!("{i:04}.png")))?;
        records.push(ImageRecord {
            objects: s
                .gt
                .boxes
                .iter()
                .zip(&s.gt.labels)
                .map(|(b, &l)| ObjectRecord { box_: *b, label: l })
                .collect(),
            poisoned: s.poisoned,
            forced_background: s.forced_background.clone(),
        });
    }
    fs::write(
        dir.join("annotations.json"),
        serde_json::to_vec_pretty(&records)?,
    )?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(manifest)?,
    )?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<Sample>, serde_json::Value), DataError> {
    let records: Vec<ImageRecord> =
        serde_json::from_slice(&fs::read(dir.join("annotations.json"))?)?;
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let mut samples = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let image = Image::load_png(&dir.join("images").join(format!("{i:04}.png")))?;
        let mut gt = GroundTruthSet::default();
        for o in r.objects {
            gt.boxes.push(o.box_);
            gt.labels.push(o.label);
        }
        samples.push(Sample {
            image,
            gt,
            poisoned: r.poisoned,
            forced_background: r.forced_background,
        });
    }
    Ok((samples, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let mut img = Image::zeros(64, 64);
        img.as_mut_slice()[100] = 128.0 / 255.0;
        let gt = GroundTruthSet {
            boxes: vec![Box2D::new(4.0, 4.0, 20.0, 20.0)],
            labels: vec![2],
        };
        let s = Sample {
            image: img,
            gt,
            poisoned: true,
            forced_background: vec![Box2D::new(30.0, 30.0, 40.0, 40.0)],
        };
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &[s.clone()], &serde_json::json!({"seed": 1}))
            .unwrap();
        let (back, manifest) = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].image, s.image);
        assert_eq!(back[0].gt.labels, s.gt.labels);
        assert_eq!(back[0].gt.boxes, s.gt.boxes);
        assert!(back[0].poisoned);
        assert_eq!(back[0].forced_background, s.forced_background);
        assert_eq!(manifest["seed"], 1);
    }
}
