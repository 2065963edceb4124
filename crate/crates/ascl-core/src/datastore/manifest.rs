//! JSON manifest alternative for tiny hand-written fixtures.
//!
//! ```json
//! {
//!   "dim": 2,
//!   "images": [
//!     {"id": "img0", "regions": [[1.0, 0.0]], "global": [0.5, 0.5]}
//!   ],
//!   "captions": [
//!     {"id": "cap0", "parent": "img0", "split": "train", "words": [[1.0, 0.1]]}
//!   ]
//! }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datastore::{ImageFeatures, PairedDataset, Split, TextFeatures};
use crate::error::{AsclError, Result};
use crate::numerics::Mat;

#[derive(Serialize, Deserialize)]
struct ManifestImage {
    id: String,
    regions: Vec<Vec<f64>>,
    global: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ManifestCaption {
    id: String,
    parent: String,
    #[serde(default = "default_split")]
    split: String,
    words: Vec<Vec<f64>>,
}

fn default_split() -> String {
    "train".to_string()
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dim: usize,
    images: Vec<ManifestImage>,
    captions: Vec<ManifestCaption>,
}

fn rows_to_mat(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<Mat> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(AsclError::format(
                0,
                format!("{what}: row {i} has {} values, manifest dim is {dim}", row.len()),
            ));
        }
    }
    Mat::from_rows(rows).map_err(|e| AsclError::format(0, format!("{what}: {e}")))
}

/// Parses a manifest string into a dataset.
pub fn parse_manifest(text: &str) -> Result<PairedDataset> {
    let manifest: Manifest = serde_json::from_str(text)?;
    let mut images = Vec::with_capacity(manifest.images.len());
    for img in &manifest.images {
        let regions = rows_to_mat(&img.regions, manifest.dim, &format!("image '{}'", img.id))?;
        if img.global.len() != manifest.dim {
            return Err(AsclError::format(
                0,
                format!(
                    "image '{}': global vector has {} values, manifest dim is {}",
                    img.id,
                    img.global.len(),
                    manifest.dim
                ),
            ));
        }
        images.push(ImageFeatures::new(&img.id, regions, img.global.clone())?);
    }
    let mut captions = Vec::with_capacity(manifest.captions.len());
    let mut splits = Vec::with_capacity(manifest.captions.len());
    for cap in &manifest.captions {
        let words = rows_to_mat(&cap.words, manifest.dim, &format!("caption '{}'", cap.id))?;
        captions.push(TextFeatures::new(&cap.id, &cap.parent, words)?);
        splits.push(Split::parse(&cap.split)?);
    }
    PairedDataset::new(images, captions, splits)
}

/// Serializes a dataset as a manifest string.
pub fn to_manifest(dataset: &PairedDataset) -> Result<String> {
    let manifest = Manifest {
        dim: dataset.dim,
        images: dataset
            .images
            .iter()
            .map(|img| ManifestImage {
                id: img.image_id.clone(),
                regions: (0..img.regions.rows())
                    .map(|r| img.regions.row(r).to_vec())
                    .collect(),
                global: img.global_vec.clone(),
            })
            .collect(),
        captions: dataset
            .captions
            .iter()
            .zip(&dataset.splits)
            .map(|(cap, split)| ManifestCaption {
                id: cap.text_id.clone(),
                parent: cap.parent_image.clone(),
                split: split.as_str().to_string(),
                words: (0..cap.words.rows()).map(|r| cap.words.row(r).to_vec()).collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&manifest)?)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<PairedDataset> {
    parse_manifest(&fs::read_to_string(path)?)
}

pub fn save_manifest(dataset: &PairedDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_manifest(dataset)?)?;
    Ok(())
}
