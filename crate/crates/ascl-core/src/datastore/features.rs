//! Feature records and the paired dataset model.

use std::collections::BTreeMap;

use crate::error::{AsclError, Result};
use crate::numerics::Mat;

/// Region features plus one whole-image vector for a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub image_id: String,
    /// K x D region feature matrix.
    pub regions: Mat,
    /// D-dimensional whole-image feature.
    pub global_vec: Vec<f64>,
}

impl ImageFeatures {
    pub fn new(image_id: impl Into<String>, regions: Mat, global_vec: Vec<f64>) -> Result<Self> {
        let image_id = image_id.into();
        if regions.rows() == 0 {
            return Err(AsclError::config(format!(
                "image '{image_id}' must have at least one region"
            )));
        }
        if global_vec.len() != regions.cols() {
            return Err(AsclError::shape(format!(
                "image '{image_id}': global vector has dim {}, regions have dim {}",
                global_vec.len(),
                regions.cols()
            )));
        }
        if global_vec.iter().any(|v| !v.is_finite()) {
            return Err(AsclError::NumericError(format!(
                "image '{image_id}': non-finite global feature"
            )));
        }
        Ok(ImageFeatures {
            image_id,
            regions,
            global_vec,
        })
    }

    pub fn region_count(&self) -> usize {
        self.regions.rows()
    }

    pub fn dim(&self) -> usize {
        self.regions.cols()
    }
}

/// Word features for one caption, tied to its parent image.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    pub text_id: String,
    pub parent_image: String,
    /// L x D word embedding matrix.
    pub words: Mat,
}

impl TextFeatures {
    pub fn new(
        text_id: impl Into<String>,
        parent_image: impl Into<String>,
        words: Mat,
    ) -> Result<Self> {
        let text_id = text_id.into();
        if words.rows() == 0 {
            return Err(AsclError::config(format!(
                "caption '{text_id}' must have at least one word"
            )));
        }
        Ok(TextFeatures {
            text_id,
            parent_image: parent_image.into(),
            words,
        })
    }

    pub fn word_count(&self) -> usize {
        self.words.rows()
    }

    pub fn dim(&self) -> usize {
        self.words.cols()
    }
}

/// Dataset split tag carried by each caption (each caption is one pair).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(AsclError::config(format!("unknown split '{other}'"))),
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Images with their caption groups. Immutable after construction; concurrent
/// readers are fine.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub dim: usize,
    pub images: Vec<ImageFeatures>,
    pub captions: Vec<TextFeatures>,
    /// Split tag per caption, parallel to `captions`.
    pub splits: Vec<Split>,
    /// image_id -> caption indices, insertion-order within each group.
    caption_groups: BTreeMap<String, Vec<usize>>,
    image_index: BTreeMap<String, usize>,
}

impl PairedDataset {
    pub fn new(
        images: Vec<ImageFeatures>,
        captions: Vec<TextFeatures>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(AsclError::config("dataset has no images"));
        }
        if captions.len() != splits.len() {
            return Err(AsclError::config(format!(
                "{} captions but {} split tags",
                captions.len(),
                splits.len()
            )));
        }
        let dim = images[0].dim();
        let mut image_index = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            if img.dim() != dim {
                return Err(AsclError::config(format!(
                    "image '{}' has dim {}, dataset dim is {dim}",
                    img.image_id,
                    img.dim()
                )));
            }
            if image_index.insert(img.image_id.clone(), i).is_some() {
                return Err(AsclError::config(format!(
                    "duplicate image id '{}'",
                    img.image_id
                )));
            }
        }
        let mut caption_groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (c, cap) in captions.iter().enumerate() {
            if cap.dim() != dim {
                return Err(AsclError::config(format!(
                    "caption '{}' has dim {}, dataset dim is {dim}",
                    cap.text_id,
                    cap.dim()
                )));
            }
            if !image_index.contains_key(&cap.parent_image) {
                return Err(AsclError::PairingError(format!(
                    "caption '{}' references missing image '{}'",
                    cap.text_id, cap.parent_image
                )));
            }
            caption_groups
                .entry(cap.parent_image.clone())
                .or_default()
                .push(c);
        }
        Ok(PairedDataset {
            dim,
            images,
            captions,
            splits,
            caption_groups,
            image_index,
        })
    }

    pub fn caption_groups(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.caption_groups
    }

    pub fn image_position(&self, image_id: &str) -> Option<usize> {
        self.image_index.get(image_id).copied()
    }

    pub fn caption_position(&self, text_id: &str) -> Option<usize> {
        self.captions.iter().position(|c| c.text_id == text_id)
    }

    /// Parent image index for a caption index.
    pub fn parent_of(&self, caption: usize) -> usize {
        self.image_index[&self.captions[caption].parent_image]
    }

    /// Caption indices carrying the given split tag, in stored order.
    pub fn split_captions(&self, split: Split) -> Vec<usize> {
        (0..self.captions.len())
            .filter(|&c| self.splits[c] == split)
            .collect()
    }

    /// Sibling captions of the same image (excluding `caption` itself),
    /// restricted to a split.
    pub fn siblings_in_split(&self, caption: usize, split: Split) -> Vec<usize> {
        let parent = &self.captions[caption].parent_image;
        self.caption_groups[parent]
            .iter()
            .copied()
            .filter(|&c| c != caption && self.splits[c] == split)
            .collect()
    }
}

/// N aligned (image, caption) positive pairs drawn from one split.
#[derive(Debug, Clone)]
pub struct Batch {
    /// (image index, caption index) pairs.
    pub pairs: Vec<(usize, usize)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}
