//! Feature-file serialization, the dataset model, batching, and the
//! synthetic paired-dataset generator.

mod batch;
mod features;
pub mod format;
pub mod manifest;
mod synth;

pub use batch::make_batches;
pub use features::{Batch, ImageFeatures, PairedDataset, Split, TextFeatures};
pub use format::{load_features, save_features};
pub use manifest::{load_manifest, save_manifest};
pub use synth::{generate_synthetic, nearest_centroid_accuracy, SynthConfig};

use crate::error::{AsclError, Result};
use std::path::Path;

/// Loads a dataset from either the binary format or a JSON manifest,
/// sniffing the magic bytes.
pub fn load_dataset_auto(path: impl AsRef<Path>) -> Result<PairedDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(format::MAGIC) {
        return format::decode_features(&bytes);
    }
    let text = String::from_utf8(bytes).map_err(|_| {
        AsclError::format(0, "file is neither ASCL binary nor utf-8 JSON manifest")
    })?;
    manifest::parse_manifest(&text)
}
