//! Epoch batching: seeded order, exact-size batches, remainder dropped.

use rand::seq::SliceRandom;

use crate::datastore::{Batch, PairedDataset, Split};
use crate::error::{AsclError, Result};
use crate::seeding;

/// Partitions one split into batches of exactly `n` pairs.
///
/// Every pair of the split appears at most once; a short remainder is dropped
/// so in-batch negatives always exist. With `shuffle` off the stored caption
/// order is used.
pub fn make_batches(
    dataset: &PairedDataset,
    split: Split,
    n: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if n < 2 {
        return Err(AsclError::config(
            "batch size must be at least 2 so in-batch negatives exist",
        ));
    }
    let mut captions = dataset.split_captions(split);
    if n > captions.len() {
        return Err(AsclError::config(format!(
            "batch size {n} larger than the {} split ({} pairs)",
            split.as_str(),
            captions.len()
        )));
    }
    if shuffle {
        captions.shuffle(&mut seeding::stream(&[seed, 0xBA7C]));
    }
    Ok(captions
        .chunks_exact(n)
        .map(|chunk| Batch {
            pairs: chunk.iter().map(|&c| (dataset.parent_of(c), c)).collect(),
        })
        .collect())
}
