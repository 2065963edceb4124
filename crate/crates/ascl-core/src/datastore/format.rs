//! The "ASCL" binary feature format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"ASCL"
//! version  u32 (currently 1)
//! dim      u32
//! n_img    u32
//! n_cap    u32
//! image records:   id(u32 len + utf8), k u32, k*dim f32, dim f32 global
//! caption records: id, parent id, split u8 (0 train / 1 val / 2 test),
//!                  l u32, l*dim f32
//! ```
//!
//! Floats are stored as f32; the in-memory f64 values round-trip bit-exactly
//! at f32 granularity. A split byte rides on each caption record so that split
//! tags survive the round trip.

use std::fs;
use std::path::Path;

use crate::datastore::{ImageFeatures, PairedDataset, Split, TextFeatures};
use crate::error::{AsclError, Result};
use crate::numerics::Mat;

pub const MAGIC: &[u8; 4] = b"ASCL";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AsclError::format(
                self.offset(),
                format!("truncated payload while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.offset();
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| AsclError::format(at, format!("invalid utf-8 in {what}")))
    }

    fn f32_block(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.offset();
        let bytes = self.take(count * 4, what)?;
        let mut out = Vec::with_capacity(count);
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(AsclError::format(
                    at + (i as u64) * 4,
                    format!("non-finite value in {what}"),
                ));
            }
            out.push(v as f64);
        }
        Ok(out)
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes a dataset into the binary layout.
pub fn encode_features(dataset: &PairedDataset) -> Result<Vec<u8>> {
    let dim = dataset.dim;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.images.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.captions.len() as u32).to_le_bytes());
    for img in &dataset.images {
        if img.dim() != dim {
            return Err(AsclError::format(
                out.len() as u64,
                format!(
                    "image record '{}' has dim {}, header dim is {dim}",
                    img.image_id,
                    img.dim()
                ),
            ));
        }
        push_string(&mut out, &img.image_id);
        out.extend_from_slice(&(img.region_count() as u32).to_le_bytes());
        push_f32s(&mut out, img.regions.data());
        push_f32s(&mut out, &img.global_vec);
    }
    for (cap, split) in dataset.captions.iter().zip(&dataset.splits) {
        if cap.dim() != dim {
            return Err(AsclError::format(
                out.len() as u64,
                format!(
                    "caption record '{}' has dim {}, header dim is {dim}",
                    cap.text_id,
                    cap.dim()
                ),
            ));
        }
        push_string(&mut out, &cap.text_id);
        push_string(&mut out, &cap.parent_image);
        out.push(split.to_byte());
        out.extend_from_slice(&(cap.word_count() as u32).to_le_bytes());
        push_f32s(&mut out, cap.words.data());
    }
    Ok(out)
}

/// Parses the binary layout.
pub fn decode_features(buf: &[u8]) -> Result<PairedDataset> {
    let mut r = Reader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(AsclError::format(0, "bad magic, expected \"ASCL\""));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(AsclError::format(
            4,
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let dim = r.u32("dim")? as usize;
    let n_img = r.u32("image count")? as usize;
    let n_cap = r.u32("caption count")? as usize;

    let mut images = Vec::with_capacity(n_img);
    for i in 0..n_img {
        let record_at = r.offset();
        let id = r.string(&format!("image {i} id"))?;
        let k = r.u32(&format!("image '{id}' region count"))? as usize;
        if k == 0 {
            return Err(AsclError::format(
                record_at,
                format!("image record '{id}' has zero regions"),
            ));
        }
        let data = r.f32_block(k * dim, &format!("image '{id}' regions"))?;
        let regions = Mat::from_vec(k, dim, data)
            .map_err(|e| AsclError::format(record_at, format!("image record '{id}': {e}")))?;
        let global = r.f32_block(dim, &format!("image '{id}' global vector"))?;
        images.push(
            ImageFeatures::new(id.clone(), regions, global)
                .map_err(|e| AsclError::format(record_at, format!("image record '{id}': {e}")))?,
        );
    }

    let mut captions = Vec::with_capacity(n_cap);
    let mut splits = Vec::with_capacity(n_cap);
    for i in 0..n_cap {
        let record_at = r.offset();
        let id = r.string(&format!("caption {i} id"))?;
        let parent = r.string(&format!("caption '{id}' parent id"))?;
        let split_byte = r.u8(&format!("caption '{id}' split tag"))?;
        let split = Split::from_byte(split_byte).ok_or_else(|| {
            AsclError::format(
                r.offset() - 1,
                format!("caption record '{id}' has invalid split tag {split_byte}"),
            )
        })?;
        let l = r.u32(&format!("caption '{id}' word count"))? as usize;
        if l == 0 {
            return Err(AsclError::format(
                record_at,
                format!("caption record '{id}' has zero words"),
            ));
        }
        let data = r.f32_block(l * dim, &format!("caption '{id}' words"))?;
        let words = Mat::from_vec(l, dim, data)
            .map_err(|e| AsclError::format(record_at, format!("caption record '{id}': {e}")))?;
        captions.push(
            TextFeatures::new(id.clone(), parent, words)
                .map_err(|e| AsclError::format(record_at, format!("caption record '{id}': {e}")))?,
        );
        splits.push(split);
    }

    if r.pos != buf.len() {
        return Err(AsclError::format(
            r.offset(),
            format!("{} trailing bytes after last record", buf.len() - r.pos),
        ));
    }

    PairedDataset::new(images, captions, splits)
}

/// Writes a dataset to disk in the binary format.
pub fn save_features(dataset: &PairedDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_features(dataset)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a dataset from disk, validating header and every record.
pub fn load_features(path: impl AsRef<Path>) -> Result<PairedDataset> {
    let bytes = fs::read(path)?;
    decode_features(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::features::test_fixtures::tiny_dataset;

    fn datasets_structurally_equal(a: &PairedDataset, b: &PairedDataset) -> bool {
        a.dim == b.dim
            && a.images == b.images
            && a.captions == b.captions
            && a.splits == b.splits
    }

    /// Rounds all features through f32 like one save/load does.
    fn to_f32_granularity(ds: &PairedDataset) -> PairedDataset {
        decode_features(&encode_features(ds).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = to_f32_granularity(&tiny_dataset(3, 3, 5));
        let bytes1 = encode_features(&ds).unwrap();
        let back = decode_features(&bytes1).unwrap();
        assert!(datasets_structurally_equal(&ds, &back));
        let bytes2 = encode_features(&back).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode_features(&tiny_dataset(2, 2, 3)).unwrap();
        bytes[0] = b'X';
        let err = decode_features(&bytes).unwrap_err();
        match err {
            AsclError::FormatError { offset, message } => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = encode_features(&tiny_dataset(2, 2, 3)).unwrap();
        bytes[4] = 99;
        let err = decode_features(&bytes).unwrap_err();
        assert!(matches!(err, AsclError::FormatError { offset: 4, .. }));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = encode_features(&tiny_dataset(2, 2, 3)).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        let err = decode_features(cut).unwrap_err();
        match err {
            AsclError::FormatError { message, .. } => {
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn record_with_wrong_dim_names_the_record() {
        let mut ds = tiny_dataset(2, 2, 4);
        // Force a header/record mismatch through the public fields.
        ds.images[1].regions = Mat::zeros(2, 2);
        ds.images[1].global_vec = vec![0.0, 0.0];
        let err = encode_features(&ds).unwrap_err();
        match err {
            AsclError::FormatError { message, .. } => {
                assert!(message.contains("img1"), "{message}");
                assert!(message.contains("dim 2"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn save_load_files_round_trip() {
        let dir = std::env::temp_dir().join("ascl_format_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tiny.ascl");
        let ds = to_f32_granularity(&tiny_dataset(4, 2, 6));
        save_features(&ds, &path).unwrap();
        let back = load_features(&path).unwrap();
        assert!(datasets_structurally_equal(&ds, &back));
        std::fs::remove_file(&path).unwrap();
    }
}
