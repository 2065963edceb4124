//! Evaluation suite: recall@K in both directions, Rsum, alignment and
//! uniformity diagnostics, and length-bucketed retrieval.
//!
//! Protocol: queries come from one split (default `test`); the text-to-image
//! gallery is every image in the dataset, and the image-to-text gallery is
//! the split's captions. A caption's global embedding is computed by fusing
//! it with its own parent image; an image's representative embedding fuses it
//! with the first caption of its group. Alignment uses raw global vectors,
//! uniformity length-normalizes them first. Evaluation is read-only and
//! deterministic for any thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{PairedDataset, Split};
use crate::error::{AsclError, Result};
use crate::matcher::engine::{pair_forward, prepare_image, prepare_text, ScoreMode};
use crate::matcher::ModelParams;
use crate::numerics::{norm, Mat};

/// Recall at 1, 5 and 10 for one retrieval direction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RecallTriple {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl RecallTriple {
    pub fn sum(&self) -> f64 {
        self.r1 + self.r5 + self.r10
    }
}

/// Mean and population variance of pairwise distances.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct UniformityStats {
    pub mean: f64,
    pub variance: f64,
}

/// Retrieval quality for one caption-length bucket (text-to-image).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LengthBucketReport {
    pub label: String,
    pub min_len: usize,
    pub max_len: Option<usize>,
    pub queries: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

/// The full evaluation report, serializable as JSON.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub i2t: RecallTriple,
    pub t2i: RecallTriple,
    /// Sum of all six recalls.
    pub rsum: f64,
    /// Mean Euclidean distance between positive image-text pairs.
    pub alignment_it: f64,
    /// Mean Euclidean distance between co-caption text pairs.
    pub alignment_tt: f64,
    pub uniformity_image: UniformityStats,
    pub uniformity_text: UniformityStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length_buckets: Option<Vec<LengthBucketReport>>,
    /// Effective config echo; re-running with it reproduces this report.
    pub config: BTreeMap<String, String>,
}

/// Default caption-length buckets: short (<10), medium (10-20), long (>20).
pub const DEFAULT_LENGTH_BUCKETS: [(usize, Option<usize>); 3] =
    [(0, Some(9)), (10, Some(20)), (21, None)];

/// Fraction of queries whose top-k gallery entries (ties broken toward the
/// lower index) contain at least one gold item.
pub fn recall_at_k(scores: &Mat, gold: &[Vec<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(AsclError::config("recall k must be at least 1"));
    }
    if scores.rows() != gold.len() {
        return Err(AsclError::shape(format!(
            "{} score rows but {} gold sets",
            scores.rows(),
            gold.len()
        )));
    }
    if scores.rows() == 0 {
        return Err(AsclError::config("recall needs at least one query"));
    }
    let gallery = scores.cols();
    let mut hits = 0usize;
    for (q, gold_set) in gold.iter().enumerate() {
        if gold_set.is_empty() {
            return Err(AsclError::config(format!("query {q} has no gold items")));
        }
        let row = scores.row(q);
        let mut order: Vec<usize> = (0..gallery).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .expect("scores are finite")
                .then(a.cmp(&b))
        });
        let top = &order[..k.min(gallery)];
        if top.iter().any(|i| gold_set.contains(i)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / gold.len() as f64)
}

/// Mean Euclidean distance over positive pairs.
pub fn alignment_metric(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / pairs.len() as f64
}

/// Mean and variance of pairwise Euclidean distances over length-normalized
/// representations of one modality.
pub fn uniformity_metric(reps: &[Vec<f64>]) -> Result<UniformityStats> {
    if reps.len() < 2 {
        return Err(AsclError::config(
            "uniformity needs at least two representations",
        ));
    }
    let unit: Vec<Vec<f64>> = reps
        .iter()
        .map(|r| {
            let n = norm(r);
            if n == 0.0 {
                return Err(AsclError::DegenerateVector(
                    "zero-norm representation in uniformity".into(),
                ));
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect::<Result<_>>()?;
    let mut distances = Vec::with_capacity(reps.len() * (reps.len() - 1) / 2);
    for i in 0..unit.len() {
        for j in (i + 1)..unit.len() {
            let d = unit[i]
                .iter()
                .zip(&unit[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            distances.push(d);
        }
    }
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let variance = distances.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    Ok(UniformityStats { mean, variance })
}

/// Evaluation switches.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub split: Split,
    /// Include the length-bucket breakdown.
    pub lengths: bool,
    /// Config echo to embed in the report.
    pub config: BTreeMap<String, String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: Split::Test,
            lengths: false,
            config: BTreeMap::new(),
        }
    }
}

/// Scores every image against every listed caption in parallel rows.
/// Row i, column j is S(image i, caption queries[j]).
fn full_score_matrix(
    dataset: &PairedDataset,
    params: &ModelParams,
    captions: &[usize],
) -> Result<Mat> {
    let texts = captions
        .iter()
        .map(|&c| prepare_text(params, &dataset.captions[c].words))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = dataset
        .images
        .par_iter()
        .map(|img| -> Result<Vec<f64>> {
            let entity = prepare_image(params, img)?;
            texts
                .iter()
                .map(|t| Ok(pair_forward(params, &entity, t, ScoreMode::Strict)?.score.s))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out = Mat::zeros(dataset.images.len(), captions.len());
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(out)
}

fn recalls_t2i(
    scores_img_by_cap: &Mat,
    dataset: &PairedDataset,
    captions: &[usize],
    query_filter: Option<&[bool]>,
) -> Result<RecallTriple> {
    // Transpose view: one row per caption query over the image gallery.
    let n_img = dataset.images.len();
    let selected: Vec<usize> = match query_filter {
        Some(mask) => (0..captions.len()).filter(|&q| mask[q]).collect(),
        None => (0..captions.len()).collect(),
    };
    if selected.is_empty() {
        return Err(AsclError::config("no text-to-image queries selected"));
    }
    let mut scores = Mat::zeros(selected.len(), n_img);
    let mut gold = Vec::with_capacity(selected.len());
    for (row, &q) in selected.iter().enumerate() {
        for g in 0..n_img {
            scores.data_mut()[row * n_img + g] = scores_img_by_cap.get(g, q);
        }
        gold.push(vec![dataset.parent_of(captions[q])]);
    }
    Ok(RecallTriple {
        r1: recall_at_k(&scores, &gold, 1)?,
        r5: recall_at_k(&scores, &gold, 5)?,
        r10: recall_at_k(&scores, &gold, 10)?,
    })
}

fn recalls_i2t(
    scores_img_by_cap: &Mat,
    dataset: &PairedDataset,
    captions: &[usize],
) -> Result<RecallTriple> {
    // Queries are images that own at least one caption in the split.
    let mut gold_by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (col, &cap) in captions.iter().enumerate() {
        gold_by_image.entry(dataset.parent_of(cap)).or_default().push(col);
    }
    let queries: Vec<usize> = gold_by_image.keys().copied().collect();
    let mut scores = Mat::zeros(queries.len(), captions.len());
    let mut gold = Vec::with_capacity(queries.len());
    for (row, &img) in queries.iter().enumerate() {
        scores
            .row_mut(row)
            .copy_from_slice(scores_img_by_cap.row(img));
        gold.push(gold_by_image[&img].clone());
    }
    Ok(RecallTriple {
        r1: recall_at_k(&scores, &gold, 1)?,
        r5: recall_at_k(&scores, &gold, 5)?,
        r10: recall_at_k(&scores, &gold, 10)?,
    })
}

/// Global embeddings (v_g, w_g) of one ground-truth pair.
fn pair_globals(
    dataset: &PairedDataset,
    params: &ModelParams,
    caption: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let img = &dataset.images[dataset.parent_of(caption)];
    let entity = prepare_image(params, img)?;
    let text = prepare_text(params, &dataset.captions[caption].words)?;
    let cache = pair_forward(params, &entity, &text, ScoreMode::Strict)?;
    Ok((cache.v_g().to_vec(), cache.w_g().to_vec()))
}

/// Runs the full evaluation.
pub fn evaluate(
    dataset: &PairedDataset,
    params: &ModelParams,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let captions = dataset.split_captions(options.split);
    if captions.is_empty() {
        return Err(AsclError::config(format!(
            "split '{}' has no captions to evaluate",
            options.split.as_str()
        )));
    }
    let scores = full_score_matrix(dataset, params, &captions)?;
    let t2i = recalls_t2i(&scores, dataset, &captions, None)?;
    let i2t = recalls_i2t(&scores, dataset, &captions)?;
    let rsum = i2t.sum() + t2i.sum();

    // Alignment: positive image-text pairs of the split, raw global vectors.
    let split_globals: Vec<(Vec<f64>, Vec<f64>)> = captions
        .par_iter()
        .map(|&c| pair_globals(dataset, params, c))
        .collect::<Result<_>>()?;
    let alignment_it = alignment_metric(&split_globals);

    // Text-text alignment: co-caption pairs across the whole dataset.
    let all_text_globals: Vec<Vec<f64>> = (0..dataset.captions.len())
        .into_par_iter()
        .map(|c| Ok(pair_globals(dataset, params, c)?.1))
        .collect::<Result<_>>()?;
    let mut tt_pairs = Vec::new();
    for group in dataset.caption_groups().values() {
        for (a_pos, &a) in group.iter().enumerate() {
            for &b in &group[a_pos + 1..] {
                tt_pairs.push((all_text_globals[a].clone(), all_text_globals[b].clone()));
            }
        }
    }
    let alignment_tt = alignment_metric(&tt_pairs);

    // Uniformity: image representations (each image fused with the first
    // caption of its group) and the split's text representations.
    let image_reps: Vec<Vec<f64>> = dataset
        .images
        .par_iter()
        .map(|img| -> Result<Vec<f64>> {
            let first_cap = dataset.caption_groups()[&img.image_id][0];
            let entity = prepare_image(params, img)?;
            let text = prepare_text(params, &dataset.captions[first_cap].words)?;
            Ok(pair_forward(params, &entity, &text, ScoreMode::Strict)?
                .v_g()
                .to_vec())
        })
        .collect::<Result<_>>()?;
    let uniformity_image = uniformity_metric(&image_reps)?;
    let text_reps: Vec<Vec<f64>> = split_globals.iter().map(|(_, w)| w.clone()).collect();
    let uniformity_text = uniformity_metric(&text_reps)?;

    let length_buckets = if options.lengths {
        Some(length_buckets_from_scores(
            &scores,
            dataset,
            &captions,
            &DEFAULT_LENGTH_BUCKETS,
        )?)
    } else {
        None
    };

    Ok(EvalReport {
        i2t,
        t2i,
        rsum,
        alignment_it,
        alignment_tt,
        uniformity_image,
        uniformity_text,
        length_buckets,
        config: options.config.clone(),
    })
}

fn bucket_label(min_len: usize, max_len: Option<usize>) -> String {
    match max_len {
        Some(hi) => format!("{min_len}-{hi}"),
        None => format!(">={min_len}"),
    }
}

fn length_buckets_from_scores(
    scores: &Mat,
    dataset: &PairedDataset,
    captions: &[usize],
    buckets: &[(usize, Option<usize>)],
) -> Result<Vec<LengthBucketReport>> {
    let mut reports = Vec::with_capacity(buckets.len());
    for &(lo, hi) in buckets {
        let mask: Vec<bool> = captions
            .iter()
            .map(|&c| {
                let len = dataset.captions[c].word_count();
                len >= lo && hi.is_none_or(|h| len <= h)
            })
            .collect();
        let queries = mask.iter().filter(|&&m| m).count();
        let (r1, r5, r10) = if queries == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let t = recalls_t2i(scores, dataset, captions, Some(&mask))?;
            (t.r1, t.r5, t.r10)
        };
        reports.push(LengthBucketReport {
            label: bucket_label(lo, hi),
            min_len: lo,
            max_len: hi,
            queries,
            r1,
            r5,
            r10,
        });
    }
    Ok(reports)
}

/// Text-to-image recalls grouped by caption word count.
pub fn length_bucket_eval(
    dataset: &PairedDataset,
    params: &ModelParams,
    split: Split,
    buckets: &[(usize, Option<usize>)],
) -> Result<Vec<LengthBucketReport>> {
    let captions = dataset.split_captions(split);
    if captions.is_empty() {
        return Err(AsclError::config("split has no captions"));
    }
    let scores = full_score_matrix(dataset, params, &captions)?;
    length_buckets_from_scores(&scores, dataset, &captions, buckets)
}
