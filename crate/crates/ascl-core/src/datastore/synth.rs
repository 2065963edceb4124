//! Synthetic paired-feature generator.
//!
//! Stands in for pretrained image/text encoders: each image owns a latent
//! concept set, region rows are noisy copies of those concepts, captions are
//! noisy subsets of the same concepts, and the whole-image vector is the noisy
//! concept mean. Ground-truth pairing is therefore recoverable by
//! construction, which is what the retrieval acceptance checks rely on.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datastore::{ImageFeatures, PairedDataset, Split, TextFeatures};
use crate::error::{AsclError, Result};
use crate::numerics::{cosine, dot, Mat};
use crate::seeding;

/// Knobs for [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Number of images; each image is its own latent cluster.
    pub clusters: usize,
    pub captions_per_image: usize,
    pub dim: usize,
    /// Region rows per image (K).
    pub regions_per_image: usize,
    /// Inclusive caption word-count range (L).
    pub len_range: (usize, usize),
    /// Latent concepts per image.
    pub concepts_per_image: usize,
    /// Per-coordinate feature noise.
    pub noise_sigma: f64,
    /// Captions per image tagged `Test`; the held-out index rotates with the
    /// image index so every caption flavor is represented in the test split.
    pub holdout_per_image: usize,
    /// Inject asymmetric caption variants: each image's captions cycle
    /// through base / short / long / extra-noisy flavors, and the holdout
    /// rotation puts every flavor into the test split.
    pub asymmetric: bool,
    /// Size of the shared concept pool. `None` gives every image its own
    /// disjoint concepts (`clusters * concepts_per_image` total).
    pub pool_size: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clusters: 32,
            captions_per_image: 5,
            dim: 64,
            regions_per_image: 8,
            len_range: (4, 16),
            concepts_per_image: 4,
            noise_sigma: 0.1,
            holdout_per_image: 1,
            asymmetric: false,
            pool_size: None,
        }
    }
}

impl SynthConfig {
    /// Preset for datasets with short/long/noisy caption variants and a
    /// shared concept pool.
    pub fn asymmetric_default() -> Self {
        SynthConfig {
            asymmetric: true,
            len_range: (3, 28),
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(AsclError::config(
                "need at least 2 clusters for retrieval to be meaningful",
            ));
        }
        if self.captions_per_image < 2 {
            return Err(AsclError::config(
                "need at least 2 captions per image so concatenation positives exist",
            ));
        }
        if self.dim == 0 || self.regions_per_image == 0 || self.concepts_per_image == 0 {
            return Err(AsclError::config("dim, regions and concepts must be positive"));
        }
        let (lo, hi) = self.len_range;
        if lo == 0 || lo > hi {
            return Err(AsclError::config(format!(
                "invalid caption length range {lo}..={hi}"
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(AsclError::config("noise sigma must be non-negative"));
        }
        if self.holdout_per_image >= self.captions_per_image {
            return Err(AsclError::config(
                "holdout must leave at least one training caption per image",
            ));
        }
        if self.asymmetric && (lo > 9 || hi < 21) {
            return Err(AsclError::config(
                "asymmetric mode needs a length range spanning short (<10) and long (>20) captions",
            ));
        }
        if let Some(pool) = self.pool_size {
            if pool < self.concepts_per_image {
                return Err(AsclError::config(
                    "concept pool smaller than concepts per image",
                ));
            }
        }
        Ok(())
    }

    fn effective_pool(&self) -> usize {
        self.pool_size
            .unwrap_or(self.clusters * self.concepts_per_image)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Concept pool. Orthonormalized (then rescaled to norm sqrt(D)) whenever the
/// pool fits in the ambient dimension, which makes the sigma=0 separation
/// guarantee exact; otherwise raw Gaussian directions.
fn concept_pool(rng: &mut ChaCha8Rng, pool: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut vectors: Vec<Vec<f64>> = (0..pool).map(|_| gaussian_vec(rng, dim, 1.0)).collect();
    if pool <= dim {
        let scale = (dim as f64).sqrt();
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(pool);
        for v in vectors.iter_mut() {
            for b in &basis {
                let proj = dot(v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= proj * bi;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            // A fresh Gaussian is never numerically dependent at these sizes,
            // but guard the division anyway.
            let inv = if n > 1e-9 { 1.0 / n } else { 0.0 };
            let unit: Vec<f64> = v.iter().map(|x| x * inv).collect();
            basis.push(unit);
        }
        return basis
            .into_iter()
            .map(|u| u.into_iter().map(|x| x * scale).collect())
            .collect();
    }
    vectors
}

struct CaptionPlan {
    subset_size: usize,
    length: usize,
    sigma: f64,
}

/// Caption flavors for asymmetric datasets.
#[derive(Clone, Copy)]
enum CaptionRole {
    Base,
    Short,
    Long,
    Noisy,
}

fn caption_role(slot: usize) -> CaptionRole {
    [
        CaptionRole::Base,
        CaptionRole::Short,
        CaptionRole::Long,
        CaptionRole::Noisy,
        CaptionRole::Base,
    ][slot % 5]
}

fn plan_caption(cfg: &SynthConfig, role: CaptionRole, rng: &mut ChaCha8Rng) -> CaptionPlan {
    let m = cfg.concepts_per_image;
    let (lo, hi) = cfg.len_range;
    let base_subset = |rng: &mut ChaCha8Rng| rng.gen_range(m.div_ceil(2)..=m);
    if !cfg.asymmetric {
        return CaptionPlan {
            subset_size: base_subset(rng),
            length: rng.gen_range(lo..=hi),
            sigma: cfg.noise_sigma,
        };
    }
    let mid_lo = 10.min(hi);
    let mid_hi = 20.min(hi);
    match role {
        // Short caption built from few concepts: the truncation analog.
        CaptionRole::Short => CaptionPlan {
            subset_size: 2.min(m).max(1),
            length: rng.gen_range(lo..=9.min(hi).max(lo)),
            sigma: cfg.noise_sigma,
        },
        // Long caption covering every concept: the concatenation analog.
        CaptionRole::Long => CaptionPlan {
            subset_size: m,
            length: rng.gen_range(21.max(lo).min(hi)..=hi),
            sigma: cfg.noise_sigma,
        },
        // Extra-noisy but still positive caption.
        CaptionRole::Noisy => CaptionPlan {
            subset_size: base_subset(rng),
            length: rng.gen_range(mid_lo..=mid_hi.max(mid_lo)),
            sigma: 3.0 * cfg.noise_sigma,
        },
        CaptionRole::Base => CaptionPlan {
            subset_size: base_subset(rng),
            length: rng.gen_range(mid_lo..=mid_hi.max(mid_lo)),
            sigma: cfg.noise_sigma,
        },
    }
}

/// Generates a seeded synthetic dataset. Same config and seed, same bytes.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<PairedDataset> {
    cfg.validate()?;
    let pool_size = cfg.effective_pool();
    let m = cfg.concepts_per_image;
    let dim = cfg.dim;

    let mut pool_rng = seeding::stream(&[seed, 0xC0]);
    let pool = concept_pool(&mut pool_rng, pool_size, dim);

    // Assign a distinct concept set to every image.
    let mut sets: Vec<Vec<usize>> = Vec::with_capacity(cfg.clusters);
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    for c in 0..cfg.clusters {
        if cfg.pool_size.is_none() {
            let ids: Vec<usize> = (c * m..(c + 1) * m).collect();
            seen.insert(ids.clone());
            sets.push(ids);
            continue;
        }
        let mut rng = seeding::stream(&[seed, 0x1A, c as u64]);
        let mut tries = 0;
        loop {
            let mut ids: Vec<usize> = (0..pool_size).collect();
            ids.shuffle(&mut rng);
            ids.truncate(m);
            let mut key = ids.clone();
            key.sort_unstable();
            if seen.insert(key) {
                sets.push(ids);
                break;
            }
            tries += 1;
            if tries > 1000 {
                return Err(AsclError::config(
                    "could not draw distinct concept sets; enlarge the pool",
                ));
            }
        }
    }

    let mut images = Vec::with_capacity(cfg.clusters);
    let mut captions = Vec::new();
    let mut splits = Vec::new();
    for (c, ids) in sets.iter().enumerate() {
        let mut rng = seeding::stream(&[seed, 0x2B, c as u64]);
        let mut regions = Vec::with_capacity(cfg.regions_per_image);
        for k in 0..cfg.regions_per_image {
            let concept = &pool[ids[k % m]];
            let noise = gaussian_vec(&mut rng, dim, cfg.noise_sigma);
            regions.push(concept.iter().zip(&noise).map(|(a, b)| a + b).collect());
        }
        let mut global = vec![0.0; dim];
        for &id in ids {
            for (g, v) in global.iter_mut().zip(&pool[id]) {
                *g += v / m as f64;
            }
        }
        for (g, n) in global
            .iter_mut()
            .zip(gaussian_vec(&mut rng, dim, cfg.noise_sigma))
        {
            *g += n;
        }
        images.push(ImageFeatures::new(
            format!("img{c:04}"),
            Mat::from_rows(&regions)?,
            global,
        )?);

        for j in 0..cfg.captions_per_image {
            let mut cap_rng = seeding::stream(&[seed, 0xCA, c as u64, j as u64]);
            let held_out = (j + c) % cfg.captions_per_image < cfg.holdout_per_image;
            let plan = plan_caption(cfg, caption_role(j), &mut cap_rng);
            // Pick the concept subset; under a shared pool, avoid subsets that
            // sit entirely inside another image's concept set so ground truth
            // stays unambiguous (best effort).
            let mut subset: Vec<usize> = Vec::new();
            for attempt in 0..16 {
                let mut shuffled = ids.clone();
                shuffled.shuffle(&mut cap_rng);
                shuffled.truncate(plan.subset_size);
                let ambiguous = cfg.pool_size.is_some()
                    && sets.iter().enumerate().any(|(other, other_ids)| {
                        other != c && shuffled.iter().all(|id| other_ids.contains(id))
                    });
                subset = shuffled;
                if !ambiguous || attempt == 15 {
                    break;
                }
            }
            let s = subset.len();
            let mut words = Vec::with_capacity(plan.length);
            for w in 0..plan.length {
                let concept = &pool[subset[w % s]];
                let noise = gaussian_vec(&mut cap_rng, dim, plan.sigma);
                words.push(concept.iter().zip(&noise).map(|(a, b)| a + b).collect());
            }
            captions.push(TextFeatures::new(
                format!("cap{c:04}_{j}"),
                format!("img{c:04}"),
                Mat::from_rows(&words)?,
            )?);
            splits.push(if held_out { Split::Test } else { Split::Train });
        }
    }

    PairedDataset::new(images, captions, splits)
}

/// Fraction of captions whose mean word vector is closest (by cosine) to the
/// mean region vector of their own image. Independent retrieval oracle used
/// by tests and printed as the generator's separation statistic.
pub fn nearest_centroid_accuracy(dataset: &PairedDataset) -> Result<f64> {
    let centroids: Vec<Vec<f64>> = dataset.images.iter().map(|i| i.regions.mean_rows()).collect();
    let mut hits = 0usize;
    for (ci, cap) in dataset.captions.iter().enumerate() {
        let query = cap.words.mean_rows();
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0usize;
        for (gi, centroid) in centroids.iter().enumerate() {
            let score = cosine(&query, centroid)?;
            if score > best {
                best = score;
                best_idx = gi;
            }
        }
        if best_idx == dataset.parent_of(ci) {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.captions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::format::encode_features;

    #[test]
    fn degenerate_cluster_count_is_rejected() {
        let cfg = SynthConfig {
            clusters: 1,
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate_synthetic(&cfg, 1),
            Err(AsclError::ConfigError(_))
        ));
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        let cfg = SynthConfig {
            clusters: 4,
            dim: 16,
            regions_per_image: 4,
            len_range: (3, 8),
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg, 99).unwrap();
        let b = generate_synthetic(&cfg, 99).unwrap();
        assert_eq!(encode_features(&a).unwrap(), encode_features(&b).unwrap());
        let c = generate_synthetic(&cfg, 100).unwrap();
        assert_ne!(encode_features(&a).unwrap(), encode_features(&c).unwrap());
    }

    #[test]
    fn noiseless_clusters_separate_perfectly() {
        // With sigma = 0 and an orthonormal pool (C*m <= D), every caption's
        // mean word vector must be strictly closest to its own image.
        let cfg = SynthConfig {
            clusters: 4,
            dim: 64,
            noise_sigma: 0.0,
            len_range: (3, 8),
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg, 5).unwrap();
        let centroids: Vec<Vec<f64>> = ds.images.iter().map(|i| i.regions.mean_rows()).collect();
        for (ci, cap) in ds.captions.iter().enumerate() {
            let query = cap.words.mean_rows();
            let own = cosine(&query, &centroids[ds.parent_of(ci)]).unwrap();
            for (gi, centroid) in centroids.iter().enumerate() {
                if gi != ds.parent_of(ci) {
                    let other = cosine(&query, centroid).unwrap();
                    assert!(
                        own > other,
                        "caption {ci}: own {own} not above image {gi} at {other}"
                    );
                }
            }
        }
    }

    #[test]
    fn noiseless_separation_holds_for_larger_cluster_counts() {
        for clusters in [8, 16] {
            let cfg = SynthConfig {
                clusters,
                dim: 64,
                noise_sigma: 0.0,
                len_range: (3, 8),
                ..SynthConfig::default()
            };
            let ds = generate_synthetic(&cfg, 7).unwrap();
            assert_eq!(nearest_centroid_accuracy(&ds).unwrap(), 1.0);
        }
    }

    #[test]
    fn nearest_centroid_oracle_recovers_pairs_under_noise() {
        // The acceptance-scale dataset: the oracle must get >= 95%.
        let cfg = SynthConfig::default();
        let ds = generate_synthetic(&cfg, 11).unwrap();
        let acc = nearest_centroid_accuracy(&ds).unwrap();
        assert!(acc >= 0.95, "nearest-centroid accuracy {acc} below 0.95");
    }

    #[test]
    fn asymmetric_mode_spans_length_buckets() {
        let cfg = SynthConfig::asymmetric_default();
        let ds = generate_synthetic(&cfg, 3).unwrap();
        let lens: Vec<usize> = ds.captions.iter().map(|c| c.word_count()).collect();
        assert!(lens.iter().any(|&l| l < 10));
        assert!(lens.iter().any(|&l| (10..=20).contains(&l)));
        assert!(lens.iter().any(|&l| l > 20));
        // Holdout rotation puts every role into the test split somewhere.
        let test_lens: Vec<usize> = ds
            .split_captions(Split::Test)
            .into_iter()
            .map(|c| ds.captions[c].word_count())
            .collect();
        assert!(test_lens.iter().any(|&l| l < 10));
        assert!(test_lens.iter().any(|&l| l > 20));
    }

    #[test]
    fn holdout_counts_are_exact() {
        let cfg = SynthConfig {
            clusters: 6,
            dim: 16,
            len_range: (3, 8),
            holdout_per_image: 2,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg, 1).unwrap();
        assert_eq!(ds.split_captions(Split::Test).len(), 12);
        assert_eq!(ds.split_captions(Split::Train).len(), 18);
        for img in &ds.images {
            let group = &ds.caption_groups()[&img.image_id];
            let train = group
                .iter()
                .filter(|&&c| ds.splits[c] == Split::Train)
                .count();
            assert_eq!(train, 3);
        }
    }
}
