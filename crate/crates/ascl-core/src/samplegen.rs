//! Seeded sample generation on word-embedding matrices.
//!
//! Negatives come from five noise strategies (plus a uniform mixture over
//! them); positives come from concatenating sibling captions or truncating a
//! caption to a prefix. All generators are pure functions of
//! (input, parameters, seed): same seed, bit-identical output. Streams are
//! derived as documented in [`crate::seeding`].

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datastore::TextFeatures;
use crate::error::{AsclError, Result};
use crate::numerics::Mat;
use crate::seeding;

/// Noise strategy for generated negatives.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseStrategy {
    Gaussian { sigma: f64 },
    Shuffle,
    TokenCutoff { cut_count: usize },
    FeatureCutoff { cut_count: usize },
    Dropout { p: f64 },
    /// Uniformly picks one of the listed strategies per call.
    Mixture(Vec<NoiseStrategy>),
}

/// Defaults chosen so corruption is detectable but not destructive at desk
/// scale: sigma 0.1, dropout 0.1, one cut row/column.
pub const DEFAULT_SIGMA: f64 = 0.1;
pub const DEFAULT_DROPOUT_P: f64 = 0.1;
pub const DEFAULT_CUT_COUNT: usize = 1;

impl NoiseStrategy {
    /// The full five-way mixture with default parameters.
    pub fn default_mixture() -> Self {
        NoiseStrategy::Mixture(vec![
            NoiseStrategy::Gaussian { sigma: DEFAULT_SIGMA },
            NoiseStrategy::Shuffle,
            NoiseStrategy::TokenCutoff { cut_count: DEFAULT_CUT_COUNT },
            NoiseStrategy::FeatureCutoff { cut_count: DEFAULT_CUT_COUNT },
            NoiseStrategy::Dropout { p: DEFAULT_DROPOUT_P },
        ])
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseStrategy::Gaussian { sigma } if *sigma <= 0.0 => {
                Err(AsclError::config("gaussian sigma must be positive"))
            }
            NoiseStrategy::Dropout { p } if *p <= 0.0 || *p >= 1.0 => {
                Err(AsclError::config("dropout probability must be in (0, 1)"))
            }
            NoiseStrategy::TokenCutoff { cut_count } | NoiseStrategy::FeatureCutoff { cut_count }
                if *cut_count == 0 =>
            {
                Err(AsclError::config("cut count must be at least 1"))
            }
            NoiseStrategy::Mixture(list) => {
                if list.is_empty() {
                    return Err(AsclError::config("mixture needs at least one strategy"));
                }
                list.iter().try_for_each(NoiseStrategy::validate)
            }
            _ => Ok(()),
        }
    }

    /// Applies the strategy with its own derived stream.
    pub fn apply(&self, words: &Mat, seed: u64) -> Result<Mat> {
        match self {
            NoiseStrategy::Gaussian { sigma } => gaussian_noise(words, *sigma, seed),
            NoiseStrategy::Shuffle => token_shuffle(words, seed),
            NoiseStrategy::TokenCutoff { cut_count } => token_cutoff(words, *cut_count, seed),
            NoiseStrategy::FeatureCutoff { cut_count } => feature_cutoff(words, *cut_count, seed),
            NoiseStrategy::Dropout { p } => dropout_noise(words, *p, seed),
            NoiseStrategy::Mixture(list) => mixture(words, list, seed),
        }
    }
}

/// W + eps with eps i.i.d. Normal(0, sigma^2).
pub fn gaussian_noise(words: &Mat, sigma: f64, seed: u64) -> Result<Mat> {
    if sigma <= 0.0 {
        return Err(AsclError::config("gaussian sigma must be positive"));
    }
    let mut rng = seeding::stream(&[seed, 0x6A]);
    let mut out = words.clone();
    for v in out.data_mut() {
        *v += sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    }
    Ok(out)
}

/// Reorders word rows by a uniformly drawn non-identity permutation
/// (identity draws are resampled).
pub fn token_shuffle(words: &Mat, seed: u64) -> Result<Mat> {
    let l = words.rows();
    if l < 2 {
        return Err(AsclError::DegenerateInput(
            "token shuffle needs at least two rows".into(),
        ));
    }
    let mut rng = seeding::stream(&[seed, 0x5F]);
    let mut perm: Vec<usize> = (0..l).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            break;
        }
    }
    words.select_rows(&perm)
}

/// Zeroes exactly `cut_count` distinct rows.
pub fn token_cutoff(words: &Mat, cut_count: usize, seed: u64) -> Result<Mat> {
    let l = words.rows();
    if cut_count == 0 || cut_count >= l {
        return Err(AsclError::config(format!(
            "token cutoff count {cut_count} out of range for {l} rows"
        )));
    }
    let mut rng = seeding::stream(&[seed, 0x7C]);
    let mut rows: Vec<usize> = (0..l).collect();
    rows.shuffle(&mut rng);
    let mut out = words.clone();
    for &r in rows.iter().take(cut_count) {
        out.row_mut(r).fill(0.0);
    }
    Ok(out)
}

/// Zeroes exactly `cut_count` distinct columns.
pub fn feature_cutoff(words: &Mat, cut_count: usize, seed: u64) -> Result<Mat> {
    let d = words.cols();
    if cut_count == 0 || cut_count >= d {
        return Err(AsclError::config(format!(
            "feature cutoff count {cut_count} out of range for {d} columns"
        )));
    }
    let mut rng = seeding::stream(&[seed, 0xFC]);
    let mut cols: Vec<usize> = (0..d).collect();
    cols.shuffle(&mut rng);
    let mut out = words.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for &c in cols.iter().take(cut_count) {
            row[c] = 0.0;
        }
    }
    Ok(out)
}

/// Zeroes each element independently with probability `p`. Survivors are not
/// rescaled: this corrupts information, it is not a regularizer.
pub fn dropout_noise(words: &Mat, p: f64, seed: u64) -> Result<Mat> {
    if p <= 0.0 || p >= 1.0 {
        return Err(AsclError::config("dropout probability must be in (0, 1)"));
    }
    let mut rng = seeding::stream(&[seed, 0xD0]);
    let mut out = words.clone();
    for v in out.data_mut() {
        if rng.gen::<f64>() < p {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Draws one strategy uniformly, then applies it.
pub fn mixture(words: &Mat, strategies: &[NoiseStrategy], seed: u64) -> Result<Mat> {
    if strategies.is_empty() {
        return Err(AsclError::config("mixture needs at least one strategy"));
    }
    let mut rng = seeding::stream(&[seed, 0x313]);
    let pick = rng.gen_range(0..strategies.len());
    strategies[pick].apply(words, rng.gen::<u64>())
}

/// Positive-sample policy for enriched/truncated captions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveKind {
    Concat,
    Truncate,
    /// Per pair per epoch, choose concat or truncate uniformly.
    Alternate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositiveStrategy {
    pub kind: PositiveKind,
    /// Fraction of word rows kept by truncation.
    pub truncate_ratio: f64,
}

pub const DEFAULT_TRUNCATE_RATIO: f64 = 0.5;
pub const DEFAULT_L_MAX: usize = 64;

impl Default for PositiveStrategy {
    fn default() -> Self {
        PositiveStrategy {
            kind: PositiveKind::Alternate,
            truncate_ratio: DEFAULT_TRUNCATE_RATIO,
        }
    }
}

impl PositiveStrategy {
    pub fn validate(&self) -> Result<()> {
        if self.truncate_ratio <= 0.0 || self.truncate_ratio >= 1.0 {
            return Err(AsclError::config("truncate ratio must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Concatenates two sibling captions into one long positive, clipped to
/// `l_max` rows.
pub fn concat_positive(
    a: &TextFeatures,
    b: &TextFeatures,
    l_max: usize,
) -> Result<TextFeatures> {
    if a.parent_image != b.parent_image {
        return Err(AsclError::PairingError(format!(
            "concat of captions with different parents '{}' and '{}'",
            a.parent_image, b.parent_image
        )));
    }
    if a.text_id == b.text_id {
        return Err(AsclError::PairingError(format!(
            "concat of caption '{}' with itself",
            a.text_id
        )));
    }
    if l_max == 0 {
        return Err(AsclError::config("l_max must be positive"));
    }
    let total = (a.word_count() + b.word_count()).min(l_max);
    let dim = a.dim();
    let mut data = Vec::with_capacity(total * dim);
    for r in 0..total {
        if r < a.word_count() {
            data.extend_from_slice(a.words.row(r));
        } else {
            data.extend_from_slice(b.words.row(r - a.word_count()));
        }
    }
    TextFeatures::new(
        format!("{}+{}", a.text_id, b.text_id),
        a.parent_image.clone(),
        Mat::from_vec(total, dim, data)?,
    )
}

/// Keeps the first `ceil(ratio * L)` word rows.
pub fn truncate_positive(t: &TextFeatures, ratio: f64) -> Result<TextFeatures> {
    let keep = (ratio * t.word_count() as f64).ceil() as usize;
    if keep == 0 {
        return Err(AsclError::DegenerateInput(format!(
            "truncating caption '{}' to zero rows",
            t.text_id
        )));
    }
    let keep = keep.min(t.word_count());
    let rows: Vec<usize> = (0..keep).collect();
    TextFeatures::new(
        format!("{}~", t.text_id),
        t.parent_image.clone(),
        t.words.select_rows(&rows)?,
    )
}
