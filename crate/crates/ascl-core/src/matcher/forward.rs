//! Public fusion and scoring operations.

use crate::datastore::{ImageFeatures, TextFeatures};
use crate::error::{AsclError, Result};
use crate::matcher::engine::{self, ScoreMode};
use crate::matcher::params::{CrossAttentionParams, ModelParams};
use crate::numerics::{matmul, sdp_attention, Mat};

/// Local, global, and combined similarity of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    pub s_local: f64,
    pub s_global: f64,
    /// `u1 * s_local + (1 - u1) * s_global`.
    pub s: f64,
}

/// Fused representations of one pair.
#[derive(Debug, Clone)]
pub struct FusedPair {
    /// Region-attended text representation, K x D.
    pub w_star: Mat,
    /// Word-attended image representation, L x D.
    pub v_star: Mat,
    /// Fused image global embedding.
    pub v_g: Vec<f64>,
    /// Text global embedding.
    pub w_g: Vec<f64>,
}

/// Multi-head cross attention: queries from `x`, keys and values from `y`,
/// concatenated heads through the output projection.
///
/// This is the plain compositional route; the batched engine is checked
/// against it (and both against a scalar-loop oracle) in tests.
pub fn cross_attend(x: &Mat, y: &Mat, params: &CrossAttentionParams) -> Result<Mat> {
    let dim = params.dim();
    if x.cols() != dim || y.cols() != dim {
        return Err(AsclError::shape(format!(
            "cross_attend inputs have dims {} and {}, params expect {dim}",
            x.cols(),
            y.cols()
        )));
    }
    let heads = params.heads();
    let head_dim = params.head_dim();
    let mut concat = Mat::zeros(x.rows(), dim);
    for h in 0..heads {
        let q = matmul(x, &params.query_proj[h])?;
        let kv = matmul(y, &params.key_value_proj[h])?;
        let head = sdp_attention(&q, &kv, &kv)?;
        for r in 0..x.rows() {
            concat.row_mut(r)[h * head_dim..(h + 1) * head_dim].copy_from_slice(head.row(r));
        }
    }
    matmul(&concat, &params.output_proj)
}

/// Hierarchical fusion of one pair: attended representations in both
/// directions plus the global embeddings.
///
/// Positional encoding, when enabled, is added to word rows at the attention
/// input only; raw word rows feed the local cosine terms.
pub fn fuse(image: &ImageFeatures, text: &TextFeatures, params: &ModelParams) -> Result<FusedPair> {
    if !params.fusion_enabled {
        return Err(AsclError::config(
            "fuse() requires modal fusion; this model was built without it",
        ));
    }
    let img = engine::prepare_image(params, image)?;
    let txt = engine::prepare_text(params, &text.words)?;
    let cache = engine::pair_forward(params, &img, &txt, ScoreMode::Strict)?;
    Ok(FusedPair {
        w_star: cache.w_star().expect("fusion enabled").clone(),
        v_star: cache.v_star().expect("fusion enabled").clone(),
        v_g: cache.v_g().to_vec(),
        w_g: cache.w_g().to_vec(),
    })
}

/// Combined similarity score of one pair; zero-norm vectors abort.
pub fn score(image: &ImageFeatures, text: &TextFeatures, params: &ModelParams) -> Result<PairScore> {
    let img = engine::prepare_image(params, image)?;
    let txt = engine::prepare_text(params, &text.words)?;
    Ok(engine::pair_forward(params, &img, &txt, ScoreMode::Strict)?.score)
}

/// Score matrix over a batch: entry (i, j) is `score(images[i], texts[j]).s`.
/// Rows are images, columns are texts.
pub fn score_matrix(
    images: &[&ImageFeatures],
    texts: &[&TextFeatures],
    params: &ModelParams,
) -> Result<Mat> {
    if images.is_empty() || texts.is_empty() {
        return Err(AsclError::config("score matrix needs at least one row and column"));
    }
    let img_entities = images
        .iter()
        .map(|i| engine::prepare_image(params, i))
        .collect::<Result<Vec<_>>>()?;
    let txt_entities = texts
        .iter()
        .map(|t| engine::prepare_text(params, &t.words))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Mat::zeros(images.len(), texts.len());
    for (i, img) in img_entities.iter().enumerate() {
        for (j, txt) in txt_entities.iter().enumerate() {
            let cache = engine::pair_forward(params, img, txt, ScoreMode::Strict)?;
            out.set(i, j, cache.score.s)?;
        }
    }
    Ok(out)
}
