//! Training loop: batching, sample generation, fusion/scoring, the
//! contrastive objective, and Adam.
//!
//! Per batch: generate a noise negative for every caption, build a positive
//! variant per the configured strategy plus its noised negative, compute the
//! score matrices the active ablation needs, take the loss gradient with
//! respect to every pair score, and push it through the hand-written
//! backward. All sample-generation streams derive from
//! (seed, epoch, caption id, purpose), so runs are bit-reproducible.

use serde::Serialize;

use crate::datastore::{make_batches, Batch, ImageFeatures, PairedDataset, Split, TextFeatures};
use crate::error::{AsclError, Result};
use crate::loss::{
    loss_asym1, loss_asym23, loss_total_with_grads, triplet_loss, LossBatchInputs,
};
use crate::matcher::engine::{
    flush_image_grads, flush_text_grads, pair_backward, pair_forward, prepare_image, prepare_text,
    EntityGradBuf, ImageEntity, PairCache, ScoreMode, TextEntity,
};
use crate::matcher::{ModelGrads, ModelOptimizer, ModelParams};
use crate::numerics::Mat;
use crate::pipeline::config::{Ablation, TrainConfig};
use crate::samplegen::{
    concat_positive, gaussian_noise, truncate_positive, NoiseStrategy, PositiveKind,
};
use crate::seeding;

/// Purpose tags for derived sample-generation streams.
const PURPOSE_NEGATIVE: u64 = 1;
const PURPOSE_POSITIVE: u64 = 2;
const PURPOSE_POSITIVE_NEGATIVE: u64 = 3;

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Trained parameters plus the per-epoch log.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<TrainLogEntry>,
}

/// Applies a noise strategy, falling back to Gaussian noise when the input is
/// too short for the drawn strategy (single-row shuffle or cutoff).
pub(crate) fn noise_with_fallback(
    strategy: &NoiseStrategy,
    words: &Mat,
    sigma: f64,
    seed: u64,
) -> Result<Mat> {
    match strategy.apply(words, seed) {
        Ok(m) => Ok(m),
        Err(AsclError::DegenerateInput(_)) | Err(AsclError::ConfigError(_)) => {
            gaussian_noise(words, sigma.max(1e-12), seed)
        }
        Err(e) => Err(e),
    }
}

/// Builds the positive variant of one caption.
fn build_positive(
    dataset: &PairedDataset,
    caption: usize,
    config: &TrainConfig,
    stream_parts: &[u64],
) -> Result<TextFeatures> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let mut rng = seeding::stream(stream_parts);
    let cap = &dataset.captions[caption];
    let kind = match config.positive_kind {
        PositiveKind::Alternate => {
            if rng.gen::<bool>() {
                PositiveKind::Concat
            } else {
                PositiveKind::Truncate
            }
        }
        k => k,
    };
    if kind == PositiveKind::Concat {
        let siblings = dataset.siblings_in_split(caption, Split::Train);
        if let Some(&partner) = siblings.choose(&mut rng) {
            return concat_positive(cap, &dataset.captions[partner], config.l_max);
        }
        // No training sibling to concatenate with: truncate instead.
    }
    truncate_positive(cap, config.truncate_ratio)
}

/// The text collections entering one batch's score matrices.
pub(crate) struct BatchTexts {
    pub originals: Vec<Mat>,
    pub negatives: Option<Vec<Mat>>,
    pub positives: Option<Vec<Mat>>,
    pub positive_negatives: Option<Vec<Mat>>,
}

impl BatchTexts {
    /// Generates every needed collection for a batch.
    pub(crate) fn generate(
        dataset: &PairedDataset,
        batch: &Batch,
        config: &TrainConfig,
        epoch: usize,
    ) -> Result<Self> {
        let ablation = config.ablation;
        let needs_negatives = matches!(ablation, Ablation::Full | Ablation::NoPos | Ablation::NoMf);
        let needs_positives = matches!(ablation, Ablation::Full | Ablation::NoNeg | Ablation::NoMf);
        let strategy = config.noise_strategy();

        let mut originals = Vec::with_capacity(batch.len());
        let mut negatives = needs_negatives.then(Vec::new);
        let mut positives = needs_positives.then(Vec::new);
        let mut positive_negatives =
            (needs_positives && needs_negatives).then(Vec::new);
        for &(_, cap_idx) in &batch.pairs {
            let cap = &dataset.captions[cap_idx];
            originals.push(cap.words.clone());
            if let Some(neg) = &mut negatives {
                let seed = seeding::mix(&[
                    config.seed,
                    epoch as u64,
                    cap_idx as u64,
                    PURPOSE_NEGATIVE,
                ]);
                neg.push(noise_with_fallback(
                    &strategy,
                    &cap.words,
                    config.noise_sigma,
                    seed,
                )?);
            }
            if let Some(pos) = &mut positives {
                let built = build_positive(
                    dataset,
                    cap_idx,
                    config,
                    &[config.seed, epoch as u64, cap_idx as u64, PURPOSE_POSITIVE],
                )?;
                if let Some(pos_neg) = &mut positive_negatives {
                    let seed = seeding::mix(&[
                        config.seed,
                        epoch as u64,
                        cap_idx as u64,
                        PURPOSE_POSITIVE_NEGATIVE,
                    ]);
                    pos_neg.push(noise_with_fallback(
                        &strategy,
                        &built.words,
                        config.noise_sigma,
                        seed,
                    )?);
                }
                pos.push(built.words);
            }
        }
        Ok(BatchTexts {
            originals,
            negatives,
            positives,
            positive_negatives,
        })
    }
}

/// Score matrix plus the per-pair caches backing it.
struct ScoredCollection {
    scores: Mat,
    caches: Vec<Vec<PairCache>>,
}

fn score_collection(
    params: &ModelParams,
    images: &[ImageEntity<'_>],
    texts: &[TextEntity],
) -> Result<ScoredCollection> {
    let mut scores = Mat::zeros(images.len(), texts.len());
    let mut caches = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let mut row = Vec::with_capacity(texts.len());
        for (j, txt) in texts.iter().enumerate() {
            let cache = pair_forward(params, img, txt, ScoreMode::Training)?;
            scores.set(i, j, cache.score.s)?;
            row.push(cache);
        }
        caches.push(row);
    }
    Ok(ScoredCollection { scores, caches })
}

#[allow(clippy::too_many_arguments)]
fn backward_collection(
    params: &ModelParams,
    images: &[ImageEntity<'_>],
    texts: &[TextEntity],
    scored: &ScoredCollection,
    d_scores: &Mat,
    grads: &mut ModelGrads,
    image_bufs: &mut [EntityGradBuf],
    text_bufs: &mut [EntityGradBuf],
) -> Result<()> {
    for (i, img) in images.iter().enumerate() {
        for (j, txt) in texts.iter().enumerate() {
            pair_backward(
                params,
                img,
                txt,
                &scored.caches[i][j],
                d_scores.get(i, j),
                grads,
                &mut image_bufs[i],
                &mut text_bufs[j],
            )?;
        }
    }
    Ok(())
}

/// Loss and (optionally) parameter gradients for one batch of images against
/// the generated text collections. Shared by the trainer and the gradient
/// checker so both exercise the same path.
pub(crate) fn batch_loss(
    params: &ModelParams,
    images: &[&ImageFeatures],
    texts: &BatchTexts,
    tau: f64,
    margin: f64,
    ablation: Ablation,
    want_grads: bool,
) -> Result<(f64, Option<ModelGrads>)> {
    let image_entities = images
        .iter()
        .map(|img| prepare_image(params, img))
        .collect::<Result<Vec<_>>>()?;
    let prep = |mats: &Vec<Mat>| -> Result<Vec<TextEntity>> {
        mats.iter().map(|m| prepare_text(params, m)).collect()
    };
    let originals = prep(&texts.originals)?;
    let negatives = texts.negatives.as_ref().map(&prep).transpose()?;
    let positives = texts.positives.as_ref().map(&prep).transpose()?;
    let positive_negatives = texts.positive_negatives.as_ref().map(&prep).transpose()?;

    let scored_orig = score_collection(params, &image_entities, &originals)?;
    let scored_neg = negatives
        .as_ref()
        .map(|t| score_collection(params, &image_entities, t))
        .transpose()?;
    let scored_pos = positives
        .as_ref()
        .map(|t| score_collection(params, &image_entities, t))
        .transpose()?;
    let scored_pos_neg = positive_negatives
        .as_ref()
        .map(|t| score_collection(params, &image_entities, t))
        .transpose()?;

    // Loss dispatch: gradients come back laid out per score matrix.
    let (value, d_orig, d_neg, d_pos, d_pos_neg) = match ablation {
        Ablation::Full | Ablation::NoMf => {
            let gen1 = scored_neg.as_ref().map(|s| s.scores.clone());
            let inputs1 =
                LossBatchInputs::from_score_matrix(scored_orig.scores.clone(), gen1, tau)?;
            let (l1, g1) = loss_asym1(&inputs1)?;
            let gen2 = scored_pos_neg.as_ref().map(|s| s.scores.clone());
            let scored_pos_ref = scored_pos
                .as_ref()
                .ok_or_else(|| AsclError::StateError("positives missing".into()))?;
            let inputs2 =
                LossBatchInputs::from_score_matrix(scored_pos_ref.scores.clone(), gen2, tau)?;
            let (l23, g23) = loss_asym23(&inputs2)?;
            let (value, g1, g23) = loss_total_with_grads(l1, g1, l23, g23);
            let (d1, dg1) = g1.collapse();
            let (d2, dg2) = g23.collapse();
            (value, d1, dg1, Some(d2), dg2)
        }
        Ablation::NoPos => {
            let gen1 = scored_neg.as_ref().map(|s| s.scores.clone());
            let inputs =
                LossBatchInputs::from_score_matrix(scored_orig.scores.clone(), gen1, tau)?;
            let (value, grads) = loss_asym1(&inputs)?;
            let (d1, dg1) = grads.collapse();
            (value, d1, dg1, None, None)
        }
        Ablation::NoNeg => {
            let inputs1 =
                LossBatchInputs::from_score_matrix(scored_orig.scores.clone(), None, tau)?;
            let (l1, g1) = loss_asym1(&inputs1)?;
            let scored_pos_ref = scored_pos
                .as_ref()
                .ok_or_else(|| AsclError::StateError("positives missing".into()))?;
            let inputs2 =
                LossBatchInputs::from_score_matrix(scored_pos_ref.scores.clone(), None, tau)?;
            let (l23, g23) = loss_asym23(&inputs2)?;
            let (value, g1, g23) = loss_total_with_grads(l1, g1, l23, g23);
            let (d1, _) = g1.collapse();
            let (d2, _) = g23.collapse();
            (value, d1, None, Some(d2), None)
        }
        Ablation::NoPn => {
            let inputs =
                LossBatchInputs::from_score_matrix(scored_orig.scores.clone(), None, tau)?;
            let (value, grads) = loss_asym1(&inputs)?;
            let (d1, _) = grads.collapse();
            (value, d1, None, None, None)
        }
        Ablation::Triplet => {
            let (value, d1) = triplet_loss(&scored_orig.scores, margin)?;
            (value, d1, None, None, None)
        }
    };

    if !want_grads {
        return Ok((value, None));
    }

    let mut grads = ModelGrads::zeros_like(params);
    let mut image_bufs: Vec<EntityGradBuf> = image_entities
        .iter()
        .map(|e| EntityGradBuf::for_image(params, e))
        .collect();
    let mut bufs_for = |texts: &Vec<TextEntity>| -> Vec<EntityGradBuf> {
        texts.iter().map(|t| EntityGradBuf::for_text(params, t)).collect()
    };
    let mut orig_bufs = bufs_for(&originals);
    backward_collection(
        params,
        &image_entities,
        &originals,
        &scored_orig,
        &d_orig,
        &mut grads,
        &mut image_bufs,
        &mut orig_bufs,
    )?;
    let mut neg_bufs = negatives.as_ref().map(&mut bufs_for);
    if let (Some(texts_n), Some(scored), Some(d)) = (&negatives, &scored_neg, &d_neg) {
        backward_collection(
            params,
            &image_entities,
            texts_n,
            scored,
            d,
            &mut grads,
            &mut image_bufs,
            neg_bufs.as_mut().expect("negative buffers"),
        )?;
    }
    let mut pos_bufs = positives.as_ref().map(&mut bufs_for);
    if let (Some(texts_p), Some(scored), Some(d)) = (&positives, &scored_pos, &d_pos) {
        backward_collection(
            params,
            &image_entities,
            texts_p,
            scored,
            d,
            &mut grads,
            &mut image_bufs,
            pos_bufs.as_mut().expect("positive buffers"),
        )?;
    }
    let mut pos_neg_bufs = positive_negatives.as_ref().map(&mut bufs_for);
    if let (Some(texts_pn), Some(scored), Some(d)) =
        (&positive_negatives, &scored_pos_neg, &d_pos_neg)
    {
        backward_collection(
            params,
            &image_entities,
            texts_pn,
            scored,
            d,
            &mut grads,
            &mut image_bufs,
            pos_neg_bufs.as_mut().expect("positive-negative buffers"),
        )?;
    }

    // Flush shared projection gradients in a fixed order.
    for (entity, buf) in image_entities.iter().zip(&image_bufs) {
        flush_image_grads(params, entity, buf, &mut grads)?;
    }
    for (t, b) in originals.iter().zip(&orig_bufs) {
        flush_text_grads(params, t, b, &mut grads)?;
    }
    for (texts_opt, bufs_opt) in [
        (&negatives, &neg_bufs),
        (&positives, &pos_bufs),
        (&positive_negatives, &pos_neg_bufs),
    ] {
        if let (Some(ts), Some(bs)) = (texts_opt, bufs_opt) {
            for (t, b) in ts.iter().zip(bs) {
                flush_text_grads(params, t, b, &mut grads)?;
            }
        }
    }

    Ok((value, Some(grads)))
}

/// Runs the full training loop.
pub fn train(dataset: &PairedDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.dim != config.dim {
        return Err(AsclError::config(format!(
            "dataset dim {} does not match train.dim {}",
            dataset.dim, config.dim
        )));
    }
    let train_pairs = dataset.split_captions(Split::Train).len();
    if train_pairs < config.batch_size {
        return Err(AsclError::config(format!(
            "train split has {train_pairs} pairs, smaller than batch size {}",
            config.batch_size
        )));
    }

    let mut params = ModelParams::init(&config.model_init(), config.seed)?;
    let mut optimizer = ModelOptimizer::new(&params);
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let batches = make_batches(
            dataset,
            Split::Train,
            config.batch_size,
            seeding::mix(&[config.seed, 0xE9, epoch as u64]),
            true,
        )?;
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let images: Vec<&ImageFeatures> =
                batch.pairs.iter().map(|&(img, _)| &dataset.images[img]).collect();
            let texts = BatchTexts::generate(dataset, batch, config, epoch)?;
            let (value, grads) = batch_loss(
                &params,
                &images,
                &texts,
                config.tau,
                config.margin,
                config.ablation,
                true,
            )?;
            let grads = grads.expect("gradients requested");
            optimizer.step(&mut params, &grads, lr)?;
            epoch_loss += value;
        }
        log.push(TrainLogEntry {
            epoch,
            mean_loss: epoch_loss / batches.len() as f64,
            lr,
        });
    }

    Ok(TrainOutcome { params, log })
}

/// Writes the training log as line-delimited JSON, starting with the
/// effective-config echo record.
pub fn write_training_log(
    log: &[TrainLogEntry],
    config: &TrainConfig,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&serde_json::json!({
        "config": config.to_kv()
    }))?);
    out.push('\n');
    for entry in log {
        out.push_str(&serde_json::to_string(entry)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
