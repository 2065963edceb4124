//! Whole-model gradient check: analytic gradients of the full contrastive
//! objective against central finite differences, per parameter group.

use rand::Rng;

use crate::datastore::{ImageFeatures, TextFeatures};
use crate::error::Result;
use crate::matcher::{ModelGrads, ModelInit, ModelParams};
use crate::numerics::{finite_diff_grad, relative_error, Mat};
use crate::pipeline::config::Ablation;
use crate::pipeline::train::{batch_loss, BatchTexts};
use crate::samplegen::{truncate_positive, NoiseStrategy};
use crate::seeding;

/// Finite-difference step mandated for the oracle.
pub const GRADCHECK_STEP: f64 = 1e-4;
/// Pass threshold on the max relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Max relative error per parameter group.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= GRADCHECK_TOLERANCE
    }
}

/// Frozen micro-batch: two pairs with K=3 regions and L=4 words, plus
/// generated negatives/positives produced once so the loss is a pure
/// function of the parameters.
struct Fixture {
    images: Vec<ImageFeatures>,
    texts: BatchTexts,
}

fn random_mat(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Result<Mat> {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn fixture(dim: usize, seed: u64) -> Result<Fixture> {
    let mut rng = seeding::stream(&[seed, 0x6C]);
    let mut images = Vec::new();
    let mut captions = Vec::new();
    for i in 0..2 {
        let regions = random_mat(&mut rng, 3, dim)?;
        let global: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        images.push(ImageFeatures::new(format!("img{i}"), regions, global)?);
        let words = random_mat(&mut rng, 4, dim)?;
        captions.push(TextFeatures::new(format!("cap{i}"), format!("img{i}"), words)?);
    }
    let noise = NoiseStrategy::Gaussian { sigma: 0.2 };
    let originals: Vec<Mat> = captions.iter().map(|c| c.words.clone()).collect();
    let negatives: Vec<Mat> = captions
        .iter()
        .enumerate()
        .map(|(i, c)| noise.apply(&c.words, seeding::mix(&[seed, 0xA1, i as u64])))
        .collect::<Result<_>>()?;
    let positives: Vec<Mat> = captions
        .iter()
        .map(|c| Ok(truncate_positive(c, 0.5)?.words))
        .collect::<Result<_>>()?;
    let positive_negatives: Vec<Mat> = positives
        .iter()
        .enumerate()
        .map(|(i, w)| noise.apply(w, seeding::mix(&[seed, 0xA2, i as u64])))
        .collect::<Result<_>>()?;
    Ok(Fixture {
        images,
        texts: BatchTexts {
            originals,
            negatives: Some(negatives),
            positives: Some(positives),
            positive_negatives: Some(positive_negatives),
        },
    })
}

fn loss_of(params: &ModelParams, fx: &Fixture, tau: f64) -> Result<f64> {
    let images: Vec<&ImageFeatures> = fx.images.iter().collect();
    Ok(batch_loss(params, &images, &fx.texts, tau, 0.2, Ablation::Full, false)?.0)
}

fn analytic_grads(params: &ModelParams, fx: &Fixture, tau: f64) -> Result<ModelGrads> {
    let images: Vec<&ImageFeatures> = fx.images.iter().collect();
    let (_, grads) = batch_loss(params, &images, &fx.texts, tau, 0.2, Ablation::Full, true)?;
    Ok(grads.expect("gradients requested"))
}

/// Checks every entry of every parameter matrix of the full objective.
///
/// Uses tau = 1 so the finite-difference probe stays well inside the smooth
/// region at the mandated step size.
pub fn gradient_check(dim: usize, heads: usize, seed: u64) -> Result<GradCheckReport> {
    let tau = 1.0;
    let init = ModelInit {
        dim,
        heads,
        u1: 0.8,
        lambda: 0.5,
        positional_encoding: true,
        tied_directions: false,
        lambda_learnable: true,
        fusion_enabled: true,
    };
    let params = ModelParams::init(&init, seeding::mix(&[seed, 0x9A]))?;
    let fx = fixture(dim, seed)?;
    let grads = analytic_grads(&params, &fx, tau)?;

    let mut groups: std::collections::BTreeMap<String, f64> = std::collections::BTreeMap::new();
    for &r in &params.param_refs() {
        let fd = finite_diff_grad(
            |m| {
                let mut probe = params.clone();
                *probe.param_mut(r) = m.clone();
                loss_of(&probe, &fx, tau)
            },
            params.param(r),
            GRADCHECK_STEP,
        )?;
        let analytic = grads.grad(r);
        let worst = analytic
            .data()
            .iter()
            .zip(fd.data())
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        let entry = groups.entry(r.group().to_string()).or_insert(0.0);
        *entry = entry.max(worst);
    }
    Ok(GradCheckReport {
        groups: groups.into_iter().collect(),
    })
}
