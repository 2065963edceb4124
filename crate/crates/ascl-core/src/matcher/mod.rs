//! Hierarchical cross-modal fusion and similarity scoring.
//!
//! Both directions run the same multi-head cross attention: queries from one
//! modality, keys and values from the other (sharing one projection). The
//! pair score mixes averaged region-word cosines (local) with the cosine of
//! fused global embeddings, weighted by `u1`. Backward passes are
//! hand-written and checked against central finite differences.

pub(crate) mod engine;
mod forward;
mod io;
mod params;
mod pe;

pub use engine::ScoreMode;
pub use forward::{cross_attend, fuse, score, score_matrix, FusedPair, PairScore};
pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use params::{
    AttentionGrads, CrossAttentionParams, Direction, GlobalGrads, GlobalProjectionParams,
    ModelGrads, ModelInit, ModelOptimizer, ModelParams, ParamRef,
};
pub use pe::{sinusoidal_encoding, with_positional};

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::datastore::{ImageFeatures, TextFeatures};
    use crate::numerics::{finite_diff_grad, max_relative_error, Mat};
    use crate::samplegen::token_shuffle;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rmat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn random_pair(
        rng: &mut ChaCha8Rng,
        k: usize,
        l: usize,
        dim: usize,
    ) -> (ImageFeatures, TextFeatures) {
        let img = ImageFeatures::new(
            "img",
            rmat(rng, k, dim),
            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let txt = TextFeatures::new("cap", "img", rmat(rng, l, dim)).unwrap();
        (img, txt)
    }

    /// Scalar-loop multi-head cross attention, independent of the engine.
    fn bf_cross_attend(x: &Mat, y: &Mat, p: &CrossAttentionParams) -> Mat {
        let (heads, dim, hd) = (p.heads(), p.dim(), p.head_dim());
        let mut concat = vec![vec![0.0; dim]; x.rows()];
        for h in 0..heads {
            let project = |src: &Mat, w: &Mat| -> Vec<Vec<f64>> {
                (0..src.rows())
                    .map(|r| {
                        (0..hd)
                            .map(|c| (0..dim).map(|d| src.get(r, d) * w.get(d, c)).sum())
                            .collect()
                    })
                    .collect()
            };
            let q = project(x, &p.query_proj[h]);
            let kv = project(y, &p.key_value_proj[h]);
            let scale = 1.0 / (hd as f64).sqrt();
            for (r, qr) in q.iter().enumerate() {
                let logits: Vec<f64> = kv
                    .iter()
                    .map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for c in 0..hd {
                    let mut acc = 0.0;
                    for (j, kr) in kv.iter().enumerate() {
                        acc += exps[j] / denom * kr[c];
                    }
                    concat[r][h * hd + c] = acc;
                }
            }
        }
        let mut out = Mat::zeros(x.rows(), dim);
        for r in 0..x.rows() {
            for c in 0..dim {
                let v = (0..dim).map(|d| concat[r][d] * p.output_proj.get(d, c)).sum();
                out.set(r, c, v).unwrap();
            }
        }
        out
    }

    #[test]
    fn cross_attend_matches_bruteforce_per_head_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..25 {
            let params = ModelParams::init(
                &ModelInit {
                    dim: 8,
                    heads: 2,
                    ..ModelInit::default()
                },
                rng.gen(),
            )
            .unwrap();
            let x = rmat(&mut rng, 3, 8);
            let y = rmat(&mut rng, 4, 8);
            let got = cross_attend(&x, &y, &params.i2t).unwrap();
            let expect = bf_cross_attend(&x, &y, &params.i2t);
            assert!(got.max_abs_diff(&expect) < 1e-10);
        }
    }

    #[test]
    fn cross_attend_single_row_y_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = ModelParams::init(
            &ModelInit {
                dim: 8,
                heads: 2,
                ..ModelInit::default()
            },
            3,
        )
        .unwrap();
        let x = rmat(&mut rng, 5, 8);
        let y = rmat(&mut rng, 1, 8);
        let out = cross_attend(&x, &y, &params.i2t).unwrap();
        for r in 1..5 {
            for c in 0..8 {
                assert!((out.get(r, c) - out.get(0, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_head_identity_projections_reduce_to_sdp_attention() {
        let dim = 6;
        let eye = Mat::from_fn(dim, dim, |r, c| if r == c { 1.0 } else { 0.0 }).unwrap();
        let params = CrossAttentionParams {
            query_proj: vec![eye.clone()],
            key_value_proj: vec![eye.clone()],
            output_proj: eye.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x = rmat(&mut rng, 3, dim);
        let y = rmat(&mut rng, 4, dim);
        let got = cross_attend(&x, &y, &params).unwrap();
        let expect = crate::numerics::sdp_attention(&x, &y, &y).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn engine_score_matches_public_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let params = ModelParams::init(
            &ModelInit {
                dim: 8,
                heads: 2,
                ..ModelInit::default()
            },
            9,
        )
        .unwrap();
        let (img, txt) = random_pair(&mut rng, 3, 4, 8);
        let s = score(&img, &txt, &params).unwrap();
        let m = score_matrix(&[&img], &[&txt], &params).unwrap();
        assert_eq!(m.rows(), 1);
        assert!((m.get(0, 0) - s.s).abs() < 1e-15);
        assert!((s.s - (params.u1 * s.s_local + (1.0 - params.u1) * s.s_global)).abs() < 1e-15);
    }

    #[test]
    fn fuse_lambda_extremes_ignore_one_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let (img, txt) = random_pair(&mut rng, 3, 4, 8);
        let mut params = ModelParams::init(
            &ModelInit {
                dim: 8,
                heads: 2,
                lambda: 1.0,
                ..ModelInit::default()
            },
            2,
        )
        .unwrap();
        let fused = fuse(&img, &txt, &params).unwrap();
        // lambda = 1: V_g is independent of the whole-image vector G.
        let mut img2 = img.clone();
        img2.global_vec = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fused2 = fuse(&img2, &txt, &params).unwrap();
        for (a, b) in fused.v_g.iter().zip(&fused2.v_g) {
            assert!((a - b).abs() < 1e-15);
        }

        // lambda = 0: V_g is independent of the attended representation, so
        // changing region features leaves V_g fixed while G is fixed.
        params.global.fusion_weight.set(0, 0, 0.0).unwrap();
        let f0 = fuse(&img, &txt, &params).unwrap();
        let mut img3 = img.clone();
        img3.regions = rmat(&mut rng, 3, 8);
        let f1 = fuse(&img3, &txt, &params).unwrap();
        for (a, b) in f0.v_g.iter().zip(&f1.v_g) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn u1_extremes_select_score_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let (img, txt) = random_pair(&mut rng, 3, 4, 8);
        let local_only = ModelParams::init(
            &ModelInit {
                dim: 8,
                heads: 2,
                u1: 1.0,
                ..ModelInit::default()
            },
            7,
        )
        .unwrap();
        let s = score(&img, &txt, &local_only).unwrap();
        assert!((s.s - s.s_local).abs() < 1e-15);
        let global_only = ModelParams::init(
            &ModelInit {
                dim: 8,
                heads: 2,
                u1: 0.0,
                ..ModelInit::default()
            },
            7,
        )
        .unwrap();
        let s = score(&img, &txt, &global_only).unwrap();
        assert!((s.s - s.s_global).abs() < 1e-15);
    }

    #[test]
    fn u1_one_sends_no_gradient_into_global_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let params = ModelParams::init(
            &ModelInit {
                dim: 8,
                heads: 2,
                u1: 1.0,
                ..ModelInit::default()
            },
            5,
        )
        .unwrap();
        let (img, txt) = random_pair(&mut rng, 3, 4, 8);
        let mut grads = ModelGrads::zeros_like(&params);
        let ie = engine::prepare_image(&params, &img).unwrap();
        let te = engine::prepare_text(&params, &txt.words).unwrap();
        let cache = engine::pair_forward(&params, &ie, &te, ScoreMode::Training).unwrap();
        let mut ib = engine::EntityGradBuf::for_image(&params, &ie);
        let mut tb = engine::EntityGradBuf::for_text(&params, &te);
        engine::pair_backward(&params, &ie, &te, &cache, 1.0, &mut grads, &mut ib, &mut tb)
            .unwrap();
        assert_eq!(grads.global.text_proj.max_abs(), 0.0);
        assert_eq!(grads.global.attended_image_proj.max_abs(), 0.0);
        assert_eq!(grads.global.global_image_proj.max_abs(), 0.0);
    }

    #[test]
    fn perfect_copies_reach_the_local_upper_bound() {
        // One region equal to the single word: single-key attention copies it
        // in both directions, so with identity projections every cosine is 1.
        let dim = 4;
        let eye = Mat::from_fn(dim, dim, |r, c| if r == c { 1.0 } else { 0.0 }).unwrap();
        let att = CrossAttentionParams {
            query_proj: vec![eye.clone()],
            key_value_proj: vec![eye.clone()],
            output_proj: eye.clone(),
        };
        let params = ModelParams {
            dim,
            heads: 1,
            i2t: att.clone(),
            t2i: att.clone(),
            global: GlobalProjectionParams {
                text_proj: eye.clone(),
                attended_image_proj: eye.clone(),
                global_image_proj: eye.clone(),
                fusion_weight: Mat::from_vec(1, 1, vec![0.5]).unwrap(),
            },
            positional_encoding: false,
            u1: 1.0,
            tied_directions: false,
            lambda_learnable: false,
            fusion_enabled: true,
        };
        let row = vec![0.3, -0.2, 0.9, 0.1];
        let img = ImageFeatures::new(
            "i",
            Mat::from_rows(std::slice::from_ref(&row)).unwrap(),
            row.clone(),
        )
        .unwrap();
        let txt =
            TextFeatures::new("t", "i", Mat::from_rows(std::slice::from_ref(&row)).unwrap())
                .unwrap();
        let s = score(&img, &txt, &params).unwrap();
        assert!((s.s_local - 1.0).abs() < 1e-12);
    }

    #[test]
    fn region_permutation_leaves_score_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for pe in [false, true] {
            let params = ModelParams::init(
                &ModelInit {
                    dim: 8,
                    heads: 2,
                    positional_encoding: pe,
                    ..ModelInit::default()
                },
                11,
            )
            .unwrap();
            let (img, txt) = random_pair(&mut rng, 5, 4, 8);
            let base = score(&img, &txt, &params).unwrap();
            let mut img_perm = img.clone();
            img_perm.regions = img.regions.select_rows(&[4, 1, 3, 0, 2]).unwrap();
            let permuted = score(&img_perm, &txt, &params).unwrap();
            assert!(
                (base.s - permuted.s).abs() < 1e-10,
                "pe={pe}: {} vs {}",
                base.s,
                permuted.s
            );
        }
    }

    #[test]
    fn word_permutation_invariant_only_without_positional_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let no_pe = ModelParams::init(
            &ModelInit {
                dim: 8,
                heads: 2,
                positional_encoding: false,
                ..ModelInit::default()
            },
            13,
        )
        .unwrap();
        let (img, txt) = random_pair(&mut rng, 3, 5, 8);
        let base = score(&img, &txt, &no_pe).unwrap();
        let mut txt_perm = txt.clone();
        txt_perm.words = txt.words.select_rows(&[3, 0, 4, 2, 1]).unwrap();
        let permuted = score(&img, &txt_perm, &no_pe).unwrap();
        assert!((base.s - permuted.s).abs() < 1e-10);

        // With positional encoding on, some shuffle moves the score by more
        // than 1e-3: shuffle negatives are non-degenerate.
        let with_pe = ModelParams::init(
            &ModelInit {
                dim: 8,
                heads: 2,
                positional_encoding: true,
                ..ModelInit::default()
            },
            13,
        )
        .unwrap();
        let base_pe = score(&img, &txt, &with_pe).unwrap();
        let moved = (0..64).any(|seed| {
            let shuffled =
                TextFeatures::new("t", "img", token_shuffle(&txt.words, seed).unwrap()).unwrap();
            let s = score(&img, &shuffled, &with_pe).unwrap();
            (s.s - base_pe.s).abs() > 1e-3
        });
        assert!(moved, "no shuffle seed moved the score by more than 1e-3");
    }

    #[test]
    fn score_bounds_hold_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        for _ in 0..40 {
            let params = ModelParams::init(
                &ModelInit {
                    dim: 8,
                    heads: 2,
                    ..ModelInit::default()
                },
                rng.gen(),
            )
            .unwrap();
            let (img, txt) = random_pair(&mut rng, 4, 6, 8);
            let s = score(&img, &txt, &params).unwrap();
            assert!(s.s_local.abs() <= 1.0 + 1e-12);
            assert!(s.s_global.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn zero_norm_word_aborts_strict_scoring() {
        let params = ModelParams::init(
            &ModelInit {
                dim: 4,
                heads: 1,
                positional_encoding: false,
                ..ModelInit::default()
            },
            3,
        )
        .unwrap();
        let img = ImageFeatures::new(
            "i",
            Mat::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let txt = TextFeatures::new("t", "i", Mat::zeros(2, 4)).unwrap();
        assert!(matches!(
            score(&img, &txt, &params),
            Err(crate::error::AsclError::DegenerateVector(_))
        ));
    }

    /// Full-pair backward versus central finite differences on every
    /// parameter matrix, on randomized shapes <= 8x8.
    #[test]
    fn pair_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for (tied, lambda_learnable, fusion) in
            [(false, false, true), (true, true, true), (false, false, false)]
        {
            let init = ModelInit {
                dim: 8,
                heads: 2,
                u1: 0.7,
                lambda: 0.4,
                tied_directions: tied,
                lambda_learnable,
                fusion_enabled: fusion,
                ..ModelInit::default()
            };
            let params = ModelParams::init(&init, 23).unwrap();
            let (img, txt) = random_pair(&mut rng, 3, 4, 8);

            let mut grads = ModelGrads::zeros_like(&params);
            let img_e = engine::prepare_image(&params, &img).unwrap();
            let txt_e = engine::prepare_text(&params, &txt.words).unwrap();
            let cache =
                engine::pair_forward(&params, &img_e, &txt_e, ScoreMode::Training).unwrap();
            let mut ib = engine::EntityGradBuf::for_image(&params, &img_e);
            let mut tb = engine::EntityGradBuf::for_text(&params, &txt_e);
            engine::pair_backward(
                &params, &img_e, &txt_e, &cache, 1.0, &mut grads, &mut ib, &mut tb,
            )
            .unwrap();
            engine::flush_image_grads(&params, &img_e, &ib, &mut grads).unwrap();
            engine::flush_text_grads(&params, &txt_e, &tb, &mut grads).unwrap();

            for &r in &params.param_refs() {
                let fd = finite_diff_grad(
                    |m| {
                        let mut probe = params.clone();
                        *probe.param_mut(r) = m.clone();
                        if probe.tied_directions {
                            probe.t2i = probe.i2t.clone();
                        }
                        let ie = engine::prepare_image(&probe, &img)?;
                        let te = engine::prepare_text(&probe, &txt.words)?;
                        Ok(engine::pair_forward(&probe, &ie, &te, ScoreMode::Training)?
                            .score
                            .s)
                    },
                    params.param(r),
                    1e-4,
                )
                .unwrap();
                let rel = max_relative_error(grads.grad(r), &fd);
                assert!(
                    rel <= 1e-4,
                    "tied={tied} fusion={fusion} group {} rel err {rel}",
                    r.group()
                );
            }
        }
    }
}
