//! Independent scalar-loop oracles.
//!
//! Everything here is written with plain index loops and no shared helper
//! code from the engine, so equivalence tests compare two genuinely
//! independent routes. `Mat` is used for storage only.

#![allow(clippy::needless_range_loop)]

use ascl_core::datastore::{ImageFeatures, TextFeatures};
use ascl_core::matcher::{CrossAttentionParams, Direction, ModelParams};
use ascl_core::numerics::Mat;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
}

pub fn random_pair(
    rng: &mut ChaCha8Rng,
    k: usize,
    l: usize,
    dim: usize,
) -> (ImageFeatures, TextFeatures) {
    let img = ImageFeatures::new(
        "img",
        random_mat(rng, k, dim),
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let txt = TextFeatures::new("cap", "img", random_mat(rng, l, dim)).unwrap();
    (img, txt)
}

fn bf_cosine(x: &[f64], y: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for i in 0..x.len() {
        dot += x[i] * y[i];
        nx += x[i] * x[i];
        ny += y[i] * y[i];
    }
    dot / (nx.sqrt() * ny.sqrt())
}

/// Sinusoidal positional table, scalar route.
pub fn bf_positional(l: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; d]; l];
    for (pos, row) in out.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let rate = 10_000.0f64.powf(2.0 * ((i / 2) as f64) / d as f64);
            let angle = pos as f64 / rate;
            *v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Per-head scalar-loop multi-head cross attention.
pub fn bf_cross_attend(x: &Mat, y: &Mat, p: &CrossAttentionParams) -> Vec<Vec<f64>> {
    let heads = p.query_proj.len();
    let dim = p.output_proj.rows();
    let hd = p.query_proj[0].cols();
    let mut concat = vec![vec![0.0; dim]; x.rows()];
    for h in 0..heads {
        let project = |src: &Mat, w: &Mat| -> Vec<Vec<f64>> {
            (0..src.rows())
                .map(|r| {
                    (0..hd)
                        .map(|c| {
                            let mut acc = 0.0;
                            for d in 0..dim {
                                acc += src.get(r, d) * w.get(d, c);
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        };
        let q = project(x, &p.query_proj[h]);
        let kv = project(y, &p.key_value_proj[h]);
        let scale = 1.0 / (hd as f64).sqrt();
        for (r, qr) in q.iter().enumerate() {
            let mut logits = Vec::with_capacity(kv.len());
            for kr in &kv {
                let mut s = 0.0;
                for c in 0..hd {
                    s += qr[c] * kr[c];
                }
                logits.push(s * scale);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
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
    let mut out = vec![vec![0.0; dim]; x.rows()];
    for r in 0..x.rows() {
        for c in 0..dim {
            let mut acc = 0.0;
            for d in 0..dim {
                acc += concat[r][d] * p.output_proj.get(d, c);
            }
            out[r][c] = acc;
        }
    }
    out
}

/// Scalar-loop local+global pair score. Returns (s_local, s_global, s).
pub fn bf_score(img: &ImageFeatures, txt: &TextFeatures, params: &ModelParams) -> (f64, f64, f64) {
    let dim = params.dim;
    let k = img.regions.rows();
    let l = txt.words.rows();
    // Attention input: words plus positional encoding when enabled.
    let mut attn_words = Mat::zeros(l, dim);
    let pe = bf_positional(l, dim);
    for r in 0..l {
        for c in 0..dim {
            let base = txt.words.get(r, c);
            let v = if params.positional_encoding { base + pe[r][c] } else { base };
            attn_words.set(r, c, v).unwrap();
        }
    }
    let w_star = bf_cross_attend(&img.regions, &attn_words, params.attention(Direction::I2t));
    let v_star = bf_cross_attend(&attn_words, &img.regions, params.attention(Direction::T2i));

    let mut s_local = 0.0;
    for r in 0..k {
        s_local += bf_cosine(img.regions.row(r), &w_star[r]) / (2.0 * k as f64);
    }
    for r in 0..l {
        s_local += bf_cosine(txt.words.row(r), &v_star[r]) / (2.0 * l as f64);
    }

    let mean_rows = |rows: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for row in rows {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b / rows.len() as f64;
            }
        }
        m
    };
    let wbar = mean_rows(&w_star);
    let vbar = mean_rows(&v_star);
    let project_t = |m: &Mat, v: &[f64]| -> Vec<f64> {
        (0..dim)
            .map(|a| {
                let mut acc = 0.0;
                for b in 0..dim {
                    acc += m.get(b, a) * v[b];
                }
                acc
            })
            .collect()
    };
    let w_g = project_t(&params.global.text_proj, &wbar);
    let v_g1 = project_t(&params.global.attended_image_proj, &vbar);
    let v_g2 = project_t(&params.global.global_image_proj, &img.global_vec);
    let lambda = params.global.lambda();
    let v_g: Vec<f64> = v_g1
        .iter()
        .zip(&v_g2)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    let s_global = bf_cosine(&v_g, &w_g);
    let s = params.u1 * s_local + (1.0 - params.u1) * s_global;
    (s_local, s_global, s)
}

/// Plain-exponential contrastive term (no stabilization): the textbook form
/// of the two softmax fractions with alpha gating.
pub fn bf_ascl_term(
    s_pos: &[f64],
    s_it: &Mat,
    s_ti: &Mat,
    s_gen: Option<&Mat>,
    tau: f64,
) -> f64 {
    let n = s_pos.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos = (s_pos[i] / tau).exp();
        let mut denom1 = pos;
        for j in 0..n {
            if j != i {
                denom1 += (s_ti.get(i, j) / tau).exp();
            }
        }
        let mut denom2 = pos;
        for j in 0..n {
            if j != i {
                denom2 += (s_it.get(i, j) / tau).exp();
            }
        }
        if let Some(gen) = s_gen {
            for g in 0..gen.cols() {
                let alpha = if gen.get(i, g) > s_pos[i] { 0.0 } else { 1.0 };
                denom2 += alpha * (gen.get(i, g) / tau).exp();
            }
        }
        total += -(pos / denom1).ln() - (pos / denom2).ln();
    }
    total / n as f64
}
