//! Cached pair forward/backward engine.
//!
//! Per-entity projections are computed once per batch and shared by every
//! pair, so an NxN score matrix costs N projection passes plus NxN attention
//! passes. Backward mirrors that: per-pair gradients accumulate into
//! per-entity buffers which are flushed through the projection weights once
//! at the end of the batch, in a fixed order for reproducibility.

use crate::datastore::ImageFeatures;
use crate::error::{AsclError, Result};
use crate::matcher::params::{Direction, ModelGrads, ModelParams};
use crate::matcher::pe::with_positional;
use crate::matcher::PairScore;
use crate::numerics::{
    dot, matmul, matmul_transpose_a, matmul_transpose_b, norm, softmax_row_in_place,
    softmax_rows_backward, Mat, COSINE_NORM_EPS,
};

/// Whether zero-norm vectors abort scoring or get the epsilon clamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Surface data bugs early: any zero-norm cosine input is an error.
    Strict,
    /// Training path: norms are floored at `COSINE_NORM_EPS`.
    Training,
}

/// An image with its per-head projections (query role in I2T, key/value role
/// in T2I).
pub struct ImageEntity<'a> {
    pub feats: &'a ImageFeatures,
    query_proj: Vec<Mat>,
    key_value_proj: Vec<Mat>,
}

/// A caption's word matrix with its per-head projections (key/value role in
/// I2T, query role in T2I). `raw` rows feed the local cosine terms; `attn`
/// rows (positional encoding added when enabled) feed attention.
pub struct TextEntity {
    pub raw: Mat,
    attn: Mat,
    key_value_proj: Vec<Mat>,
    query_proj: Vec<Mat>,
}

pub fn prepare_image<'a>(params: &ModelParams, img: &'a ImageFeatures) -> Result<ImageEntity<'a>> {
    if img.dim() != params.dim {
        return Err(AsclError::shape(format!(
            "image '{}' has dim {}, model dim is {}",
            img.image_id,
            img.dim(),
            params.dim
        )));
    }
    let (query_proj, key_value_proj) = if params.fusion_enabled {
        let i2t = params.attention(Direction::I2t);
        let t2i = params.attention(Direction::T2i);
        (
            i2t.query_proj
                .iter()
                .map(|z| matmul(&img.regions, z))
                .collect::<Result<Vec<_>>>()?,
            t2i.key_value_proj
                .iter()
                .map(|z| matmul(&img.regions, z))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(ImageEntity {
        feats: img,
        query_proj,
        key_value_proj,
    })
}

pub fn prepare_text(params: &ModelParams, words: &Mat) -> Result<TextEntity> {
    if words.cols() != params.dim {
        return Err(AsclError::shape(format!(
            "caption has dim {}, model dim is {}",
            words.cols(),
            params.dim
        )));
    }
    let attn = if params.positional_encoding && params.fusion_enabled {
        with_positional(words)
    } else {
        words.clone()
    };
    let (key_value_proj, query_proj) = if params.fusion_enabled {
        let i2t = params.attention(Direction::I2t);
        let t2i = params.attention(Direction::T2i);
        (
            i2t.key_value_proj
                .iter()
                .map(|z| matmul(&attn, z))
                .collect::<Result<Vec<_>>>()?,
            t2i.query_proj
                .iter()
                .map(|z| matmul(&attn, z))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(TextEntity {
        raw: words.clone(),
        attn,
        key_value_proj,
        query_proj,
    })
}

/// One attention direction's forward cache.
struct AttnSide {
    /// Per head, queries x keys attention weights.
    attn: Vec<Mat>,
    /// Concatenated head outputs, pre output-projection.
    concat: Mat,
    /// Attended representation (W* for I2T, V* for T2I).
    out: Mat,
}

/// Everything backward needs about one pair.
pub struct PairCache {
    fused: Option<FusedCache>,
    wbar: Vec<f64>,
    vbar: Vec<f64>,
    w_g: Vec<f64>,
    v_g1: Vec<f64>,
    v_g2: Vec<f64>,
    v_g: Vec<f64>,
    pub score: PairScore,
}

struct FusedCache {
    i2t: AttnSide,
    t2i: AttnSide,
}

impl PairCache {
    pub fn w_star(&self) -> Option<&Mat> {
        self.fused.as_ref().map(|f| &f.i2t.out)
    }

    pub fn v_star(&self) -> Option<&Mat> {
        self.fused.as_ref().map(|f| &f.t2i.out)
    }

    pub fn w_g(&self) -> &[f64] {
        &self.w_g
    }

    pub fn v_g(&self) -> &[f64] {
        &self.v_g
    }
}

/// m^T v.
fn matvec_transpose(m: &Mat, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.rows(), v.len());
    let mut out = vec![0.0; m.cols()];
    for (b, &vb) in v.iter().enumerate() {
        if vb == 0.0 {
            continue;
        }
        for (o, &mv) in out.iter_mut().zip(m.row(b)) {
            *o += vb * mv;
        }
    }
    out
}

/// m v.
fn matvec(m: &Mat, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.cols(), v.len());
    (0..m.rows()).map(|r| dot(m.row(r), v)).collect()
}

fn cos_training(x: &[f64], y: &[f64]) -> f64 {
    let nx = norm(x).max(COSINE_NORM_EPS);
    let ny = norm(y).max(COSINE_NORM_EPS);
    dot(x, y) / (nx * ny)
}

fn check_norm(v: &[f64], what: &str, mode: ScoreMode) -> Result<()> {
    if mode == ScoreMode::Strict && norm(v) == 0.0 {
        return Err(AsclError::DegenerateVector(format!(
            "zero-norm {what} while scoring"
        )));
    }
    Ok(())
}

/// d cos(x, y) / d y with clamped norms (x treated as constant).
fn cos_grad_wrt_y(x: &[f64], y: &[f64]) -> Vec<f64> {
    let nx = norm(x).max(COSINE_NORM_EPS);
    let ny = norm(y).max(COSINE_NORM_EPS);
    let c = dot(x, y) / (nx * ny);
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| xi / (nx * ny) - c * yi / (ny * ny))
        .collect()
}

/// cos(x, y) gradients with respect to both sides.
fn cos_grad_both(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (cos_grad_wrt_y(y, x), cos_grad_wrt_y(x, y))
}

fn attention_forward(queries: &[Mat], keys_values: &[Mat], output_proj: &Mat) -> Result<AttnSide> {
    let heads = queries.len();
    let head_dim = queries[0].cols();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q_rows = queries[0].rows();
    let mut concat = Mat::zeros(q_rows, heads * head_dim);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut weights = matmul_transpose_b(&queries[h], &keys_values[h])?;
        for v in weights.data_mut() {
            *v *= scale;
        }
        for r in 0..q_rows {
            softmax_row_in_place(weights.row_mut(r), 1.0);
        }
        let head_out = matmul(&weights, &keys_values[h])?;
        for r in 0..q_rows {
            let dst = &mut concat.row_mut(r)[h * head_dim..(h + 1) * head_dim];
            dst.copy_from_slice(head_out.row(r));
        }
        attn.push(weights);
    }
    let out = matmul(&concat, output_proj)?;
    Ok(AttnSide { attn, concat, out })
}

/// Forward pass for one (image, text) pair.
pub fn pair_forward(
    params: &ModelParams,
    img: &ImageEntity,
    txt: &TextEntity,
    mode: ScoreMode,
) -> Result<PairCache> {
    let lambda = params.global.lambda();
    if !params.fusion_enabled {
        // Modal-fusion ablation: raw means through the global projections.
        let wbar = txt.raw.mean_rows();
        let vbar = img.feats.regions.mean_rows();
        let w_g = matvec_transpose(&params.global.text_proj, &wbar);
        let v_g1 = matvec_transpose(&params.global.attended_image_proj, &vbar);
        let v_g2 = matvec_transpose(&params.global.global_image_proj, &img.feats.global_vec);
        let v_g: Vec<f64> = v_g1
            .iter()
            .zip(&v_g2)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        check_norm(&v_g, "fused image global vector", mode)?;
        check_norm(&w_g, "fused text global vector", mode)?;
        let s_global = cos_training(&v_g, &w_g);
        return Ok(PairCache {
            fused: None,
            wbar,
            vbar,
            w_g,
            v_g1,
            v_g2,
            v_g,
            score: PairScore {
                s_local: 0.0,
                s_global,
                s: s_global,
            },
        });
    }

    let i2t_params = params.attention(Direction::I2t);
    let t2i_params = params.attention(Direction::T2i);
    let i2t = attention_forward(&img.query_proj, &txt.key_value_proj, &i2t_params.output_proj)?;
    let t2i = attention_forward(&txt.query_proj, &img.key_value_proj, &t2i_params.output_proj)?;

    let k = img.feats.region_count();
    let l = txt.raw.rows();
    let mut s_local = 0.0;
    for r in 0..k {
        let (x, y) = (img.feats.regions.row(r), i2t.out.row(r));
        check_norm(x, "image region", mode)?;
        check_norm(y, "region-attended text row", mode)?;
        s_local += cos_training(x, y) / (2.0 * k as f64);
    }
    for r in 0..l {
        let (x, y) = (txt.raw.row(r), t2i.out.row(r));
        check_norm(x, "word feature", mode)?;
        check_norm(y, "word-attended image row", mode)?;
        s_local += cos_training(x, y) / (2.0 * l as f64);
    }

    let wbar = i2t.out.mean_rows();
    let vbar = t2i.out.mean_rows();
    let w_g = matvec_transpose(&params.global.text_proj, &wbar);
    let v_g1 = matvec_transpose(&params.global.attended_image_proj, &vbar);
    let v_g2 = matvec_transpose(&params.global.global_image_proj, &img.feats.global_vec);
    let v_g: Vec<f64> = v_g1
        .iter()
        .zip(&v_g2)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    check_norm(&v_g, "fused image global vector", mode)?;
    check_norm(&w_g, "fused text global vector", mode)?;
    let s_global = cos_training(&v_g, &w_g);
    let s = params.u1 * s_local + (1.0 - params.u1) * s_global;
    Ok(PairCache {
        fused: Some(FusedCache { i2t, t2i }),
        wbar,
        vbar,
        w_g,
        v_g1,
        v_g2,
        v_g,
        score: PairScore {
            s_local,
            s_global,
            s,
        },
    })
}

/// Per-entity gradient accumulators for the projected query/key-value
/// matrices, flushed through the projections once per batch.
pub struct EntityGradBuf {
    d_query: Vec<Mat>,
    d_key_value: Vec<Mat>,
}

impl EntityGradBuf {
    pub fn for_image(params: &ModelParams, img: &ImageEntity) -> Self {
        let rows = img.feats.region_count();
        EntityGradBuf::zeros(params, rows)
    }

    pub fn for_text(params: &ModelParams, txt: &TextEntity) -> Self {
        EntityGradBuf::zeros(params, txt.raw.rows())
    }

    fn zeros(params: &ModelParams, rows: usize) -> Self {
        let (heads, head_dim) = if params.fusion_enabled {
            (params.heads, params.head_dim())
        } else {
            (0, 0)
        };
        EntityGradBuf {
            d_query: (0..heads).map(|_| Mat::zeros(rows, head_dim)).collect(),
            d_key_value: (0..heads).map(|_| Mat::zeros(rows, head_dim)).collect(),
        }
    }
}

fn add_scaled(dst: &mut Mat, src: &Mat, scale: f64) {
    debug_assert_eq!(dst.rows(), src.rows());
    debug_assert_eq!(dst.cols(), src.cols());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += scale * s;
    }
}

/// Backward through one attention direction.
///
/// Accumulates the output-projection gradient directly and routes projected
/// query/key-value gradients into the owning entities' buffers.
#[allow(clippy::too_many_arguments)]
fn attention_backward(
    side: &AttnSide,
    d_out: &Mat,
    queries: &[Mat],
    keys_values: &[Mat],
    output_proj: &Mat,
    d_output_proj: &mut crate::numerics::Grad,
    d_query_buf: &mut [Mat],
    d_key_value_buf: &mut [Mat],
) -> Result<()> {
    let heads = queries.len();
    let head_dim = queries[0].cols();
    let scale = 1.0 / (head_dim as f64).sqrt();

    d_output_proj.accumulate(&matmul_transpose_a(&side.concat, d_out)?, 1.0)?;
    let d_concat = matmul_transpose_b(d_out, output_proj)?;

    for h in 0..heads {
        let q_rows = queries[h].rows();
        let mut d_head = Mat::zeros(q_rows, head_dim);
        for r in 0..q_rows {
            d_head
                .row_mut(r)
                .copy_from_slice(&d_concat.row(r)[h * head_dim..(h + 1) * head_dim]);
        }
        // Value role.
        let d_attn = matmul_transpose_b(&d_head, &keys_values[h])?;
        add_scaled(
            &mut d_key_value_buf[h],
            &matmul_transpose_a(&side.attn[h], &d_head)?,
            1.0,
        );
        // Through the softmax and the scaled dot product.
        let d_logits = softmax_rows_backward(&side.attn[h], &d_attn);
        add_scaled(
            &mut d_query_buf[h],
            &matmul(&d_logits, &keys_values[h])?,
            scale,
        );
        // Key role.
        add_scaled(
            &mut d_key_value_buf[h],
            &matmul_transpose_a(&d_logits, &queries[h])?,
            scale,
        );
    }
    Ok(())
}

/// Backward pass for one pair given d(loss)/d(score).
#[allow(clippy::too_many_arguments)]
pub fn pair_backward(
    params: &ModelParams,
    img: &ImageEntity,
    txt: &TextEntity,
    cache: &PairCache,
    d_score: f64,
    grads: &mut ModelGrads,
    img_buf: &mut EntityGradBuf,
    txt_buf: &mut EntityGradBuf,
) -> Result<()> {
    if d_score == 0.0 {
        return Ok(());
    }
    let lambda = params.global.lambda();
    let (d_local, d_global) = if params.fusion_enabled {
        (d_score * params.u1, d_score * (1.0 - params.u1))
    } else {
        (0.0, d_score)
    };

    // Global score path.
    let (d_vg_unit, d_wg_unit) = cos_grad_both(&cache.v_g, &cache.w_g);
    let d_vg: Vec<f64> = d_vg_unit.iter().map(|v| v * d_global).collect();
    let d_wg: Vec<f64> = d_wg_unit.iter().map(|v| v * d_global).collect();

    // Projection gradients: X_w gets wbar (x) d_wg, image projections get
    // their lambda-weighted shares, and lambda itself gets the difference.
    for (b, &wb) in cache.wbar.iter().enumerate() {
        if wb != 0.0 {
            for (a, &g) in d_wg.iter().enumerate() {
                grads.global.text_proj.add_at(b, a, wb * g);
            }
        }
    }
    for (b, &vb) in cache.vbar.iter().enumerate() {
        if vb != 0.0 {
            for (a, &g) in d_vg.iter().enumerate() {
                grads
                    .global
                    .attended_image_proj
                    .add_at(b, a, lambda * vb * g);
            }
        }
    }
    for (b, &gb) in img.feats.global_vec.iter().enumerate() {
        if gb != 0.0 {
            for (a, &g) in d_vg.iter().enumerate() {
                grads
                    .global
                    .global_image_proj
                    .add_at(b, a, (1.0 - lambda) * gb * g);
            }
        }
    }
    let d_lambda: f64 = d_vg
        .iter()
        .zip(cache.v_g1.iter().zip(&cache.v_g2))
        .map(|(&g, (a, b))| g * (a - b))
        .sum();
    grads.global.fusion_weight.add_at(0, 0, d_lambda);

    let Some(fused) = &cache.fused else {
        return Ok(()); // Raw means are frozen features; nothing else flows.
    };

    let d_wbar = matvec(&params.global.text_proj, &d_wg);
    let d_vbar: Vec<f64> = matvec(&params.global.attended_image_proj, &d_vg)
        .into_iter()
        .map(|v| lambda * v)
        .collect();

    let k = img.feats.region_count();
    let l = txt.raw.rows();

    // d(loss)/d W*: local cosine rows plus the shared mean path.
    let mut d_w_star = Mat::zeros(k, params.dim);
    let local_k = d_local / (2.0 * k as f64);
    for r in 0..k {
        let g = cos_grad_wrt_y(img.feats.regions.row(r), fused.i2t.out.row(r));
        let row = d_w_star.row_mut(r);
        for ((dst, gv), &mb) in row.iter_mut().zip(g).zip(&d_wbar) {
            *dst = local_k * gv + mb / k as f64;
        }
    }
    let mut d_v_star = Mat::zeros(l, params.dim);
    let local_l = d_local / (2.0 * l as f64);
    for r in 0..l {
        let g = cos_grad_wrt_y(txt.raw.row(r), fused.t2i.out.row(r));
        let row = d_v_star.row_mut(r);
        for ((dst, gv), &mb) in row.iter_mut().zip(g).zip(&d_vbar) {
            *dst = local_l * gv + mb / l as f64;
        }
    }

    let i2t_params = params.attention(Direction::I2t);
    let t2i_params = params.attention(Direction::T2i);
    attention_backward(
        &fused.i2t,
        &d_w_star,
        &img.query_proj,
        &txt.key_value_proj,
        &i2t_params.output_proj,
        &mut grads.attention_mut(Direction::I2t).output_proj,
        &mut img_buf.d_query,
        &mut txt_buf.d_key_value,
    )?;
    attention_backward(
        &fused.t2i,
        &d_v_star,
        &txt.query_proj,
        &img.key_value_proj,
        &t2i_params.output_proj,
        &mut grads.attention_mut(Direction::T2i).output_proj,
        &mut txt_buf.d_query,
        &mut img_buf.d_key_value,
    )?;
    Ok(())
}

/// Pushes an image's accumulated projected-space gradients through its
/// feature matrix into the projection weights.
pub fn flush_image_grads(
    params: &ModelParams,
    img: &ImageEntity,
    buf: &EntityGradBuf,
    grads: &mut ModelGrads,
) -> Result<()> {
    if !params.fusion_enabled {
        return Ok(());
    }
    for h in 0..params.heads {
        let dq = matmul_transpose_a(&img.feats.regions, &buf.d_query[h])?;
        grads
            .attention_mut(Direction::I2t)
            .query_proj[h]
            .accumulate(&dq, 1.0)?;
        let dkv = matmul_transpose_a(&img.feats.regions, &buf.d_key_value[h])?;
        grads
            .attention_mut(Direction::T2i)
            .key_value_proj[h]
            .accumulate(&dkv, 1.0)?;
    }
    Ok(())
}

/// Text counterpart of [`flush_image_grads`]; uses the attention-input rows
/// (with positional encoding when enabled).
pub fn flush_text_grads(
    params: &ModelParams,
    txt: &TextEntity,
    buf: &EntityGradBuf,
    grads: &mut ModelGrads,
) -> Result<()> {
    if !params.fusion_enabled {
        return Ok(());
    }
    for h in 0..params.heads {
        let dq = matmul_transpose_a(&txt.attn, &buf.d_query[h])?;
        grads
            .attention_mut(Direction::T2i)
            .query_proj[h]
            .accumulate(&dq, 1.0)?;
        let dkv = matmul_transpose_a(&txt.attn, &buf.d_key_value[h])?;
        grads
            .attention_mut(Direction::I2t)
            .key_value_proj[h]
            .accumulate(&dkv, 1.0)?;
    }
    Ok(())
}
