//! Learnable parameter containers, their gradients, and the optimizer wiring.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{AsclError, Result};
use crate::numerics::{adam_step, AdamState, Grad, Mat, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::seeding;

/// Attention direction: image-queries-text or text-queries-image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    I2t,
    T2i,
}

/// Multi-head cross-attention projections for one direction.
///
/// Per head: a query projection and a shared key/value projection, each
/// D x (D/H); plus one D x D output projection applied to the concatenated
/// heads. Keys and values share a projection by design.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionParams {
    pub query_proj: Vec<Mat>,
    pub key_value_proj: Vec<Mat>,
    pub output_proj: Mat,
}

impl CrossAttentionParams {
    pub fn heads(&self) -> usize {
        self.query_proj.len()
    }

    pub fn dim(&self) -> usize {
        self.output_proj.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.query_proj[0].cols()
    }

    fn random(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Self {
        let head_dim = dim / heads;
        let scale = 1.0 / (dim as f64).sqrt();
        let mut mat = |rows: usize, cols: usize| {
            Mat::from_fn(rows, cols, |_, _| {
                scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            })
            .expect("gaussian init is finite")
        };
        CrossAttentionParams {
            query_proj: (0..heads).map(|_| mat(dim, head_dim)).collect(),
            key_value_proj: (0..heads).map(|_| mat(dim, head_dim)).collect(),
            output_proj: mat(dim, dim),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.query_proj.len() != self.key_value_proj.len() || self.query_proj.is_empty() {
            return Err(AsclError::config("attention needs matched per-head projections"));
        }
        let heads = self.query_proj.len();
        if !dim.is_multiple_of(heads) {
            return Err(AsclError::config(format!(
                "head count {heads} must divide dim {dim}"
            )));
        }
        let head_dim = dim / heads;
        for m in self.query_proj.iter().chain(&self.key_value_proj) {
            if m.rows() != dim || m.cols() != head_dim {
                return Err(AsclError::shape(format!(
                    "per-head projection is {}x{}, expected {dim}x{head_dim}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if self.output_proj.rows() != dim || self.output_proj.cols() != dim {
            return Err(AsclError::shape("output projection must be DxD".to_string()));
        }
        Ok(())
    }
}

/// Global-embedding projections and the fusion weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalProjectionParams {
    /// Projects the mean region-attended text representation (text side).
    pub text_proj: Mat,
    /// Projects the mean word-attended image representation.
    pub attended_image_proj: Mat,
    /// Projects the whole-image feature vector.
    pub global_image_proj: Mat,
    /// lambda in [0, 1], stored 1x1 so it can ride the optimizer plumbing.
    pub fusion_weight: Mat,
}

impl GlobalProjectionParams {
    pub fn lambda(&self) -> f64 {
        self.fusion_weight.get(0, 0)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for (name, m) in [
            ("text_proj", &self.text_proj),
            ("attended_image_proj", &self.attended_image_proj),
            ("global_image_proj", &self.global_image_proj),
        ] {
            if m.rows() != dim || m.cols() != dim {
                return Err(AsclError::shape(format!(
                    "{name} is {}x{}, expected {dim}x{dim}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let lambda = self.lambda();
        if !(0.0..=1.0).contains(&lambda) {
            return Err(AsclError::config(format!(
                "fusion weight must lie in [0, 1], got {lambda}"
            )));
        }
        Ok(())
    }
}

/// Everything the model learns, plus the switches that shape the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub heads: usize,
    pub i2t: CrossAttentionParams,
    pub t2i: CrossAttentionParams,
    pub global: GlobalProjectionParams,
    /// Add sinusoidal positional encoding to word rows before attention.
    pub positional_encoding: bool,
    /// Local/global mixing weight of the pair score.
    pub u1: f64,
    /// Share one attention parameter set between both directions.
    pub tied_directions: bool,
    /// Train lambda (projected back into [0, 1] after each step).
    pub lambda_learnable: bool,
    /// When false, score pairs from raw means and global projections only.
    pub fusion_enabled: bool,
}

/// Construction-time switches for [`ModelParams::init`].
#[derive(Debug, Clone)]
pub struct ModelInit {
    pub dim: usize,
    pub heads: usize,
    pub u1: f64,
    pub lambda: f64,
    pub positional_encoding: bool,
    pub tied_directions: bool,
    pub lambda_learnable: bool,
    pub fusion_enabled: bool,
}

impl Default for ModelInit {
    fn default() -> Self {
        ModelInit {
            dim: 64,
            heads: 4,
            u1: 0.8,
            lambda: 0.5,
            positional_encoding: true,
            tied_directions: false,
            lambda_learnable: false,
            fusion_enabled: true,
        }
    }
}

impl ModelParams {
    /// Seeded random initialization; entries are N(0, 1/D).
    pub fn init(init: &ModelInit, seed: u64) -> Result<Self> {
        if init.dim == 0 || init.heads == 0 || !init.dim.is_multiple_of(init.heads) {
            return Err(AsclError::config(format!(
                "head count {} must divide dim {}",
                init.heads, init.dim
            )));
        }
        if !(0.0..=1.0).contains(&init.u1) {
            return Err(AsclError::config(format!("u1 must lie in [0, 1], got {}", init.u1)));
        }
        if !(0.0..=1.0).contains(&init.lambda) {
            return Err(AsclError::config(format!(
                "lambda must lie in [0, 1], got {}",
                init.lambda
            )));
        }
        let mut rng_i2t = seeding::stream(&[seed, 0x11]);
        let mut rng_t2i = seeding::stream(&[seed, 0x22]);
        let mut rng_glob = seeding::stream(&[seed, 0x33]);
        let scale = 1.0 / (init.dim as f64).sqrt();
        let gmat = |rng: &mut ChaCha8Rng| {
            Mat::from_fn(init.dim, init.dim, |_, _| {
                scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            })
            .expect("gaussian init is finite")
        };
        let i2t = CrossAttentionParams::random(&mut rng_i2t, init.dim, init.heads);
        let t2i = if init.tied_directions {
            i2t.clone()
        } else {
            CrossAttentionParams::random(&mut rng_t2i, init.dim, init.heads)
        };
        let global = GlobalProjectionParams {
            text_proj: gmat(&mut rng_glob),
            attended_image_proj: gmat(&mut rng_glob),
            global_image_proj: gmat(&mut rng_glob),
            fusion_weight: Mat::from_vec(1, 1, vec![init.lambda])?,
        };
        Ok(ModelParams {
            dim: init.dim,
            heads: init.heads,
            i2t,
            t2i,
            global,
            positional_encoding: init.positional_encoding,
            u1: init.u1,
            tied_directions: init.tied_directions,
            lambda_learnable: init.lambda_learnable,
            fusion_enabled: init.fusion_enabled,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.i2t.validate(self.dim)?;
        self.t2i.validate(self.dim)?;
        self.global.validate(self.dim)?;
        if !(0.0..=1.0).contains(&self.u1) {
            return Err(AsclError::config(format!("u1 must lie in [0, 1], got {}", self.u1)));
        }
        Ok(())
    }

    /// Attention parameters for a direction, honoring tying.
    pub fn attention(&self, dir: Direction) -> &CrossAttentionParams {
        match dir {
            Direction::I2t => &self.i2t,
            Direction::T2i if self.tied_directions => &self.i2t,
            Direction::T2i => &self.t2i,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// All trainable parameter handles in the fixed optimizer order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut refs = Vec::new();
        for h in 0..self.heads {
            refs.push(ParamRef::Query(Direction::I2t, h));
        }
        for h in 0..self.heads {
            refs.push(ParamRef::KeyValue(Direction::I2t, h));
        }
        refs.push(ParamRef::Output(Direction::I2t));
        if !self.tied_directions {
            for h in 0..self.heads {
                refs.push(ParamRef::Query(Direction::T2i, h));
            }
            for h in 0..self.heads {
                refs.push(ParamRef::KeyValue(Direction::T2i, h));
            }
            refs.push(ParamRef::Output(Direction::T2i));
        }
        refs.push(ParamRef::GlobalText);
        refs.push(ParamRef::GlobalAttendedImage);
        refs.push(ParamRef::GlobalImage);
        if self.lambda_learnable {
            refs.push(ParamRef::FusionWeight);
        }
        refs
    }

    pub fn param(&self, r: ParamRef) -> &Mat {
        match r {
            ParamRef::Query(Direction::I2t, h) => &self.i2t.query_proj[h],
            ParamRef::KeyValue(Direction::I2t, h) => &self.i2t.key_value_proj[h],
            ParamRef::Output(Direction::I2t) => &self.i2t.output_proj,
            ParamRef::Query(Direction::T2i, h) => &self.t2i.query_proj[h],
            ParamRef::KeyValue(Direction::T2i, h) => &self.t2i.key_value_proj[h],
            ParamRef::Output(Direction::T2i) => &self.t2i.output_proj,
            ParamRef::GlobalText => &self.global.text_proj,
            ParamRef::GlobalAttendedImage => &self.global.attended_image_proj,
            ParamRef::GlobalImage => &self.global.global_image_proj,
            ParamRef::FusionWeight => &self.global.fusion_weight,
        }
    }

    pub fn param_mut(&mut self, r: ParamRef) -> &mut Mat {
        match r {
            ParamRef::Query(Direction::I2t, h) => &mut self.i2t.query_proj[h],
            ParamRef::KeyValue(Direction::I2t, h) => &mut self.i2t.key_value_proj[h],
            ParamRef::Output(Direction::I2t) => &mut self.i2t.output_proj,
            ParamRef::Query(Direction::T2i, h) => &mut self.t2i.query_proj[h],
            ParamRef::KeyValue(Direction::T2i, h) => &mut self.t2i.key_value_proj[h],
            ParamRef::Output(Direction::T2i) => &mut self.t2i.output_proj,
            ParamRef::GlobalText => &mut self.global.text_proj,
            ParamRef::GlobalAttendedImage => &mut self.global.attended_image_proj,
            ParamRef::GlobalImage => &mut self.global.global_image_proj,
            ParamRef::FusionWeight => &mut self.global.fusion_weight,
        }
    }
}

/// Handle naming one trainable matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    Query(Direction, usize),
    KeyValue(Direction, usize),
    Output(Direction),
    GlobalText,
    GlobalAttendedImage,
    GlobalImage,
    FusionWeight,
}

impl ParamRef {
    /// Group label used by gradient-check reports.
    pub fn group(&self) -> &'static str {
        match self {
            ParamRef::Query(Direction::I2t, _) => "i2t.query",
            ParamRef::KeyValue(Direction::I2t, _) => "i2t.key_value",
            ParamRef::Output(Direction::I2t) => "i2t.output",
            ParamRef::Query(Direction::T2i, _) => "t2i.query",
            ParamRef::KeyValue(Direction::T2i, _) => "t2i.key_value",
            ParamRef::Output(Direction::T2i) => "t2i.output",
            ParamRef::GlobalText => "global.text_proj",
            ParamRef::GlobalAttendedImage => "global.attended_image_proj",
            ParamRef::GlobalImage => "global.global_image_proj",
            ParamRef::FusionWeight => "global.fusion_weight",
        }
    }
}

/// Gradient buffers for one attention direction.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub query_proj: Vec<Grad>,
    pub key_value_proj: Vec<Grad>,
    pub output_proj: Grad,
}

impl AttentionGrads {
    fn zeros_like(p: &CrossAttentionParams) -> Self {
        AttentionGrads {
            query_proj: p.query_proj.iter().map(Grad::zeros_like).collect(),
            key_value_proj: p.key_value_proj.iter().map(Grad::zeros_like).collect(),
            output_proj: Grad::zeros_like(&p.output_proj),
        }
    }

    fn zero(&mut self) {
        self.query_proj.iter_mut().for_each(Grad::zero);
        self.key_value_proj.iter_mut().for_each(Grad::zero);
        self.output_proj.zero();
    }
}

/// Gradient buffers for the global projections.
#[derive(Debug, Clone)]
pub struct GlobalGrads {
    pub text_proj: Grad,
    pub attended_image_proj: Grad,
    pub global_image_proj: Grad,
    pub fusion_weight: Grad,
}

impl GlobalGrads {
    fn zeros_like(p: &GlobalProjectionParams) -> Self {
        GlobalGrads {
            text_proj: Grad::zeros_like(&p.text_proj),
            attended_image_proj: Grad::zeros_like(&p.attended_image_proj),
            global_image_proj: Grad::zeros_like(&p.global_image_proj),
            fusion_weight: Grad::zeros_like(&p.fusion_weight),
        }
    }

    fn zero(&mut self) {
        self.text_proj.zero();
        self.attended_image_proj.zero();
        self.global_image_proj.zero();
        self.fusion_weight.zero();
    }
}

/// Gradients for every entry of [`ModelParams`]; zeroed between steps.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub i2t: AttentionGrads,
    pub t2i: AttentionGrads,
    pub global: GlobalGrads,
    tied: bool,
}

impl ModelGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ModelGrads {
            i2t: AttentionGrads::zeros_like(&params.i2t),
            t2i: AttentionGrads::zeros_like(&params.t2i),
            global: GlobalGrads::zeros_like(&params.global),
            tied: params.tied_directions,
        }
    }

    pub fn zero(&mut self) {
        self.i2t.zero();
        self.t2i.zero();
        self.global.zero();
    }

    /// Buffers for a direction; with tied directions both map to `i2t`.
    pub fn attention_mut(&mut self, dir: Direction) -> &mut AttentionGrads {
        match dir {
            Direction::I2t => &mut self.i2t,
            Direction::T2i if self.tied => &mut self.i2t,
            Direction::T2i => &mut self.t2i,
        }
    }

    pub fn grad(&self, r: ParamRef) -> &Grad {
        match r {
            ParamRef::Query(Direction::I2t, h) => &self.i2t.query_proj[h],
            ParamRef::KeyValue(Direction::I2t, h) => &self.i2t.key_value_proj[h],
            ParamRef::Output(Direction::I2t) => &self.i2t.output_proj,
            ParamRef::Query(Direction::T2i, h) => &self.t2i.query_proj[h],
            ParamRef::KeyValue(Direction::T2i, h) => &self.t2i.key_value_proj[h],
            ParamRef::Output(Direction::T2i) => &self.t2i.output_proj,
            ParamRef::GlobalText => &self.global.text_proj,
            ParamRef::GlobalAttendedImage => &self.global.attended_image_proj,
            ParamRef::GlobalImage => &self.global.global_image_proj,
            ParamRef::FusionWeight => &self.global.fusion_weight,
        }
    }
}

/// Adam over the whole parameter set. One state buffer per matrix, stepped in
/// the fixed `param_refs` order; a single shared step counter.
pub struct ModelOptimizer {
    refs: Vec<ParamRef>,
    states: Vec<AdamState>,
    t: u64,
}

impl ModelOptimizer {
    pub fn new(params: &ModelParams) -> Self {
        let refs = params.param_refs();
        let states = refs
            .iter()
            .map(|&r| AdamState::zeros_like(params.param(r)))
            .collect();
        ModelOptimizer { refs, states, t: 0 }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelGrads, lr: f64) -> Result<()> {
        self.t += 1;
        for (&r, state) in self.refs.iter().zip(&mut self.states) {
            adam_step(
                params.param_mut(r),
                grads.grad(r),
                state,
                lr,
                ADAM_BETA1,
                ADAM_BETA2,
                ADAM_EPS,
                self.t,
            )?;
        }
        if params.lambda_learnable {
            // Keep the convex-combination weight feasible.
            let lambda = params.global.lambda().clamp(0.0, 1.0);
            params.global.fusion_weight.set(0, 0, lambda)?;
        }
        if params.tied_directions {
            params.t2i = params.i2t.clone();
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}
