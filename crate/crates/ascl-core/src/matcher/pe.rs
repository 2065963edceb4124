//! Sinusoidal positional encoding for word rows.
//!
//! Without it the model is word-order blind and shuffle negatives would score
//! identically to the original caption; the encoders that normally supply
//! order sensitivity are outside this engine.

use crate::numerics::Mat;

/// Standard sinusoidal table: `pe[pos][2i] = sin(pos / 10000^(2i/d))`,
/// `pe[pos][2i+1] = cos(...)`.
pub fn sinusoidal_encoding(positions: usize, dim: usize) -> Mat {
    let mut out = Mat::zeros(positions, dim);
    for pos in 0..positions {
        let row = out.row_mut(pos);
        for (i, v) in row.iter_mut().enumerate() {
            let pair = (i / 2) as f64;
            let rate = (10_000.0f64).powf(2.0 * pair / dim as f64);
            let angle = pos as f64 / rate;
            *v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Word rows plus their positional encoding.
pub fn with_positional(words: &Mat) -> Mat {
    let pe = sinusoidal_encoding(words.rows(), words.cols());
    let mut out = words.clone();
    for (v, p) in out.data_mut().iter_mut().zip(pe.data()) {
        *v += p;
    }
    out
}
