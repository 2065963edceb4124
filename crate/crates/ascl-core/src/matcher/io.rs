//! Whole-model save/load ("ASCM" container).
//!
//! Layout (little-endian): magic b"ASCM", version u32, dim u32, heads u32,
//! flags u8 (bit 0 positional encoding, bit 1 tied directions, bit 2 lambda
//! learnable, bit 3 fusion enabled), u1 f64, config echo (u32 len + utf8),
//! then each parameter matrix as rows u32, cols u32, f64 entries. Parameters
//! are stored at training precision so a reloaded model reproduces reports
//! bit-for-bit.

use std::fs;
use std::path::Path;

use crate::error::{AsclError, Result};
use crate::matcher::params::{CrossAttentionParams, GlobalProjectionParams, ModelParams};
use crate::numerics::Mat;

pub const MODEL_MAGIC: &[u8; 4] = b"ASCM";
pub const MODEL_VERSION: u32 = 1;

fn push_mat(out: &mut Vec<u8>, m: &Mat) {
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model together with the effective-config echo that produced it.
pub fn encode_model(params: &ModelParams, config_echo: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.dim as u32).to_le_bytes());
    out.extend_from_slice(&(params.heads as u32).to_le_bytes());
    let mut flags = 0u8;
    if params.positional_encoding {
        flags |= 1;
    }
    if params.tied_directions {
        flags |= 2;
    }
    if params.lambda_learnable {
        flags |= 4;
    }
    if params.fusion_enabled {
        flags |= 8;
    }
    out.push(flags);
    out.extend_from_slice(&params.u1.to_le_bytes());
    out.extend_from_slice(&(config_echo.len() as u32).to_le_bytes());
    out.extend_from_slice(config_echo.as_bytes());
    let push_attention = |out: &mut Vec<u8>, side: &CrossAttentionParams| {
        for m in &side.query_proj {
            push_mat(out, m);
        }
        for m in &side.key_value_proj {
            push_mat(out, m);
        }
        push_mat(out, &side.output_proj);
    };
    push_attention(&mut out, &params.i2t);
    if !params.tied_directions {
        push_attention(&mut out, &params.t2i);
    }
    push_mat(&mut out, &params.global.text_proj);
    push_mat(&mut out, &params.global.attended_image_proj);
    push_mat(&mut out, &params.global.global_image_proj);
    push_mat(&mut out, &params.global.fusion_weight);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AsclError::format(
                self.pos as u64,
                format!("truncated model file while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn mat(&mut self, what: &str) -> Result<Mat> {
        let at = self.pos as u64;
        let rows = self.u32(what)? as usize;
        let cols = self.u32(what)? as usize;
        let bytes = self.take(rows * cols * 8, what)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Mat::from_vec(rows, cols, data).map_err(|e| AsclError::format(at, format!("{what}: {e}")))
    }
}

/// Parses a model container, returning the parameters and the config echo.
pub fn decode_model(buf: &[u8]) -> Result<(ModelParams, String)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(AsclError::format(0, "bad magic, expected \"ASCM\""));
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(AsclError::format(
            4,
            format!("unsupported model version {version}"),
        ));
    }
    let dim = r.u32("dim")? as usize;
    let heads = r.u32("heads")? as usize;
    if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
        return Err(AsclError::format(8, "invalid dim/heads header"));
    }
    let flags = r.take(1, "flags")?[0];
    let u1 = r.f64("u1")?;
    let echo_len = r.u32("config echo length")? as usize;
    let echo_at = r.pos as u64;
    let echo = String::from_utf8(r.take(echo_len, "config echo")?.to_vec())
        .map_err(|_| AsclError::format(echo_at, "config echo is not utf-8"))?;

    let tied = flags & 2 != 0;
    let mut read_attention = |label: &str| -> Result<CrossAttentionParams> {
        let query_proj = (0..heads)
            .map(|h| r.mat(&format!("{label} query projection {h}")))
            .collect::<Result<Vec<_>>>()?;
        let key_value_proj = (0..heads)
            .map(|h| r.mat(&format!("{label} key/value projection {h}")))
            .collect::<Result<Vec<_>>>()?;
        let output_proj = r.mat(&format!("{label} output projection"))?;
        Ok(CrossAttentionParams {
            query_proj,
            key_value_proj,
            output_proj,
        })
    };
    let i2t = read_attention("i2t")?;
    let t2i = if tied { i2t.clone() } else { read_attention("t2i")? };
    let global = GlobalProjectionParams {
        text_proj: r.mat("global text projection")?,
        attended_image_proj: r.mat("global attended-image projection")?,
        global_image_proj: r.mat("global image projection")?,
        fusion_weight: r.mat("fusion weight")?,
    };
    if r.pos != buf.len() {
        return Err(AsclError::format(
            r.pos as u64,
            "trailing bytes after model parameters",
        ));
    }
    let params = ModelParams {
        dim,
        heads,
        i2t,
        t2i,
        global,
        positional_encoding: flags & 1 != 0,
        u1,
        tied_directions: tied,
        lambda_learnable: flags & 4 != 0,
        fusion_enabled: flags & 8 != 0,
    };
    params.validate().map_err(|e| {
        AsclError::format(0, format!("model parameters fail validation: {e}"))
    })?;
    Ok((params, echo))
}

pub fn save_model(params: &ModelParams, config_echo: &str, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(params, config_echo))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelParams, String)> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::params::ModelInit;

    #[test]
    fn model_round_trip_is_exact() {
        for tied in [false, true] {
            let params = ModelParams::init(
                &ModelInit {
                    dim: 8,
                    heads: 2,
                    tied_directions: tied,
                    lambda_learnable: true,
                    ..ModelInit::default()
                },
                17,
            )
            .unwrap();
            let bytes = encode_model(&params, "train.seed=17");
            let (back, echo) = decode_model(&bytes).unwrap();
            assert_eq!(params, back);
            assert_eq!(echo, "train.seed=17");
            assert_eq!(bytes, encode_model(&back, &echo));
        }
    }

    #[test]
    fn bad_magic_and_truncation_are_reported() {
        let params = ModelParams::init(
            &ModelInit {
                dim: 4,
                heads: 1,
                ..ModelInit::default()
            },
            1,
        )
        .unwrap();
        let bytes = encode_model(&params, "");
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(
            decode_model(&bad),
            Err(AsclError::FormatError { offset: 0, .. })
        ));
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            decode_model(cut),
            Err(AsclError::FormatError { .. })
        ));
    }
}
