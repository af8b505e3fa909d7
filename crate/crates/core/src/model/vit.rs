use candle_core::{DType, Device, Tensor};

use super::ops::{batch_norm, l2_normalize, layer_norm, linear, softmax_last};
use super::{EncoderConfig, ParamStore};
use crate::adapter::LowRankAdaptation;
use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::views::MaskSpec;

pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;
const LN_EPS: f64 = 1e-6;

/// Flattened, normalized token patches for a batch of equally sized square images.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `(batch, grid², 3·p²)`
    pub tokens: Tensor,
    pub grid: usize,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.tokens.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_tokens(&self) -> usize {
        self.grid * self.grid
    }
}

pub fn patchify(images: &[&RgbImage], patch: usize, dtype: DType) -> Result<TokenBatch> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let side = first.width();
    if first.height() != side || patch == 0 || side % patch != 0 {
        return Err(Error::shape(format!(
            "images must be square with side divisible by {patch}, got {}x{}",
            first.width(),
            first.height()
        )));
    }
    let grid = side / patch;
    let tok_len = 3 * patch * patch;
    let mut data = Vec::with_capacity(images.len() * grid * grid * tok_len);
    for img in images {
        if img.width() != side || img.height() != side {
            return Err(Error::shape("images in a batch must share one size"));
        }
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..3 {
                    for py in 0..patch {
                        for px in 0..patch {
                            let v = img.get(gx * patch + px, gy * patch + py, c);
                            data.push((v - PIXEL_MEAN) / PIXEL_STD);
                        }
                    }
                }
            }
        }
    }
    let tokens = Tensor::from_vec(data, (images.len(), grid * grid, tok_len), &Device::Cpu)?.to_dtype(dtype)?;
    Ok(TokenBatch { tokens, grid })
}

/// `(batch, tokens, 1)` indicator of masked positions.
pub fn mask_tensor(masks: &[&MaskSpec], n_tokens: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(masks.len() * n_tokens);
    for m in masks {
        if m.token_mask.len() != n_tokens {
            return Err(Error::shape(format!(
                "mask length {} does not match {n_tokens} tokens",
                m.token_mask.len()
            )));
        }
        data.extend(m.token_mask.iter().map(|&b| if b { 1f32 } else { 0f32 }));
    }
    Ok(Tensor::from_vec(data, (masks.len(), n_tokens, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Bilinear (half-pixel centers) resampling matrix from an `src`×`src` grid to `dst`×`dst`.
fn interpolation_matrix(src: usize, dst: usize) -> Vec<f64> {
    let axis = |i: usize| -> [(usize, f64); 2] {
        let c = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let t = c - lo as f64;
        [(lo, 1.0 - t), (hi, t)]
    };
    let mut m = vec![0.0; dst * dst * src * src];
    for y in 0..dst {
        for x in 0..dst {
            let row = y * dst + x;
            for (sy, wy) in axis(y) {
                for (sx, wx) in axis(x) {
                    m[row * src * src + sy * src + sx] += wy * wx;
                }
            }
        }
    }
    m
}

fn position_embedding(cfg: &EncoderConfig, params: &ParamStore, grid: usize) -> Result<(Tensor, Tensor)> {
    let pos = params.get("encoder.pos_embed")?;
    let n0 = cfg.grid();
    let cls_pos = pos.narrow(1, 0, 1)?;
    let patch_pos = pos.narrow(1, 1, n0 * n0)?;
    if grid == n0 {
        return Ok((cls_pos, patch_pos));
    }
    let m = interpolation_matrix(n0, grid);
    let m = Tensor::from_vec(m, (grid * grid, n0 * n0), &Device::Cpu)?.to_dtype(pos.dtype())?;
    let interp = m.matmul(&patch_pos.squeeze(0)?)?.unsqueeze(0)?;
    Ok((cls_pos, interp))
}

fn attention(
    x: &Tensor,
    params: &ParamStore,
    pre: &str,
    block: usize,
    heads: usize,
    lora: Option<&LowRankAdaptation>,
) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    let dh = d / heads;
    let proj = |name: &str| -> Result<Tensor> {
        let w = params.get(&format!("{pre}.attn.{name}.weight"))?;
        let bias = params.get(&format!("{pre}.attn.{name}.bias"))?;
        let y = linear(x, w, Some(bias))?;
        match lora.map(|l| l.delta(block, name, x)).transpose()?.flatten() {
            Some(delta) => Ok((y + delta)?),
            None => Ok(y),
        }
    };
    let split = |t: Tensor| -> Result<Tensor> { Ok(t.reshape((b, n, heads, dh))?.transpose(1, 2)?.contiguous()?) };
    let q = split(proj("q")?)?;
    let k = split(proj("k")?)?;
    let v = split(proj("v")?)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
    let attn = softmax_last(&scores)?;
    let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
    linear(
        &out,
        params.get(&format!("{pre}.attn.o.weight"))?,
        Some(params.get(&format!("{pre}.attn.o.bias"))?),
    )
}

/// Full token sequence `(batch, 1 + tokens, D)` after the final norm; position 0 is
/// the class token. Masked positions are replaced by the mask token before the stack.
pub fn encode_tokens(
    cfg: &EncoderConfig,
    params: &ParamStore,
    batch: &TokenBatch,
    mask: Option<&Tensor>,
    lora: Option<&LowRankAdaptation>,
) -> Result<Tensor> {
    let tok_len = 3 * cfg.patch_size * cfg.patch_size;
    let (b, n, t) = batch.tokens.dims3()?;
    if t != tok_len {
        return Err(Error::shape(format!("token length {t} != {tok_len}")));
    }
    let mut x = linear(
        &batch.tokens,
        params.get("encoder.patch_embed.weight")?,
        Some(params.get("encoder.patch_embed.bias")?),
    )?;
    if let Some(m) = mask {
        if m.dims3()? != (b, n, 1) {
            return Err(Error::shape("mask shape does not match token batch"));
        }
        let keep = m.affine(-1.0, 1.0)?;
        let mt = params.get("encoder.mask_token")?;
        x = (x.broadcast_mul(&keep)? + m.broadcast_mul(mt)?)?;
    }
    let (cls_pos, patch_pos) = position_embedding(cfg, params, batch.grid)?;
    x = x.broadcast_add(&patch_pos)?;
    let d = cfg.embed_dim;
    let cls = (params.get("encoder.cls_token")? + cls_pos)?.broadcast_as((b, 1, d))?;
    x = Tensor::cat(&[&cls, &x], 1)?;
    for i in 0..cfg.depth {
        let pre = format!("encoder.blocks.{i}");
        let h = layer_norm(
            &x,
            params.get(&format!("{pre}.norm1.weight"))?,
            params.get(&format!("{pre}.norm1.bias"))?,
            LN_EPS,
        )?;
        x = (x + attention(&h, params, &pre, i, cfg.heads, lora)?)?;
        let h = layer_norm(
            &x,
            params.get(&format!("{pre}.norm2.weight"))?,
            params.get(&format!("{pre}.norm2.bias"))?,
            LN_EPS,
        )?;
        let h = linear(
            &h,
            params.get(&format!("{pre}.mlp.fc1.weight"))?,
            Some(params.get(&format!("{pre}.mlp.fc1.bias"))?),
        )?
        .gelu()?;
        let h = linear(
            &h,
            params.get(&format!("{pre}.mlp.fc2.weight"))?,
            Some(params.get(&format!("{pre}.mlp.fc2.bias"))?),
        )?;
        x = (x + h)?;
    }
    layer_norm(
        &x,
        params.get("encoder.norm.weight")?,
        params.get("encoder.norm.bias")?,
        LN_EPS,
    )
}

/// Class-token embedding `(batch, D)`.
pub fn encode(
    cfg: &EncoderConfig,
    params: &ParamStore,
    batch: &TokenBatch,
    mask: Option<&Tensor>,
    lora: Option<&LowRankAdaptation>,
) -> Result<Tensor> {
    Ok(encode_tokens(cfg, params, batch, mask, lora)?.narrow(1, 0, 1)?.squeeze(1)?)
}

/// Head output z `(batch, K)`; bounded by 1 in magnitude.
pub fn head_logits(params: &ParamStore, e: &Tensor) -> Result<Tensor> {
    let fc = |x: &Tensor, name: &str| -> Result<Tensor> {
        linear(
            x,
            params.get(&format!("head.{name}.weight"))?,
            Some(params.get(&format!("head.{name}.bias"))?),
        )
    };
    let norm = |x: Tensor, name: &str| -> Result<Tensor> {
        let key = format!("head.{name}.weight");
        if !params.contains(&key) {
            return Ok(x);
        }
        batch_norm(&x, params.get(&key)?, params.get(&format!("head.{name}.bias"))?, 1e-5)
    };
    let h = norm(fc(e, "fc1")?, "bn1")?.gelu()?;
    let h = norm(fc(&h, "fc2")?, "bn2")?.gelu()?;
    let h = fc(&h, "fc3")?;
    let h = l2_normalize(&h, 1e-6)?;
    let w = l2_normalize(params.get("head.last.weight")?, 1e-12)?;
    linear(&h, &w, None)
}

pub fn project_prob_from_logits(z: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    softmax_last(&(z / tau)?)
}

/// Temperature softmax of the head output.
pub fn project_prob(params: &ParamStore, e: &Tensor, tau: f64) -> Result<Tensor> {
    project_prob_from_logits(&head_logits(params, e)?, tau)
}

/// Shuffle projector f: D → hidden → D.
pub fn shuffle_project(projector: &ParamStore, e: &Tensor) -> Result<Tensor> {
    let h = linear(
        e,
        projector.get("projector.fc1.weight")?,
        Some(projector.get("projector.fc1.bias")?),
    )?
    .gelu()?;
    linear(
        &h,
        projector.get("projector.fc2.weight")?,
        Some(projector.get("projector.fc2.bias")?),
    )
}
