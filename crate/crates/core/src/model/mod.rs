//! Vision-transformer encoder, K-way projection head, shuffle projector and the
//! student/teacher parameter pair.

mod ops;
mod params;
mod vit;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ops::{l2_normalize, layer_norm, linear, log_softmax_last, softmax_last};
pub use params::{constant, trunc_normal, ParamStore};
pub use vit::{
    encode, encode_tokens, head_logits, mask_tensor, patchify, project_prob, project_prob_from_logits,
    shuffle_project, TokenBatch, PIXEL_MEAN, PIXEL_STD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Encoder, head and projector hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub variant: String,
    pub image_size: usize,
    /// Token patch side in pixels.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    /// K: number of prototypes / output dimension of the head.
    pub out_dim: usize,
    pub projector_hidden: usize,
    /// Batch normalization after the two hidden head layers, always on the statistics of the current forward batch.
    pub head_batch_norm: bool,
    pub precision: Precision,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::variant("tiny").expect("tiny is a known variant")
    }
}

impl EncoderConfig {
    pub fn variant(name: &str) -> Result<Self> {
        let (depth, embed_dim, heads) = match name {
            "tiny" => (6, 192, 3),
            "small" => (12, 384, 6),
            "base" => (12, 768, 12),
            other => return Err(Error::invalid(format!("unknown encoder variant `{other}`"))),
        };
        Ok(Self {
            variant: name.to_string(),
            image_size: 224,
            patch_size: 16,
            embed_dim,
            depth,
            heads,
            mlp_ratio: 4,
            head_hidden: 2048,
            head_bottleneck: 256,
            out_dim: 1024,
            projector_hidden: 2 * embed_dim,
            head_batch_norm: false,
            precision: Precision::F32,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid("image_size must be divisible by patch_size"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid("embed_dim must be divisible by heads"));
        }
        if self.depth == 0 || self.out_dim == 0 || self.head_hidden == 0 || self.head_bottleneck == 0 {
            return Err(Error::invalid("depth, out_dim and head sizes must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }
}

/// Student (trainable) and teacher (EMA-only) networks.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub config: EncoderConfig,
    /// Encoder and head, tracked by autograd.
    pub student: ParamStore,
    /// Same inventory as `student`; never part of an autograd graph.
    pub teacher: ParamStore,
    /// Student-only shuffle projector f.
    pub projector: ParamStore,
}

/// Randomly initialized encoder + head parameters, in store order.
pub fn init_network(cfg: &EncoderConfig, rng: &mut ChaCha8Rng, trainable: bool) -> Result<ParamStore> {
    cfg.validate()?;
    let dt = cfg.dtype();
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let hid = d * cfg.mlp_ratio;
    let std = 0.02;
    let mut s = ParamStore::new(trainable);
    s.insert("encoder.patch_embed.weight", trunc_normal(&[d, 3 * p * p], std, dt, rng)?)?;
    s.insert("encoder.patch_embed.bias", constant(&[d], 0.0, dt)?)?;
    s.insert("encoder.cls_token", trunc_normal(&[1, 1, d], std, dt, rng)?)?;
    s.insert("encoder.pos_embed", trunc_normal(&[1, 1 + cfg.num_tokens(), d], std, dt, rng)?)?;
    s.insert("encoder.mask_token", constant(&[1, 1, d], 0.0, dt)?)?;
    for b in 0..cfg.depth {
        let pre = format!("encoder.blocks.{b}");
        s.insert(format!("{pre}.norm1.weight"), constant(&[d], 1.0, dt)?)?;
        s.insert(format!("{pre}.norm1.bias"), constant(&[d], 0.0, dt)?)?;
        for proj in ["q", "k", "v", "o"] {
            s.insert(format!("{pre}.attn.{proj}.weight"), trunc_normal(&[d, d], std, dt, rng)?)?;
            s.insert(format!("{pre}.attn.{proj}.bias"), constant(&[d], 0.0, dt)?)?;
        }
        s.insert(format!("{pre}.norm2.weight"), constant(&[d], 1.0, dt)?)?;
        s.insert(format!("{pre}.norm2.bias"), constant(&[d], 0.0, dt)?)?;
        s.insert(format!("{pre}.mlp.fc1.weight"), trunc_normal(&[hid, d], std, dt, rng)?)?;
        s.insert(format!("{pre}.mlp.fc1.bias"), constant(&[hid], 0.0, dt)?)?;
        s.insert(format!("{pre}.mlp.fc2.weight"), trunc_normal(&[d, hid], std, dt, rng)?)?;
        s.insert(format!("{pre}.mlp.fc2.bias"), constant(&[d], 0.0, dt)?)?;
    }
    s.insert("encoder.norm.weight", constant(&[d], 1.0, dt)?)?;
    s.insert("encoder.norm.bias", constant(&[d], 0.0, dt)?)?;

    let (h, bn, k) = (cfg.head_hidden, cfg.head_bottleneck, cfg.out_dim);
    s.insert("head.fc1.weight", trunc_normal(&[h, d], std, dt, rng)?)?;
    s.insert("head.fc1.bias", constant(&[h], 0.0, dt)?)?;
    if cfg.head_batch_norm {
        s.insert("head.bn1.weight", constant(&[h], 1.0, dt)?)?;
        s.insert("head.bn1.bias", constant(&[h], 0.0, dt)?)?;
    }
    s.insert("head.fc2.weight", trunc_normal(&[h, h], std, dt, rng)?)?;
    s.insert("head.fc2.bias", constant(&[h], 0.0, dt)?)?;
    if cfg.head_batch_norm {
        s.insert("head.bn2.weight", constant(&[h], 1.0, dt)?)?;
        s.insert("head.bn2.bias", constant(&[h], 0.0, dt)?)?;
    }
    s.insert("head.fc3.weight", trunc_normal(&[bn, h], std, dt, rng)?)?;
    s.insert("head.fc3.bias", constant(&[bn], 0.0, dt)?)?;
    // Direction of the weight-normalized prototype layer; rows are unit-normalized in forward.
    s.insert("head.last.weight", trunc_normal(&[k, bn], std, dt, rng)?)?;
    Ok(s)
}

pub fn init_projector(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let dt = cfg.dtype();
    let (d, h) = (cfg.embed_dim, cfg.projector_hidden);
    let mut s = ParamStore::new(true);
    s.insert("projector.fc1.weight", trunc_normal(&[h, d], 0.02, dt, rng)?)?;
    s.insert("projector.fc1.bias", constant(&[h], 0.0, dt)?)?;
    s.insert("projector.fc2.weight", trunc_normal(&[d, h], 0.02, dt, rng)?)?;
    s.insert("projector.fc2.bias", constant(&[d], 0.0, dt)?)?;
    Ok(s)
}

/// Student from `seed`; the teacher is an exact frozen copy.
pub fn init_pair(cfg: &EncoderConfig, seed: u64) -> Result<ModelPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student = init_network(cfg, &mut rng, true)?;
    let projector = init_projector(cfg, &mut rng)?;
    let teacher = student.copy_as(false)?;
    Ok(ModelPair {
        config: cfg.clone(),
        student,
        teacher,
        projector,
    })
}

impl ModelPair {
    /// Largest absolute elementwise difference between teacher and student.
    pub fn max_divergence(&self) -> Result<f64> {
        let s = self.student.flatten_f64()?;
        let t = self.teacher.flatten_f64()?;
        Ok(s.iter().zip(&t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// True when no teacher tensor is (or depends on) an autograd variable.
    pub fn teacher_is_detached(&self) -> bool {
        self.teacher.tensors().iter().all(|t| !t.track_op())
    }
}

/// Embeddings of `images` under `params` as host vectors.
pub fn embed_images(cfg: &EncoderConfig, params: &ParamStore, images: &[&crate::raster::RgbImage]) -> Result<Vec<Vec<f32>>> {
    let batch = patchify(images, cfg.patch_size, cfg.dtype())?;
    let e = encode(cfg, params, &batch, None, None)?;
    Ok(e.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}

pub fn tensor_to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests;
