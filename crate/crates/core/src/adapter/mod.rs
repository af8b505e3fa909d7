//! Few-shot adaptation of a frozen encoder: a key-value cache over support
//! features, and a low-rank fine-tuned branch whose cache logits are mixed in.

mod lora;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::distill::AdamW;
use crate::error::{Error, Result};
use crate::model::{encode, l2_normalize, patchify, EncoderConfig, ParamStore};
use crate::raster::RgbImage;

pub use lora::LowRankAdaptation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    /// Affinity sharpness.
    pub beta: f64,
    /// Weight of the frozen-encoder cache term.
    pub alpha: f64,
    /// Weight of the adapted-encoder cache term.
    pub alpha_prime: f64,
    pub rank: usize,
    pub sites: Vec<String>,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            beta: 5.5,
            alpha: 1.0,
            alpha_prime: 1.0,
            rank: 8,
            sites: vec!["q".into(), "v".into()],
            epochs: 30,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::invalid("beta must be positive"));
        }
        if self.alpha < 0.0 || self.alpha_prime < 0.0 {
            return Err(Error::invalid("mixing weights must be non-negative"));
        }
        Ok(())
    }
}

/// Unit-norm support features (keys) and their one-hot labels (values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotCache {
    pub dim: usize,
    pub class_count: usize,
    pub shots_per_class: usize,
    /// `NK × D`, row-major.
    pub keys: Vec<f64>,
    pub labels: Vec<usize>,
}

impl FewShotCache {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    /// One-hot value matrix `NK × N`.
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.labels
            .iter()
            .map(|&c| (0..self.class_count).map(|k| if k == c { 1.0 } else { 0.0 }).collect())
            .collect()
    }
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// Builds the cache from support features; every class needs the same nonzero shot count.
pub fn build_cache(features: &[Vec<f64>], labels: &[usize], class_count: usize) -> Result<FewShotCache> {
    if features.len() != labels.len() {
        return Err(Error::shape("one label per support feature is required"));
    }
    let dim = features.first().map(Vec::len).ok_or_else(|| Error::invalid("empty support set"))?;
    let mut counts = vec![0usize; class_count];
    for &l in labels {
        if l >= class_count {
            return Err(Error::invalid(format!("label {l} out of range for {class_count} classes")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {c} has no support images")));
    }
    if counts.iter().any(|&n| n != counts[0]) {
        return Err(Error::invalid("every class needs the same number of shots"));
    }
    let mut keys = Vec::with_capacity(features.len() * dim);
    for f in features {
        if f.len() != dim {
            return Err(Error::shape("support features differ in dimension"));
        }
        keys.extend(normalize(f));
    }
    Ok(FewShotCache {
        dim,
        class_count,
        shots_per_class: counts[0],
        keys,
        labels: labels.to_vec(),
    })
}

/// `exp(-β (1 - f·kᵢ))` for every key.
pub fn affinities(f_test: &[f64], cache: &FewShotCache, beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::invalid("beta must be positive"));
    }
    if f_test.len() != cache.dim {
        return Err(Error::shape(format!("query dim {} != cache dim {}", f_test.len(), cache.dim)));
    }
    Ok((0..cache.rows())
        .map(|i| {
            let dot: f64 = cache.key(i).iter().zip(f_test).map(|(a, b)| a * b).sum();
            (-beta * (1.0 - dot)).exp()
        })
        .collect())
}

/// `A · L_sup`: per-class sums of affinities.
pub fn cache_logits(a: &[f64], cache: &FewShotCache) -> Result<Vec<f64>> {
    if a.len() != cache.rows() {
        return Err(Error::shape(format!("{} affinities for {} cache rows", a.len(), cache.rows())));
    }
    let mut out = vec![0.0; cache.class_count];
    for (ai, &c) in a.iter().zip(&cache.labels) {
        out[c] += ai;
    }
    Ok(out)
}

/// `α A L_sup + α' A' L_sup` with `A'` from the adapted features and cache.
pub fn combined_logits(
    f_test: &[f64],
    f_test_adapted: &[f64],
    cache: &FewShotCache,
    cache_adapted: &FewShotCache,
    cfg: &AdapterConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.alpha == 0.0 && cfg.alpha_prime == 0.0 {
        return Err(Error::invalid("alpha = alpha' = 0 yields all-zero scores"));
    }
    if cache.labels != cache_adapted.labels {
        return Err(Error::shape("frozen and adapted caches must share support labels"));
    }
    let base = cache_logits(&affinities(f_test, cache, cfg.beta)?, cache)?;
    let adapted = cache_logits(&affinities(f_test_adapted, cache_adapted, cfg.beta)?, cache_adapted)?;
    Ok(base
        .iter()
        .zip(&adapted)
        .map(|(b, a)| cfg.alpha * b + cfg.alpha_prime * a)
        .collect())
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Embeds images in chunks, optionally through a low-rank adaptation.
pub fn embed(
    cfg: &EncoderConfig,
    params: &ParamStore,
    lora: Option<&LowRankAdaptation>,
    images: &[RgbImage],
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let refs: Vec<&RgbImage> = part.iter().collect();
        let batch = patchify(&refs, cfg.patch_size, cfg.dtype())?;
        let e = encode(cfg, params, &batch, None, lora)?.detach();
        out.extend(e.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    Ok(out)
}

/// Cache from support images under the frozen encoder (with optional adaptation).
pub fn build_cache_from_images(
    cfg: &EncoderConfig,
    params: &ParamStore,
    lora: Option<&LowRankAdaptation>,
    images: &[RgbImage],
    labels: &[usize],
    class_count: usize,
) -> Result<FewShotCache> {
    let feats = embed(cfg, params, lora, images, 64)?;
    build_cache(&feats, labels, class_count)
}

/// Trains low-rank factors (frozen weights untouched) so that the adapted cache
/// classifies each support image from the remaining support images.
pub fn low_rank_finetune(
    cfg: &EncoderConfig,
    params: &ParamStore,
    images: &[RgbImage],
    labels: &[usize],
    class_count: usize,
    acfg: &AdapterConfig,
) -> Result<LowRankAdaptation> {
    acfg.validate()?;
    let sites: Vec<&str> = acfg.sites.iter().map(String::as_str).collect();
    let mut lora = LowRankAdaptation::new(cfg, acfg.rank, &sites, acfg.seed)?;
    // Validates the support set shape up front.
    build_cache(&vec![vec![1.0]; labels.len()], labels, class_count)?;
    let frozen = params.copy_as(false)?;
    let n = images.len();
    let shots = n / class_count;
    let refs: Vec<&RgbImage> = images.iter().collect();
    let batch = patchify(&refs, cfg.patch_size, cfg.dtype())?;
    let dt = cfg.dtype();
    let onehot: Vec<f64> = labels
        .iter()
        .flat_map(|&c| (0..class_count).map(move |k| if k == c { 1.0 } else { 0.0 }))
        .collect();
    let onehot = Tensor::from_vec(onehot, (n, class_count), &Device::Cpu)?.to_dtype(dt)?;
    // Leave-one-out when every class has another shot to match against.
    let self_mask: Vec<f64> = (0..n * n)
        .map(|k| if shots > 1 && k / n == k % n { 0.0 } else { 1.0 })
        .collect();
    let self_mask = Tensor::from_vec(self_mask, (n, n), &Device::Cpu)?.to_dtype(dt)?;
    let mut opt = AdamW::new(&[&lora.factors], 0.0)?;
    for _ in 0..acfg.epochs {
        let f = l2_normalize(&encode(cfg, &frozen, &batch, None, Some(&lora))?, 1e-12)?;
        let sim = f.matmul(&f.t()?)?;
        let aff = ((sim.affine(1.0, -1.0)? * acfg.beta)?.exp()? * &self_mask)?;
        let scores = aff.matmul(&onehot)?;
        let p = scores.broadcast_div(&scores.sum_keepdim(D::Minus1)?)?;
        let loss = (p.maximum(1e-12)?.log()? * &onehot)?.sum_all()?.neg()?.affine(1.0 / n as f64, 0.0)?;
        let grads = loss.backward()?;
        opt.step(&mut [&mut lora.factors], &grads, acfg.lr, None)?;
    }
    lora.frozen_copy()
}

/// Picks β and α' on held-out features by accuracy (ties keep the earlier candidate).
pub fn grid_search(
    val: &[(Vec<f64>, Vec<f64>, usize)],
    cache: &FewShotCache,
    cache_adapted: &FewShotCache,
    betas: &[f64],
    alpha_primes: &[f64],
    base: &AdapterConfig,
) -> Result<(AdapterConfig, f64)> {
    let mut best: Option<(AdapterConfig, f64)> = None;
    for &beta in betas {
        for &alpha_prime in alpha_primes {
            let cfg = AdapterConfig {
                beta,
                alpha_prime,
                ..base.clone()
            };
            let mut correct = 0usize;
            for (f, fa, y) in val {
                let logits = combined_logits(f, fa, cache, cache_adapted, &cfg)?;
                correct += usize::from(argmax(&logits) == *y);
            }
            let acc = correct as f64 / val.len().max(1) as f64;
            if best.as_ref().map_or(true, |b| acc > b.1) {
                best = Some((cfg, acc));
            }
        }
    }
    best.ok_or_else(|| Error::invalid("empty hyperparameter grid"))
}
