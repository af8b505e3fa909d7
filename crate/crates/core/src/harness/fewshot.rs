//! Few-shot adaptation on labeled corpora: support sampling, a self-contained
//! on-disk cache (keys as feature stores, encoder and low-rank factors in one
//! checkpoint container) and test-set scoring.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::extract::patch_origins;
use super::probe::ProbeMetrics;
use super::store::{FeatureStore, RowSource};
use crate::adapter::{
    argmax, build_cache, build_cache_from_images, combined_logits, embed, low_rank_finetune, AdapterConfig,
    FewShotCache, LowRankAdaptation,
};
use crate::distill::{push_store, restore_store, CheckpointBlob, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, macro_auc};
use crate::model::{init_pair, EncoderConfig, ParamStore};
use crate::pyramid::Corpus;
use crate::raster::RgbImage;

pub const META_FILE: &str = "meta.json";
pub const KEYS_FILE: &str = "keys.feat";
pub const ADAPTED_KEYS_FILE: &str = "keys_adapted.feat";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, Default)]
pub struct LabeledPatches {
    pub images: Vec<RgbImage>,
    pub labels: Vec<usize>,
    pub sources: Vec<RowSource>,
}

impl LabeledPatches {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Tile-aligned `size` patches at `level`, resized to `image_size`, labeled by
/// their slide. With `shots`, exactly that many per class are drawn by `seed`
/// and grouped by class; otherwise every patch is returned in manifest order.
pub fn labeled_patches(
    corpus: &Corpus,
    level: u32,
    size: u32,
    image_size: usize,
    shots: Option<usize>,
    seed: u64,
) -> Result<LabeledPatches> {
    let labels = corpus.labels.as_ref().ok_or_else(|| Error::invalid("corpus has no slide labels"))?;
    let n_classes = corpus.num_classes();
    let mut per_class: Vec<Vec<(usize, u32, u32)>> = vec![Vec::new(); n_classes];
    let mut all = Vec::new();
    for (k, slide) in corpus.slides.iter().enumerate() {
        for (x, y) in patch_origins(slide, level, size)? {
            per_class[labels[k]].push((k, x, y));
            all.push((k, x, y));
        }
    }
    let chosen = match shots {
        None => all,
        Some(0) => return Err(Error::invalid("shots must be positive")),
        Some(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::with_capacity(s * n_classes);
            for (c, mut pool) in per_class.into_iter().enumerate() {
                if pool.len() < s {
                    return Err(Error::invalid(format!("class {c} has {} patches, {s} shots requested", pool.len())));
                }
                pool.shuffle(&mut rng);
                out.extend_from_slice(&pool[..s]);
            }
            out
        }
    };
    let mut set = LabeledPatches::default();
    for (k, x, y) in chosen {
        let slide = &corpus.slides[k];
        let img = slide.patch_at(level, x, y, size)?.to_image();
        let img = if img.width() == image_size { img } else { img.resize(image_size, image_size)? };
        set.images.push(img);
        set.labels.push(labels[k]);
        set.sources.push(RowSource {
            source_id: slide.id.clone(),
            level,
            x,
            y,
        });
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub class_count: usize,
    pub shots_per_class: usize,
    pub labels: Vec<usize>,
    pub model: EncoderConfig,
    pub adapter: AdapterConfig,
}

/// Frozen encoder, its low-rank adaptation and both support caches.
#[derive(Debug, Clone)]
pub struct FewShotModel {
    pub meta: CacheMeta,
    pub encoder: ParamStore,
    pub lora: LowRankAdaptation,
    pub cache: FewShotCache,
    pub cache_adapted: FewShotCache,
}

fn keys_store(cache: &FewShotCache, sources: &[RowSource]) -> Result<FeatureStore> {
    let mut store = FeatureStore::new(cache.dim);
    for (i, src) in sources.iter().enumerate() {
        let row: Vec<f32> = cache.key(i).iter().map(|&v| v as f32).collect();
        store.append(&row, src.clone())?;
    }
    Ok(store)
}

fn lora_template(meta: &CacheMeta) -> Result<LowRankAdaptation> {
    let sites: Vec<&str> = meta.adapter.sites.iter().map(String::as_str).collect();
    LowRankAdaptation::new(&meta.model, meta.adapter.rank, &sites, meta.adapter.seed)
}

impl FewShotModel {
    /// Builds the frozen cache, fine-tunes the low-rank factors on the support
    /// set and rebuilds the adapted cache once afterwards.
    pub fn fit(model: &EncoderConfig, encoder: &ParamStore, support: &LabeledPatches, cfg: &AdapterConfig) -> Result<Self> {
        cfg.validate()?;
        let class_count = support.labels.iter().max().map_or(0, |m| m + 1);
        let cache = build_cache_from_images(model, encoder, None, &support.images, &support.labels, class_count)?;
        let lora = low_rank_finetune(model, encoder, &support.images, &support.labels, class_count, cfg)?;
        let cache_adapted =
            build_cache_from_images(model, encoder, Some(&lora), &support.images, &support.labels, class_count)?;
        Ok(Self {
            meta: CacheMeta {
                class_count,
                shots_per_class: cache.shots_per_class,
                labels: support.labels.clone(),
                model: model.clone(),
                adapter: cfg.clone(),
            },
            encoder: encoder.copy_as(false)?,
            lora,
            cache,
            cache_adapted,
        })
    }

    /// Mixed cache scores for each image.
    pub fn scores(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
        let f = embed(&self.meta.model, &self.encoder, None, images, 64)?;
        let fa = embed(&self.meta.model, &self.encoder, Some(&self.lora), images, 64)?;
        f.iter()
            .zip(&fa)
            .map(|(a, b)| {
                let (a, b) = (crate::adapter::normalize(a), crate::adapter::normalize(b));
                combined_logits(&a, &b, &self.cache, &self.cache_adapted, &self.meta.adapter)
            })
            .collect()
    }

    /// Accuracy and macro AUC on labeled images; scores are normalized per row for AUC.
    pub fn evaluate(&self, test: &LabeledPatches) -> Result<ProbeMetrics> {
        let scores = self.scores(&test.images)?;
        let pred: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        let probs: Vec<Vec<f64>> = scores
            .iter()
            .map(|s| {
                let t: f64 = s.iter().sum();
                s.iter().map(|v| v / t).collect()
            })
            .collect();
        Ok(ProbeMetrics {
            accuracy: accuracy(&pred, &test.labels)?,
            auc: macro_auc(&probs, &test.labels, self.meta.class_count)?,
            n_train: self.cache.rows(),
            n_test: test.len(),
            epochs_run: self.meta.adapter.epochs,
        })
    }

    pub fn save(&self, dir: &Path, sources: &[RowSource]) -> Result<()> {
        if sources.len() != self.cache.rows() {
            return Err(Error::shape("one source per cache row is required"));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        keys_store(&self.cache, sources)?.save(&dir.join(KEYS_FILE))?;
        keys_store(&self.cache_adapted, sources)?.save(&dir.join(ADAPTED_KEYS_FILE))?;
        let mut blocks = Vec::new();
        push_store(&mut blocks, "encoder", &self.encoder)?;
        push_store(&mut blocks, "lora", &self.lora.factors)?;
        let meta_json = serde_json::to_vec_pretty(&self.meta)?;
        let blob = CheckpointBlob {
            version: FORMAT_VERSION,
            step: 0,
            config_hash: sha2_of(&meta_json),
            blocks,
        };
        blob.save(&dir.join(WEIGHTS_FILE))?;
        let path = dir.join(META_FILE);
        fs::write(&path, meta_json).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CacheMeta = serde_json::from_slice(&bytes)?;
        let blob = CheckpointBlob::load(&dir.join(WEIGHTS_FILE))?;
        if blob.config_hash != sha2_of(&bytes) {
            return Err(Error::Checkpoint("cache metadata does not match its weights".into()));
        }
        let encoder = restore_store(&blob, "encoder", &init_pair(&meta.model, 0)?.teacher)?;
        let mut lora = lora_template(&meta)?;
        lora.factors = restore_store(&blob, "lora", &lora.factors)?;
        let lora = lora.frozen_copy()?;
        let read_cache = |file: &str| -> Result<FewShotCache> {
            let store = FeatureStore::load(&dir.join(file))?;
            build_cache(&store.matrix(), &meta.labels, meta.class_count)
        };
        Ok(Self {
            cache: read_cache(KEYS_FILE)?,
            cache_adapted: read_cache(ADAPTED_KEYS_FILE)?,
            meta,
            encoder,
            lora,
        })
    }
}

fn sha2_of(bytes: &[u8]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).into()
}
