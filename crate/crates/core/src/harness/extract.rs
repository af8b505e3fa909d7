//! Frozen-encoder embeddings of every tile-aligned patch of a corpus level.

use serde::{Deserialize, Serialize};

use super::store::{FeatureStore, RowSource};
use crate::error::{Error, Result};
use crate::model::{embed_images, EncoderConfig, ParamStore};
use crate::pyramid::{Corpus, Slide};
use crate::raster::RgbImage;

const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub row_count: usize,
    pub dim: usize,
}

/// Origins of the `size`×`size` grid covering a level, row-major.
pub fn patch_origins(slide: &Slide, level: u32, size: u32) -> Result<Vec<(u32, u32)>> {
    let img = slide.level(level)?;
    if size == 0 || img.width < size || img.height < size {
        return Err(Error::invalid(format!(
            "level {level} of {} ({}x{}) holds no {size}px patch",
            slide.id, img.width, img.height
        )));
    }
    let mut out = Vec::new();
    for y in (0..=img.height - size).step_by(size as usize) {
        for x in (0..=img.width - size).step_by(size as usize) {
            out.push((x, y));
        }
    }
    Ok(out)
}

fn extract_slides(
    cfg: &EncoderConfig,
    params: &ParamStore,
    slides: &[Slide],
    level: u32,
    size: u32,
) -> Result<FeatureStore> {
    let mut store = FeatureStore::new(cfg.embed_dim);
    let side = cfg.image_size;
    for slide in slides {
        let mut pending: Vec<(RgbImage, RowSource)> = Vec::new();
        for (x, y) in patch_origins(slide, level, size)? {
            let img = slide.patch_at(level, x, y, size)?.to_image();
            let img = if img.width() == side { img } else { img.resize(side, side)? };
            pending.push((
                img,
                RowSource {
                    source_id: slide.id.clone(),
                    level,
                    x,
                    y,
                },
            ));
        }
        for part in pending.chunks(CHUNK) {
            let refs: Vec<&RgbImage> = part.iter().map(|p| &p.0).collect();
            for (row, (_, src)) in embed_images(cfg, params, &refs)?.iter().zip(part) {
                store.append(row, src.clone())?;
            }
        }
    }
    Ok(store)
}

/// Appends the embedding of every tile-aligned `size` patch at `level` to `out`,
/// slide by slide in manifest order. Slides are split into `workers` contiguous
/// shards whose stores are merged in order, so the result does not depend on
/// the worker count.
pub fn extract_features(
    cfg: &EncoderConfig,
    params: &ParamStore,
    corpus: &Corpus,
    level: u32,
    size: u32,
    workers: usize,
    out: &mut FeatureStore,
) -> Result<ExtractSummary> {
    if out.dim() != cfg.embed_dim {
        return Err(Error::shape(format!(
            "store dimension {} does not match encoder dimension {}",
            out.dim(),
            cfg.embed_dim
        )));
    }
    let workers = workers.clamp(1, corpus.slides.len().max(1));
    let per = corpus.slides.len().div_ceil(workers).max(1);
    let shards: Vec<FeatureStore> = if workers == 1 {
        vec![extract_slides(cfg, params, &corpus.slides, level, size)?]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = corpus
                .slides
                .chunks(per)
                .map(|chunk| scope.spawn(move || extract_slides(cfg, params, chunk, level, size)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| Error::invalid("extraction worker panicked"))?)
                .collect::<Result<Vec<_>>>()
        })?
    };
    let merged = FeatureStore::merge(&shards)?;
    for i in 0..merged.len() {
        out.append(merged.row(i), merged.source(i).clone())?;
    }
    Ok(ExtractSummary {
        row_count: out.len(),
        dim: out.dim(),
    })
}
