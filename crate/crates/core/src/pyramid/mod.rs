//! Tiled multi-resolution image datasets: manifest, synthetic generator, and
//! patch sampling including co-centered coarse-level regions.

mod manifest;
mod synth;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{reflect, RgbImage};

pub use manifest::{
    load_labels, load_manifest, manifest_file, manifest_root, write_labels, write_manifest, LevelEntry,
    PyramidManifest, SlideEntry, LABELS_FILE, MANIFEST_FILE,
};
pub use synth::{default_textures, generate_synthetic_pyramid, render_slide, write_slide_pyramid, ClassTexture, SyntheticSpec};

/// One unpadded pyramid level held in memory as 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl LevelImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Self {
        debug_assert_eq!(pixels.len(), (width * height * 3) as usize);
        Self {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    fn at(&self, x: u32, y: u32, c: usize) -> u8 {
        self.pixels[((y * self.width + x) * 3) as usize + c]
    }

    /// 2x2 area mean; odd trailing rows/columns are reflected.
    pub fn downsample2(&self) -> LevelImage {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut pixels = vec![0u8; (w * h * 3) as usize];
        let (sw, sh) = (self.width as isize, self.height as isize);
        for y in 0..h {
            for x in 0..w {
                let x0 = reflect(2 * x as isize, sw) as u32;
                let x1 = reflect(2 * x as isize + 1, sw) as u32;
                let y0 = reflect(2 * y as isize, sh) as u32;
                let y1 = reflect(2 * y as isize + 1, sh) as u32;
                for c in 0..3 {
                    let sum = self.at(x0, y0, c) as u32
                        + self.at(x1, y0, c) as u32
                        + self.at(x0, y1, c) as u32
                        + self.at(x1, y1, c) as u32;
                    pixels[((y * w + x) * 3) as usize + c] = ((sum + 2) / 4) as u8;
                }
            }
        }
        LevelImage::new(w, h, pixels)
    }

    /// `size`×`size` tile at (x, y) with reflection padding past the right/bottom edge.
    pub fn padded_tile(&self, x: u32, y: u32, size: u32) -> Vec<u8> {
        let mut out = Vec::with_capacity((size * size * 3) as usize);
        for ty in 0..size {
            let sy = reflect((y + ty) as isize, self.height as isize) as u32;
            for tx in 0..size {
                let sx = reflect((x + tx) as isize, self.width as isize) as u32;
                let o = ((sy * self.width + sx) * 3) as usize;
                out.extend_from_slice(&self.pixels[o..o + 3]);
            }
        }
        out
    }

    pub fn region(&self, x: u32, y: u32, w: u32, h: u32) -> Result<Vec<u8>> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::invalid(format!(
                "region ({x},{y},{w},{h}) outside {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity((w * h * 3) as usize);
        for row in y..y + h {
            let start = ((row * self.width + x) * 3) as usize;
            out.extend_from_slice(&self.pixels[start..start + (w * 3) as usize]);
        }
        Ok(out)
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len().max(1) as f64
    }
}

/// A square crop of one pyramid level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub pixels: Vec<u8>,
    pub size: u32,
    pub level: u32,
    pub origin: (u32, u32),
    pub source_id: String,
}

impl Patch {
    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_u8(self.size as usize, self.size as usize, &self.pixels)
            .expect("patch buffer matches its size")
    }

    /// Center in level coordinates (continuous).
    pub fn center(&self) -> (f64, f64) {
        (
            self.origin.0 as f64 + self.size as f64 / 2.0,
            self.origin.1 as f64 + self.size as f64 / 2.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Origins on the `size` grid.
    TileAligned,
    /// Origins uniform over every valid position.
    #[default]
    Uniform,
}

#[derive(Debug, Clone)]
pub struct Slide {
    pub id: String,
    pub levels: Vec<LevelImage>,
}

impl Slide {
    pub fn level(&self, level: u32) -> Result<&LevelImage> {
        self.levels
            .get(level as usize)
            .ok_or_else(|| Error::invalid(format!("slide {} has no level {level}", self.id)))
    }

    pub fn patch_at(&self, level: u32, x: u32, y: u32, size: u32) -> Result<Patch> {
        let img = self.level(level)?;
        Ok(Patch {
            pixels: img.region(x, y, size, size)?,
            size,
            level,
            origin: (x, y),
            source_id: self.id.clone(),
        })
    }

    /// Draws one `size`×`size` patch fully inside the level bounds.
    pub fn sample_patch<R: Rng + ?Sized>(
        &self,
        level: u32,
        size: u32,
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<Patch> {
        let img = self.level(level)?;
        if img.width < size || img.height < size || size == 0 {
            return Err(Error::invalid(format!(
                "level {level} ({}x{}) smaller than patch size {size}",
                img.width, img.height
            )));
        }
        let (x, y) = match mode {
            SampleMode::Uniform => (
                rng.gen_range(0..=img.width - size),
                rng.gen_range(0..=img.height - size),
            ),
            SampleMode::TileAligned => {
                let cols = img.width / size;
                let rows = img.height / size;
                (rng.gen_range(0..cols) * size, rng.gen_range(0..rows) * size)
            }
        };
        self.patch_at(level, x, y, size)
    }

    /// Region of `size_px` at `target_level` whose center maps onto the center of
    /// `base`, shifted to stay within the level when the ideal window overhangs.
    pub fn co_centered_region(&self, base: &Patch, target_level: u32, size_px: u32) -> Result<Patch> {
        if target_level <= base.level {
            return Err(Error::invalid("target level must be coarser than the base patch level"));
        }
        let img = self.level(target_level)?;
        if img.width < size_px || img.height < size_px {
            return Err(Error::invalid(format!(
                "level {target_level} ({}x{}) smaller than region {size_px}",
                img.width, img.height
            )));
        }
        let (x, y) = co_centered_origin(base, target_level, size_px, img.width, img.height);
        self.patch_at(target_level, x, y, size_px)
    }
}

/// Origin of the co-centered window (see [`Slide::co_centered_region`]).
pub fn co_centered_origin(base: &Patch, target_level: u32, size_px: u32, width: u32, height: u32) -> (u32, u32) {
    let scale = (1u64 << (target_level - base.level)) as f64;
    let (cx, cy) = base.center();
    let place = |c: f64, extent: u32| -> u32 {
        let ideal = (c / scale - size_px as f64 / 2.0).round();
        ideal.clamp(0.0, (extent - size_px) as f64) as u32
    };
    (place(cx, width), place(cy, height))
}

/// Every slide of a manifest loaded into memory, with optional class labels.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: PyramidManifest,
    pub slides: Vec<Slide>,
    pub labels: Option<Vec<usize>>,
}

impl Corpus {
    /// Loads tiles for the requested levels (all levels when `levels` is `None`).
    pub fn load(path: &Path, levels: Option<&[u32]>) -> Result<Self> {
        let manifest = load_manifest(path)?;
        let root = manifest_root(path);
        let mut slides = Vec::with_capacity(manifest.slides.len());
        for entry in &manifest.slides {
            let mut imgs = Vec::with_capacity(entry.levels.len());
            for lv in &entry.levels {
                let wanted = levels.map_or(true, |l| l.contains(&lv.level));
                if wanted {
                    imgs.push(assemble_level(&root, lv, manifest.tile_size)?);
                } else {
                    imgs.push(LevelImage::new(0, 0, Vec::new()));
                }
            }
            slides.push(Slide {
                id: entry.slide_id.clone(),
                levels: imgs,
            });
        }
        let label_path = root.join(LABELS_FILE);
        let labels = if label_path.exists() {
            let table = load_labels(&label_path)?;
            let mut out = Vec::with_capacity(slides.len());
            for s in &slides {
                let class = table
                    .iter()
                    .find(|(id, _)| *id == s.id)
                    .map(|(_, c)| *c)
                    .ok_or_else(|| Error::invalid(format!("no label for slide {}", s.id)))?;
                out.push(class);
            }
            Some(out)
        } else {
            None
        };
        Ok(Self {
            manifest,
            slides,
            labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    /// Picks a slide uniformly, then a patch within it.
    pub fn sample_patch<R: Rng + ?Sized>(&self, level: u32, size: u32, mode: SampleMode, rng: &mut R) -> Result<(usize, Patch)> {
        if self.slides.is_empty() {
            return Err(Error::invalid("empty corpus"));
        }
        let s = rng.gen_range(0..self.slides.len());
        Ok((s, self.slides[s].sample_patch(level, size, mode, rng)?))
    }
}

fn assemble_level(root: &Path, lv: &LevelEntry, tile: u32) -> Result<LevelImage> {
    let mut pixels = vec![0u8; (lv.width_px * lv.height_px * 3) as usize];
    for row in 0..lv.rows {
        for col in 0..lv.cols {
            let path = root.join(lv.tile_path(row, col));
            let img = image::open(&path)?.into_rgb8();
            if img.width() != tile || img.height() != tile {
                return Err(Error::invalid(format!("tile {} is not {tile}x{tile}", path.display())));
            }
            let x0 = col * tile;
            let y0 = row * tile;
            let w = tile.min(lv.width_px - x0);
            let h = tile.min(lv.height_px - y0);
            let raw = img.as_raw();
            for ty in 0..h {
                let src = (ty * tile * 3) as usize;
                let dst = (((y0 + ty) * lv.width_px + x0) * 3) as usize;
                pixels[dst..dst + (w * 3) as usize].copy_from_slice(&raw[src..src + (w * 3) as usize]);
            }
        }
    }
    Ok(LevelImage::new(lv.width_px, lv.height_px, pixels))
}
