//! Deterministic procedural slides: class-conditioned oriented sinusoid mixtures
//! with per-slide color, illumination and colored-noise nuisances.

use std::f32::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{write_labels, write_manifest, LevelEntry, PyramidManifest, SlideEntry};
use super::LevelImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    pub orientation_deg: f32,
    pub orientation_jitter_deg: f32,
    /// Sinusoid period range in level-0 pixels.
    pub period_px: [f32; 2],
    pub contrast: f32,
    pub components: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dataset_id: String,
    pub num_slides: usize,
    pub level0_size: u32,
    pub tile_size: u32,
    pub num_classes: usize,
    /// One entry per class; when shorter than `num_classes` the defaults are rotated.
    pub texture_params: Vec<ClassTexture>,
    /// Per-slide spread of background and stain colors.
    pub color_variation: f32,
    pub noise_std: f32,
    pub illumination: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dataset_id: "synthetic".into(),
            num_slides: 64,
            level0_size: 1024,
            tile_size: 256,
            num_classes: 2,
            texture_params: default_textures(2),
            color_variation: 0.15,
            noise_std: 0.06,
            illumination: 0.15,
            seed: 0,
        }
    }
}

/// Evenly spread stripe orientations, one per class.
pub fn default_textures(num_classes: usize) -> Vec<ClassTexture> {
    (0..num_classes)
        .map(|c| ClassTexture {
            orientation_deg: 180.0 * c as f32 / num_classes.max(1) as f32,
            orientation_jitter_deg: 12.0,
            period_px: [10.0, 18.0],
            contrast: 0.22,
            components: 2,
        })
        .collect()
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("synthetic spec needs at least one class"));
        }
        if self.num_slides == 0 {
            return Err(Error::invalid("synthetic spec needs at least one slide"));
        }
        if self.tile_size == 0 || self.level0_size < 4 * self.tile_size {
            return Err(Error::invalid("level0_size must be at least 4 x tile_size"));
        }
        if self.texture_params.is_empty() {
            return Err(Error::invalid("texture_params must not be empty"));
        }
        Ok(())
    }

    pub fn class_of(&self, slide: usize) -> usize {
        slide % self.num_classes
    }

    pub fn texture(&self, class: usize) -> &ClassTexture {
        &self.texture_params[class % self.texture_params.len()]
    }

    pub fn slide_id(slide: usize) -> String {
        format!("slide_{slide:04}")
    }
}

/// Renders the level-0 image of one slide.
pub fn render_slide(spec: &SyntheticSpec, slide: usize) -> LevelImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(slide as u64 + 1);
    let tex = spec.texture(spec.class_of(slide)).clone();
    let size = spec.level0_size as usize;

    let comps: Vec<(f32, f32, f32, f32)> = (0..tex.components.max(1))
        .map(|_| {
            let theta = (tex.orientation_deg
                + rng.gen_range(-1.0..=1.0) * tex.orientation_jitter_deg)
                .to_radians();
            let period = rng.gen_range(tex.period_px[0]..=tex.period_px[1].max(tex.period_px[0]));
            let phase = rng.gen_range(0.0..TAU);
            (theta.cos() / period, theta.sin() / period, phase, 1.0)
        })
        .collect();
    let norm = comps.len() as f32;

    let cv = spec.color_variation;
    let bg: [f32; 3] = [
        0.82 + cv * rng.gen_range(-1.0..1.0),
        0.66 + cv * rng.gen_range(-1.0..1.0),
        0.78 + cv * rng.gen_range(-1.0..1.0),
    ];
    let stain: [f32; 3] = [
        -0.5 + cv * rng.gen_range(-1.0..1.0),
        -0.8 + cv * rng.gen_range(-1.0..1.0),
        -0.4 + cv * rng.gen_range(-1.0..1.0),
    ];
    let ill_fx = rng.gen_range(0.5..1.5) / size as f32;
    let ill_fy = rng.gen_range(0.5..1.5) / size as f32;
    let ill_px = rng.gen_range(0.0..TAU);
    let ill_py = rng.gen_range(0.0..TAU);

    let mut pixels = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f32, y as f32);
            let mut s = 0.0;
            for &(fx, fy, phase, amp) in &comps {
                s += amp * (TAU * (xf * fx + yf * fy) + phase).sin();
            }
            s /= norm;
            let illum = 1.0
                + spec.illumination * (TAU * xf * ill_fx + ill_px).sin() * (TAU * yf * ill_fy + ill_py).sin();
            let n_stain = rng.sample::<f32, _>(StandardNormal) * spec.noise_std;
            let o = (y * size + x) * 3;
            for c in 0..3 {
                let n_ind = rng.sample::<f32, _>(StandardNormal) * spec.noise_std * 0.5;
                let v = illum * (bg[c] + tex.contrast * s * stain[c]) + n_stain * stain[c] + n_ind;
                pixels[o + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    LevelImage::new(size as u32, size as u32, pixels)
}

/// Writes every slide's tile pyramid, the manifest and the class-label sidecar.
pub fn generate_synthetic_pyramid(spec: &SyntheticSpec, out_dir: &Path) -> Result<PyramidManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut slides = Vec::with_capacity(spec.num_slides);
    let mut labels = Vec::with_capacity(spec.num_slides);
    for s in 0..spec.num_slides {
        let id = SyntheticSpec::slide_id(s);
        let level0 = render_slide(spec, s);
        let levels = write_slide_pyramid(&id, level0, spec.tile_size, out_dir)?;
        slides.push(SlideEntry {
            slide_id: id.clone(),
            levels,
        });
        labels.push((id, spec.class_of(s)));
    }
    let manifest = PyramidManifest {
        dataset_id: spec.dataset_id.clone(),
        tile_size: spec.tile_size,
        channels: 3,
        slides,
    };
    write_manifest(&manifest, out_dir)?;
    write_labels(&labels, out_dir)?;
    Ok(manifest)
}

/// Tiles `level0` and all coarser 2x area-mean levels down to a single tile.
pub fn write_slide_pyramid(
    slide_id: &str,
    level0: LevelImage,
    tile_size: u32,
    out_dir: &Path,
) -> Result<Vec<LevelEntry>> {
    let mut entries = Vec::new();
    let mut current = level0;
    let mut level = 0u32;
    loop {
        let rel_dir = format!("{slide_id}/L{level}");
        let dir = out_dir.join(&rel_dir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let entry = LevelEntry::new(
            level,
            current.width,
            current.height,
            tile_size,
            format!("{rel_dir}/{{row}}_{{col}}.png"),
        );
        for row in 0..entry.rows {
            for col in 0..entry.cols {
                let tile = current.padded_tile(col * tile_size, row * tile_size, tile_size);
                let path = out_dir.join(entry.tile_path(row, col));
                image::save_buffer(&path, &tile, tile_size, tile_size, image::ExtendedColorType::Rgb8)?;
            }
        }
        entries.push(entry);
        if current.width <= tile_size && current.height <= tile_size {
            break;
        }
        current = current.downsample2();
        level += 1;
    }
    Ok(entries)
}
