//! Multi-crop view construction: global and local crops, the multi-scale global,
//! the strongly color-augmented view, the grid-shuffled view and the MIM token mask.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::Patch;
use crate::raster::{CropBox, RgbImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub n_locals: usize,
    /// Area fraction range of global crops.
    pub global_scale: [f32; 2],
    /// Area fraction range of local crops.
    pub local_scale: [f32; 2],
    /// When false every crop is a square center crop at the top of its scale range.
    pub random_crops: bool,
    pub flip_prob: f32,
    pub jitter_prob: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Hue jitter amplitude, in turns.
    pub hue: f32,
    pub blur_prob: f32,
    pub blur_sigma: [f32; 2],
    pub color_brightness: f32,
    pub color_saturation: f32,
    pub color_hue: f32,
    pub color_grayscale_prob: f32,
    pub color_channel_perm_prob: f32,
    pub mask_ratio: f32,
    pub shuffle_grid: usize,
    pub use_multiscale: bool,
    pub use_color_view: bool,
    pub use_shuffle_view: bool,
    pub use_mim: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            global_size: 224,
            local_size: 96,
            n_locals: 6,
            global_scale: [0.4, 1.0],
            local_scale: [0.05, 0.4],
            random_crops: true,
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.3,
            contrast: 0.3,
            saturation: 0.2,
            hue: 0.05,
            blur_prob: 0.3,
            blur_sigma: [0.1, 1.5],
            color_brightness: 0.5,
            color_saturation: 0.8,
            color_hue: 0.5,
            color_grayscale_prob: 0.2,
            color_channel_perm_prob: 0.5,
            mask_ratio: 0.3,
            shuffle_grid: 4,
            use_multiscale: true,
            use_color_view: true,
            use_shuffle_view: true,
            use_mim: true,
        }
    }
}

impl ViewConfig {
    /// No randomness in geometry and no photometric change.
    pub fn identity(&self) -> Self {
        Self {
            random_crops: false,
            flip_prob: 0.0,
            jitter_prob: 0.0,
            blur_prob: 0.0,
            color_brightness: 0.0,
            color_saturation: 0.0,
            color_hue: 0.0,
            color_grayscale_prob: 0.0,
            color_channel_perm_prob: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.global_size == 0 || self.local_size == 0 {
            return Err(Error::invalid("view sizes must be positive"));
        }
        if self.n_locals == 0 {
            return Err(Error::invalid("at least one local view is required"));
        }
        for (name, r) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(0.0 < r[0] && r[0] <= r[1] && r[1] <= 1.0) {
                return Err(Error::invalid(format!("{name} must satisfy 0 < lo <= hi <= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::invalid("mask_ratio must lie in [0, 1]"));
        }
        if self.use_shuffle_view && self.shuffle_grid == 0 {
            return Err(Error::invalid("shuffle_grid must be positive"));
        }
        Ok(())
    }

    /// Number of student views entering the cross-view loss besides the globals.
    pub fn n_local_type_views(&self) -> usize {
        self.n_locals + usize::from(self.use_color_view) + usize::from(self.use_shuffle_view)
    }

    pub fn n_globals(&self) -> usize {
        2 + usize::from(self.use_multiscale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub token_mask: Vec<bool>,
    pub ratio: f32,
}

impl MaskSpec {
    pub fn count(&self) -> usize {
        self.token_mask.iter().filter(|&&m| m).count()
    }
}

/// Output block `i` holds input block `perm[i]` (row-major block order).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationSpec {
    pub grid: usize,
    pub perm: Vec<usize>,
    /// Side the source was resized to before shuffling, when it was not divisible by `grid`.
    pub resized_from: Option<usize>,
}

impl PermutationSpec {
    pub fn identity(grid: usize) -> Self {
        Self {
            grid,
            perm: (0..grid * grid).collect(),
            resized_from: None,
        }
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        Self {
            grid: self.grid,
            perm: inv,
            resized_from: None,
        }
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.perm.len()];
        self.perm.len() == self.grid * self.grid
            && self.perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
    }
}

/// Every view generated from one base patch, plus the seeds that produced them.
#[derive(Debug, Clone)]
pub struct ViewSet {
    /// x1, x2 (crops of the base) and, when enabled, x3 (multi-scale global).
    pub globals: Vec<RgbImage>,
    pub locals: Vec<RgbImage>,
    pub color_view: Option<RgbImage>,
    /// Shuffled copy of `globals[0]`, resized to the local size.
    pub shuffle_view: Option<(RgbImage, PermutationSpec)>,
    /// Token mask applied to a copy of `globals[0]`.
    pub mask: Option<MaskSpec>,
    pub seeds: Vec<(String, u64)>,
}

fn child_rng<R: Rng + ?Sized>(rng: &mut R, name: &str, seeds: &mut Vec<(String, u64)>) -> ChaCha8Rng {
    let seed = rng.gen::<u64>();
    seeds.push((name.to_string(), seed));
    ChaCha8Rng::seed_from_u64(seed)
}

/// Square-ish crop box covering an area fraction drawn from `scale`.
pub fn sample_crop_box<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    scale: [f32; 2],
    random: bool,
    rng: &mut R,
) -> CropBox {
    let (w, h) = (width as f32, height as f32);
    if !random {
        let side = (scale[1] * w * h).sqrt().min(w).min(h);
        return CropBox {
            x: (w - side) / 2.0,
            y: (h - side) / 2.0,
            w: side,
            h: side,
        };
    }
    let area = w * h;
    let log_ratio = [(3.0f32 / 4.0).ln(), (4.0f32 / 3.0).ln()];
    for _ in 0..10 {
        let target = area * rng.gen_range(scale[0]..=scale[1]);
        let aspect = rng.gen_range(log_ratio[0]..=log_ratio[1]).exp();
        let cw = (target * aspect).sqrt();
        let ch = (target / aspect).sqrt();
        if cw <= w && ch <= h {
            let x = rng.gen_range(0.0..=(w - cw));
            let y = rng.gen_range(0.0..=(h - ch));
            return CropBox { x, y, w: cw, h: ch };
        }
    }
    let side = (scale[1] * area).sqrt().min(w).min(h);
    CropBox {
        x: (w - side) / 2.0,
        y: (h - side) / 2.0,
        w: side,
        h: side,
    }
}

fn mild_augment<R: Rng + ?Sized>(img: &mut RgbImage, cfg: &ViewConfig, rng: &mut R) {
    if cfg.flip_prob > 0.0 && rng.gen::<f32>() < cfg.flip_prob {
        *img = img.hflip();
    }
    if cfg.jitter_prob > 0.0 && rng.gen::<f32>() < cfg.jitter_prob {
        let b = 1.0 + rng.gen_range(-1.0..=1.0) * cfg.brightness;
        let c = 1.0 + rng.gen_range(-1.0..=1.0) * cfg.contrast;
        let s = 1.0 + rng.gen_range(-1.0..=1.0) * cfg.saturation;
        let h = rng.gen_range(-1.0..=1.0) * cfg.hue;
        img.adjust_brightness(b);
        img.adjust_contrast(c);
        img.adjust_saturation(s);
        img.rotate_hue(h * std::f32::consts::TAU);
    }
    if cfg.blur_prob > 0.0 && rng.gen::<f32>() < cfg.blur_prob {
        let sigma = rng.gen_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
        img.gaussian_blur(sigma);
    }
}

fn crop_view<R: Rng + ?Sized>(
    src: &RgbImage,
    scale: [f32; 2],
    out: usize,
    cfg: &ViewConfig,
    rng: &mut R,
) -> Result<RgbImage> {
    let region = sample_crop_box(src.width(), src.height(), scale, cfg.random_crops, rng);
    let mut img = src.crop_resize(region, out, out)?;
    mild_augment(&mut img, cfg, rng);
    Ok(img)
}

/// Two augmented crops of `base` and, when `coarse` is given, its resize as the
/// multi-scale global view.
pub fn make_global_views<R: Rng + ?Sized>(
    base: &Patch,
    coarse: Option<&Patch>,
    cfg: &ViewConfig,
    rng: &mut R,
) -> Result<Vec<RgbImage>> {
    let src = base.to_image();
    let g = cfg.global_size;
    let mut views = vec![
        crop_view(&src, cfg.global_scale, g, cfg, rng)?,
        crop_view(&src, cfg.global_scale, g, cfg, rng)?,
    ];
    if let Some(coarse) = coarse {
        let mut x3 = coarse.to_image().resize(g, g)?;
        mild_augment(&mut x3, cfg, rng);
        views.push(x3);
    }
    Ok(views)
}

pub fn make_local_views<R: Rng + ?Sized>(
    base: &Patch,
    n: usize,
    cfg: &ViewConfig,
    rng: &mut R,
) -> Result<Vec<RgbImage>> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let src = base.to_image();
    (0..n)
        .map(|_| crop_view(&src, cfg.local_scale, cfg.local_size, cfg, rng))
        .collect()
}

/// A local crop followed by strong color transforms.
pub fn make_color_view<R: Rng + ?Sized>(base: &Patch, cfg: &ViewConfig, rng: &mut R) -> Result<RgbImage> {
    let src = base.to_image();
    let mut img = crop_view(&src, cfg.local_scale, cfg.local_size, cfg, rng)?;
    if cfg.color_brightness > 0.0 {
        img.adjust_brightness(1.0 + rng.gen_range(-1.0..=1.0) * cfg.color_brightness);
    }
    if cfg.color_saturation > 0.0 {
        img.adjust_saturation(1.0 + rng.gen_range(-1.0..=1.0) * cfg.color_saturation);
    }
    if cfg.color_hue > 0.0 {
        img.rotate_hue(rng.gen_range(-1.0..=1.0) * cfg.color_hue * std::f32::consts::TAU);
    }
    if cfg.color_channel_perm_prob > 0.0 && rng.gen::<f32>() < cfg.color_channel_perm_prob {
        let mut order = [0, 1, 2];
        order.shuffle(rng);
        img.permute_channels(order);
    }
    if cfg.color_grayscale_prob > 0.0 && rng.gen::<f32>() < cfg.color_grayscale_prob {
        img.to_grayscale();
    }
    Ok(img)
}

/// Rearranges the `grid`×`grid` blocks of `img`: output block `i` = input block `perm[i]`.
pub fn apply_permutation(img: &RgbImage, spec: &PermutationSpec) -> Result<RgbImage> {
    let g = spec.grid;
    if g == 0 || img.width() % g != 0 || img.height() % g != 0 {
        return Err(Error::shape(format!(
            "{}x{} image not divisible into a {g}x{g} grid",
            img.width(),
            img.height()
        )));
    }
    if !spec.is_bijection() {
        return Err(Error::invalid("permutation is not a bijection"));
    }
    let (bw, bh) = (img.width() / g, img.height() / g);
    let mut out = RgbImage::new(img.width(), img.height());
    for (dst, &src) in spec.perm.iter().enumerate() {
        let (dx, dy) = ((dst % g) * bw, (dst / g) * bh);
        let (sx, sy) = ((src % g) * bw, (src / g) * bh);
        for y in 0..bh {
            for x in 0..bw {
                for c in 0..3 {
                    out.set(dx + x, dy + y, c, img.get(sx + x, sy + y, c));
                }
            }
        }
    }
    Ok(out)
}

pub fn make_shuffle_view<R: Rng + ?Sized>(
    view: &RgbImage,
    grid: usize,
    rng: &mut R,
) -> Result<(RgbImage, PermutationSpec)> {
    if grid == 0 {
        return Err(Error::invalid("grid must be positive"));
    }
    let (src, resized_from) = if view.width() % grid != 0 || view.height() % grid != 0 || view.width() != view.height() {
        let side = (view.width().max(grid) / grid) * grid;
        (view.resize(side, side)?, Some(view.width()))
    } else {
        (view.clone(), None)
    };
    let mut perm: Vec<usize> = (0..grid * grid).collect();
    perm.shuffle(rng);
    let spec = PermutationSpec {
        grid,
        perm,
        resized_from,
    };
    let out = apply_permutation(&src, &spec)?;
    Ok((out, spec))
}

/// Uniformly placed mask with exactly `round(ratio * n_tokens)` masked tokens.
pub fn make_mask<R: Rng + ?Sized>(n_tokens: usize, ratio: f32, rng: &mut R) -> Result<MaskSpec> {
    if n_tokens == 0 {
        return Err(Error::invalid("n_tokens must be positive"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid("mask ratio must lie in [0, 1]"));
    }
    let count = (ratio as f64 * n_tokens as f64).round() as usize;
    let mut token_mask = vec![false; n_tokens];
    for i in sample(rng, n_tokens, count) {
        token_mask[i] = true;
    }
    Ok(MaskSpec { token_mask, ratio })
}

/// Builds the complete view set for one sample; `n_tokens` is the global-view token count.
pub fn build_view_set<R: Rng + ?Sized>(
    base: &Patch,
    coarse: Option<&Patch>,
    cfg: &ViewConfig,
    n_tokens: usize,
    rng: &mut R,
) -> Result<ViewSet> {
    let mut seeds = Vec::new();
    let coarse = if cfg.use_multiscale { coarse } else { None };
    if cfg.use_multiscale && coarse.is_none() {
        return Err(Error::invalid("multi-scale global view enabled but no coarse region given"));
    }
    let mut r = child_rng(rng, "globals", &mut seeds);
    let globals = make_global_views(base, coarse, cfg, &mut r)?;
    let mut r = child_rng(rng, "locals", &mut seeds);
    let locals = make_local_views(base, cfg.n_locals, cfg, &mut r)?;
    let color_view = if cfg.use_color_view {
        let mut r = child_rng(rng, "color", &mut seeds);
        Some(make_color_view(base, cfg, &mut r)?)
    } else {
        None
    };
    let shuffle_view = if cfg.use_shuffle_view {
        let mut r = child_rng(rng, "shuffle", &mut seeds);
        let (img, spec) = make_shuffle_view(&globals[0], cfg.shuffle_grid, &mut r)?;
        Some((img.resize(cfg.local_size, cfg.local_size)?, spec))
    } else {
        None
    };
    let mask = if cfg.use_mim {
        let mut r = child_rng(rng, "mask", &mut seeds);
        Some(make_mask(n_tokens, cfg.mask_ratio, &mut r)?)
    } else {
        None
    };
    Ok(ViewSet {
        globals,
        locals,
        color_view,
        shuffle_view,
        mask,
        seeds,
    })
}
