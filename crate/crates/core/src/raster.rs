//! Floating-point RGB rasters and the pixel operations used by view generation.
//!
//! Images are stored row-major, channel-interleaved, with intensities in `[0, 1]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Axis-aligned box in pixel coordinates of a source image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl CropBox {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            w: width as f32,
            h: height as f32,
        }
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= width as f32 + 1e-3
            && self.y + self.h <= height as f32 + 1e-3
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "expected {} samples for {width}x{height}x3, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_u8(width: usize, height: usize, pixels: &[u8]) -> Result<Self> {
        let data = pixels.iter().map(|&v| v as f32 / 255.0).collect();
        Self::from_vec(width, height, data)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn map_pixels(&mut self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) {
        for px in self.data.chunks_exact_mut(3) {
            let out = f([px[0], px[1], px[2]]);
            px.copy_from_slice(&out);
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Resamples `region` of `self` to `out_w`×`out_h` with a separable triangle
    /// filter whose support widens with the downscale factor (area-aware).
    pub fn crop_resize(&self, region: CropBox, out_w: usize, out_h: usize) -> Result<RgbImage> {
        if out_w == 0 || out_h == 0 {
            return Err(Error::invalid("output size must be positive"));
        }
        if !region.inside(self.width, self.height) {
            return Err(Error::invalid(format!(
                "crop {region:?} outside {}x{}",
                self.width, self.height
            )));
        }
        let wx = resample_weights(region.x, region.w, out_w, self.width);
        let wy = resample_weights(region.y, region.h, out_h, self.height);

        // Horizontal pass over the rows that vertical taps touch.
        let y_lo = wy.iter().map(|t| t.start).min().unwrap_or(0);
        let y_hi = wy
            .iter()
            .map(|t| t.start + t.weights.len())
            .max()
            .unwrap_or(0);
        let rows = y_hi - y_lo;
        let mut tmp = vec![0f32; rows * out_w * 3];
        for ry in 0..rows {
            let sy = y_lo + ry;
            for (ox, tap) in wx.iter().enumerate() {
                let mut acc = [0f32; 3];
                for (k, &wgt) in tap.weights.iter().enumerate() {
                    let p = self.pixel(tap.start + k, sy);
                    acc[0] += wgt * p[0];
                    acc[1] += wgt * p[1];
                    acc[2] += wgt * p[2];
                }
                let o = (ry * out_w + ox) * 3;
                tmp[o..o + 3].copy_from_slice(&acc);
            }
        }
        let mut out = RgbImage::new(out_w, out_h);
        for (oy, tap) in wy.iter().enumerate() {
            for ox in 0..out_w {
                let mut acc = [0f32; 3];
                for (k, &wgt) in tap.weights.iter().enumerate() {
                    let o = ((tap.start - y_lo + k) * out_w + ox) * 3;
                    acc[0] += wgt * tmp[o];
                    acc[1] += wgt * tmp[o + 1];
                    acc[2] += wgt * tmp[o + 2];
                }
                let o = (oy * out_w + ox) * 3;
                out.data[o..o + 3].copy_from_slice(&acc);
            }
        }
        Ok(out)
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Result<RgbImage> {
        if out_w == self.width && out_h == self.height {
            return Ok(self.clone());
        }
        self.crop_resize(CropBox::full(self.width, self.height), out_w, out_h)
    }

    /// Integer-aligned sub-image copy.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<RgbImage> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::invalid("crop outside image"));
        }
        let mut out = RgbImage::new(w, h);
        for row in 0..h {
            let src = ((y + row) * self.width + x) * 3;
            let dst = row * w * 3;
            out.data[dst..dst + w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        Ok(out)
    }

    pub fn hflip(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(self.width - 1 - x, y);
                let o = (y * self.width + x) * 3;
                out.data[o..o + 3].copy_from_slice(&p);
            }
        }
        out
    }

    pub fn adjust_brightness(&mut self, factor: f32) {
        for v in &mut self.data {
            *v *= factor;
        }
        self.clamp_unit();
    }

    pub fn adjust_contrast(&mut self, factor: f32) {
        let n = (self.width * self.height) as f32;
        let mean = self.data.chunks_exact(3).map(|p| luma(p)).sum::<f32>() / n.max(1.0);
        for v in &mut self.data {
            *v = mean + factor * (*v - mean);
        }
        self.clamp_unit();
    }

    pub fn adjust_saturation(&mut self, factor: f32) {
        self.map_pixels(|p| {
            let g = luma(&p);
            [
                g + factor * (p[0] - g),
                g + factor * (p[1] - g),
                g + factor * (p[2] - g),
            ]
        });
        self.clamp_unit();
    }

    /// Rotates hue by `radians` in HSV space.
    pub fn rotate_hue(&mut self, radians: f32) {
        let shift = (radians / std::f32::consts::TAU).rem_euclid(1.0);
        if shift == 0.0 {
            return;
        }
        self.map_pixels(|p| {
            let (h, s, v) = rgb_to_hsv(p);
            hsv_to_rgb(((h + shift) % 1.0 + 1.0) % 1.0, s, v)
        });
        self.clamp_unit();
    }

    pub fn to_grayscale(&mut self) {
        self.map_pixels(|p| {
            let g = luma(&p);
            [g, g, g]
        });
    }

    pub fn permute_channels(&mut self, order: [usize; 3]) {
        self.map_pixels(|p| [p[order[0]], p[order[1]], p[order[2]]]);
    }

    pub fn gaussian_blur(&mut self, sigma: f32) {
        if sigma <= 0.0 {
            return;
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f32 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = vec![0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0f32; 3];
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x + k as isize - radius, w) as usize;
                    let p = self.pixel(sx, y as usize);
                    for c in 0..3 {
                        acc[c] += kv * p[c];
                    }
                }
                let o = ((y * w + x) * 3) as usize;
                tmp[o..o + 3].copy_from_slice(&acc);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0f32; 3];
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y + k as isize - radius, h);
                    let o = ((sy * w + x) * 3) as usize;
                    for c in 0..3 {
                        acc[c] += kv * tmp[o + c];
                    }
                }
                let o = ((y * w + x) * 3) as usize;
                self.data[o..o + 3].copy_from_slice(&acc);
            }
        }
    }
}

/// Reflect-101 index into `[0, n)`.
pub(crate) fn reflect(i: isize, n: isize) -> isize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    if m < n {
        m
    } else {
        period - m
    }
}

#[inline]
fn luma(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

pub(crate) fn rgb_to_hsv(p: [f32; 3]) -> (f32, f32, f32) {
    let [r, g, b] = p;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, v)
}

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (sector as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Taps {
    start: usize,
    weights: Vec<f32>,
}

/// Triangle-filter taps mapping `n_out` samples onto `[origin, origin + extent)` of a
/// source axis of length `n_src`; taps that fall outside are reflected.
fn resample_weights(origin: f32, extent: f32, n_out: usize, n_src: usize) -> Vec<Taps> {
    let scale = extent as f64 / n_out as f64;
    let support = scale.max(1.0);
    (0..n_out)
        .map(|i| {
            let center = origin as f64 + (i as f64 + 0.5) * scale;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut acc: Vec<(usize, f64)> = Vec::new();
            for s in lo..=hi {
                let d = ((s as f64 + 0.5) - center).abs() / support;
                if d >= 1.0 {
                    continue;
                }
                let idx = reflect(s, n_src as isize) as usize;
                acc.push((idx, 1.0 - d));
            }
            let start = acc.iter().map(|a| a.0).min().unwrap_or(0);
            let end = acc.iter().map(|a| a.0).max().unwrap_or(0);
            let mut weights = vec![0f64; end - start + 1];
            let total: f64 = acc.iter().map(|a| a.1).sum();
            for (idx, w) in acc {
                weights[idx - start] += w / total;
            }
            Taps {
                start,
                weights: weights.into_iter().map(|w| w as f32).collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> RgbImage {
        let data = (0..w * h * 3)
            .map(|i| (i % 251) as f32 / 250.0)
            .collect();
        RgbImage::from_vec(w, h, data).unwrap()
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = ramp(7, 5);
        let out = img.crop_resize(CropBox::full(7, 5), 7, 5).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn halving_is_area_mean() {
        let img = RgbImage::from_vec(
            2,
            2,
            vec![10., 10., 10., 20., 20., 20., 30., 30., 30., 40., 40., 40.],
        )
        .unwrap();
        let out = img.resize(1, 1).unwrap();
        assert!((out.get(0, 0, 0) - 25.0).abs() < 1e-4);
    }

    #[test]
    fn hue_full_turn_round_trips() {
        let mut img = ramp(9, 9);
        let before = img.to_u8();
        img.rotate_hue(std::f32::consts::TAU * 0.999_999);
        let after = img.to_u8();
        for (a, b) in before.iter().zip(&after) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn hsv_round_trip() {
        for &p in &[[0.2f32, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let (h, s, v) = rgb_to_hsv(p);
            let q = hsv_to_rgb(h, s, v);
            for c in 0..3 {
                assert!((p[c] - q[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn grayscale_channels_equal() {
        let mut img = ramp(4, 4);
        img.to_grayscale();
        for y in 0..4 {
            for x in 0..4 {
                let p = img.pixel(x, y);
                assert_eq!(p[0], p[1]);
                assert_eq!(p[1], p[2]);
            }
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn blur_preserves_constant() {
        let mut img = RgbImage::from_vec(6, 6, vec![0.4; 108]).unwrap();
        img.gaussian_blur(1.2);
        assert!(img.data().iter().all(|v| (v - 0.4).abs() < 1e-5));
    }
}
