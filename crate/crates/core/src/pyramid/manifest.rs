use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.tsv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub level: u32,
    pub width_px: u32,
    pub height_px: u32,
    pub rows: u32,
    pub cols: u32,
    /// Relative path with `{row}` and `{col}` placeholders.
    pub tile_uri_template: String,
    /// Reflection padding added on the right/bottom edge tiles.
    pub pad_right: u32,
    pub pad_bottom: u32,
}

impl LevelEntry {
    pub fn new(level: u32, width_px: u32, height_px: u32, tile_size: u32, template: String) -> Self {
        let cols = width_px.div_ceil(tile_size);
        let rows = height_px.div_ceil(tile_size);
        Self {
            level,
            width_px,
            height_px,
            rows,
            cols,
            tile_uri_template: template,
            pad_right: cols * tile_size - width_px,
            pad_bottom: rows * tile_size - height_px,
        }
    }

    pub fn tile_path(&self, row: u32, col: u32) -> String {
        self.tile_uri_template
            .replace("{row}", &row.to_string())
            .replace("{col}", &col.to_string())
    }

    pub fn scale_factor(&self) -> u32 {
        1 << self.level
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    pub levels: Vec<LevelEntry>,
}

/// Directory-of-tiles description of one or more multi-resolution slides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidManifest {
    pub dataset_id: String,
    pub tile_size: u32,
    pub channels: u32,
    pub slides: Vec<SlideEntry>,
}

impl PyramidManifest {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::invalid("only 3-channel pyramids are supported"));
        }
        if self.tile_size == 0 {
            return Err(Error::invalid("tile_size must be positive"));
        }
        for slide in &self.slides {
            let base = slide
                .levels
                .first()
                .ok_or_else(|| Error::invalid(format!("slide {} has no levels", slide.slide_id)))?;
            for (i, lv) in slide.levels.iter().enumerate() {
                if lv.level as usize != i {
                    return Err(Error::invalid("levels must be indexed 0..L-1"));
                }
                if lv.cols != lv.width_px.div_ceil(self.tile_size)
                    || lv.rows != lv.height_px.div_ceil(self.tile_size)
                {
                    return Err(Error::invalid(format!(
                        "slide {} level {i}: tile grid disagrees with dimensions",
                        slide.slide_id
                    )));
                }
                let f = 1u32 << i;
                let ew = base.width_px.div_ceil(f);
                let eh = base.height_px.div_ceil(f);
                if ew.abs_diff(lv.width_px) > self.tile_size || eh.abs_diff(lv.height_px) > self.tile_size {
                    return Err(Error::invalid("level dimensions inconsistent with 2x scaling"));
                }
            }
        }
        Ok(())
    }

    pub fn slide(&self, slide_id: &str) -> Option<&SlideEntry> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }
}

pub fn write_manifest(manifest: &PyramidManifest, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a manifest from a file, or from `manifest.json` inside a directory.
pub fn load_manifest(path: &Path) -> Result<PyramidManifest> {
    let file = manifest_file(path);
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: PyramidManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn manifest_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Directory tile paths are relative to.
pub fn manifest_root(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

pub fn write_labels(labels: &[(String, usize)], dir: &Path) -> Result<PathBuf> {
    let path = dir.join(LABELS_FILE);
    let mut text = String::new();
    for (id, class) in labels {
        text.push_str(&format!("{id}\t{class}\n"));
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let file = if path.is_dir() {
        path.join(LABELS_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (id, class) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("bad label line `{line}`")))?;
            let class = class
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad class index in `{line}`")))?;
            Ok((id.to_string(), class))
        })
        .collect()
}
