//! Run configuration as a TOML document with `[data]`, `[views]`, `[model]`,
//! `[train]`, `[adapter]` and `[probe]` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterConfig;
use crate::distill::TrainConfig;
use crate::error::{Error, Result};
use crate::harness::ProbeConfig;
use crate::model::EncoderConfig;
use crate::pyramid::SampleMode;
use crate::views::ViewConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Manifest file or the directory holding it.
    pub manifest: Option<PathBuf>,
    /// Pyramid level source patches are drawn from.
    pub level: u32,
    pub patch_size: u32,
    pub sample_mode: SampleMode,
    /// Level offset of the co-centered coarse region feeding the multi-scale view.
    pub coarse_level_offset: u32,
    /// Coarse region side in pixels; defaults to `patch_size`.
    pub coarse_size: Option<u32>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            level: 0,
            patch_size: 256,
            sample_mode: SampleMode::Uniform,
            coarse_level_offset: 1,
            coarse_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub data: DataConfig,
    pub views: ViewConfig,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub adapter: AdapterConfig,
    pub probe: ProbeConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.views.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.adapter.validate()?;
        self.probe.validate()?;
        if self.data.patch_size == 0 {
            return Err(Error::invalid("data.patch_size must be positive"));
        }
        if self.views.use_multiscale && self.data.coarse_level_offset == 0 {
            return Err(Error::invalid("coarse_level_offset must be at least 1"));
        }
        if self.views.global_size % self.model.patch_size != 0 || self.views.local_size % self.model.patch_size != 0 {
            return Err(Error::invalid("view sizes must be multiples of the token patch size"));
        }
        Ok(())
    }

    /// SHA-256 over the pretraining fields: data (without the manifest
    /// location), views, model and train.
    pub fn hash(&self) -> Result<[u8; 32]> {
        let mut data = self.data.clone();
        data.manifest = None;
        let bytes = serde_json::to_vec(&(&data, &self.views, &self.model, &self.train))?;
        Ok(Sha256::digest(&bytes).into())
    }

    pub fn hash_hex(&self) -> Result<String> {
        Ok(self.hash()?.iter().map(|b| format!("{b:02x}")).collect())
    }
}
