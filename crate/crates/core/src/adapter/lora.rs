use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{constant, trunc_normal, EncoderConfig, ParamStore};

/// Trainable rank-`r` factor pairs added to frozen attention projections:
/// `W x + scale · (x A) B` with `A: D×r`, `B: r×D`.
#[derive(Debug, Clone)]
pub struct LowRankAdaptation {
    pub rank: usize,
    pub scale: f64,
    /// Projection names receiving factors (subset of q, k, v, o).
    pub sites: Vec<String>,
    pub factors: ParamStore,
}

impl LowRankAdaptation {
    /// `A` random, `B` zero, so the adapted encoder starts identical to the frozen one.
    pub fn new(cfg: &EncoderConfig, rank: usize, sites: &[&str], seed: u64) -> Result<Self> {
        let d = cfg.embed_dim;
        if rank == 0 || rank >= d {
            return Err(Error::invalid(format!("low-rank rank must satisfy 0 < r < D ({d}), got {rank}")));
        }
        let dt = cfg.dtype();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut factors = ParamStore::new(true);
        for b in 0..cfg.depth {
            for &site in sites {
                if !matches!(site, "q" | "k" | "v" | "o") {
                    return Err(Error::invalid(format!("unknown projection `{site}`")));
                }
                factors.insert(
                    format!("lora.{b}.{site}.a"),
                    trunc_normal(&[d, rank], 1.0 / (d as f64).sqrt(), dt, &mut rng)?,
                )?;
                factors.insert(format!("lora.{b}.{site}.b"), constant(&[rank, d], 0.0, dt)?)?;
            }
        }
        Ok(Self {
            rank,
            scale: 1.0,
            sites: sites.iter().map(|s| s.to_string()).collect(),
            factors,
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.factors.num_elements()
    }

    /// Low-rank update for projection `site` of `block`, if injected there.
    pub fn delta(&self, block: usize, site: &str, x: &Tensor) -> Result<Option<Tensor>> {
        let a_name = format!("lora.{block}.{site}.a");
        if !self.factors.contains(&a_name) {
            return Ok(None);
        }
        let a = self.factors.get(&a_name)?;
        let b = self.factors.get(&format!("lora.{block}.{site}.b"))?;
        let dims = x.dims().to_vec();
        let d = *dims.last().unwrap();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, d))?.matmul(a)?.matmul(b)?;
        let y = (y * self.scale)?;
        Ok(Some(y.reshape(dims)?))
    }

    pub fn frozen_copy(&self) -> Result<Self> {
        Ok(Self {
            rank: self.rank,
            scale: self.scale,
            sites: self.sites.clone(),
            factors: self.factors.copy_as(false)?,
        })
    }
}
