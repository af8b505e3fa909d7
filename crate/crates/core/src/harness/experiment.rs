//! End-to-end runs: pretrain, extract frozen features, probe, and compare with
//! a random-initialized encoder of the same architecture.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::extract::extract_features;
use super::probe::{linear_probe, ProbeConfig, ProbeMetrics};
use super::report::MetricRecord;
use super::split::{stratified_split, stratified_subset};
use super::store::FeatureStore;
use crate::config::Config;
use crate::distill::Trainer;
use crate::error::{Error, Result};
use crate::model::{init_pair, EncoderConfig, ParamStore, Precision};
use crate::pyramid::{Corpus, SyntheticSpec};

/// Class of every store row, looked up through its slide.
pub fn row_labels(store: &FeatureStore, corpus: &Corpus) -> Result<Vec<usize>> {
    let labels = corpus.labels.as_ref().ok_or_else(|| Error::invalid("corpus has no slide labels"))?;
    store
        .sources()
        .iter()
        .map(|s| {
            corpus
                .slides
                .iter()
                .position(|sl| sl.id == s.source_id)
                .map(|k| labels[k])
                .ok_or_else(|| Error::invalid(format!("row from unknown slide {}", s.source_id)))
        })
        .collect()
}

/// Train/test row indices with whole slides on each side, stratified by slide class.
pub fn slide_split(store: &FeatureStore, corpus: &Corpus, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let labels = corpus.labels.as_ref().ok_or_else(|| Error::invalid("corpus has no slide labels"))?;
    let (_, test_slides) = stratified_split(labels, test_fraction, seed)?;
    let test_ids: Vec<&str> = test_slides.iter().map(|&k| corpus.slides[k].id.as_str()).collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in store.sources().iter().enumerate() {
        if test_ids.contains(&s.source_id.as_str()) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((train, test))
}

fn gather(x: &[Vec<f64>], y: &[usize], idx: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    (idx.iter().map(|&i| x[i].clone()).collect(), idx.iter().map(|&i| y[i]).collect())
}

/// Linear probe on a store with a slide-level split.
pub fn probe_store(
    store: &FeatureStore,
    corpus: &Corpus,
    test_fraction: f64,
    cfg: &ProbeConfig,
) -> Result<ProbeMetrics> {
    let x = store.matrix();
    let y = row_labels(store, corpus)?;
    let (train, test) = slide_split(store, corpus, test_fraction, cfg.seed)?;
    let (tx, ty) = gather(&x, &y, &train);
    let (vx, vy) = gather(&x, &y, &test);
    Ok(linear_probe(&tx, &ty, &vx, &vy, corpus.num_classes(), cfg)?.1)
}

/// Probe accuracy when only a stratified `fraction` of the training rows is used.
pub fn fraction_sweep(
    store: &FeatureStore,
    corpus: &Corpus,
    series: &str,
    fractions: &[f64],
    test_fraction: f64,
    cfg: &ProbeConfig,
) -> Result<Vec<MetricRecord>> {
    let x = store.matrix();
    let y = row_labels(store, corpus)?;
    let (train, test) = slide_split(store, corpus, test_fraction, cfg.seed)?;
    let (tx, ty) = gather(&x, &y, &train);
    let (vx, vy) = gather(&x, &y, &test);
    let mut out = Vec::new();
    for &f in fractions {
        let keep = stratified_subset(&ty, f, cfg.seed)?;
        let (sx, sy) = gather(&tx, &ty, &keep);
        let m = linear_probe(&sx, &sy, &vx, &vy, corpus.num_classes(), cfg)?.1;
        for (metric, value) in [("accuracy", m.accuracy), ("auc", m.auc)] {
            out.push(MetricRecord {
                series: series.into(),
                x: f,
                metric: metric.into(),
                value,
            });
        }
    }
    Ok(out)
}

pub fn extract_store(config: &Config, params: &ParamStore, corpus: &Corpus) -> Result<FeatureStore> {
    let mut store = FeatureStore::new(config.model.embed_dim);
    extract_features(&config.model, params, corpus, config.data.level, config.data.patch_size, 1, &mut store)?;
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub steps: u64,
    pub final_loss: f64,
    pub pretrained: ProbeMetrics,
    pub random_init: ProbeMetrics,
    pub train_seconds: f64,
}

/// Pretrains with `config` under `seed`, then probes the teacher and the
/// untouched initial weights on the same split.
pub fn pretrain_and_probe(config: &Config, corpus: &Corpus, seed: u64, test_fraction: f64) -> Result<SeedOutcome> {
    let mut cfg = config.clone();
    cfg.train.seed = seed;
    cfg.probe.seed = seed;
    let initial = init_pair(&cfg.model, seed)?.teacher;
    let mut trainer = Trainer::new(&cfg)?;
    let started = Instant::now();
    let mut final_loss = f64::NAN;
    let total = trainer.total_steps();
    trainer.fit(corpus, total, false, |r| {
        final_loss = r.loss_total;
        Ok(())
    })?;
    let train_seconds = started.elapsed().as_secs_f64();
    let pretrained = probe_store(&extract_store(&cfg, &trainer.pair.teacher, corpus)?, corpus, test_fraction, &cfg.probe)?;
    let random_init = probe_store(&extract_store(&cfg, &initial, corpus)?, corpus, test_fraction, &cfg.probe)?;
    Ok(SeedOutcome {
        seed,
        steps: trainer.step,
        final_loss,
        pretrained,
        random_init,
        train_seconds,
    })
}

/// Synthetic corpus of the desk-scale smoke run: 64 slides of two stripe classes.
pub fn smoke_corpus_spec() -> SyntheticSpec {
    SyntheticSpec {
        dataset_id: "smoke".into(),
        num_slides: 64,
        level0_size: 1024,
        tile_size: 256,
        num_classes: 2,
        color_variation: 0.03,
        ..Default::default()
    }
}

/// Desk-scale pretraining setup sized for a few CPU minutes per seed.
pub fn smoke_config() -> Config {
    let mut c = Config::default();
    c.data.patch_size = 64;
    c.data.coarse_size = Some(64);
    c.views.global_size = 32;
    c.views.local_size = 16;
    c.views.n_locals = 2;
    c.views.shuffle_grid = 2;
    c.model = EncoderConfig {
        variant: "desk".into(),
        image_size: 32,
        patch_size: 8,
        embed_dim: 64,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        head_hidden: 256,
        head_bottleneck: 64,
        out_dim: 256,
        projector_hidden: 128,
        head_batch_norm: true,
        precision: Precision::F32,
    };
    c.train.batch_size = 32;
    c.train.epochs = 20;
    c.train.warmup_epochs = 2;
    c.train.steps_per_epoch = 25;
    c.train.base_lr = 1e-3;
    c.train.lambda0 = 0.99;
    c.train.tau_t_start = 0.04;
    c.train.tau_t = 0.04;
    c
}
