//! Slide-level classification from bags of patch features.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::probe::{softmax, ProbeConfig, ProbeMetrics, Standardizer};
use super::store::FeatureStore;
use crate::distill::AdamW;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, macro_auc};
use crate::model::{constant, linear, log_softmax_last, softmax_last, trunc_normal, ParamStore};

/// Maps a bag of instance features to class logits.
pub trait BagAggregator {
    fn n_classes(&self) -> usize;
    fn bag_logits(&self, bag: &[Vec<f64>]) -> Result<Vec<f64>>;
}

/// Bags of feature-store rows with one label per bag.
#[derive(Debug, Clone, PartialEq)]
pub struct BagDataset {
    pub names: Vec<String>,
    pub bags: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl BagDataset {
    /// One bag per source id in order of first appearance; `labels` gives the class of each source.
    pub fn from_store(store: &FeatureStore, labels: &[(String, usize)]) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut bags: Vec<Vec<usize>> = Vec::new();
        for (i, s) in store.sources().iter().enumerate() {
            match names.iter().position(|n| *n == s.source_id) {
                Some(b) => bags[b].push(i),
                None => {
                    names.push(s.source_id.clone());
                    bags.push(vec![i]);
                }
            }
        }
        let labels = names
            .iter()
            .map(|n| {
                labels
                    .iter()
                    .find(|(id, _)| id == n)
                    .map(|(_, c)| *c)
                    .ok_or_else(|| Error::invalid(format!("no label for source {n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { names, bags, labels })
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn validate(&self, rows: usize) -> Result<()> {
        if self.bags.len() != self.labels.len() {
            return Err(Error::shape("one label per bag is required"));
        }
        for (b, bag) in self.bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::invalid(format!("bag {b} is empty")));
            }
            if let Some(&i) = bag.iter().find(|&&i| i >= rows) {
                return Err(Error::invalid(format!("bag {b} references row {i} of {rows}")));
            }
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            bags: idx.iter().map(|&i| self.bags[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn features(&self, store: &FeatureStore, b: usize) -> Vec<Vec<f64>> {
        self.bags[b]
            .iter()
            .map(|&i| store.row(i).iter().map(|&v| v as f64).collect())
            .collect()
    }
}

/// Gated attention pooling followed by a linear classifier.
#[derive(Debug, Clone)]
pub struct GatedAttention {
    pub standardizer: Standardizer,
    pub params: ParamStore,
}

pub struct Pooled {
    pub weights: Vec<f64>,
    /// Attention-weighted mean of the standardized instances.
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
}

impl GatedAttention {
    pub fn new(dim: usize, hidden: usize, n_classes: usize, standardizer: Standardizer, seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 || n_classes < 2 {
            return Err(Error::invalid("attention pooling needs positive sizes and two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dt = DType::F64;
        let mut params = ParamStore::new(true);
        params.insert("attn.v.weight", trunc_normal(&[hidden, dim], (1.0 / dim as f64).sqrt(), dt, &mut rng)?)?;
        params.insert("attn.v.bias", constant(&[hidden], 0.0, dt)?)?;
        params.insert("attn.u.weight", trunc_normal(&[hidden, dim], (1.0 / dim as f64).sqrt(), dt, &mut rng)?)?;
        params.insert("attn.u.bias", constant(&[hidden], 0.0, dt)?)?;
        params.insert("attn.w.weight", trunc_normal(&[1, hidden], (1.0 / hidden as f64).sqrt(), dt, &mut rng)?)?;
        params.insert("cls.weight", trunc_normal(&[n_classes, dim], 0.01, dt, &mut rng)?)?;
        params.insert("cls.bias", constant(&[n_classes], 0.0, dt)?)?;
        Ok(Self { standardizer, params })
    }

    /// Standardized instances in a canonical (lexicographic) order so pooling
    /// does not depend on the order the bag was given in.
    fn canonical(&self, bag: &[Vec<f64>]) -> Result<Tensor> {
        if bag.is_empty() {
            return Err(Error::invalid("empty bag"));
        }
        let mut rows: Vec<Vec<f64>> = bag.iter().map(|r| self.standardizer.apply(r)).collect();
        rows.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let d = rows[0].len();
        let n = rows.len();
        Ok(Tensor::from_vec(rows.concat(), (n, d), &Device::Cpu)?)
    }

    /// Returns `(weights (1,n), feature (1,D), logits (1,K))`.
    fn forward(&self, h: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let p = &self.params;
        let v = linear(h, p.get("attn.v.weight")?, Some(p.get("attn.v.bias")?))?.tanh()?;
        let u = linear(h, p.get("attn.u.weight")?, Some(p.get("attn.u.bias")?))?;
        let gate = (u.neg()?.exp()? + 1.0)?.recip()?;
        let s = linear(&(v * gate)?, p.get("attn.w.weight")?, None)?.t()?;
        let a = softmax_last(&s)?;
        let feature = a.matmul(h)?;
        let logits = linear(&feature, p.get("cls.weight")?, Some(p.get("cls.bias")?))?;
        Ok((a, feature, logits))
    }

    pub fn pool(&self, bag: &[Vec<f64>]) -> Result<Pooled> {
        let h = self.canonical(bag)?;
        let (a, f, z) = self.forward(&h)?;
        Ok(Pooled {
            weights: a.flatten_all()?.to_vec1()?,
            feature: f.flatten_all()?.to_vec1()?,
            logits: z.flatten_all()?.to_vec1()?,
        })
    }
}

impl BagAggregator for GatedAttention {
    fn n_classes(&self) -> usize {
        self.params.get("cls.bias").map_or(0, |b| b.dim(0).unwrap_or(0))
    }

    fn bag_logits(&self, bag: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.pool(bag)?.logits)
    }
}

/// Trains gated attention pooling with full-batch AdamW on the mean bag cross-entropy.
pub fn train_attention_mil(
    store: &FeatureStore,
    train: &BagDataset,
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<GatedAttention> {
    cfg.validate()?;
    train.validate(store.len())?;
    if train.is_empty() {
        return Err(Error::invalid("no training bags"));
    }
    let rows: Vec<Vec<f64>> = train.bags.iter().flatten().map(|&i| store.row(i).iter().map(|&v| v as f64).collect()).collect();
    let standardizer = Standardizer::fit(&rows)?;
    let mut model = GatedAttention::new(store.dim(), cfg.mil_hidden, n_classes, standardizer, cfg.seed)?;
    let inputs: Vec<Tensor> = (0..train.len())
        .map(|b| model.canonical(&train.features(store, b)))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(&[&model.params], cfg.l2)?;
    let scale = 1.0 / train.len() as f64;
    for _ in 0..cfg.epochs {
        let mut loss: Option<Tensor> = None;
        for (h, &y) in inputs.iter().zip(&train.labels) {
            let (_, _, z) = model.forward(h)?;
            let nll = log_softmax_last(&z)?.narrow(1, y, 1)?.sum_all()?.neg()?;
            loss = Some(match loss {
                Some(l) => (l + nll)?,
                None => nll,
            });
        }
        let loss = (loss.expect("at least one bag") * scale)?;
        let grads = loss.backward()?;
        opt.step(&mut [&mut model.params], &grads, cfg.mil_lr, None)?;
    }
    Ok(model)
}

/// Slide-level ACC/AUC of any aggregator.
pub fn evaluate_bags<A: BagAggregator>(agg: &A, store: &FeatureStore, bags: &BagDataset) -> Result<(f64, f64)> {
    bags.validate(store.len())?;
    let mut probs = Vec::with_capacity(bags.len());
    for b in 0..bags.len() {
        probs.push(softmax(&agg.bag_logits(&bags.features(store, b))?));
    }
    let pred: Vec<usize> = probs.iter().map(|p| crate::adapter::argmax(p)).collect();
    Ok((accuracy(&pred, &bags.labels)?, macro_auc(&probs, &bags.labels, agg.n_classes())?))
}

pub fn attention_mil(
    store: &FeatureStore,
    train: &BagDataset,
    test: &BagDataset,
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(GatedAttention, ProbeMetrics)> {
    let model = train_attention_mil(store, train, n_classes, cfg)?;
    let (acc, auc) = evaluate_bags(&model, store, test)?;
    Ok((
        model,
        ProbeMetrics {
            accuracy: acc,
            auc,
            n_train: train.len(),
            n_test: test.len(),
            epochs_run: cfg.epochs,
        },
    ))
}
