//! Multinomial logistic regression on frozen, standardized features.

use serde::{Deserialize, Serialize};

use super::split::stratified_split;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, macro_auc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    #[default]
    Linear,
    Mil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub epochs: usize,
    /// Linear probe step as a multiple of `1/L`, where `L` bounds the curvature of
    /// the loss on the standardized training rows.
    pub lr: f64,
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    pub seed: u64,
    /// Share of the training rows held out for early stopping; 0 disables it.
    pub val_fraction: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Attention width of the MIL aggregator.
    pub mil_hidden: usize,
    /// AdamW step size for the MIL aggregator.
    pub mil_lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            kind: ProbeKind::Linear,
            epochs: 500,
            lr: 1.0,
            l2: 1e-4,
            seed: 0,
            val_fraction: 0.1,
            patience: 50,
            mil_hidden: 32,
            mil_lr: 0.01,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.mil_lr > 0.0) {
            return Err(Error::invalid("probe lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must lie in [0, 1)"));
        }
        if self.l2 < 0.0 {
            return Err(Error::invalid("l2 must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub accuracy: f64,
    pub auc: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs_run: usize,
}

/// Per-feature standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let d = x.first().map(Vec::len).ok_or_else(|| Error::invalid("no rows to standardize"))?;
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            if r.len() != d {
                return Err(Error::shape("ragged feature rows"));
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in x {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var.iter().map(|s| (s / n).sqrt().max(1e-8)).collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub standardizer: Standardizer,
    /// `n_classes` rows of `dim` weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    fn logits_std(&self, z: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(z).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect()
    }

    pub fn logits(&self, row: &[f64]) -> Vec<f64> {
        self.logits_std(&self.standardizer.apply(row))
    }

    pub fn predict_proba(&self, row: &[f64]) -> Vec<f64> {
        softmax(&self.logits(row))
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::invalid("a probe needs at least two classes"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {n_classes} classes")));
    }
    let mut seen = vec![false; n_classes];
    labels.iter().for_each(|&l| seen[l] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::invalid("degenerate split: training labels contain a single class"));
    }
    Ok(())
}

/// Largest eigenvalue of `ZᵀZ/n` by power iteration.
fn top_eigenvalue(z: &[Vec<f64>]) -> f64 {
    let d = z[0].len();
    let n = z.len() as f64;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut w = vec![0.0; d];
        for r in z {
            let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (wi, ri) in w.iter_mut().zip(r) {
                *wi += dot * ri / n;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

fn mean_nll(model: &LinearModel, z: &[Vec<f64>], y: &[usize]) -> f64 {
    let total: f64 = z
        .iter()
        .zip(y)
        .map(|(r, &c)| -softmax(&model.logits_std(r))[c].max(1e-300).ln())
        .sum();
    total / z.len() as f64
}

/// Full-batch gradient descent on the mean cross-entropy plus `l2/2·‖W‖²`.
/// Returns the model and the number of epochs run.
pub fn fit_logistic(x: &[Vec<f64>], y: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<(LinearModel, usize)> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} rows for {} labels", x.len(), y.len())));
    }
    check_labels(y, n_classes)?;
    let (fit_idx, val_idx) = if cfg.val_fraction > 0.0 {
        stratified_split(y, cfg.val_fraction, cfg.seed)?
    } else {
        ((0..y.len()).collect(), Vec::new())
    };
    let fit_x: Vec<Vec<f64>> = fit_idx.iter().map(|&i| x[i].clone()).collect();
    let fit_y: Vec<usize> = fit_idx.iter().map(|&i| y[i]).collect();
    check_labels(&fit_y, n_classes)?;
    let standardizer = Standardizer::fit(&fit_x)?;
    let z: Vec<Vec<f64>> = fit_x.iter().map(|r| standardizer.apply(r)).collect();
    let vz: Vec<Vec<f64>> = val_idx.iter().map(|&i| standardizer.apply(&x[i])).collect();
    let vy: Vec<usize> = val_idx.iter().map(|&i| y[i]).collect();
    let d = z[0].len();
    let n = z.len() as f64;
    // Softmax cross-entropy curvature is at most half that of the (bias-augmented) design.
    let step = cfg.lr / (0.5 * (top_eigenvalue(&z) + 1.0) + cfg.l2);
    let mut model = LinearModel {
        standardizer,
        weights: vec![vec![0.0; d]; n_classes],
        bias: vec![0.0; n_classes],
    };
    let mut best: Option<(f64, LinearModel)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    for _ in 0..cfg.epochs {
        let mut gw = vec![vec![0.0; d]; n_classes];
        let mut gb = vec![0.0; n_classes];
        for (r, &c) in z.iter().zip(&fit_y) {
            let p = softmax(&model.logits_std(r));
            for k in 0..n_classes {
                let delta = p[k] - f64::from(u8::from(k == c));
                gb[k] += delta;
                for (g, v) in gw[k].iter_mut().zip(r) {
                    *g += delta * v;
                }
            }
        }
        for k in 0..n_classes {
            for (w, g) in model.weights[k].iter_mut().zip(&gw[k]) {
                *w -= step * (g / n + cfg.l2 * *w);
            }
            model.bias[k] -= step * gb[k] / n;
        }
        epochs_run += 1;
        if !vz.is_empty() {
            let loss = mean_nll(&model, &vz, &vy);
            if best.as_ref().map_or(true, |b| loss < b.0) {
                best = Some((loss, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok((best.map_or(model, |b| b.1), epochs_run))
}

/// Accuracy and macro AUC of `model` on labelled rows.
pub fn evaluate_linear(model: &LinearModel, x: &[Vec<f64>], y: &[usize]) -> Result<(f64, f64)> {
    let probs: Vec<Vec<f64>> = x.iter().map(|r| model.predict_proba(r)).collect();
    let pred: Vec<usize> = probs.iter().map(|p| crate::adapter::argmax(p)).collect();
    Ok((accuracy(&pred, y)?, macro_auc(&probs, y, model.n_classes())?))
}

/// Fits on the training rows and reports test ACC/AUC.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(LinearModel, ProbeMetrics)> {
    let (model, epochs_run) = fit_logistic(train_x, train_y, n_classes, cfg)?;
    let (acc, auc) = evaluate_linear(&model, test_x, test_y)?;
    Ok((
        model,
        ProbeMetrics {
            accuracy: acc,
            auc,
            n_train: train_x.len(),
            n_test: test_x.len(),
            epochs_run,
        },
    ))
}
