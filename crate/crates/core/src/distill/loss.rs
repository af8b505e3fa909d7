//! Cross-view distillation losses. Targets are always detached; gradients reach
//! only the student-side argument.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_softmax_last, softmax_last};

/// Lower clamp applied to predicted probabilities before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Identity of a student view entering the cross-view loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewId {
    Global(usize),
    Local(usize),
    Color,
    Shuffle,
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Mean over contributing (teacher view, student view) pairs.
    #[default]
    Mean,
    /// Plain sum over pairs.
    Sum,
}

/// Batch-mean of `-Σ a log max(b, floor)` over the last axis.
pub fn cross_entropy(target: &Tensor, pred: &Tensor) -> Result<Tensor> {
    if target.dims() != pred.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", target.dims(), pred.dims())));
    }
    let log_b = pred.maximum(PROB_FLOOR)?.log()?;
    let per_row = (target.detach() * log_b)?.sum(D::Minus1)?.neg()?;
    Ok(per_row.mean_all()?)
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::invalid(format!("{what} has negative or NaN entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn row(p: &[f64]) -> Result<Tensor> {
    Ok(Tensor::from_slice(p, (1, p.len()), &Device::Cpu)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// H(a, b) = -Σ aᵢ log bᵢ for two probability vectors.
pub fn cross_entropy_h(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("length {} vs {}", a.len(), b.len())));
    }
    check_distribution(a, "target")?;
    check_distribution(b, "prediction")?;
    scalar(&cross_entropy(&row(a)?, &row(b)?)?)
}

/// Σ over teacher globals `i` and student views `v ≠ Global(i)` of H(P_t(i), P_s(v)).
pub fn loss_main(teacher: &[Tensor], student: &[(ViewId, Tensor)], reduction: Reduction) -> Result<Tensor> {
    let mut terms = Vec::new();
    for (i, t) in teacher.iter().enumerate() {
        for (id, s) in student {
            if *id == ViewId::Global(i) {
                continue;
            }
            terms.push(cross_entropy(t, s)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("cross-view loss has no contributing pairs"));
    }
    let n = terms.len();
    let sum = Tensor::stack(&terms, 0)?.sum_all()?;
    Ok(match reduction {
        Reduction::Sum => sum,
        Reduction::Mean => (sum / n as f64)?,
    })
}

/// Number of (teacher, student) pairs contributing to [`loss_main`].
pub fn main_pair_count(n_globals: usize, student: &[ViewId]) -> usize {
    (0..n_globals)
        .map(|i| student.iter().filter(|&&v| v != ViewId::Global(i)).count())
        .sum()
}

/// Host-side [`loss_main`] over plain probability vectors.
pub fn loss_main_probs(teacher: &[Vec<f64>], student: &[(ViewId, Vec<f64>)], reduction: Reduction) -> Result<f64> {
    let t: Vec<Tensor> = teacher
        .iter()
        .map(|p| {
            check_distribution(p, "teacher distribution")?;
            row(p)
        })
        .collect::<Result<_>>()?;
    let s: Vec<(ViewId, Tensor)> = student
        .iter()
        .map(|(id, p)| {
            check_distribution(p, "student distribution")?;
            Ok((*id, row(p)?))
        })
        .collect::<Result<_>>()?;
    scalar(&loss_main(&t, &s, reduction)?)
}

/// Color-view term against the teacher's first global view.
pub fn loss_color(teacher_ref: &Tensor, student_color: &Tensor) -> Result<Tensor> {
    cross_entropy(teacher_ref, student_color)
}

/// Masked-view term against the teacher's unmasked counterpart.
pub fn loss_mim(teacher_unmasked: &Tensor, student_masked: &Tensor) -> Result<Tensor> {
    cross_entropy(teacher_unmasked, student_masked)
}

/// H(Softmax(e), Softmax(f_e_shuffled)) with plain (temperature 1) softmax over
/// embedding coordinates; `e` is treated as a constant target.
pub fn loss_shuffle(e: &Tensor, f_e_shuffled: &Tensor) -> Result<Tensor> {
    if e.dims() != f_e_shuffled.dims() {
        return Err(Error::shape(format!(
            "projected embedding {:?} does not match target {:?}",
            f_e_shuffled.dims(),
            e.dims()
        )));
    }
    let target = softmax_last(&e.detach())?;
    let log_pred = log_softmax_last(f_e_shuffled)?.maximum(PROB_FLOOR.ln())?;
    Ok((target * log_pred)?.sum(D::Minus1)?.neg()?.mean_all()?)
}

/// Per-term weights for the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub main: f64,
    pub color: f64,
    pub mim: f64,
    pub shuffle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            main: 1.0,
            color: 1.0,
            mim: 1.0,
            shuffle: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.main, self.color, self.mim, self.shuffle]
    }
}

pub const TERM_NAMES: [&str; 4] = ["main", "color", "mim", "shuffle"];

/// Weighted sum of the four terms (main, color, mim, shuffle).
pub fn loss_total(parts: &[Tensor; 4], weights: &LossWeights) -> Result<Tensor> {
    let w = weights.as_array();
    let mut total = (&parts[0] * w[0])?;
    for k in 1..4 {
        total = (total + (&parts[k] * w[k])?)?;
    }
    Ok(total)
}

pub fn loss_total_values(parts: [f64; 4], weights: &LossWeights) -> f64 {
    parts.iter().zip(weights.as_array()).map(|(p, w)| p * w).sum()
}
