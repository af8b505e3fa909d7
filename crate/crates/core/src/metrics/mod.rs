//! Segmentation and classification metrics.

mod classify;
mod instance;
mod io;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use classify::{accuracy, macro_auc, midranks, roc_auc};
pub use instance::{aji, aji_counts, dice, dice_counts, panoptic, BinaryMask, InstanceMap, PanopticBreakdown};
pub use io::{decode_rle, encode_rle, read_instance_map, read_png16, write_instance_map, write_png16};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of per-image values.
    #[default]
    PerImage,
    /// Counts pooled over all images before forming ratios.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegRecord {
    pub name: String,
    pub dice: f64,
    pub aji: f64,
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
}

impl SegRecord {
    pub const CSV_HEADER: &'static str = "name,dice,aji,dq,sq,pq";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.name, self.dice, self.aji, self.dq, self.sq, self.pq
        )
    }
}

pub fn evaluate_pair(name: &str, gt: &InstanceMap, pred: &InstanceMap) -> Result<SegRecord> {
    let p = panoptic(gt, pred)?;
    Ok(SegRecord {
        name: name.to_string(),
        dice: dice(&gt.foreground(), &pred.foreground())?,
        aji: aji(gt, pred)?,
        dq: p.dq,
        sq: p.sq,
        pq: p.pq,
    })
}

/// Per-image records plus one aggregate record named `mean` or `pooled`.
pub fn evaluate_set(pairs: &[(String, InstanceMap, InstanceMap)], mode: Aggregation) -> Result<(Vec<SegRecord>, SegRecord)> {
    if pairs.is_empty() {
        return Err(Error::Undefined("no image pairs to evaluate".into()));
    }
    let mut records = Vec::with_capacity(pairs.len());
    for (name, gt, pred) in pairs {
        records.push(evaluate_pair(name, gt, pred)?);
    }
    let agg = match mode {
        Aggregation::PerImage => {
            let n = records.len() as f64;
            let mean = |f: fn(&SegRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
            SegRecord {
                name: "mean".into(),
                dice: mean(|r| r.dice),
                aji: mean(|r| r.aji),
                dq: mean(|r| r.dq),
                sq: mean(|r| r.sq),
                pq: mean(|r| r.pq),
            }
        }
        Aggregation::Pooled => {
            let (mut di, mut dt, mut ai, mut au) = (0u64, 0u64, 0u64, 0u64);
            let (mut tp, mut fp, mut fn_, mut iou) = (0usize, 0usize, 0usize, 0.0f64);
            for (_, gt, pred) in pairs {
                let (i, t) = dice_counts(&gt.foreground(), &pred.foreground())?;
                di += i;
                dt += t;
                let (i, u) = aji_counts(gt, pred)?;
                ai += i;
                au += u;
                let p = panoptic(gt, pred)?;
                tp += p.tp_pairs.len();
                fp += p.fp_ids.len();
                fn_ += p.fn_ids.len();
                iou += p.iou_sum();
            }
            let (dq, sq, pq) = PanopticBreakdown::from_counts(tp, fp, fn_, iou);
            SegRecord {
                name: "pooled".into(),
                dice: if dt == 0 { 1.0 } else { 2.0 * di as f64 / dt as f64 },
                aji: if au == 0 { 1.0 } else { ai as f64 / au as f64 },
                dq,
                sq,
                pq,
            }
        }
    };
    Ok((records, agg))
}

/// Pairs every map in `gt_dir` with the same-stem file in `pred_dir`.
pub fn load_pairs(gt_dir: &Path, pred_dir: &Path) -> Result<Vec<(String, InstanceMap, InstanceMap)>> {
    let mut entries: Vec<_> = std::fs::read_dir(gt_dir)
        .map_err(|e| Error::io(gt_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "rle")))
        .collect();
    entries.sort();
    let mut pairs = Vec::with_capacity(entries.len());
    for gt_path in entries {
        let stem = gt_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let pred_path = ["png", "rle"]
            .iter()
            .map(|ext| pred_dir.join(format!("{stem}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::invalid(format!("no prediction for `{stem}`")))?;
        pairs.push((stem, read_instance_map(&gt_path)?, read_instance_map(&pred_path)?));
    }
    Ok(pairs)
}
