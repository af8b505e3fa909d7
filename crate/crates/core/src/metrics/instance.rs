use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// H×W instance ids, row-major; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl InstanceMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(format!("{} labels for a {width}x{height} map", labels.len())));
        }
        Ok(Self { width, height, labels })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    /// Present instance ids, ascending.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.areas().into_keys().collect();
        ids.sort_unstable();
        ids
    }

    pub fn areas(&self) -> BTreeMap<u32, u64> {
        let mut a = BTreeMap::new();
        for &l in &self.labels {
            if l != 0 {
                *a.entry(l).or_insert(0) += 1;
            }
        }
        a
    }

    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

fn same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

/// Intersection and area counts entering DICE.
pub fn dice_counts(x: &BinaryMask, y: &BinaryMask) -> Result<(u64, u64)> {
    same_shape((x.width, x.height), (y.width, y.height))?;
    let mut inter = 0u64;
    let mut total = 0u64;
    for (&a, &b) in x.data.iter().zip(&y.data) {
        inter += u64::from(a && b);
        total += u64::from(a) + u64::from(b);
    }
    Ok((inter, total))
}

/// 2|X∩Y| / (|X|+|Y|); 1 when both are empty.
pub fn dice(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    let (inter, total) = dice_counts(x, y)?;
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Pixel overlap counts between every GT and predicted instance.
struct Overlaps {
    gt_ids: Vec<u32>,
    pred_ids: Vec<u32>,
    gt_area: Vec<u64>,
    pred_area: Vec<u64>,
    /// `inter[g][p]`
    inter: Vec<Vec<u64>>,
}

impl Overlaps {
    fn new(gt: &InstanceMap, pred: &InstanceMap) -> Result<Self> {
        same_shape((gt.width, gt.height), (pred.width, pred.height))?;
        let ga = gt.areas();
        let pa = pred.areas();
        let gt_ids: Vec<u32> = ga.keys().copied().collect();
        let pred_ids: Vec<u32> = pa.keys().copied().collect();
        let gi: BTreeMap<u32, usize> = gt_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let pi: BTreeMap<u32, usize> = pred_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut inter = vec![vec![0u64; pred_ids.len()]; gt_ids.len()];
        for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
            if g != 0 && p != 0 {
                inter[gi[&g]][pi[&p]] += 1;
            }
        }
        Ok(Self {
            gt_area: ga.into_values().collect(),
            pred_area: pa.into_values().collect(),
            gt_ids,
            pred_ids,
            inter,
        })
    }

    fn union(&self, g: usize, p: usize) -> u64 {
        self.gt_area[g] + self.pred_area[p] - self.inter[g][p]
    }
}

/// Aggregated intersection and union counts of AJI.
pub fn aji_counts(gt: &InstanceMap, pred: &InstanceMap) -> Result<(u64, u64)> {
    let o = Overlaps::new(gt, pred)?;
    let mut used = vec![false; o.pred_ids.len()];
    let mut inter = 0u64;
    let mut union = 0u64;
    for g in 0..o.gt_ids.len() {
        // Best unused prediction by IoU, compared exactly as fractions; the scan
        // order keeps the lowest id on ties.
        let mut best: Option<usize> = None;
        for p in 0..o.pred_ids.len() {
            if used[p] || o.inter[g][p] == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => (o.inter[g][p] as u128) * (o.union(g, b) as u128) > (o.inter[g][b] as u128) * (o.union(g, p) as u128),
            };
            if better {
                best = Some(p);
            }
        }
        match best {
            Some(p) => {
                used[p] = true;
                inter += o.inter[g][p];
                union += o.union(g, p);
            }
            None => union += o.gt_area[g],
        }
    }
    for (p, &u) in used.iter().enumerate() {
        if !u {
            union += o.pred_area[p];
        }
    }
    Ok((inter, union))
}

/// Aggregated Jaccard index; 1 when both maps are empty.
pub fn aji(gt: &InstanceMap, pred: &InstanceMap) -> Result<f64> {
    let (i, u) = aji_counts(gt, pred)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanopticBreakdown {
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    /// (gt id, pred id, IoU), each IoU > 0.5.
    pub tp_pairs: Vec<(u32, u32, f64)>,
    pub fp_ids: Vec<u32>,
    pub fn_ids: Vec<u32>,
}

impl PanopticBreakdown {
    /// DQ, SQ and PQ from match counts and the summed IoU of true positives.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, iou_sum: f64) -> (f64, f64, f64) {
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        if denom == 0.0 {
            return (1.0, 1.0, 1.0);
        }
        let dq = tp as f64 / denom;
        let sq = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
        (dq, sq, dq * sq)
    }

    pub fn iou_sum(&self) -> f64 {
        self.tp_pairs.iter().map(|t| t.2).sum()
    }
}

/// Detection, segmentation and panoptic quality with IoU > 0.5 matching.
pub fn panoptic(gt: &InstanceMap, pred: &InstanceMap) -> Result<PanopticBreakdown> {
    let o = Overlaps::new(gt, pred)?;
    let mut tp_pairs = Vec::new();
    let mut gt_hit = vec![false; o.gt_ids.len()];
    let mut pred_hit = vec![false; o.pred_ids.len()];
    for g in 0..o.gt_ids.len() {
        for p in 0..o.pred_ids.len() {
            // IoU > 0.5 ⇔ 2·inter > union
            if 2 * o.inter[g][p] > o.union(g, p) {
                tp_pairs.push((o.gt_ids[g], o.pred_ids[p], o.inter[g][p] as f64 / o.union(g, p) as f64));
                gt_hit[g] = true;
                pred_hit[p] = true;
            }
        }
    }
    let fn_ids: Vec<u32> = o.gt_ids.iter().zip(&gt_hit).filter(|(_, &h)| !h).map(|(&i, _)| i).collect();
    let fp_ids: Vec<u32> = o.pred_ids.iter().zip(&pred_hit).filter(|(_, &h)| !h).map(|(&i, _)| i).collect();
    let iou_sum: f64 = tp_pairs.iter().map(|t| t.2).sum();
    let (dq, sq, pq) = PanopticBreakdown::from_counts(tp_pairs.len(), fp_ids.len(), fn_ids.len(), iou_sum);
    Ok(PanopticBreakdown {
        dq,
        sq,
        pq,
        tp_pairs,
        fp_ids,
        fn_ids,
    })
}
