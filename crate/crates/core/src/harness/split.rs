//! Seeded stratified index selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        out[l].push(i);
    }
    out
}

/// Splits indices into `(kept, held_out)`, holding out about `fraction` of each
/// class. Both sides keep at least one member of every class with two or more
/// members. Each side is sorted.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("split fraction must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut kept, mut held) = (Vec::new(), Vec::new());
    for mut members in by_class(labels) {
        members.shuffle(&mut rng);
        let n = members.len();
        let mut h = (fraction * n as f64).round() as usize;
        if fraction > 0.0 && n >= 2 {
            h = h.clamp(1, n - 1);
        }
        held.extend_from_slice(&members[..h]);
        kept.extend_from_slice(&members[h..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    Ok((kept, held))
}

/// Stratified subset of about `fraction` of each class (at least one per class),
/// sorted.
pub fn stratified_subset(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("data fraction must lie in (0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for mut members in by_class(labels) {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let take = ((fraction * members.len() as f64).round() as usize).max(1);
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}
