//! Bounded FIFO archive of behavior descriptors and kNN novelty.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::descriptor::BehaviorDescriptor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchiveConfig {
    /// Capacity; the oldest entries go first.
    pub max_len: usize,
    /// Clear every `reset_period` meta-iterations; 0 never clears.
    pub reset_period: u64,
}

impl Default for ArchiveConfig {
    fn default() -> Self {
        Self {
            max_len: 256,
            reset_period: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    config: ArchiveConfig,
    buffer: VecDeque<BehaviorDescriptor>,
    inserted: u64,
}

impl Archive {
    pub fn new(config: ArchiveConfig) -> Self {
        Self {
            config,
            buffer: VecDeque::with_capacity(config.max_len.min(4096)),
            inserted: 0,
        }
    }

    pub fn from_parts(
        config: ArchiveConfig,
        entries: Vec<BehaviorDescriptor>,
        inserted: u64,
    ) -> Self {
        let mut a = Self::new(config);
        a.buffer.extend(entries);
        while a.buffer.len() > config.max_len {
            a.buffer.pop_front();
        }
        a.inserted = inserted;
        a
    }

    pub fn config(&self) -> ArchiveConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Total descriptors ever inserted.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &BehaviorDescriptor> {
        self.buffer.iter()
    }

    pub fn clear(&mut self) {
        self.buffer.clear();
    }

    pub fn push(&mut self, d: BehaviorDescriptor) {
        if self.config.max_len == 0 {
            return;
        }
        if self.buffer.len() == self.config.max_len {
            self.buffer.pop_front();
        }
        self.buffer.push_back(d);
        self.inserted += 1;
    }

    /// Append the `m` best descriptors by `scores` (higher first, lower index
    /// on ties), clearing first if `iteration` hits the reset period.
    pub fn update(
        &mut self,
        iteration: u64,
        descriptors: &[BehaviorDescriptor],
        scores: &[f64],
        m: usize,
    ) {
        if self.config.reset_period > 0 && iteration % self.config.reset_period == 0 {
            self.clear();
        }
        for i in top_indices(scores, m.min(descriptors.len())) {
            self.push(descriptors[i].clone());
        }
    }

    pub fn novelty(&self, d: &BehaviorDescriptor, k: usize) -> f64 {
        novelty_score(d, self.buffer.iter(), k)
    }
}

/// Indices of the `m` largest scores, best first; ties go to the lower index
/// and NaN ranks below everything.
pub fn top_indices(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| rank_cmp(scores[b], scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

/// Total order on scores with NaN below `-inf`.
pub fn rank_cmp(a: f64, b: f64) -> std::cmp::Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => std::cmp::Ordering::Equal,
        (true, false) => std::cmp::Ordering::Less,
        (false, true) => std::cmp::Ordering::Greater,
        _ => a.partial_cmp(&b).unwrap(),
    }
}

/// Mean distance to the `min(k, |archive|)` nearest entries; 0 when empty.
pub fn novelty_score<'a>(
    d: &BehaviorDescriptor,
    archive: impl IntoIterator<Item = &'a BehaviorDescriptor>,
    k: usize,
) -> f64 {
    let mut dist: Vec<f64> = archive.into_iter().map(|a| d.distance(a)).collect();
    let k = k.min(dist.len());
    if k == 0 {
        return 0.0;
    }
    dist.select_nth_unstable_by(k - 1, f64::total_cmp);
    let mut nearest = dist[..k].to_vec();
    nearest.sort_by(f64::total_cmp);
    nearest.iter().sum::<f64>() / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(v: &[f64]) -> BehaviorDescriptor {
        BehaviorDescriptor(v.to_vec())
    }

    #[test]
    fn fifo_eviction() {
        let mut a = Archive::new(ArchiveConfig {
            max_len: 3,
            reset_period: 0,
        });
        for x in 0..5 {
            a.push(d(&[x as f64]));
        }
        let kept: Vec<f64> = a.entries().map(|e| e.0[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
        assert_eq!(a.inserted(), 5);
    }

    #[test]
    fn update_takes_top_m() {
        let mut a = Archive::new(ArchiveConfig::default());
        let ds = [d(&[0.0]), d(&[1.0]), d(&[2.0]), d(&[3.0])];
        a.update(1, &ds, &[0.1, 0.9, f64::NEG_INFINITY, 0.9], 2);
        let kept: Vec<f64> = a.entries().map(|e| e.0[0]).collect();
        assert_eq!(kept, vec![1.0, 3.0]);
    }

    #[test]
    fn reset_clears_before_insert() {
        let mut a = Archive::new(ArchiveConfig {
            max_len: 10,
            reset_period: 5,
        });
        let ds = [d(&[0.0]), d(&[1.0]), d(&[2.0])];
        for t in 1..=4 {
            a.update(t, &ds, &[3.0, 2.0, 1.0], 2);
        }
        assert_eq!(a.len(), 8);
        a.update(5, &ds, &[3.0, 2.0, 1.0], 2);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn novelty_cases() {
        let zero = [d(&[0.0, 0.0])];
        assert_eq!(novelty_score(&d(&[0.6, 0.8]), &zero, 8), 1.0);
        let arch = [d(&[0.6, 0.8]), d(&[1.0, 0.0])];
        assert_eq!(novelty_score(&d(&[0.6, 0.8]), &arch, 1), 0.0);
        assert_eq!(novelty_score(&d(&[1.0]), std::iter::empty(), 8), 0.0);
    }

    #[test]
    fn nan_ranks_last() {
        assert_eq!(
            top_indices(&[f64::NAN, f64::NEG_INFINITY, 0.0], 3),
            vec![2, 1, 0]
        );
    }
}
