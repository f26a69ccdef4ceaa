//! Behavior descriptors: a fixed-length summary of who held how much of the
//! grid over a trajectory, and how fast that changed.

use thiserror::Error;

use crate::substrate::Frame;

#[derive(Debug, Error, PartialEq)]
pub enum DescriptorError {
    #[error("trajectory is empty")]
    Empty,
    #[error("trajectory has {0} frames; at least 2 are needed")]
    TooShort(usize),
    #[error("frame {0} does not match the first frame's shape")]
    Inconsistent(usize),
}

/// `T x (N+1)` matrix of per-frame mass fractions, environment in column 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeciesFractions {
    entities: usize,
    rows: Vec<f64>,
}

impl SpeciesFractions {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let entities = rows.first().map_or(0, Vec::len);
        Self {
            entities,
            rows: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn frames(&self) -> usize {
        if self.entities == 0 {
            0
        } else {
            self.rows.len() / self.entities
        }
    }

    pub fn entities(&self) -> usize {
        self.entities
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t * self.entities..(t + 1) * self.entities]
    }

    pub fn column_means(&self) -> Vec<f64> {
        let t = self.frames() as f64;
        let mut mean = vec![0.0; self.entities];
        for r in 0..self.frames() {
            for (m, v) in mean.iter_mut().zip(self.row(r)) {
                *m += v / t;
            }
        }
        mean
    }

    /// Population standard deviation of each column over time.
    pub fn column_stds(&self) -> Vec<f64> {
        let mean = self.column_means();
        let t = self.frames() as f64;
        let mut var = vec![0.0; self.entities];
        for r in 0..self.frames() {
            for ((s, v), m) in var.iter_mut().zip(self.row(r)).zip(&mean) {
                *s += (v - m).powi(2) / t;
            }
        }
        var.into_iter().map(f64::sqrt).collect()
    }

    /// Mean absolute change between consecutive rows, per column.
    pub fn turnover(&self) -> Vec<f64> {
        let steps = self.frames().saturating_sub(1);
        let mut out = vec![0.0; self.entities];
        if steps == 0 {
            return out;
        }
        for r in 0..steps {
            for ((o, a), b) in out.iter_mut().zip(self.row(r)).zip(self.row(r + 1)) {
                *o += (b - a).abs() / steps as f64;
            }
        }
        out
    }
}

/// Per-frame share of total contribution weight held by each entity.
pub fn species_fractions(frames: &[Frame]) -> Result<SpeciesFractions, DescriptorError> {
    let first = frames.first().ok_or(DescriptorError::Empty)?;
    let e = first.entities();
    let mut rows = Vec::with_capacity(frames.len() * e);
    for (i, f) in frames.iter().enumerate() {
        if f.entities() != e || f.cells() != first.cells() {
            return Err(DescriptorError::Inconsistent(i));
        }
        let mass = f.entity_mass();
        let total: f64 = mass.iter().sum();
        if total > 0.0 {
            rows.extend(mass.iter().map(|m| m / total));
        } else {
            rows.extend(std::iter::once(1.0).chain(std::iter::repeat(0.0).take(e - 1)));
        }
    }
    Ok(SpeciesFractions { entities: e, rows })
}

/// `[mu; sigma; delta; H_win; nu]`, L2-normalized (left as zeros when every
/// feature is zero).
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorDescriptor(pub Vec<f64>);

impl BehaviorDescriptor {
    pub fn len_for(agents: usize) -> usize {
        3 * (agents + 1) + 2
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &BehaviorDescriptor) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Unnormalized descriptor blocks, exposed for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorFeatures {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub turnover: Vec<f64>,
    pub winner_entropy: f64,
    pub alive_change: f64,
}

impl DescriptorFeatures {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.mean.len() + 2);
        v.extend(&self.mean);
        v.extend(&self.std);
        v.extend(&self.turnover);
        v.push(self.winner_entropy);
        v.push(self.alive_change);
        v
    }
}

pub fn descriptor_features(frames: &[Frame]) -> Result<DescriptorFeatures, DescriptorError> {
    if frames.len() < 2 {
        return Err(if frames.is_empty() {
            DescriptorError::Empty
        } else {
            DescriptorError::TooShort(frames.len())
        });
    }
    let fractions = species_fractions(frames)?;
    let e = fractions.entities();

    let mut winners = vec![0u64; e];
    for f in frames {
        for w in f.winner_map() {
            winners[w] += 1;
        }
    }
    let winner_entropy = entropy_bits(&winners);

    let mut alive_change = 0.0;
    for pair in frames.windows(2) {
        let (a, b) = (&pair[0].alive, &pair[1].alive);
        let n = a.len().max(1) as f64;
        alive_change += a
            .iter()
            .zip(b)
            .map(|(x, y)| (y - x).abs() as f64)
            .sum::<f64>()
            / n;
    }
    alive_change /= (frames.len() - 1) as f64;

    Ok(DescriptorFeatures {
        mean: fractions.column_means(),
        std: fractions.column_stds(),
        turnover: fractions.turnover(),
        winner_entropy,
        alive_change,
    })
}

pub fn behavior_descriptor(frames: &[Frame]) -> Result<BehaviorDescriptor, DescriptorError> {
    let mut v = descriptor_features(frames)?.concat();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(BehaviorDescriptor(v))
}

/// Shannon entropy in bits of an empirical histogram.
pub fn entropy_bits(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.log2()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_from_fractions(fr: &[f64], cells: usize) -> Frame {
        // Spread each fraction evenly over all cells.
        let e = fr.len();
        let mut weights = Vec::with_capacity(cells * e);
        for _ in 0..cells {
            weights.extend(fr.iter().map(|&v| v as f32));
        }
        Frame {
            height: 1,
            width: cells,
            agents: e - 1,
            weights,
            alive: vec![0.0; cells * (e - 1)],
        }
    }

    #[test]
    fn monoculture_and_dead_rows() {
        let f = species_fractions(&[Frame::uniform(4, 4, 1, 1)]).unwrap();
        assert_eq!(f.row(0), &[0.0, 1.0]);
        let d = species_fractions(&[Frame::uniform(4, 4, 3, 0)]).unwrap();
        assert_eq!(d.row(0), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn worked_example_column_means() {
        let frames: Vec<Frame> = [[0.55, 0.30, 0.15], [0.40, 0.35, 0.25], [0.20, 0.45, 0.35]]
            .iter()
            .map(|r| frame_from_fractions(r, 6))
            .collect();
        let mu = species_fractions(&frames).unwrap().column_means();
        let rounded: Vec<f64> = mu.iter().map(|m| (m * 100.0).round() / 100.0).collect();
        assert_eq!(rounded, vec![0.38, 0.37, 0.25]);
    }

    #[test]
    fn static_trajectory_has_no_variation() {
        let frames = vec![Frame::uniform(3, 3, 2, 1); 5];
        let feats = descriptor_features(&frames).unwrap();
        assert!(feats.std.iter().all(|&s| s == 0.0));
        assert!(feats.turnover.iter().all(|&s| s == 0.0));
        assert_eq!(feats.alive_change, 0.0);
        assert_eq!(feats.winner_entropy, 0.0);
        let d = behavior_descriptor(&frames).unwrap();
        assert!((d.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn descriptor_length() {
        for n in [1, 3, 5, 7] {
            let frames = vec![Frame::uniform(2, 2, n, 0), Frame::uniform(2, 2, n, n)];
            assert_eq!(behavior_descriptor(&frames).unwrap().len(), 3 * (n + 1) + 2);
        }
    }

    #[test]
    fn alternating_winners_give_one_bit() {
        let frames = vec![Frame::uniform(4, 4, 2, 1), Frame::uniform(4, 4, 2, 2)];
        let feats = descriptor_features(&frames).unwrap();
        assert!((feats.winner_entropy - 1.0).abs() < 1e-12);
        assert!((feats.alive_change - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_trajectories_are_rejected() {
        assert_eq!(
            behavior_descriptor(&[]).unwrap_err(),
            DescriptorError::Empty
        );
        assert_eq!(
            behavior_descriptor(&[Frame::uniform(2, 2, 1, 0)]).unwrap_err(),
            DescriptorError::TooShort(1)
        );
    }

    #[test]
    fn permuting_agents_permutes_blocks() {
        let mut a = Frame::uniform(2, 2, 2, 1);
        a.weights = vec![0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.6, 0.3, 0.1, 0.3, 0.3, 0.4];
        let mut b = a.clone();
        b.weights = vec![0.1, 0.9, 0.0, 0.2, 0.7, 0.1, 0.3, 0.3, 0.4, 0.5, 0.5, 0.0];
        let swap = |f: &Frame| {
            let mut g = f.clone();
            for c in g.weights.chunks_exact_mut(3) {
                c.swap(1, 2);
            }
            g
        };
        let fa = descriptor_features(&[a.clone(), b.clone()]).unwrap();
        let fb = descriptor_features(&[swap(&a), swap(&b)]).unwrap();
        for (x, y) in [
            (&fa.mean, &fb.mean),
            (&fa.std, &fb.std),
            (&fa.turnover, &fb.turnover),
        ] {
            assert_eq!(x[0], y[0]);
            assert!((x[1] - y[2]).abs() < 1e-12 && (x[2] - y[1]).abs() < 1e-12);
        }
        assert!((fa.winner_entropy - fb.winner_entropy).abs() < 1e-12);
    }
}
