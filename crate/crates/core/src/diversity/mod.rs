//! Cross-world visual diversity: embed sampled frames, then score each world
//! by its time-averaged median cosine distance to the others.

mod builtin;
mod remote;

use std::time::Duration;

use image::RgbImage;
use thiserror::Error;

pub use builtin::{builtin_embed, BuiltinEmbedder, BUILTIN_DIM};
pub use remote::{
    decode_png_base64, encode_png_base64, EmbedRequest, EmbedResponse, Handshake, RemoteEmbedder,
    ENDPOINT_ENV, MAX_BATCH, PROTOCOL_VERSION,
};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad message: {0}")]
    Json(#[from] serde_json::Error),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("service error: {0}")]
    Service(String),
    #[error("malformed image: {0}")]
    Malformed(String),
}

pub trait Embedder: Send {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// One L2-normalized vector of length `dim()` per frame.
    fn embed(&mut self, frames: &[RgbImage]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// The remote service at `endpoint` (or `PETRI_EMBED_ENDPOINT`, which takes
/// precedence), else the builtin features. Connection failures fall back to
/// builtin with a warning.
pub fn connect_embedder(endpoint: Option<&str>, timeout: Duration) -> Box<dyn Embedder> {
    let attempt = RemoteEmbedder::from_env(timeout)
        .or_else(|| endpoint.map(|addr| RemoteEmbedder::connect(addr, timeout)));
    match attempt {
        Some(Ok(remote)) => {
            log::info!("using embedder {} (dim {})", remote.name(), remote.dim());
            Box::new(remote)
        }
        Some(Err(e)) => {
            log::warn!("embedding service unavailable ({e}); falling back to builtin features");
            Box::new(BuiltinEmbedder)
        }
        None => Box::new(BuiltinEmbedder),
    }
}

pub(crate) fn normalize(z: &mut [f32]) {
    let n = z.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if n > 0.0 {
        z.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
    }
}

/// `1 - <a, b>` for unit vectors.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    1.0 - a
        .iter()
        .zip(b)
        .map(|(x, y)| *x as f64 * *y as f64)
        .sum::<f64>()
}

/// Median with the even-count midpoint convention; `values` is reordered.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Diversity from a `[t][i][j]` stack of pairwise distance matrices.
pub fn diversity_from_distances(distances: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let p = distances.first().map_or(0, Vec::len);
    if p < 2 || distances.is_empty() {
        return vec![0.0; p];
    }
    let t = distances.len() as f64;
    let mut scores = vec![0.0; p];
    let mut row = Vec::with_capacity(p - 1);
    for d in distances {
        for (i, s) in scores.iter_mut().enumerate() {
            row.clear();
            row.extend((0..p).filter(|&j| j != i).map(|j| d[i][j]));
            *s += median(&mut row) / t;
        }
    }
    scores
}

/// `embeddings[i][t]` is world i's embedding at sample t. Every world must
/// have the same number of samples.
pub fn diversity_scores(embeddings: &[Vec<Vec<f32>>]) -> Vec<f64> {
    let p = embeddings.len();
    if p < 2 {
        if p == 1 {
            log::debug!("diversity needs two worlds; scoring 0");
        }
        return vec![0.0; p];
    }
    let t = embeddings.iter().map(Vec::len).min().unwrap_or(0);
    let distances: Vec<Vec<Vec<f64>>> = (0..t)
        .map(|s| {
            (0..p)
                .map(|i| {
                    (0..p)
                        .map(|j| cosine_distance(&embeddings[i][s], &embeddings[j][s]))
                        .collect()
                })
                .collect()
        })
        .collect();
    diversity_from_distances(&distances)
}

/// `samples` frame indices spread evenly over a trajectory of `len` frames,
/// ending on the last one. With `len == samples * stride` this picks every
/// `stride`-th frame.
pub fn sample_indices(len: usize, samples: usize) -> Vec<usize> {
    if len == 0 || samples == 0 {
        return Vec::new();
    }
    (1..=samples)
        .map(|s| ((s * len).div_ceil(samples)).max(1) - 1)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_matrix() {
        let d = vec![vec![
            vec![0.0, 0.82, 0.77],
            vec![0.82, 0.0, 0.29],
            vec![0.77, 0.29, 0.0],
        ]];
        let s = diversity_from_distances(&d);
        for (got, want) in s.iter().zip([0.795, 0.555, 0.53]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn shared_and_orthogonal_embeddings() {
        let z = vec![1.0, 0.0];
        let same = vec![vec![z.clone(); 3]; 4];
        assert!(diversity_scores(&same).iter().all(|&v| v.abs() < 1e-12));
        let orth = vec![vec![vec![1.0, 0.0]; 2], vec![vec![0.0, 1.0]; 2]];
        assert_eq!(diversity_scores(&orth), vec![1.0, 1.0]);
        assert_eq!(diversity_scores(&orth[..1]), vec![0.0]);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn sampling_positions() {
        assert_eq!(
            sample_indices(48, 12),
            (0..12).map(|s| 4 * s + 3).collect::<Vec<_>>()
        );
        assert_eq!(sample_indices(4, 4), vec![0, 1, 2, 3]);
        assert_eq!(sample_indices(2, 4), vec![0, 0, 1, 1]);
        assert_eq!(sample_indices(100, 3), vec![33, 66, 99]);
        assert!(sample_indices(0, 3).is_empty());
    }
}
