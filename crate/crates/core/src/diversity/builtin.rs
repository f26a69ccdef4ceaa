use image::RgbImage;
use rayon::prelude::*;

use super::{normalize, EmbedError, Embedder};

pub const BUILTIN_DIM: usize = 768;

const BLOCKS: usize = 12;
const GRAD_BLOCKS: usize = 8;
const BANDS: usize = 8;
const LAGS: [usize; 4] = [1, 2, 4, 8];

/// Deterministic hand-made image features standing in for a vision encoder:
/// block means of luminance and of each channel, a joint 4x4x4 color
/// histogram, block means of gradient magnitude, and banded autocorrelation
/// of row and column profiles.
#[derive(Clone, Copy, Debug, Default)]
pub struct BuiltinEmbedder;

impl Embedder for BuiltinEmbedder {
    fn name(&self) -> &str {
        "builtin"
    }

    fn dim(&self) -> usize {
        BUILTIN_DIM
    }

    fn embed(&mut self, frames: &[RgbImage]) -> Result<Vec<Vec<f32>>, EmbedError> {
        frames.par_iter().map(builtin_embed).collect()
    }
}

/// Pixel values mapped to [-1, 1].
struct Planes {
    w: usize,
    h: usize,
    rgb: [Vec<f32>; 3],
    luma: Vec<f32>,
}

impl Planes {
    fn new(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut rgb = [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]];
        let mut luma = vec![0.0; w * h];
        for (i, p) in img.pixels().enumerate() {
            let c = p.0.map(|v| v as f32 / 127.5 - 1.0);
            for ch in 0..3 {
                rgb[ch][i] = c[ch];
            }
            luma[i] = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        }
        Self { w, h, rgb, luma }
    }
}

/// Half-open range of the `b`-th of `n` blocks over `len`, never empty.
fn block(b: usize, n: usize, len: usize) -> std::ops::Range<usize> {
    let start = (b * len / n).min(len - 1);
    let end = ((b + 1) * len / n).max(start + 1);
    start..end
}

fn block_means(plane: &[f32], w: usize, h: usize, n: usize, out: &mut Vec<f32>) {
    for by in 0..n {
        for bx in 0..n {
            let (ys, xs) = (block(by, n, h), block(bx, n, w));
            let count = (ys.len() * xs.len()) as f32;
            let sum: f32 = ys
                .flat_map(|y| xs.clone().map(move |x| (y, x)))
                .map(|(y, x)| plane[y * w + x])
                .sum();
            out.push(sum / count);
        }
    }
}

fn autocorrelation(profile: &[f32], lag: usize) -> f32 {
    let n = profile.len();
    let mean = profile.iter().sum::<f32>() / n as f32;
    let var: f32 = profile.iter().map(|v| (v - mean).powi(2)).sum();
    if var <= 1e-12 {
        return 0.0;
    }
    let cov: f32 = (0..n)
        .map(|i| (profile[i] - mean) * (profile[(i + lag) % n] - mean))
        .sum();
    cov / var
}

pub fn builtin_embed(img: &RgbImage) -> Result<Vec<f32>, EmbedError> {
    if img.width() == 0 || img.height() == 0 {
        return Err(EmbedError::Malformed("image has no pixels".into()));
    }
    let p = Planes::new(img);
    let (w, h) = (p.w, p.h);
    let mut z = Vec::with_capacity(BUILTIN_DIM);

    block_means(&p.luma, w, h, BLOCKS, &mut z);
    for ch in &p.rgb {
        block_means(ch, w, h, BLOCKS, &mut z);
    }

    let mut hist = [0f32; 64];
    for px in img.pixels() {
        let [r, g, b] = px.0.map(|v| (v >> 6) as usize);
        hist[r * 16 + g * 4 + b] += 1.0;
    }
    let total = (w * h) as f32;
    z.extend(hist.iter().map(|c| c / total));

    let mut grad = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let c = p.luma[y * w + x];
            let dx = p.luma[y * w + (x + 1) % w] - c;
            let dy = p.luma[((y + 1) % h) * w + x] - c;
            grad[y * w + x] = (dx * dx + dy * dy).sqrt();
        }
    }
    block_means(&grad, w, h, GRAD_BLOCKS, &mut z);

    // Column profile of each horizontal band, then row profile of each
    // vertical band.
    for band in 0..BANDS {
        let ys = block(band, BANDS, h);
        let profile: Vec<f32> = (0..w)
            .map(|x| ys.clone().map(|y| p.luma[y * w + x]).sum::<f32>() / ys.len() as f32)
            .collect();
        z.extend(LAGS.iter().map(|&l| autocorrelation(&profile, l)));
    }
    for band in 0..BANDS {
        let xs = block(band, BANDS, w);
        let profile: Vec<f32> = (0..h)
            .map(|y| xs.clone().map(|x| p.luma[y * w + x]).sum::<f32>() / xs.len() as f32)
            .collect();
        z.extend(LAGS.iter().map(|&l| autocorrelation(&profile, l)));
    }

    debug_assert_eq!(z.len(), BUILTIN_DIM);
    normalize(&mut z);
    Ok(z)
}
