//! Edge-of-chaos metrics: species entropy, ecological persistence, an LZ77
//! compressibility ratio and effective complexity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::entropy_bits;
use crate::substrate::Frame;

pub const LZ_WINDOW: usize = 4096;
pub const LZ_MIN_MATCH: usize = 3;
pub const LZ_MAX_MATCH: usize = 255;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LzError {
    #[error("input is empty")]
    Empty,
    #[error("compressed stream is truncated")]
    Truncated,
    #[error("match at output position {pos} reaches back {offset} bytes")]
    BadOffset { pos: usize, offset: usize },
    #[error("match length {0} is outside the allowed range")]
    BadLength(usize),
}

/// Greedy LZ77. Every group of up to 8 tokens is preceded by a flag byte
/// (bit i set when token i is a match). Literals are one byte; matches are a
/// little-endian u16 offset then a u8 length. Among equally long matches the
/// nearest wins.
pub fn lz77_encode(input: &[u8]) -> Vec<u8> {
    const HASH_BITS: u32 = 15;
    let hash = |p: usize| -> usize {
        let v = u32::from(input[p]) | u32::from(input[p + 1]) << 8 | u32::from(input[p + 2]) << 16;
        (v.wrapping_mul(2_654_435_761) >> (32 - HASH_BITS)) as usize
    };
    let mut head = vec![usize::MAX; 1 << HASH_BITS];
    let mut prev = vec![usize::MAX; input.len()];
    let insert = |p: usize, head: &mut Vec<usize>, prev: &mut Vec<usize>| {
        if p + LZ_MIN_MATCH <= input.len() {
            let h = hash(p);
            prev[p] = head[h];
            head[h] = p;
        }
    };

    let mut out = Vec::with_capacity(input.len() + input.len() / 8 + 1);
    let mut flag_pos = 0;
    let mut tokens = 0;
    let mut pos = 0;
    while pos < input.len() {
        if tokens % 8 == 0 {
            flag_pos = out.len();
            out.push(0);
        }
        let (len, offset) = longest_match(input, pos, &head, &prev, hash);
        if len >= LZ_MIN_MATCH {
            out[flag_pos] |= 1 << (tokens % 8);
            out.extend_from_slice(&(offset as u16).to_le_bytes());
            out.push(len as u8);
            for p in pos..pos + len {
                insert(p, &mut head, &mut prev);
            }
            pos += len;
        } else {
            out.push(input[pos]);
            insert(pos, &mut head, &mut prev);
            pos += 1;
        }
        tokens += 1;
    }
    out
}

fn longest_match(
    input: &[u8],
    pos: usize,
    head: &[usize],
    prev: &[usize],
    hash: impl Fn(usize) -> usize,
) -> (usize, usize) {
    if pos + LZ_MIN_MATCH > input.len() {
        return (0, 0);
    }
    let limit = (input.len() - pos).min(LZ_MAX_MATCH);
    let (mut best, mut best_off) = (0, 0);
    let mut cand = head[hash(pos)];
    while cand != usize::MAX && pos - cand <= LZ_WINDOW {
        let len = input[cand..]
            .iter()
            .zip(&input[pos..pos + limit])
            .take_while(|(a, b)| a == b)
            .count();
        if len > best {
            best = len;
            best_off = pos - cand;
            if len == limit {
                break;
            }
        }
        cand = prev[cand];
    }
    (best, best_off)
}

pub fn lz77_decode(data: &[u8]) -> Result<Vec<u8>, LzError> {
    let mut out = Vec::with_capacity(data.len() * 2);
    let mut i = 0;
    while i < data.len() {
        let flags = data[i];
        i += 1;
        for bit in 0..8 {
            if i >= data.len() {
                break;
            }
            if flags & (1 << bit) == 0 {
                out.push(data[i]);
                i += 1;
                continue;
            }
            let tok = data.get(i..i + 3).ok_or(LzError::Truncated)?;
            let offset = u16::from_le_bytes([tok[0], tok[1]]) as usize;
            let len = tok[2] as usize;
            i += 3;
            if !(LZ_MIN_MATCH..=LZ_MAX_MATCH).contains(&len) {
                return Err(LzError::BadLength(len));
            }
            if offset == 0 || offset > LZ_WINDOW || offset > out.len() {
                return Err(LzError::BadOffset {
                    pos: out.len(),
                    offset,
                });
            }
            let start = out.len() - offset;
            for k in 0..len {
                out.push(out[start + k]);
            }
        }
    }
    Ok(out)
}

/// Compressed over original length, capped at 1.
pub fn lz77_ratio(input: &[u8]) -> Result<f64, LzError> {
    if input.is_empty() {
        return Err(LzError::Empty);
    }
    Ok((lz77_encode(input).len() as f64 / input.len() as f64).min(1.0))
}

/// Entropy in bits of the agents' share of total alive mass; 0 when no agent
/// is alive.
pub fn species_entropy(frame: &Frame) -> f64 {
    let mass = frame.alive_mass();
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    mass.iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| {
            let p = m / total;
            -p * p.log2()
        })
        .sum()
}

pub fn persistence_threshold(agents: usize) -> f64 {
    0.1 * (agents as f64).log2()
}

/// Fraction of entries strictly above `0.1 * log2(agents)`.
pub fn ecological_persistence(entropies: &[f64], agents: usize) -> f64 {
    persistence_with_threshold(entropies, persistence_threshold(agents))
}

pub fn persistence_with_threshold(entropies: &[f64], eps: f64) -> f64 {
    if entropies.is_empty() {
        return 0.0;
    }
    entropies.iter().filter(|&&h| h > eps).count() as f64 / entropies.len() as f64
}

/// How a frame becomes the byte string fed to the compressor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Symbolization {
    /// Winner indices packed at `ceil(log2(N+1))` bits each, row-major, LSB
    /// first.
    #[default]
    PackedWinner,
    /// One byte per winner index.
    ByteWinner,
    /// Rendered 8-bit RGB.
    Rgb,
}

pub fn bits_per_symbol(alphabet: usize) -> u32 {
    (usize::BITS - alphabet.saturating_sub(1).leading_zeros()).max(1)
}

pub fn pack_symbols(symbols: &[usize], alphabet: usize) -> Vec<u8> {
    let bits = bits_per_symbol(alphabet);
    let mut out = Vec::with_capacity((symbols.len() * bits as usize).div_ceil(8));
    let (mut acc, mut filled) = (0u32, 0u32);
    for &s in symbols {
        acc |= (s as u32) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

/// Normalized entropy times one minus compressibility of a symbol grid.
/// `bytes` is what the compressor sees; the entropy uses `symbols` over an
/// alphabet of `alphabet` values.
pub fn effective_complexity_of(symbols: &[usize], alphabet: usize, bytes: &[u8]) -> f64 {
    if symbols.is_empty() || alphabet < 2 || bytes.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0u64; alphabet];
    for &s in symbols {
        counts[s] += 1;
    }
    let h = (entropy_bits(&counts) / (alphabet as f64).log2()).clamp(0.0, 1.0);
    if h == 0.0 {
        return 0.0;
    }
    let ratio = lz77_ratio(bytes).unwrap_or(1.0);
    h * (1.0 - ratio)
}

/// Effective complexity of a frame's winner map.
pub fn effective_complexity(frame: &Frame, mode: Symbolization) -> f64 {
    let alphabet = frame.entities();
    match mode {
        Symbolization::PackedWinner => {
            let w = frame.winner_map();
            effective_complexity_of(&w, alphabet, &pack_symbols(&w, alphabet))
        }
        Symbolization::ByteWinner => {
            let w = frame.winner_map();
            let bytes: Vec<u8> = w.iter().map(|&s| s as u8).collect();
            effective_complexity_of(&w, alphabet, &bytes)
        }
        Symbolization::Rgb => rgb_complexity(&crate::runio::render_frame(frame).into_raw()),
    }
}

/// Effective complexity of raw RGB bytes: byte-histogram entropy over 8 bits.
pub fn rgb_complexity(rgb: &[u8]) -> f64 {
    let symbols: Vec<usize> = rgb.iter().map(|&b| b as usize).collect();
    effective_complexity_of(&symbols, 256, rgb)
}

/// Per-frame metrics plus their summaries for one trajectory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub entropy: Vec<f64>,
    pub complexity: Vec<f64>,
    pub persistence: f64,
    pub entropy_mean: f64,
    pub entropy_std: f64,
    pub complexity_mean: f64,
    pub complexity_std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ComplexityReport {
    pub fn from_series(entropy: Vec<f64>, complexity: Vec<f64>, agents: usize) -> Self {
        let (entropy_mean, entropy_std) = mean_std(&entropy);
        let (complexity_mean, complexity_std) = mean_std(&complexity);
        Self {
            persistence: ecological_persistence(&entropy, agents),
            entropy,
            complexity,
            entropy_mean,
            entropy_std,
            complexity_mean,
            complexity_std,
        }
    }
}

pub fn analyze_frames(frames: &[Frame], mode: Symbolization) -> ComplexityReport {
    let agents = frames.first().map_or(1, |f| f.agents);
    let entropy = frames.iter().map(species_entropy).collect();
    let complexity = frames
        .iter()
        .map(|f| effective_complexity(f, mode))
        .collect();
    ComplexityReport::from_series(entropy, complexity, agents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn winner_frame(h: usize, w: usize, agents: usize, map: &[usize]) -> Frame {
        let mut f = Frame::uniform(h, w, agents, 0);
        f.weights.iter_mut().for_each(|v| *v = 0.0);
        for (c, &s) in map.iter().enumerate() {
            f.weights[c * (agents + 1) + s] = 1.0;
        }
        f
    }

    #[test]
    fn repeated_bytes_compress_well() {
        let r = lz77_ratio(&[7u8; 10_000]).unwrap();
        assert!(r < 0.05, "{r}");
    }

    #[test]
    fn random_bytes_do_not_compress() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bytes: Vec<u8> = (0..10_000).map(|_| rng.gen()).collect();
        assert!(lz77_encode(&bytes).len() >= bytes.len());
        assert_eq!(lz77_ratio(&bytes).unwrap(), 1.0);
        assert_eq!(lz77_ratio(&[1]).unwrap(), 1.0);
        assert_eq!(lz77_ratio(&[]), Err(LzError::Empty));
    }

    #[test]
    fn hand_encoding() {
        // "abcabcabc": three literals then one 6-byte match at offset 3.
        let enc = lz77_encode(b"abcabcabc");
        assert_eq!(enc, vec![0b1000, b'a', b'b', b'c', 3, 0, 6]);
        assert_eq!(lz77_decode(&enc).unwrap(), b"abcabcabc");
    }

    #[test]
    fn decoder_rejects_bad_streams() {
        assert_eq!(lz77_decode(&[1, 5, 0]), Err(LzError::Truncated));
        assert!(matches!(
            lz77_decode(&[1, 5, 0, 3]),
            Err(LzError::BadOffset { .. })
        ));
        assert_eq!(lz77_decode(&[2, b'a', 1, 0, 2]), Err(LzError::BadLength(2)));
    }

    #[test]
    fn entropy_cases() {
        let mut f = Frame::uniform(2, 2, 2, 1);
        assert_eq!(species_entropy(&f), 0.0);
        f.alive = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        assert!((species_entropy(&f) - 1.0).abs() < 1e-12);
        assert_eq!(species_entropy(&Frame::uniform(2, 2, 2, 0)), 0.0);
    }

    #[test]
    fn persistence_threshold_is_strict() {
        let eps = persistence_threshold(7);
        assert!((eps - 0.280_735).abs() < 1e-6);
        assert_eq!(ecological_persistence(&[0.28, 0.29], 7), 0.5);
        assert_eq!(ecological_persistence(&[0.0; 4], 3), 0.0);
    }

    #[test]
    fn packing() {
        assert_eq!(bits_per_symbol(2), 1);
        assert_eq!(bits_per_symbol(4), 2);
        assert_eq!(bits_per_symbol(5), 3);
        assert_eq!(pack_symbols(&[1, 2, 3, 0, 1], 4), vec![0b0011_1001, 0b01]);
    }

    #[test]
    fn random_maps_score_near_zero_for_every_alphabet() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=7usize {
            let map: Vec<usize> = (0..32 * 32).map(|_| rng.gen_range(0..=n)).collect();
            let c =
                effective_complexity(&winner_frame(32, 32, n, &map), Symbolization::PackedWinner);
            assert!(c < 0.05, "N={n}: {c}");
        }
    }

    #[test]
    fn complexity_orders() {
        let (h, w, n) = (32, 32, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let random: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..=n)).collect();
        let constant = vec![2; h * w];
        let mut half = constant.clone();
        half[h * w / 2..].copy_from_slice(&random[h * w / 2..]);
        for mode in [Symbolization::PackedWinner] {
            let c0 = effective_complexity(&winner_frame(h, w, n, &constant), mode);
            let c1 = effective_complexity(&winner_frame(h, w, n, &random), mode);
            let c2 = effective_complexity(&winner_frame(h, w, n, &half), mode);
            assert_eq!(c0, 0.0);
            assert!(c1 < 0.05, "{c1}");
            assert!(c2 > c1 && c2 > c0, "{c2}");
        }
    }
}
