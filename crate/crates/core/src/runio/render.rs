use std::io;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::substrate::Frame;

pub const ENV_COLOR: [u8; 3] = [48, 48, 48];
const GAMMA: f32 = 2.2;

/// Entity colors: environment dark gray, agent `k` at hue `(k-1)/N` of the
/// circle.
pub fn palette(agents: usize) -> Vec<[u8; 3]> {
    let mut colors = vec![ENV_COLOR];
    for k in 0..agents {
        colors.push(hsv_to_rgb(k as f32 / agents as f32, 0.85, 0.95));
    }
    colors
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// Blend entity colors by contribution weight in linear light.
pub fn render_frame(frame: &Frame) -> RgbImage {
    let linear: Vec<[f32; 3]> = palette(frame.agents)
        .iter()
        .map(|c| c.map(|v| (v as f32 / 255.0).powf(GAMMA)))
        .collect();
    let mut img = RgbImage::new(frame.width as u32, frame.height as u32);
    for (cell, px) in img.pixels_mut().enumerate() {
        let mut acc = [0.0f32; 3];
        for (w, col) in frame.cell_weights(cell).iter().zip(&linear) {
            for ch in 0..3 {
                acc[ch] += w * col[ch];
            }
        }
        *px = Rgb(acc.map(|v| (v.clamp(0.0, 1.0).powf(1.0 / GAMMA) * 255.0).round() as u8));
    }
    img
}

/// Approximate inverse of [`render_frame`]: each pixel goes wholly to the
/// entity with the nearest palette color, and that agent counts as alive.
pub fn frame_from_image(img: &RgbImage, agents: usize) -> Frame {
    let colors = palette(agents);
    let e = agents + 1;
    let cells = (img.width() * img.height()) as usize;
    let mut weights = vec![0.0f32; cells * e];
    let mut alive = vec![0.0f32; cells * agents];
    for (cell, px) in img.pixels().enumerate() {
        let nearest = (0..e)
            .min_by_key(|&k| {
                (0..3)
                    .map(|c| (px[c] as i32 - colors[k][c] as i32).pow(2))
                    .sum::<i32>()
            })
            .unwrap_or(0);
        weights[cell * e + nearest] = 1.0;
        if nearest > 0 {
            alive[cell * agents + nearest - 1] = 1.0;
        }
    }
    Frame {
        height: img.height() as usize,
        width: img.width() as usize,
        agents,
        weights,
        alive,
    }
}

/// Tile images left to right, top to bottom, `columns` per row.
pub fn contact_sheet(images: &[RgbImage], columns: usize) -> RgbImage {
    let Some(first) = images.first() else {
        return RgbImage::new(0, 0);
    };
    let (w, h) = first.dimensions();
    let columns = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(columns);
    let mut sheet = RgbImage::from_pixel(w * columns as u32, h * rows as u32, Rgb(ENV_COLOR));
    for (i, img) in images.iter().enumerate() {
        let (x0, y0) = ((i % columns) as u32 * w, (i / columns) as u32 * h);
        for (x, y, p) in img.enumerate_pixels() {
            if x < w && y < h {
                sheet.put_pixel(x0 + x, y0 + y, *p);
            }
        }
    }
    sheet
}

/// `<run>_t<iteration:06>_s<step:06>.png`; sorts in (t, step) order.
pub fn frame_filename(run_id: &str, iteration: u64, step: u64) -> String {
    format!("{run_id}_t{iteration:06}_s{step:06}.png")
}

pub fn save_png(img: &RgbImage, path: &Path) -> io::Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| io::Error::other(e.to_string()))
}

/// Write every `stride`-th frame, returning the paths written.
pub fn export_frames(
    dir: &Path,
    run_id: &str,
    iteration: u64,
    frames: &[Frame],
    stride: usize,
) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (step, f) in frames.iter().enumerate().step_by(stride.max(1)) {
        let path = dir.join(frame_filename(run_id, iteration, step as u64));
        save_png(&render_frame(f), &path)?;
        written.push(path);
    }
    Ok(written)
}
