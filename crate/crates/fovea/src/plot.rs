//! PNG rendering of embedding maps and evidence overlays.
//!
//! Rendering is pure rasterization from the inputs — no timestamps, no
//! system fonts — so the same inputs always produce byte-identical files.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2};

use crate::classifier::EvidenceMaps;
use crate::error::{Error, Result};
use crate::metrics::EmbeddingDataset;

/// Scatter plots are always this many pixels square.
pub const SCATTER_SIZE: u32 = 800;

const POINT_RADIUS: i64 = 4;
const MARGIN: f64 = 0.06;

/// Okabe-Ito palette: distinguishable under common color-vision
/// deficiencies.
const PALETTE: [[u8; 3]; 8] = [
    [230, 159, 0],
    [86, 180, 233],
    [0, 158, 115],
    [240, 228, 66],
    [0, 114, 178],
    [213, 94, 0],
    [204, 121, 167],
    [0, 0, 0],
];

const UNLABELED_COLOR: [u8; 3] = [160, 160, 160];

pub fn class_color(label: usize) -> [u8; 3] {
    PALETTE[label % PALETTE.len()]
}

/// 5x7 bitmap glyphs (one byte per column, bit 0 = top row) for the
/// characters the legends need.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0x3e, 0x51, 0x49, 0x45, 0x3e],
        '1' => [0x00, 0x42, 0x7f, 0x40, 0x00],
        '2' => [0x42, 0x61, 0x51, 0x49, 0x46],
        '3' => [0x21, 0x41, 0x45, 0x4b, 0x31],
        '4' => [0x18, 0x14, 0x12, 0x7f, 0x10],
        '5' => [0x27, 0x45, 0x45, 0x45, 0x39],
        '6' => [0x3c, 0x4a, 0x49, 0x49, 0x30],
        '7' => [0x01, 0x71, 0x09, 0x05, 0x03],
        '8' => [0x36, 0x49, 0x49, 0x49, 0x36],
        '9' => [0x06, 0x49, 0x49, 0x29, 0x1e],
        'a' => [0x20, 0x54, 0x54, 0x54, 0x78],
        'b' => [0x7f, 0x48, 0x44, 0x44, 0x38],
        'c' => [0x38, 0x44, 0x44, 0x44, 0x20],
        'd' => [0x38, 0x44, 0x44, 0x48, 0x7f],
        'e' => [0x38, 0x54, 0x54, 0x54, 0x18],
        'f' => [0x08, 0x7e, 0x09, 0x01, 0x02],
        'g' => [0x0c, 0x52, 0x52, 0x52, 0x3e],
        'h' => [0x7f, 0x08, 0x04, 0x04, 0x78],
        'i' => [0x00, 0x44, 0x7d, 0x40, 0x00],
        'j' => [0x20, 0x40, 0x44, 0x3d, 0x00],
        'k' => [0x7f, 0x10, 0x28, 0x44, 0x00],
        'l' => [0x00, 0x41, 0x7f, 0x40, 0x00],
        'm' => [0x7c, 0x04, 0x18, 0x04, 0x78],
        'n' => [0x7c, 0x08, 0x04, 0x04, 0x78],
        'o' => [0x38, 0x44, 0x44, 0x44, 0x38],
        'p' => [0x7c, 0x14, 0x14, 0x14, 0x08],
        'q' => [0x08, 0x14, 0x14, 0x18, 0x7c],
        'r' => [0x7c, 0x08, 0x04, 0x04, 0x08],
        's' => [0x48, 0x54, 0x54, 0x54, 0x20],
        't' => [0x04, 0x3f, 0x44, 0x40, 0x20],
        'u' => [0x3c, 0x40, 0x40, 0x20, 0x7c],
        'v' => [0x1c, 0x20, 0x40, 0x20, 0x1c],
        'w' => [0x3c, 0x40, 0x30, 0x40, 0x3c],
        'x' => [0x44, 0x28, 0x10, 0x28, 0x44],
        'y' => [0x0c, 0x50, 0x50, 0x50, 0x3c],
        'z' => [0x44, 0x64, 0x54, 0x4c, 0x44],
        _ => [0x00, 0x00, 0x00, 0x00, 0x00],
    }
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let cols = glyph(ch.to_ascii_lowercase());
        for (dx, col) in cols.iter().enumerate() {
            for dy in 0..7 {
                if col >> dy & 1 == 1 {
                    let (px, py) = (cx + dx as u32, y + dy);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, Rgb(color));
                    }
                }
            }
        }
        cx += 6;
    }
}

fn draw_disc(img: &mut RgbImage, cx: i64, cy: i64, r: i64, color: [u8; 3]) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                    img.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: [u8; 3]) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

/// Axis-free scatter of a 2-D embedding, colored by label, with a
/// legend in the top-right corner. Output is always
/// [`SCATTER_SIZE`] x [`SCATTER_SIZE`].
pub fn scatter_plot(data: &EmbeddingDataset, path: &Path) -> Result<()> {
    if data.points.ncols() != 2 {
        return Err(Error::Data(format!(
            "scatter plot needs 2-D points, got {}-D",
            data.points.ncols()
        )));
    }
    if data.points.nrows() == 0 {
        return Err(Error::Data("nothing to plot: embedding is empty".into()));
    }
    let mut img = RgbImage::from_pixel(SCATTER_SIZE, SCATTER_SIZE, Rgb([255, 255, 255]));

    // Data bounds with a margin; degenerate extents widen to a unit box.
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in data.points.rows() {
        x0 = x0.min(row[0]);
        x1 = x1.max(row[0]);
        y0 = y0.min(row[1]);
        y1 = y1.max(row[1]);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad_x = (x1 - x0) * MARGIN;
    let pad_y = (y1 - y0) * MARGIN;
    let (x0, x1, y0, y1) = (x0 - pad_x, x1 + pad_x, y0 - pad_y, y1 + pad_y);
    let size = SCATTER_SIZE as f64;

    for (i, row) in data.points.rows().into_iter().enumerate() {
        let px = ((row[0] - x0) / (x1 - x0) * size).round() as i64;
        // Image y grows downward; data y grows upward.
        let py = ((y1 - row[1]) / (y1 - y0) * size).round() as i64;
        let color = match data.labels[i] {
            Some(l) => class_color(l),
            None => UNLABELED_COLOR,
        };
        draw_disc(&mut img, px, py, POINT_RADIUS, color);
    }

    // Legend: one row per distinct label, unlabeled last.
    let mut classes: Vec<usize> = data.labels.iter().flatten().copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let has_unlabeled = data.labels.iter().any(|l| l.is_none());
    let rows = classes.len() + usize::from(has_unlabeled);
    let row_h = 14u32;
    let legend_w = 110u32;
    let lx = SCATTER_SIZE - legend_w - 8;
    let ly = 8u32;
    fill_rect(&mut img, lx, ly, legend_w, rows as u32 * row_h + 6, [245, 245, 245]);
    let mut row = 0u32;
    for &c in &classes {
        let y = ly + 4 + row * row_h;
        fill_rect(&mut img, lx + 4, y, 9, 9, class_color(c));
        draw_text(&mut img, lx + 18, y + 1, &format!("grade {c}"), [30, 30, 30]);
        row += 1;
    }
    if has_unlabeled {
        let y = ly + 4 + row * row_h;
        fill_rect(&mut img, lx + 4, y, 9, 9, UNLABELED_COLOR);
        draw_text(&mut img, lx + 18, y + 1, "unlabeled", [30, 30, 30]);
    }

    save_png(&img, path)
}

/// Bilinear sample of the evidence grid at image pixel (y, x), using the
/// patch centers as grid anchors.
fn sample_evidence(
    ev: &ArrayView2<'_, f64>,
    center0: f64,
    stride: f64,
    y: f64,
    x: f64,
) -> f64 {
    let (h, w) = ev.dim();
    let gy = ((y - center0) / stride).clamp(0.0, (h - 1) as f64);
    let gx = ((x - center0) / stride).clamp(0.0, (w - 1) as f64);
    let (i0, j0) = (gy.floor() as usize, gx.floor() as usize);
    let (i1, j1) = ((i0 + 1).min(h - 1), (j0 + 1).min(w - 1));
    let (fy, fx) = (gy - i0 as f64, gx - j0 as f64);
    ev[[i0, j0]] * (1.0 - fy) * (1.0 - fx)
        + ev[[i1, j0]] * fy * (1.0 - fx)
        + ev[[i0, j1]] * (1.0 - fy) * fx
        + ev[[i1, j1]] * fy * fx
}

const CONTOUR_COLOR: [u8; 3] = [0, 255, 128];

/// Render one image with a translucent heat layer for one class's
/// evidence (red where the patch argues for the class, blue against)
/// and, when a mask with any lesion pixels is given, a contour around
/// the annotated lesions. An absent or empty mask draws heat only.
pub fn evidence_overlay(
    pixels: &Array3<f64>,
    maps: &EvidenceMaps,
    image_index: usize,
    class: usize,
    mask: Option<&Array2<bool>>,
    path: &Path,
) -> Result<()> {
    let (h, w, c) = pixels.dim();
    if c != 3 {
        return Err(Error::Data(format!("overlay needs RGB pixels, got {c} channels")));
    }
    if (h, w) != maps.image_hw {
        return Err(crate::error::shape_error(maps.image_hw, (h, w)));
    }
    if image_index >= maps.values.shape()[0] || class >= maps.values.shape()[3] {
        return Err(Error::Data(format!(
            "no evidence map at image {image_index}, class {class}"
        )));
    }
    if let Some(m) = mask {
        if m.dim() != (h, w) {
            return Err(crate::error::shape_error((h, w), m.dim()));
        }
    }
    let ev = maps.class_map(image_index, class);
    let scale = ev.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let center0 = maps.geometry.center0 as f64;
    let stride = maps.geometry.stride as f64;

    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let base = [
                pixels[[y, x, 0]] * 255.0,
                pixels[[y, x, 1]] * 255.0,
                pixels[[y, x, 2]] * 255.0,
            ];
            let mut out = base;
            if scale > 0.0 {
                let v = sample_evidence(&ev, center0, stride, y as f64, x as f64) / scale;
                let heat = if v >= 0.0 {
                    [255.0, 40.0, 40.0]
                } else {
                    [40.0, 80.0, 255.0]
                };
                let alpha = 0.55 * v.abs();
                for ch in 0..3 {
                    out[ch] = base[ch] * (1.0 - alpha) + heat[ch] * alpha;
                }
            }
            img.put_pixel(
                x as u32,
                y as u32,
                Rgb([
                    out[0].round().clamp(0.0, 255.0) as u8,
                    out[1].round().clamp(0.0, 255.0) as u8,
                    out[2].round().clamp(0.0, 255.0) as u8,
                ]),
            );
        }
    }

    if let Some(m) = mask {
        for y in 0..h {
            for x in 0..w {
                if !m[[y, x]] {
                    continue;
                }
                // Boundary pixel: some 4-neighbor is outside the mask.
                let boundary = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(
                    |&(dy, dx)| {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        nx < 0
                            || ny < 0
                            || ny >= h as i64
                            || nx >= w as i64
                            || !m[[ny as usize, nx as usize]]
                    },
                );
                if boundary {
                    img.put_pixel(x as u32, y as u32, Rgb(CONTOUR_COLOR));
                }
            }
        }
    }

    save_png(&img, path)
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(Error::from)
}
