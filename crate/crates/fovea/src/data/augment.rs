//! SimCLR-style augmentation pipeline for contrastive view pairs:
//! random resized crop, horizontal flip, color jitter, random grayscale.
//!
//! All randomness comes from an explicit rng handed in by the caller, so
//! a (seed, epoch, image) triple fully determines the produced views.

use ndarray::Array3;
use rand::Rng;

use crate::data::record::ImageRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub out_size: usize,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub hflip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
}

impl AugmentConfig {
    /// SimCLR defaults at the given model input size.
    pub fn simclr(out_size: usize) -> Self {
        AugmentConfig {
            out_size,
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            hflip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
        }
    }

    /// No-op pipeline: both views equal the bilinearly resized original.
    pub fn identity(out_size: usize) -> Self {
        AugmentConfig {
            out_size,
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            hflip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale ({lo}, {hi}) must lie within (0, 1] with lo <= hi"
            )));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!(
                "crop_ratio ({rlo}, {rhi}) must be positive with lo <= hi"
            )));
        }
        for (name, p) in [
            ("hflip_prob", self.hflip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} must be within [0, 1]")));
            }
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} {v} must be nonnegative")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config(format!(
                "hue {} must be within [0, 0.5]",
                self.hue
            )));
        }
        if self.out_size == 0 {
            return Err(Error::Config("out_size must be positive".into()));
        }
        Ok(())
    }
}

/// Two independently augmented views of one source image.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub view_a: Array3<f64>,
    pub view_b: Array3<f64>,
    pub source_id: String,
}

pub fn augment_pair(
    record: &ImageRecord,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<ViewPair> {
    config.validate()?;
    let pixels = record.pixels()?;
    let view_a = augment_once(pixels, config, rng);
    let view_b = augment_once(pixels, config, rng);
    Ok(ViewPair {
        view_a,
        view_b,
        source_id: record.id.clone(),
    })
}

/// One augmented view; exposed for deterministic eval-time resizing too.
pub fn augment_once(pixels: &Array3<f64>, config: &AugmentConfig, rng: &mut impl Rng) -> Array3<f64> {
    let (top, left, ch, cw) = sample_crop(pixels.dim().0, pixels.dim().1, config, rng);
    let mut out = resize_bilinear(pixels, top, left, ch, cw, config.out_size);
    if config.hflip_prob > 0.0 && rng.gen::<f64>() < config.hflip_prob {
        hflip(&mut out);
    }
    if config.jitter_prob > 0.0 && rng.gen::<f64>() < config.jitter_prob {
        color_jitter(&mut out, config, rng);
    }
    if config.grayscale_prob > 0.0 && rng.gen::<f64>() < config.grayscale_prob {
        to_grayscale(&mut out);
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Deterministic center-free resize of the full image (no augmentation),
/// used for evaluation inputs.
pub fn resize_plain(pixels: &Array3<f64>, out_size: usize) -> Array3<f64> {
    let (h, w, _) = pixels.dim();
    resize_bilinear(pixels, 0, 0, h, w, out_size)
}

/// Random resized crop, torchvision-style: sample an area fraction and a
/// log-uniform aspect ratio, retry up to 10 times, then fall back to the
/// full image.
fn sample_crop(
    h: usize,
    w: usize,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (slo, shi) = config.crop_scale;
    let (rlo, rhi) = config.crop_ratio;
    for _ in 0..10 {
        let target = area * if slo == shi { slo } else { rng.gen_range(slo..shi) };
        let ratio = if rlo == rhi {
            rlo
        } else {
            (rng.gen_range(rlo.ln()..rhi.ln())).exp()
        };
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = if ch == h { 0 } else { rng.gen_range(0..=h - ch) };
            let left = if cw == w { 0 } else { rng.gen_range(0..=w - cw) };
            return (top, left, ch, cw);
        }
    }
    (0, 0, h, w)
}

/// Bilinear sampling of the crop `(top, left, ch, cw)` to a square output.
/// Source coordinates use pixel-center alignment, so a full-image crop at
/// equal size is an exact identity.
fn resize_bilinear(
    pixels: &Array3<f64>,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
    out_size: usize,
) -> Array3<f64> {
    let (h, w, c) = pixels.dim();
    let mut out = Array3::<f64>::zeros((out_size, out_size, c));
    let sy = ch as f64 / out_size as f64;
    let sx = cw as f64 / out_size as f64;
    for i in 0..out_size {
        let fy = (top as f64 + (i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for j in 0..out_size {
            let fx = (left as f64 + (j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for k in 0..c {
                let a = pixels[[y0, x0, k]] * (1.0 - wy) * (1.0 - wx)
                    + pixels[[y0, x1, k]] * (1.0 - wy) * wx
                    + pixels[[y1, x0, k]] * wy * (1.0 - wx)
                    + pixels[[y1, x1, k]] * wy * wx;
                out[[i, j, k]] = a;
            }
        }
    }
    out
}

fn hflip(img: &mut Array3<f64>) {
    let (h, w, c) = img.dim();
    for y in 0..h {
        for x in 0..w / 2 {
            for k in 0..c {
                let tmp = img[[y, x, k]];
                img[[y, x, k]] = img[[y, w - 1 - x, k]];
                img[[y, w - 1 - x, k]] = tmp;
            }
        }
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn to_grayscale(img: &mut Array3<f64>) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let l = luma(img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
            for k in 0..3 {
                img[[y, x, k]] = l;
            }
        }
    }
}

/// Brightness/contrast/saturation/hue jitter in random order, blending
/// toward the appropriate target (black, mean gray, per-pixel gray) like
/// the reference image libraries do.
fn color_jitter(img: &mut Array3<f64>, config: &AugmentConfig, rng: &mut impl Rng) {
    let mut order = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    // Factors are drawn in the fixed op order (not application order) so
    // the draw count per jitter call is constant.
    let b = jitter_factor(rng, config.brightness);
    let c = jitter_factor(rng, config.contrast);
    let s = jitter_factor(rng, config.saturation);
    let hshift = if config.hue > 0.0 {
        rng.gen_range(-config.hue..config.hue)
    } else {
        0.0
    };
    for op in order {
        match op {
            0 => {
                if config.brightness > 0.0 {
                    img.mapv_inplace(|v| (v * b).clamp(0.0, 1.0));
                }
            }
            1 => {
                if config.contrast > 0.0 {
                    apply_contrast(img, c);
                }
            }
            2 => {
                if config.saturation > 0.0 {
                    apply_saturation(img, s);
                }
            }
            _ => {
                if config.hue > 0.0 {
                    apply_hue(img, hshift);
                }
            }
        }
    }
}

fn jitter_factor(rng: &mut impl Rng, strength: f64) -> f64 {
    if strength <= 0.0 {
        1.0
    } else {
        rng.gen_range((1.0 - strength).max(0.0)..1.0 + strength)
    }
}

fn apply_contrast(img: &mut Array3<f64>, factor: f64) {
    let (h, w, _) = img.dim();
    let mut mean = 0.0;
    for y in 0..h {
        for x in 0..w {
            mean += luma(img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
        }
    }
    mean /= (h * w) as f64;
    img.mapv_inplace(|v| (factor * v + (1.0 - factor) * mean).clamp(0.0, 1.0));
}

fn apply_saturation(img: &mut Array3<f64>, factor: f64) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let l = luma(img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
            for k in 0..3 {
                let v = factor * img[[y, x, k]] + (1.0 - factor) * l;
                img[[y, x, k]] = v.clamp(0.0, 1.0);
            }
        }
    }
}

fn apply_hue(img: &mut Array3<f64>, shift: f64) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let (hh, ss, vv) = rgb_to_hsv(img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
            let (r, g, b) = hsv_to_rgb((hh + shift).rem_euclid(1.0), ss, vv);
            img[[y, x, 0]] = r;
            img[[y, x, 1]] = g;
            img[[y, x, 2]] = b;
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}
