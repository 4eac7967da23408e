//! Synthetic fundus-like corpus with planted lesions.
//!
//! Each image is a dark frame holding a reddish disc (the "fundus") with
//! a brighter optic-disc-like spot, plus `lesions_per_grade[grade]` small
//! bright or dark blobs whose exact pixels are recorded in the lesion
//! mask. Grade counts must increase strictly with grade so that mask area
//! is a usable oracle for lesion-detection metrics: a grade-g image has
//! strictly more lesion pixels in expectation than a grade-(g-1) image.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::data::record::{DatasetManifest, ImageRecord};
use crate::error::{Error, Result};
use crate::seeds::{self, tag};

/// Smallest supported image size: four times the smallest encoder
/// receptive field (9 pixels).
pub const MIN_IMAGE_SIZE: usize = 36;

/// The built-in lesion-count progression for `n_classes` grades: grade g
/// plants g(g+7)/2 lesions (0, 4, 9, 15, 22, ...). Strictly increasing,
/// so grade stays recoverable from lesion area alone.
pub fn default_lesions(n_classes: usize) -> Vec<usize> {
    (0..n_classes).map(|g| g * (g + 7) / 2).collect()
}

pub fn generate_synthetic_dataset(
    n_images: usize,
    n_classes: usize,
    image_size: usize,
    lesions_per_grade: &[usize],
    seed: u64,
) -> Result<DatasetManifest> {
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "synthetic dataset needs n_classes >= 2, got {n_classes}"
        )));
    }
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::Config(format!(
            "image_size {image_size} too small; need at least {MIN_IMAGE_SIZE} \
             (4x the smallest encoder receptive field)"
        )));
    }
    if lesions_per_grade.len() != n_classes {
        return Err(Error::Config(format!(
            "lesions_per_grade has {} entries for {} classes",
            lesions_per_grade.len(),
            n_classes
        )));
    }
    if lesions_per_grade.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(
            "lesions_per_grade must be strictly increasing with grade".into(),
        ));
    }
    if n_images == 0 {
        return Err(Error::Config("n_images must be positive".into()));
    }

    let mut records = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let participant = i / 2; // two images per participant
        let grade = participant % n_classes;
        let mut rng = seeds::rng_for(seed, &[tag::SYNTH_IMAGE, i as u64]);
        let (pixels, mask) =
            render_image(image_size, lesions_per_grade[grade], &mut rng);
        records.push(ImageRecord::from_memory(
            format!("img_{i:05}.png"),
            format!("p{participant:04}"),
            Some(grade),
            pixels,
            Some(mask),
        )?);
    }
    DatasetManifest::new("synthetic", n_classes, records)
}

fn render_image(size: usize, n_lesions: usize, rng: &mut impl Rng) -> (Array3<f64>, Array2<bool>) {
    let s = size as f64;
    let mut px = Array3::<f64>::from_elem((size, size, 3), 0.04);
    let mut mask = Array2::<bool>::default((size, size));

    // Fundus disc with jittered center/radius and a radial falloff.
    let cy = s / 2.0 + rng.gen_range(-s / 16.0..s / 16.0);
    let cx = s / 2.0 + rng.gen_range(-s / 16.0..s / 16.0);
    let radius = 0.42 * s * rng.gen_range(0.9..1.0);
    let tint = rng.gen_range(0.9..1.1);
    let base = [0.52 * tint, 0.27 * tint, 0.16 * tint];

    // Optic-disc-like bright spot offset from the center.
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let od_y = cy + 0.45 * radius * angle.sin();
    let od_x = cx + 0.45 * radius * angle.cos();
    let od_r = 0.14 * radius;

    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let d = (dy * dy + dx * dx).sqrt();
            if d <= radius {
                let falloff = 1.0 - 0.35 * (d / radius).powi(2);
                for c in 0..3 {
                    px[[y, x, c]] = base[c] * falloff;
                }
                // Bright spot with a smooth edge.
                let od_d = ((y as f64 - od_y).powi(2) + (x as f64 - od_x).powi(2)).sqrt();
                if od_d < od_r {
                    let t = 1.0 - (od_d / od_r).powi(2);
                    let spot = [0.88, 0.78, 0.50];
                    for c in 0..3 {
                        px[[y, x, c]] += (spot[c] - px[[y, x, c]]) * 0.8 * t;
                    }
                }
            }
        }
    }

    // Lesions: small bright or dark circles inside the disc; the mask
    // marks their exact pixels.
    for _ in 0..n_lesions {
        let r = rng.gen_range(1.5..3.0);
        let rho = rng.gen_range(0.0f64..1.0).sqrt() * (radius - r - 1.0).max(1.0);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let ly = cy + rho * theta.sin();
        let lx = cx + rho * theta.cos();
        let bright = rng.gen_bool(0.5);
        let delta = if bright {
            [0.30, 0.26, 0.10]
        } else {
            [-0.20, -0.14, -0.06]
        };
        let y0 = (ly - r).floor().max(0.0) as usize;
        let y1 = ((ly + r).ceil() as usize + 1).min(size);
        let x0 = (lx - r).floor().max(0.0) as usize;
        let x1 = ((lx + r).ceil() as usize + 1).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((y as f64 - ly).powi(2) + (x as f64 - lx).powi(2)).sqrt();
                if d <= r {
                    for c in 0..3 {
                        px[[y, x, c]] += delta[c];
                    }
                    mask[[y, x]] = true;
                }
            }
        }
    }

    // Sensor-like noise, then clip.
    for v in px.iter_mut() {
        *v += rng.gen_range(-0.01..0.01);
        *v = v.clamp(0.0, 1.0);
    }
    (px, mask)
}
