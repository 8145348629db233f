//! Seeded synthetic mammogram-like images: noisy smooth backgrounds, blank
//! (normal), soft Gaussian blobs (benign proxy) and spiculated stars
//! (malignant proxy), plus a mini-MIAS style info file. Also a generic
//! shape task for backbone pretraining.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::image::GrayImage;
use crate::mias::{Abnormality, MiasRecord, Severity, Tissue};
use crate::pgm::{write_pgm, PgmError};
use crate::rng::{derive_seed, SplitMix64};

pub const INFO_FILE: &str = "Info.txt";
const MAX_VAL: u16 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub noise_std: f64,
    /// Lesion centres are drawn from the central square covering this
    /// fraction of each side (kept clear of the border).
    pub center_spread: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { count: 120, size: 128, seed: 7, noise_std: 6.0, center_spread: 0.25 }
    }
}

/// Synthetic class of the `i`-th image: cycles normal, benign, malignant.
fn class_of(i: usize) -> (Abnormality, Severity) {
    match i % 3 {
        0 => (Abnormality::Norm, Severity::Normal),
        1 => (Abnormality::Circ, Severity::Benign),
        _ => (Abnormality::Spic, Severity::Malignant),
    }
}

/// Row index in image coordinates for an info-file y (origin bottom-left).
pub fn info_y_to_row(y: u32, height: usize) -> usize {
    height - 1 - y as usize
}

pub fn row_to_info_y(row: usize, height: usize) -> u32 {
    (height - 1 - row) as u32
}

fn background(rng: &mut SplitMix64, size: usize, noise_std: f64) -> Vec<f64> {
    let base = rng.uniform(70.0, 100.0);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| (rng.uniform(0.5, 2.5), rng.uniform(0.0, 2.0 * PI), rng.uniform(0.0, 2.0 * PI), rng.uniform(3.0, 8.0)))
        .collect();
    let s = size as f64;
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s, y as f64 / s);
            let smooth: f64 = waves.iter().map(|&(f, a, b, amp)| amp * (2.0 * PI * f * (u * a.cos() + v * a.sin()) + b).sin()).sum();
            px.push(base + smooth + rng.normal() * noise_std);
        }
    }
    px
}

fn paint_blob(px: &mut [f64], size: usize, cx: f64, cy: f64, sigma: f64, amp: f64) {
    for y in 0..size {
        for x in 0..size {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            px[y * size + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

/// Dense core with tapering spicules radiating from it.
fn paint_star(px: &mut [f64], size: usize, cx: f64, cy: f64, core: f64, length: f64, angles: &[f64], amp: f64) {
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let r = (dx * dx + dy * dy).sqrt();
            let mut v: f64 = if r <= core { 1.0 } else { (-(r - core).powi(2) / 2.0).exp() };
            if r > 0.0 && r <= length {
                for &a in angles {
                    let along = dx * a.cos() + dy * a.sin();
                    if along <= 0.0 {
                        continue;
                    }
                    let across = (-dx * a.sin() + dy * a.cos()).abs();
                    let half_width = 2.5 * (1.0 - along / length) + 0.8;
                    if across <= half_width {
                        v = v.max(0.85 * (1.0 - 0.4 * along / length));
                    }
                }
            }
            px[y * size + x] += amp * v;
        }
    }
}

fn center_range(s: f64, margin: f64, spread: f64) -> (f64, f64) {
    let half = s * spread.clamp(0.0, 1.0) / 2.0;
    let lo = (s / 2.0 - half).max(margin);
    let hi = (s / 2.0 + half).min(s - margin);
    if lo <= hi {
        (lo, hi)
    } else {
        (s / 2.0, s / 2.0)
    }
}

fn finish(size: usize, px: &[f64]) -> GrayImage {
    GrayImage::from_f64(size, size, MAX_VAL, px).expect("square image")
}

/// Generate the `i`-th synthetic case.
pub fn synthetic_case(cfg: &SyntheticConfig, i: usize) -> (MiasRecord, GrayImage) {
    let size = cfg.size;
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, i as u64));
    let mut px = background(&mut rng, size, cfg.noise_std);
    let (abnormality, severity) = class_of(i);
    let tissue = [Tissue::Fatty, Tissue::FattyGlandular, Tissue::DenseGlandular][rng.below(3) as usize];
    let s = size as f64;
    let (center, radius) = match abnormality {
        Abnormality::Norm => (None, None),
        Abnormality::Circ => {
            let sigma = s * rng.uniform(0.06, 0.09);
            let (lo, hi) = center_range(s, 2.5 * sigma, cfg.center_spread);
            let (cx, cy) = (rng.uniform(lo, hi).round(), rng.uniform(lo, hi).round());
            paint_blob(&mut px, size, cx, cy, sigma, rng.uniform(80.0, 110.0));
            (Some((cx as u32, row_to_info_y(cy as usize, size))), Some((2.0 * sigma).round() as u32))
        }
        _ => {
            let core = s * rng.uniform(0.04, 0.055);
            let length = s * rng.uniform(0.2, 0.26);
            let rays = 7 + rng.below(5) as usize;
            let offset = rng.uniform(0.0, 2.0 * PI);
            let angles: Vec<f64> =
                (0..rays).map(|k| offset + 2.0 * PI * k as f64 / rays as f64 + rng.uniform(-0.15, 0.15)).collect();
            let (lo, hi) = center_range(s, length + 2.0, cfg.center_spread);
            let (cx, cy) = (rng.uniform(lo, hi).round(), rng.uniform(lo, hi).round());
            paint_star(&mut px, size, cx, cy, core, length, &angles, rng.uniform(80.0, 105.0));
            (Some((cx as u32, row_to_info_y(cy as usize, size))), Some(length.round() as u32))
        }
    };
    let record = MiasRecord { id: format!("syn{:03}", i + 1), tissue, abnormality, severity, center, radius };
    (record, finish(size, &px))
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Vec<(MiasRecord, GrayImage)> {
    use rayon::prelude::*;
    (0..cfg.count).into_par_iter().map(|i| synthetic_case(cfg, i)).collect()
}

pub fn info_text(records: &[MiasRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

/// Write `{id}.pgm` files plus the info file into `dir`.
pub fn write_synthetic(dir: &Path, cfg: &SyntheticConfig) -> Result<Vec<MiasRecord>, PgmError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| PgmError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let cases = generate_synthetic(cfg);
    for (rec, img) in &cases {
        write_pgm(&crate::mias::image_path(dir, &rec.id), img)?;
    }
    let records: Vec<MiasRecord> = cases.into_iter().map(|(r, _)| r).collect();
    let info = dir.join(INFO_FILE);
    fs::write(&info, info_text(&records)).map_err(io(&info))?;
    Ok(records)
}

pub const PROXY_CLASSES: usize = 4;

/// Generic shape task for pretraining a backbone: blank, filled disk, ring,
/// or bar cross on a noisy background. Labels cycle through the four.
pub fn proxy_images(count: usize, size: usize, seed: u64) -> Vec<(GrayImage, usize)> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = SplitMix64::new(derive_seed(seed ^ 0x9E0C_5A11, i as u64));
            let mut px = background(&mut rng, size, 6.0);
            let label = i % PROXY_CLASSES;
            let s = size as f64;
            let r = s * rng.uniform(0.1, 0.18);
            let (cx, cy) = (rng.uniform(r + 1.0, s - r - 1.0), rng.uniform(r + 1.0, s - r - 1.0));
            let amp = rng.uniform(60.0, 100.0);
            let half = s * rng.uniform(0.025, 0.04);
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let d = (dx * dx + dy * dy).sqrt();
                    let hit = match label {
                        1 => d <= r,
                        2 => (d - r).abs() <= half,
                        3 => (dx.abs() <= half && dy.abs() <= r) || (dy.abs() <= half && dx.abs() <= r),
                        _ => false,
                    };
                    if hit {
                        px[y * size + x] += amp;
                    }
                }
            }
            (finish(size, &px), label)
        })
        .collect()
}
