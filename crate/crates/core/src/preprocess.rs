//! Noise removal and intensity segmentation.
//!
//! The adaptive mean filter flags a pixel as noise when it sits more than
//! `deviation_factor` standard deviations from the mean of its window and
//! replaces it by that mean. Segmentation is Lloyd's k-means on the 1-D
//! intensity histogram with k-means++ seeding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{quantize, GrayImage};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("filter window must be odd and at least 3, got {0}")]
    BadWindow(usize),
    #[error("deviation factor must be positive and finite, got {0}")]
    BadDeviationFactor(f64),
    #[error("k must be at least 1, got {0}")]
    ZeroClusters(usize),
    #[error("k = {k} exceeds the {distinct} distinct intensities in the image")]
    TooManyClusters { k: usize, distinct: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub window: usize,
    pub deviation_factor: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { window: 3, deviation_factor: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest objective wins. An exact
    /// 1-D start also competes when the image has few distinct intensities.
    pub restarts: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self { k: 4, seed: 0, max_iter: 100, tol: 1e-6, restarts: 8 }
    }
}

/// Adaptive mean filter with edge-replicated borders. Statistics are taken
/// over the full window including the centre pixel (population deviation);
/// replacements are rounded half away from zero.
pub fn adaptive_mean_filter(img: &GrayImage, window: usize, deviation_factor: f64) -> Result<GrayImage, PreprocessError> {
    if window < 3 || window % 2 == 0 {
        return Err(PreprocessError::BadWindow(window));
    }
    if !(deviation_factor > 0.0 && deviation_factor.is_finite()) {
        return Err(PreprocessError::BadDeviationFactor(deviation_factor));
    }
    let (w, h) = img.dims();
    let r = (window / 2) as isize;
    let n = (window * window) as f64;
    let src = img.pixels();
    let clampx = |x: isize| x.clamp(0, w as isize - 1) as usize;
    let clampy = |y: isize| y.clamp(0, h as isize - 1) as usize;
    let mut out = src.to_vec();
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for dy in -r..=r {
                let row = clampy(y as isize + dy) * w;
                for dx in -r..=r {
                    let v = src[row + clampx(x as isize + dx)] as f64;
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0);
            let p = src[y * w + x] as f64;
            if (p - mean).abs() > deviation_factor * var.sqrt() {
                out[y * w + x] = quantize(mean, img.max_val());
            }
        }
    }
    Ok(GrayImage::new(w, h, img.max_val(), out).expect("dimensions preserved"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub width: usize,
    pub height: usize,
    pub max_val: u16,
    /// Per-pixel cluster index; cluster 0 is the darkest.
    pub labels: Vec<u8>,
    /// Ascending centroid intensities.
    pub centroids: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Objective after every assignment step of the winning run.
    pub objective_trace: Vec<f64>,
}

impl SegmentationResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

struct Histogram {
    values: Vec<f64>,
    counts: Vec<f64>,
}

impl Histogram {
    fn of(img: &GrayImage) -> Self {
        let mut counts = vec![0u64; img.max_val() as usize + 1];
        for &p in img.pixels() {
            counts[p as usize] += 1;
        }
        let (values, counts) = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(v, &c)| (v as f64, c as f64))
            .unzip();
        Self { values, counts }
    }

    fn len(&self) -> usize {
        self.values.len()
    }
}

struct Run {
    centroids: Vec<f64>,
    assign: Vec<usize>,
    objective: f64,
    iterations: usize,
    trace: Vec<f64>,
}

fn nearest(v: f64, centroids: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &c) in centroids.iter().enumerate() {
        let d = (v - c) * (v - c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(hist: &Histogram, k: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let total: f64 = hist.counts.iter().sum();
    let pick = |rng: &mut SplitMix64, weights: &[f64], total: f64| {
        let mut t = rng.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            if t < w {
                return i;
            }
            t -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    };
    let mut centroids = vec![hist.values[pick(rng, &hist.counts, total)]];
    while centroids.len() < k {
        let weights: Vec<f64> = hist
            .values
            .iter()
            .zip(&hist.counts)
            .map(|(&v, &c)| c * nearest(v, &centroids).1)
            .collect();
        let wsum: f64 = weights.iter().sum();
        centroids.push(hist.values[pick(rng, &weights, wsum)]);
    }
    centroids
}

/// Above this many distinct intensities the exact start is skipped.
const EXACT_START_LIMIT: usize = 4096;

/// Globally optimal centroids for 1-D data: optimal clusters are contiguous
/// runs of the sorted intensities, found by dynamic programming over prefix
/// sums in O(k n^2).
fn optimal_1d(hist: &Histogram, k: usize) -> Vec<f64> {
    let n = hist.len();
    let (mut s0, mut s1, mut s2) = (vec![0.0; n + 1], vec![0.0; n + 1], vec![0.0; n + 1]);
    for i in 0..n {
        let (v, c) = (hist.values[i], hist.counts[i]);
        s0[i + 1] = s0[i] + c;
        s1[i + 1] = s1[i] + c * v;
        s2[i + 1] = s2[i] + c * v * v;
    }
    let cost = |i: usize, j: usize| {
        let (w, m) = (s0[j] - s0[i], s1[j] - s1[i]);
        (s2[j] - s2[i] - m * m / w).max(0.0)
    };
    // best[m][j]: first j values split into m + 1 runs; cut[m][j]: start of the last run
    let mut best = vec![vec![f64::INFINITY; n + 1]; k];
    let mut cut = vec![vec![0usize; n + 1]; k];
    for j in 1..=n {
        best[0][j] = cost(0, j);
    }
    for m in 1..k {
        for j in m + 1..=n {
            for i in m..j {
                let c = best[m - 1][i] + cost(i, j);
                if c < best[m][j] {
                    best[m][j] = c;
                    cut[m][j] = i;
                }
            }
        }
    }
    let mut centroids = vec![0.0; k];
    let mut j = n;
    for m in (0..k).rev() {
        let i = if m == 0 { 0 } else { cut[m][j] };
        centroids[m] = (s1[j] - s1[i]) / (s0[j] - s0[i]);
        j = i;
    }
    centroids
}

fn lloyd(hist: &Histogram, mut centroids: Vec<f64>, max_iter: usize, tol: f64) -> Run {
    let k = centroids.len();
    let mut assign = vec![0usize; hist.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut objective = 0.0;
        for (i, &v) in hist.values.iter().enumerate() {
            let (j, d) = nearest(v, &centroids);
            assign[i] = j;
            objective += hist.counts[i] * d;
        }
        trace.push(objective);
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let mut sum = vec![0.0; k];
        let mut cnt = vec![0.0; k];
        for (i, &j) in assign.iter().enumerate() {
            sum[j] += hist.counts[i] * hist.values[i];
            cnt[j] += hist.counts[i];
        }
        let mut next: Vec<f64> = (0..k).map(|j| if cnt[j] > 0.0 { sum[j] / cnt[j] } else { centroids[j] }).collect();
        // Empty cluster: move its centroid onto the point farthest from its
        // current centroid (lowest intensity on ties).
        for j in 0..k {
            if cnt[j] > 0.0 {
                continue;
            }
            let far = hist
                .values
                .iter()
                .zip(&assign)
                .filter(|(v, _)| !next.contains(v))
                .map(|(&v, &a)| (v, (v - next[a]).powi(2)))
                .fold(None, |best: Option<(f64, f64)>, (v, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((v, d)),
                });
            if let Some((v, _)) = far {
                next[j] = v;
            }
        }
        let shift = centroids.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            // one more assignment pass so the trace ends on the final centroids
            let mut objective = 0.0;
            for (i, &v) in hist.values.iter().enumerate() {
                let (j, d) = nearest(v, &centroids);
                assign[i] = j;
                objective += hist.counts[i] * d;
            }
            trace.push(objective);
            break;
        }
    }
    let objective = *trace.last().unwrap();
    Run { centroids, assign, objective, iterations, trace }
}

/// K-means on pixel intensities. Deterministic for a fixed seed. Centroids
/// are canonicalized to ascending order and labels remapped to match.
pub fn kmeans_segment(
    img: &GrayImage,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<SegmentationResult, PreprocessError> {
    kmeans_segment_with_restarts(img, k, seed, max_iter, tol, SegmentConfig::default().restarts)
}

pub fn kmeans_segment_with_restarts(
    img: &GrayImage,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    restarts: usize,
) -> Result<SegmentationResult, PreprocessError> {
    if k == 0 {
        return Err(PreprocessError::ZeroClusters(k));
    }
    let hist = Histogram::of(img);
    if k > hist.len() {
        return Err(PreprocessError::TooManyClusters { k, distinct: hist.len() });
    }
    let mut best: Option<Run> = None;
    for r in 0..restarts.max(1) {
        let mut rng = SplitMix64::new(derive_seed(seed, r as u64));
        let run = lloyd(&hist, kmeans_pp(&hist, k, &mut rng), max_iter, tol);
        if best.as_ref().map_or(true, |b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    if hist.len() <= EXACT_START_LIMIT {
        let run = lloyd(&hist, optimal_1d(&hist, k), max_iter, tol);
        if best.as_ref().map_or(true, |b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| run.centroids[a].total_cmp(&run.centroids[b]));
    let mut rank = vec![0u8; k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new as u8;
    }
    let centroids: Vec<f64> = order.iter().map(|&j| run.centroids[j]).collect();
    let mut lut = vec![0u8; img.max_val() as usize + 1];
    for (i, &v) in hist.values.iter().enumerate() {
        lut[v as usize] = rank[run.assign[i]];
    }
    let labels = img.pixels().iter().map(|&p| lut[p as usize]).collect();
    Ok(SegmentationResult {
        width: img.width(),
        height: img.height(),
        max_val: img.max_val(),
        labels,
        centroids,
        objective: run.objective,
        iterations: run.iterations,
        objective_trace: run.trace,
    })
}

/// Paint every pixel with its cluster centroid, rounded into the image range.
pub fn labels_to_gray(result: &SegmentationResult) -> GrayImage {
    let levels: Vec<u16> = result.centroids.iter().map(|&c| quantize(c, result.max_val)).collect();
    let pixels = result.labels.iter().map(|&l| levels[l as usize]).collect();
    GrayImage::new(result.width, result.height, result.max_val, pixels).expect("labels cover the image")
}

/// Filter, then segment, then paint: the segmented view of an image.
pub fn segment_image(img: &GrayImage, filter: &FilterConfig, seg: &SegmentConfig) -> Result<GrayImage, PreprocessError> {
    let filtered = adaptive_mean_filter(img, filter.window, filter.deviation_factor)?;
    segment_filtered(&filtered, seg)
}

/// Segment an already-filtered image and paint it.
pub fn segment_filtered(filtered: &GrayImage, seg: &SegmentConfig) -> Result<GrayImage, PreprocessError> {
    let distinct = Histogram::of(filtered).len();
    // Flat images (e.g. blank backgrounds after filtering) cannot support k
    // clusters; segment them with as many as they have.
    let k = seg.k.min(distinct);
    let result = kmeans_segment_with_restarts(filtered, k, seg.seed, seg.max_iter, seg.tol, seg.restarts)?;
    Ok(labels_to_gray(&result))
}
