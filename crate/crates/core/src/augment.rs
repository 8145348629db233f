//! Training-corpus assembly: every case becomes a stack of views (original,
//! segmented, wavelet H/V/D details) plus randomized affine variants of the
//! source image with all views re-derived from the transformed source.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{quantize, GrayImage};
use crate::mias::{Dataset, MiasRecord};
use crate::pgm::{write_pgm, PgmError};
use crate::preprocess::{adaptive_mean_filter, segment_filtered, FilterConfig, PreprocessError, SegmentConfig};
use crate::rng::{derive_seed, hash_str, SplitMix64};
use crate::wavelet::{multilevel_dwt, resize_to_original, Interpolation, WaveletError, WaveletFamily};

/// Channel order of an [`AugmentedSample`].
pub const CHANNEL_NAMES: [&str; 5] = ["original", "segmented", "wavelet_h", "wavelet_v", "wavelet_d"];

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("degenerate affine map (determinant {0:.3e})")]
    Degenerate(f64),
    #[error("invalid affine parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error("sample {id}: {source}")]
    Sample { id: String, source: Box<AugmentError> },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Concrete affine parameters. Rotation and shear in degrees, translation in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation: f64,
    pub translate: (f64, f64),
    pub scale: f64,
    pub shear: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { rotation: 0.0, translate: (0.0, 0.0), scale: 1.0, shear: 0.0 };

    /// Linear part `R(rotation) * Sh(shear) * S(scale)` as row-major 2x2.
    fn linear(&self) -> Result<[f64; 4], AugmentError> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(AugmentError::BadParams(format!("scale must be > 0, got {}", self.scale)));
        }
        let t = self.shear.to_radians().tan();
        if !t.is_finite() || t.abs() > 1e6 {
            return Err(AugmentError::BadParams(format!("shear {} deg is not representable", self.shear)));
        }
        let (s, c) = self.rotation.to_radians().sin_cos();
        let k = self.scale;
        // Sh*S = [[k, t*k], [0, k]]
        let m = [c * k, c * t * k - s * k, s * k, s * t * k + c * k];
        let det = m[0] * m[3] - m[1] * m[2];
        if det.abs() < 1e-9 {
            return Err(AugmentError::Degenerate(det));
        }
        Ok(m)
    }
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Closed sampling intervals for each affine component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineRanges {
    pub rotation: (f64, f64),
    pub translate: (f64, f64),
    pub scale: (f64, f64),
    pub shear: (f64, f64),
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self { rotation: (-15.0, 15.0), translate: (-20.0, 20.0), scale: (0.9, 1.1), shear: (-10.0, 10.0) }
    }
}

impl AffineRanges {
    pub fn identity() -> Self {
        Self { rotation: (0.0, 0.0), translate: (0.0, 0.0), scale: (1.0, 1.0), shear: (0.0, 0.0) }
    }

    pub fn sample(&self, seed: u64) -> AffineParams {
        let mut rng = SplitMix64::new(seed);
        let rotation = rng.uniform(self.rotation.0, self.rotation.1);
        let dx = rng.uniform(self.translate.0, self.translate.1);
        let dy = rng.uniform(self.translate.0, self.translate.1);
        let scale = rng.uniform(self.scale.0, self.scale.1);
        let shear = rng.uniform(self.shear.0, self.shear.1);
        AffineParams { rotation, translate: (dx, dy), scale, shear }
    }

    /// Translation ranges are given for `reference` pixels and scaled to `size`.
    pub fn scaled_to(&self, reference: usize, size: usize) -> Self {
        let f = size as f64 / reference as f64;
        Self { translate: (self.translate.0 * f, self.translate.1 * f), ..*self }
    }
}

/// Warp with a single affine map about the image centre. Inverse-mapped
/// bilinear sampling; anything outside the source is background (0).
pub fn apply_affine(img: &GrayImage, params: &AffineParams) -> Result<GrayImage, AugmentError> {
    let m = params.linear()?;
    let det = m[0] * m[3] - m[1] * m[2];
    let inv = [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det];
    let (w, h) = img.dims();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let src = img.to_f64();
    let sample = |sx: f64, sy: f64| -> f64 {
        const EDGE: f64 = 1e-9;
        let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
        if sx < -EDGE || sy < -EDGE || sx > wf + EDGE || sy > hf + EDGE {
            return 0.0;
        }
        let (sx, sy) = (sx.clamp(0.0, wf), sy.clamp(0.0, hf));
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
        let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
        top * (1.0 - fy) + bot * fy
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - params.translate.0;
            let dy = y as f64 - cy - params.translate.1;
            let sx = inv[0] * dx + inv[1] * dy + cx;
            let sy = inv[2] * dx + inv[3] * dy + cy;
            out.push(sample(sx, sy));
        }
    }
    let pixels = out.into_iter().map(|v| quantize(v, img.max_val())).collect();
    Ok(GrayImage::new(w, h, img.max_val(), pixels).expect("same dimensions"))
}

/// Sample parameters from `ranges` with `seed` and warp.
pub fn random_affine(img: &GrayImage, ranges: &AffineRanges, seed: u64) -> Result<(GrayImage, AffineParams), AugmentError> {
    let params = ranges.sample(seed);
    Ok((apply_affine(img, &params)?, params))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaveletConfig {
    pub family: WaveletFamily,
    pub levels: usize,
    /// Which level's detail subbands become channels.
    pub detail_level: usize,
    pub interpolation: Interpolation,
}

impl Default for WaveletConfig {
    fn default() -> Self {
        Self { family: WaveletFamily::Haar, levels: 3, detail_level: 1, interpolation: Interpolation::Bilinear }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub filter: FilterConfig,
    pub segment: SegmentConfig,
    pub wavelet: WaveletConfig,
}

/// Derive the five channels from a source image. The wavelet pyramid is
/// computed on the noise-filtered image.
pub fn derive_channels(source: &GrayImage, cfg: &ChannelConfig) -> Result<Vec<GrayImage>, AugmentError> {
    let filtered = adaptive_mean_filter(source, cfg.filter.window, cfg.filter.deviation_factor)?;
    let segmented = segment_filtered(&filtered, &cfg.segment)?;
    let pyramid = multilevel_dwt(&filtered, cfg.wavelet.levels, cfg.wavelet.family)?;
    let level = pyramid.level(cfg.wavelet.detail_level).ok_or_else(|| {
        AugmentError::BadParams(format!(
            "detail level {} outside 1..={}",
            cfg.wavelet.detail_level, cfg.wavelet.levels
        ))
    })?;
    let mut channels = vec![source.clone(), segmented];
    for (_, g) in level.details() {
        channels.push(resize_to_original(g, source.dims(), cfg.wavelet.interpolation, source.max_val())?);
    }
    Ok(channels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Affine { seed: u64, copy: usize },
}

impl Provenance {
    pub fn tag(&self) -> String {
        match self {
            Provenance::Original => "orig".to_string(),
            Provenance::Affine { copy, .. } => format!("aff{copy}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    /// In [`CHANNEL_NAMES`] order, all at the source dimensions.
    pub channels: Vec<GrayImage>,
    pub record: MiasRecord,
    pub provenance: Provenance,
    /// Oversampled duplicate of another sample.
    pub duplicate: bool,
}

/// Per-copy affine seed; independent of processing order.
pub fn sample_seed(global: u64, id: &str, copy: usize) -> u64 {
    derive_seed(derive_seed(global, hash_str(id)), copy as u64)
}

/// Build the corpus: for each sample one original-provenance entry followed
/// by `copies` affine variants. Output order follows the dataset order.
pub fn assemble_training_set(
    dataset: &Dataset,
    channels: &ChannelConfig,
    affine: &AffineRanges,
    copies: usize,
    seed: u64,
) -> Result<Vec<AugmentedSample>, AugmentError> {
    let per_sample: Result<Vec<Vec<AugmentedSample>>, AugmentError> = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(pos, s)| {
            let tag = |e: AugmentError| AugmentError::Sample { id: s.record.id.clone(), source: Box::new(e) };
            let source = s.image.load().map_err(|e| tag(e.into()))?;
            // duplicates from oversampling get their own affine draws
            let key = if s.duplicate { format!("{}#{pos}", s.record.id) } else { s.record.id.clone() };
            let mut out = Vec::with_capacity(copies + 1);
            out.push(AugmentedSample {
                channels: derive_channels(&source, channels).map_err(tag)?,
                record: s.record.clone(),
                provenance: Provenance::Original,
                duplicate: s.duplicate,
            });
            for copy in 0..copies {
                let aseed = sample_seed(seed, &key, copy);
                let (warped, _) = random_affine(&source, affine, aseed).map_err(tag)?;
                out.push(AugmentedSample {
                    channels: derive_channels(&warped, channels).map_err(tag)?,
                    record: s.record.clone(),
                    provenance: Provenance::Affine { seed: aseed, copy },
                    duplicate: s.duplicate,
                });
            }
            Ok(out)
        })
        .collect();
    Ok(per_sample?.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub id: String,
    pub provenance: Provenance,
    pub label7: usize,
    pub label3: usize,
    pub channels: Vec<String>,
}

/// Write channel PGMs and a JSON-lines manifest into `dir`.
pub fn write_corpus(dir: &Path, samples: &[AugmentedSample]) -> Result<PathBuf, AugmentError> {
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path)?;
    for (i, s) in samples.iter().enumerate() {
        let mut paths = Vec::new();
        for (c, img) in s.channels.iter().enumerate() {
            let name = format!("{:05}_{}_{}_{}.pgm", i, s.record.id, s.provenance.tag(), CHANNEL_NAMES[c]);
            write_pgm(&dir.join(&name), img)?;
            paths.push(name);
        }
        let line = ManifestLine {
            id: s.record.id.clone(),
            provenance: s.provenance,
            label7: s.record.abnormality.index(),
            label3: s.record.severity.index(),
            channels: paths,
        };
        writeln!(manifest, "{}", serde_json::to_string(&line).expect("manifest serializes"))?;
    }
    Ok(manifest_path)
}
