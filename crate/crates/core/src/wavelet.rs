//! Multi-level 2-D discrete wavelet transform.
//!
//! One analysis level splits a grid into an approximation and three detail
//! subbands. For the orthonormal Haar filter pair applied along rows and
//! then columns, a 2x2 block `[[a, b], [c, d]]` maps to
//!
//! ```text
//! A = (a + b + c + d) / 2      H = (a - b + c - d) / 2
//! V = (a + b - c - d) / 2      D = (a - b - c + d) / 2
//! ```
//!
//! Odd dimensions are padded by half-sample symmetric extension (the last
//! row/column is repeated), so each subband is `ceil(n / 2)` long per axis.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;
use crate::pgm::{write_pgm, PgmError};

#[derive(Debug, Error)]
pub enum WaveletError {
    #[error("unsupported wavelet family {0:?}")]
    UnsupportedFamily(String),
    #[error("empty coefficient grid")]
    EmptyGrid,
    #[error("subband dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{width}x{height} image is too small for {levels} levels (needs min side >= {need})")]
    TooSmall { width: usize, height: usize, levels: usize, need: usize },
    #[error("levels must be at least 1")]
    ZeroLevels,
    #[error("target dimensions must be non-zero, got {0}x{1}")]
    ZeroTarget(usize, usize),
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    #[default]
    Haar,
}

impl FromStr for WaveletFamily {
    type Err = WaveletError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(WaveletFamily::Haar),
            _ => Err(WaveletError::UnsupportedFamily(s.to_string())),
        }
    }
}

impl fmt::Display for WaveletFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WaveletFamily::Haar => f.write_str("haar"),
        }
    }
}

/// Row-major grid of real coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "grid buffer length");
        Self { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn from_image(img: &GrayImage) -> Self {
        Self::new(img.width(), img.height(), img.to_f64())
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        Self::new(width, height, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }
}

/// One decomposition level.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet {
    pub level: usize,
    pub approx: Grid,
    pub horiz: Grid,
    pub vert: Grid,
    pub diag: Grid,
    /// Dimensions of the grid this level was computed from.
    pub source_dims: (usize, usize),
}

impl SubbandSet {
    /// Assemble subbands whose parent had exactly twice their size.
    pub fn new(level: usize, approx: Grid, horiz: Grid, vert: Grid, diag: Grid) -> Self {
        let source_dims = (approx.width * 2, approx.height * 2);
        Self { level, approx, horiz, vert, diag, source_dims }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.approx.dims()
    }

    pub fn details(&self) -> [(&'static str, &Grid); 3] {
        [("H", &self.horiz), ("V", &self.vert), ("D", &self.diag)]
    }
}

/// Single analysis level.
pub fn dwt2d_level(grid: &Grid, family: WaveletFamily) -> Result<SubbandSet, WaveletError> {
    if grid.is_empty() {
        return Err(WaveletError::EmptyGrid);
    }
    match family {
        WaveletFamily::Haar => Ok(haar_analysis(grid, 1)),
    }
}

fn haar_analysis(grid: &Grid, level: usize) -> SubbandSet {
    let (w, h) = grid.dims();
    let (hw, hh) = (w.div_ceil(2), h.div_ceil(2));
    let mut a = vec![0.0; hw * hh];
    let mut hz = vec![0.0; hw * hh];
    let mut vt = vec![0.0; hw * hh];
    let mut dg = vec![0.0; hw * hh];
    for by in 0..hh {
        let y0 = 2 * by;
        let y1 = (y0 + 1).min(h - 1);
        for bx in 0..hw {
            let x0 = 2 * bx;
            let x1 = (x0 + 1).min(w - 1);
            let (p, q, r, s) = (grid.at(x0, y0), grid.at(x1, y0), grid.at(x0, y1), grid.at(x1, y1));
            // rows: lo = p+q, hi = p-q; then columns over the row outputs
            let (lo0, hi0, lo1, hi1) = (p + q, p - q, r + s, r - s);
            let i = by * hw + bx;
            a[i] = (lo0 + lo1) * 0.5;
            hz[i] = (hi0 + hi1) * 0.5;
            vt[i] = (lo0 - lo1) * 0.5;
            dg[i] = (hi0 - hi1) * 0.5;
        }
    }
    SubbandSet {
        level,
        approx: Grid::new(hw, hh, a),
        horiz: Grid::new(hw, hh, hz),
        vert: Grid::new(hw, hh, vt),
        diag: Grid::new(hw, hh, dg),
        source_dims: (w, h),
    }
}

/// Synthesis inverse of [`dwt2d_level`].
pub fn idwt2d(subbands: &SubbandSet, family: WaveletFamily) -> Result<Grid, WaveletError> {
    let dims = subbands.approx.dims();
    for (name, g) in subbands.details() {
        if g.dims() != dims {
            return Err(WaveletError::DimensionMismatch(format!(
                "{name} is {}x{}, approximation is {}x{}",
                g.width, g.height, dims.0, dims.1
            )));
        }
    }
    if subbands.approx.is_empty() {
        return Err(WaveletError::EmptyGrid);
    }
    let (sw, sh) = subbands.source_dims;
    if sw.div_ceil(2) != dims.0 || sh.div_ceil(2) != dims.1 {
        return Err(WaveletError::DimensionMismatch(format!(
            "source {sw}x{sh} cannot produce {}x{} subbands",
            dims.0, dims.1
        )));
    }
    match family {
        WaveletFamily::Haar => Ok(haar_synthesis(subbands)),
    }
}

fn haar_synthesis(sb: &SubbandSet) -> Grid {
    let (hw, hh) = sb.dims();
    let (w, h) = sb.source_dims;
    let mut out = vec![0.0; w * h];
    for by in 0..hh {
        for bx in 0..hw {
            let i = by * hw + bx;
            let (a, hz, vt, dg) = (sb.approx.data[i], sb.horiz.data[i], sb.vert.data[i], sb.diag.data[i]);
            let block = [
                (a + hz + vt + dg) * 0.5,
                (a - hz + vt - dg) * 0.5,
                (a + hz - vt - dg) * 0.5,
                (a - hz - vt + dg) * 0.5,
            ];
            for (k, &v) in block.iter().enumerate() {
                let (x, y) = (2 * bx + (k & 1), 2 * by + (k >> 1));
                if x < w && y < h {
                    out[y * w + x] = v;
                }
            }
        }
    }
    Grid::new(w, h, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid {
    /// Levels 1..=J, finest first.
    pub levels: Vec<SubbandSet>,
    pub final_approx: Grid,
    pub original_dims: (usize, usize),
    pub family: WaveletFamily,
}

impl WaveletPyramid {
    pub fn level(&self, j: usize) -> Option<&SubbandSet> {
        self.levels.get(j.checked_sub(1)?)
    }

    /// Sum of squares over every stored coefficient (details + final approximation).
    pub fn energy(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| l.details().map(|(_, g)| g.energy()))
            .sum::<f64>()
            + self.final_approx.energy()
    }

    pub fn reconstruct(&self) -> Result<Grid, WaveletError> {
        let mut approx = self.final_approx.clone();
        for level in self.levels.iter().rev() {
            let sb = SubbandSet { approx, ..level.clone() };
            approx = idwt2d(&sb, self.family)?;
        }
        Ok(approx)
    }
}

/// Recursive decomposition of the approximation band, `levels` times.
pub fn multilevel_dwt(img: &GrayImage, levels: usize, family: WaveletFamily) -> Result<WaveletPyramid, WaveletError> {
    multilevel_dwt_grid(&Grid::from_image(img), levels, family)
}

pub fn multilevel_dwt_grid(grid: &Grid, levels: usize, family: WaveletFamily) -> Result<WaveletPyramid, WaveletError> {
    if levels == 0 {
        return Err(WaveletError::ZeroLevels);
    }
    let need = 1usize.checked_shl(levels as u32).unwrap_or(usize::MAX);
    if grid.width.min(grid.height) < need {
        return Err(WaveletError::TooSmall { width: grid.width, height: grid.height, levels, need });
    }
    let mut out = Vec::with_capacity(levels);
    let mut current = grid.clone();
    for j in 1..=levels {
        let mut sb = dwt2d_level(&current, family)?;
        sb.level = j;
        current = sb.approx.clone();
        out.push(sb);
    }
    Ok(WaveletPyramid { levels: out, final_approx: current, original_dims: grid.dims(), family })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

impl FromStr for Interpolation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bilinear" => Ok(Interpolation::Bilinear),
            "nearest" => Ok(Interpolation::Nearest),
            _ => Err(format!("unknown interpolation {s:?}")),
        }
    }
}

/// Resample a grid to `target` with corner-aligned sampling.
pub fn upsample(grid: &Grid, target: (usize, usize), mode: Interpolation) -> Result<Grid, WaveletError> {
    if grid.is_empty() {
        return Err(WaveletError::EmptyGrid);
    }
    let (tw, th) = target;
    if tw == 0 || th == 0 {
        return Err(WaveletError::ZeroTarget(tw, th));
    }
    let coord = |d: usize, dst: usize, src: usize| {
        if dst <= 1 || src <= 1 {
            0.0
        } else {
            d as f64 * (src - 1) as f64 / (dst - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(tw * th);
    for y in 0..th {
        let sy = coord(y, th, grid.height);
        for x in 0..tw {
            let sx = coord(x, tw, grid.width);
            out.push(match mode {
                Interpolation::Nearest => grid.at(
                    (sx.round() as usize).min(grid.width - 1),
                    (sy.round() as usize).min(grid.height - 1),
                ),
                Interpolation::Bilinear => {
                    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(grid.width - 1), (y0 + 1).min(grid.height - 1));
                    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                    let top = grid.at(x0, y0) * (1.0 - fx) + grid.at(x1, y0) * fx;
                    let bot = grid.at(x0, y1) * (1.0 - fx) + grid.at(x1, y1) * fx;
                    top * (1.0 - fy) + bot * fy
                }
            });
        }
    }
    Ok(Grid::new(tw, th, out))
}

/// Per-grid min-max normalization onto `[0, max_val]`. A constant grid maps to 0.
pub fn normalize_to_image(grid: &Grid, max_val: u16) -> GrayImage {
    let lo = grid.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scaled: Vec<f64> = if span > 0.0 {
        grid.data.iter().map(|&v| (v - lo) / span * max_val as f64).collect()
    } else {
        vec![0.0; grid.data.len()]
    };
    GrayImage::from_f64(grid.width, grid.height, max_val, &scaled).expect("non-empty grid")
}

/// Upsample a coefficient grid to the original image size and normalize it
/// into the pixel range.
pub fn resize_to_original(
    grid: &Grid,
    target: (usize, usize),
    mode: Interpolation,
    max_val: u16,
) -> Result<GrayImage, WaveletError> {
    Ok(normalize_to_image(&upsample(grid, target, mode)?, max_val))
}

/// Write every subband as `{id}_L{j}_{A|H|V|D}.pgm` (8-bit, min-max scaled).
pub fn export_pyramid(dir: &Path, id: &str, pyramid: &WaveletPyramid) -> Result<Vec<std::path::PathBuf>, WaveletError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for sb in &pyramid.levels {
        let bands = [("A", &sb.approx), ("H", &sb.horiz), ("V", &sb.vert), ("D", &sb.diag)];
        for (tag, g) in bands {
            let path = dir.join(format!("{id}_L{}_{tag}.pgm", sb.level));
            write_pgm(&path, &normalize_to_image(g, 255))?;
            written.push(path);
        }
    }
    Ok(written)
}
