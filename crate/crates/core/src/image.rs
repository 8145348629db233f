use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    ZeroDimension { width: usize, height: usize },
    #[error("pixel buffer holds {found} values, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("max_val must be in [1, 65535]")]
    MaxValZero,
    #[error("pixel {index} has value {value} above max_val {max_val}")]
    ValueOutOfRange { index: usize, value: u16, max_val: u16 },
}

/// Single-channel intensity image, row-major, values in `[0, max_val]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    max_val: u16,
    pixels: Vec<u16>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, max_val: u16, pixels: Vec<u16>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroDimension { width, height });
        }
        if max_val == 0 {
            return Err(ImageError::MaxValZero);
        }
        if pixels.len() != width * height {
            return Err(ImageError::LengthMismatch { expected: width * height, found: pixels.len() });
        }
        if let Some((index, &value)) = pixels.iter().enumerate().find(|(_, &v)| v > max_val) {
            return Err(ImageError::ValueOutOfRange { index, value, max_val });
        }
        Ok(Self { width, height, max_val, pixels })
    }

    pub fn filled(width: usize, height: usize, max_val: u16, value: u16) -> Result<Self, ImageError> {
        Self::new(width, height, max_val, vec![value; width * height])
    }

    /// Build an image from a per-pixel function; values are clamped to `max_val`.
    pub fn from_fn(
        width: usize,
        height: usize,
        max_val: u16,
        mut f: impl FnMut(usize, usize) -> u16,
    ) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).min(max_val));
            }
        }
        Self::new(width, height, max_val, pixels)
    }

    /// Quantize real intensities: round half away from zero, clamp to `[0, max_val]`.
    pub fn from_f64(width: usize, height: usize, max_val: u16, values: &[f64]) -> Result<Self, ImageError> {
        let pixels = values.iter().map(|&v| quantize(v, max_val)).collect();
        Self::new(width, height, max_val, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn max_val(&self) -> u16 {
        self.max_val
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u16> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u16) {
        assert!(value <= self.max_val, "value {value} above max_val {}", self.max_val);
        self.pixels[y * self.width + x] = value;
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    /// Intensities scaled to [0, 1].
    pub fn to_unit(&self) -> Vec<f64> {
        let m = self.max_val as f64;
        self.pixels.iter().map(|&p| p as f64 / m).collect()
    }

    /// Area-averaging resample to `width` x `height`. Each output pixel is the
    /// coverage-weighted mean of the source pixels under its footprint.
    pub fn resample_area(&self, width: usize, height: usize) -> Result<GrayImage, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroDimension { width, height });
        }
        if (width, height) == self.dims() {
            return Ok(self.clone());
        }
        let xw = axis_weights(self.width, width);
        let yw = axis_weights(self.height, height);
        let src = self.to_f64();
        let mut out = Vec::with_capacity(width * height);
        for ys in &yw {
            for xs in &xw {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for &(sy, wy) in ys {
                    let row = &src[sy * self.width..(sy + 1) * self.width];
                    for &(sx, wx) in xs {
                        acc += row[sx] * wx * wy;
                        wsum += wx * wy;
                    }
                }
                out.push(acc / wsum);
            }
        }
        GrayImage::from_f64(width, height, self.max_val, &out)
    }
}

pub(crate) fn quantize(v: f64, max_val: u16) -> u16 {
    if !(v > 0.0) {
        return 0;
    }
    let r = v.round();
    if r >= max_val as f64 {
        max_val
    } else {
        r as u16
    }
}

/// For each destination cell along one axis, the (source index, overlap) pairs.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let lo = d as f64 * scale;
            let hi = (d + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (overlap > 1e-12).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}
