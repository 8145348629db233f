//! Layer kinds, shape inference and the per-kind forward/backward kernels.
//!
//! Per-sample shapes exclude the batch dimension: `[c, h, w]` for feature
//! maps, `[features]` for vectors. Conv weights are `[out, in, k, k]`, dense
//! weights `[out, in]`.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Conv { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Flatten,
    Dense { out_features: usize },
    Softmax,
    /// Identity at inference; kept so imported topologies round-trip.
    Dropout { rate: f32 },
    /// Appends a side-input vector of `width` values to each sample.
    Concat { width: usize },
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Softmax => "softmax",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Concat { .. } => "concat",
        }
    }

    /// Output shape for a given input shape, or a description of the mismatch.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerKind::Conv { out_channels, kernel, stride, pad } => {
                let [_, h, w] = feature_map(input, "conv")?;
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err("conv needs non-zero channels, kernel and stride".into());
                }
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(format!("kernel {kernel} larger than padded input {h}x{w} (pad {pad})"));
                }
                Ok(vec![out_channels, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1])
            }
            LayerKind::MaxPool { kernel, stride } => {
                let [c, h, w] = feature_map(input, "maxpool")?;
                if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                    return Err(format!("pool window {kernel} does not fit input {h}x{w}"));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Dense { out_features } => {
                vector(input, "dense")?;
                if out_features == 0 {
                    return Err("dense needs at least one output".into());
                }
                Ok(vec![out_features])
            }
            LayerKind::Softmax => {
                vector(input, "softmax")?;
                Ok(input.to_vec())
            }
            LayerKind::Concat { width } => Ok(vec![vector(input, "concat")? + width]),
            LayerKind::Relu | LayerKind::Dropout { .. } => Ok(input.to_vec()),
        }
    }

    /// (weight dims, bias len, fan-in) for a parameterized layer.
    pub(crate) fn param_dims(&self, input: &[usize]) -> Option<(Vec<usize>, usize, usize)> {
        match *self {
            LayerKind::Conv { out_channels, kernel, .. } => {
                let c = input[0];
                Some((vec![out_channels, c, kernel, kernel], out_channels, c * kernel * kernel))
            }
            LayerKind::Dense { out_features } => Some((vec![out_features, input[0]], out_features, input[0])),
            _ => None,
        }
    }
}

fn feature_map(input: &[usize], what: &str) -> Result<[usize; 3], String> {
    match input {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(format!("{what} expects a [c, h, w] input, got {input:?}")),
    }
}

fn vector(input: &[usize], what: &str) -> Result<usize, String> {
    match input {
        &[n] => Ok(n),
        _ => Err(format!("{what} expects a flat [features] input, got {input:?}")),
    }
}

/// Weights, biases and their momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Vec<f64>,
    pub weight_dims: Vec<usize>,
    pub bias: Vec<f64>,
    pub vel_weight: Vec<f64>,
    pub vel_bias: Vec<f64>,
}

impl Params {
    pub(crate) fn zeros(weight_dims: Vec<usize>, bias_len: usize) -> Self {
        let n: usize = weight_dims.iter().product();
        Self {
            weight: vec![0.0; n],
            weight_dims,
            bias: vec![0.0; bias_len],
            vel_weight: vec![0.0; n],
            vel_bias: vec![0.0; bias_len],
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    /// Frozen layers never change their parameters.
    pub frozen: bool,
    /// Head layers train at the boosted learning rate.
    pub head: bool,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub params: Option<Params>,
}

impl Layer {
    pub fn in_len(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn trainable(&self) -> bool {
        self.params.is_some() && !self.frozen
    }
}

/// Gradients of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Range of output positions `o` with `o * stride + offset - pad` inside `[0, len)`.
#[inline]
fn valid_range(offset: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    let hi = if len + pad > offset { ((len + pad - offset - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

pub(crate) struct Forward {
    pub out: Vec<f64>,
    pub argmax: Option<Vec<u32>>,
}

impl Layer {
    pub(crate) fn forward(&self, x: &[f64], n: usize, aux: Option<&[f64]>) -> Forward {
        let in_len = self.in_len();
        let out_len = self.out_len();
        debug_assert_eq!(x.len(), n * in_len);
        match self.kind {
            LayerKind::Conv { kernel, stride, pad, .. } => {
                let p = self.params.as_ref().expect("conv params");
                let [c, h, w] = [self.in_shape[0], self.in_shape[1], self.in_shape[2]];
                let [oc, oh, ow] = [self.out_shape[0], self.out_shape[1], self.out_shape[2]];
                let mut out = vec![0.0; n * out_len];
                out.par_chunks_mut(out_len).zip(x.par_chunks(in_len)).for_each(|(o, xi)| {
                    for m in 0..oc {
                        let plane = &mut o[m * oh * ow..(m + 1) * oh * ow];
                        plane.fill(p.bias[m]);
                        for ci in 0..c {
                            let xin = &xi[ci * h * w..(ci + 1) * h * w];
                            for ky in 0..kernel {
                                let (oy0, oy1) = valid_range(ky, pad, stride, h, oh);
                                for kx in 0..kernel {
                                    let wv = p.weight[((m * c + ci) * kernel + ky) * kernel + kx];
                                    let (ox0, ox1) = valid_range(kx, pad, stride, w, ow);
                                    for oy in oy0..oy1 {
                                        let iy = oy * stride + ky - pad;
                                        let row = &xin[iy * w..(iy + 1) * w];
                                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                                        if stride == 1 {
                                            let ix0 = ox0 + kx - pad;
                                            for (o, &v) in orow[ox0..ox1].iter_mut().zip(&row[ix0..ix0 + (ox1 - ox0)]) {
                                                *o += wv * v;
                                            }
                                        } else {
                                            for ox in ox0..ox1 {
                                                orow[ox] += wv * row[ox * stride + kx - pad];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                Forward { out, argmax: None }
            }
            LayerKind::Relu => Forward { out: x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(), argmax: None },
            LayerKind::MaxPool { kernel, stride } => {
                let [c, h, w] = [self.in_shape[0], self.in_shape[1], self.in_shape[2]];
                let [_, oh, ow] = [self.out_shape[0], self.out_shape[1], self.out_shape[2]];
                let mut out = vec![0.0; n * out_len];
                let mut arg = vec![0u32; n * out_len];
                out.par_chunks_mut(out_len)
                    .zip(arg.par_chunks_mut(out_len))
                    .zip(x.par_chunks(in_len))
                    .for_each(|((o, a), xi)| {
                        for ci in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut best = f64::NEG_INFINITY;
                                    let mut at = 0usize;
                                    for ky in 0..kernel {
                                        for kx in 0..kernel {
                                            let idx = (ci * h + oy * stride + ky) * w + ox * stride + kx;
                                            if xi[idx] > best {
                                                best = xi[idx];
                                                at = idx;
                                            }
                                        }
                                    }
                                    let j = (ci * oh + oy) * ow + ox;
                                    o[j] = best;
                                    a[j] = at as u32;
                                }
                            }
                        }
                    });
                Forward { out, argmax: Some(arg) }
            }
            LayerKind::Flatten | LayerKind::Dropout { .. } => Forward { out: x.to_vec(), argmax: None },
            LayerKind::Dense { out_features } => {
                let p = self.params.as_ref().expect("dense params");
                let mut out = vec![0.0; n * out_features];
                out.par_chunks_mut(out_features).zip(x.par_chunks(in_len)).for_each(|(o, xi)| {
                    for (k, ok) in o.iter_mut().enumerate() {
                        let wrow = &p.weight[k * in_len..(k + 1) * in_len];
                        *ok = p.bias[k] + dot(wrow, xi);
                    }
                });
                Forward { out, argmax: None }
            }
            LayerKind::Softmax => {
                let mut out = x.to_vec();
                for row in out.chunks_mut(in_len) {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        s += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= s;
                    }
                }
                Forward { out, argmax: None }
            }
            LayerKind::Concat { width } => {
                let aux = aux.expect("concat requires a side input");
                let mut out = Vec::with_capacity(n * out_len);
                for (xi, ai) in x.chunks(in_len).zip(aux.chunks(width)) {
                    out.extend_from_slice(xi);
                    out.extend_from_slice(ai);
                }
                Forward { out, argmax: None }
            }
        }
    }

    /// Returns (input gradient if requested, parameter gradient if the layer is trainable).
    pub(crate) fn backward(
        &self,
        x: &[f64],
        y: &[f64],
        argmax: Option<&[u32]>,
        dy: &[f64],
        n: usize,
        need_dx: bool,
    ) -> (Option<Vec<f64>>, Option<ParamGrad>) {
        let in_len = self.in_len();
        let out_len = self.out_len();
        let want_params = self.trainable();
        match self.kind {
            LayerKind::Conv { kernel, stride, pad, .. } => {
                let p = self.params.as_ref().expect("conv params");
                let [c, h, w] = [self.in_shape[0], self.in_shape[1], self.in_shape[2]];
                let [oc, oh, ow] = [self.out_shape[0], self.out_shape[1], self.out_shape[2]];
                let dx = need_dx.then(|| {
                    let mut dx = vec![0.0; n * in_len];
                    dx.par_chunks_mut(in_len).zip(dy.par_chunks(out_len)).for_each(|(dxi, dyi)| {
                        for m in 0..oc {
                            let dplane = &dyi[m * oh * ow..(m + 1) * oh * ow];
                            for ci in 0..c {
                                let dxin = &mut dxi[ci * h * w..(ci + 1) * h * w];
                                for ky in 0..kernel {
                                    let (oy0, oy1) = valid_range(ky, pad, stride, h, oh);
                                    for kx in 0..kernel {
                                        let wv = p.weight[((m * c + ci) * kernel + ky) * kernel + kx];
                                        let (ox0, ox1) = valid_range(kx, pad, stride, w, ow);
                                        for oy in oy0..oy1 {
                                            let iy = oy * stride + ky - pad;
                                            let drow = &dplane[oy * ow..(oy + 1) * ow];
                                            let xrow = &mut dxin[iy * w..(iy + 1) * w];
                                            if stride == 1 {
                                                let ix0 = ox0 + kx - pad;
                                                for (d, &g) in xrow[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&drow[ox0..ox1]) {
                                                    *d += wv * g;
                                                }
                                            } else {
                                                for ox in ox0..ox1 {
                                                    xrow[ox * stride + kx - pad] += wv * drow[ox];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                    dx
                });
                let grads = want_params.then(|| {
                    let per_out = c * kernel * kernel;
                    let mut gw = vec![0.0; oc * per_out];
                    let mut gb = vec![0.0; oc];
                    gw.par_chunks_mut(per_out).zip(gb.par_iter_mut()).enumerate().for_each(|(m, (gwm, gbm))| {
                        for s in 0..n {
                            let dplane = &dy[s * out_len + m * oh * ow..s * out_len + (m + 1) * oh * ow];
                            *gbm += dplane.iter().sum::<f64>();
                            let xi = &x[s * in_len..(s + 1) * in_len];
                            for ci in 0..c {
                                let xin = &xi[ci * h * w..(ci + 1) * h * w];
                                for ky in 0..kernel {
                                    let (oy0, oy1) = valid_range(ky, pad, stride, h, oh);
                                    for kx in 0..kernel {
                                        let (ox0, ox1) = valid_range(kx, pad, stride, w, ow);
                                        let mut acc = 0.0;
                                        for oy in oy0..oy1 {
                                            let iy = oy * stride + ky - pad;
                                            let drow = &dplane[oy * ow..(oy + 1) * ow];
                                            let row = &xin[iy * w..(iy + 1) * w];
                                            if stride == 1 {
                                                let ix0 = ox0 + kx - pad;
                                                acc += dot(&drow[ox0..ox1], &row[ix0..ix0 + (ox1 - ox0)]);
                                            } else {
                                                for ox in ox0..ox1 {
                                                    acc += drow[ox] * row[ox * stride + kx - pad];
                                                }
                                            }
                                        }
                                        gwm[(ci * kernel + ky) * kernel + kx] += acc;
                                    }
                                }
                            }
                        }
                    });
                    ParamGrad { weight: gw, bias: gb }
                });
                (dx, grads)
            }
            LayerKind::Relu => {
                let dx = need_dx.then(|| x.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect());
                (dx, None)
            }
            LayerKind::MaxPool { .. } => {
                let arg = argmax.expect("maxpool cache");
                let dx = need_dx.then(|| {
                    let mut dx = vec![0.0; n * in_len];
                    dx.par_chunks_mut(in_len)
                        .zip(dy.par_chunks(out_len))
                        .zip(arg.par_chunks(out_len))
                        .for_each(|((dxi, dyi), ai)| {
                            for (&g, &a) in dyi.iter().zip(ai) {
                                dxi[a as usize] += g;
                            }
                        });
                    dx
                });
                (dx, None)
            }
            LayerKind::Flatten | LayerKind::Dropout { .. } => (need_dx.then(|| dy.to_vec()), None),
            LayerKind::Dense { out_features } => {
                let p = self.params.as_ref().expect("dense params");
                let dx = need_dx.then(|| {
                    let mut dx = vec![0.0; n * in_len];
                    dx.par_chunks_mut(in_len).zip(dy.par_chunks(out_features)).for_each(|(dxi, dyi)| {
                        for (k, &g) in dyi.iter().enumerate() {
                            if g != 0.0 {
                                axpy(g, &p.weight[k * in_len..(k + 1) * in_len], dxi);
                            }
                        }
                    });
                    dx
                });
                let grads = want_params.then(|| {
                    let mut gw = vec![0.0; out_features * in_len];
                    gw.par_chunks_mut(in_len).enumerate().for_each(|(k, gwk)| {
                        for s in 0..n {
                            let g = dy[s * out_features + k];
                            if g != 0.0 {
                                axpy(g, &x[s * in_len..(s + 1) * in_len], gwk);
                            }
                        }
                    });
                    let mut gb = vec![0.0; out_features];
                    for dyi in dy.chunks(out_features) {
                        for (b, &g) in gb.iter_mut().zip(dyi) {
                            *b += g;
                        }
                    }
                    ParamGrad { weight: gw, bias: gb }
                });
                (dx, grads)
            }
            LayerKind::Softmax => {
                let dx = need_dx.then(|| {
                    let mut dx = vec![0.0; n * in_len];
                    for ((dxi, yi), dyi) in dx.chunks_mut(in_len).zip(y.chunks(in_len)).zip(dy.chunks(in_len)) {
                        let s = dot(yi, dyi);
                        for ((d, &p), &g) in dxi.iter_mut().zip(yi).zip(dyi) {
                            *d = p * (g - s);
                        }
                    }
                    dx
                });
                (dx, None)
            }
            LayerKind::Concat { .. } => {
                let dx = need_dx.then(|| dy.chunks(out_len).flat_map(|r| r[..in_len].iter().copied()).collect());
                (dx, None)
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent accumulators; the summation order is fixed
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for (j, slot) in acc.iter_mut().enumerate() {
            *slot += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
