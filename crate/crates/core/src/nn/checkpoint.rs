//! Binary weight checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MMPN" | version u32 | layer count u32 | seed u64
//! input rank u32 | input dims u32 * rank
//! per layer:
//!   kind tag u8 | flags u8 (bit 0 frozen, bit 1 head) | 4 x u32 hyperparameters
//!   if parameterized: weight rank u32 | weight dims u32 * rank | bias len u32
//!                     weights f32 * product(dims) | biases f32 * bias len
//! ```
//!
//! Values are stored row-major as IEEE-754 binary32; momentum is not saved.

use std::path::Path;

use super::layer::LayerKind;
use super::network::Network;
use super::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMPN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn tag(kind: &LayerKind) -> (u8, [u32; 4]) {
    match *kind {
        LayerKind::Conv { out_channels, kernel, stride, pad } => {
            (1, [out_channels as u32, kernel as u32, stride as u32, pad as u32])
        }
        LayerKind::Relu => (2, [0; 4]),
        LayerKind::MaxPool { kernel, stride } => (3, [kernel as u32, stride as u32, 0, 0]),
        LayerKind::Flatten => (4, [0; 4]),
        LayerKind::Dense { out_features } => (5, [out_features as u32, 0, 0, 0]),
        LayerKind::Softmax => (6, [0; 4]),
        LayerKind::Dropout { rate } => (7, [rate.to_bits(), 0, 0, 0]),
        LayerKind::Concat { width } => (8, [width as u32, 0, 0, 0]),
    }
}

fn untag(t: u8, h: [u32; 4]) -> Result<LayerKind, NnError> {
    let u = |i: usize| h[i] as usize;
    Ok(match t {
        1 => LayerKind::Conv { out_channels: u(0), kernel: u(1), stride: u(2), pad: u(3) },
        2 => LayerKind::Relu,
        3 => LayerKind::MaxPool { kernel: u(0), stride: u(1) },
        4 => LayerKind::Flatten,
        5 => LayerKind::Dense { out_features: u(0) },
        6 => LayerKind::Softmax,
        7 => LayerKind::Dropout { rate: f32::from_bits(h[0]) },
        8 => LayerKind::Concat { width: u(0) },
        other => return Err(NnError::Checkpoint(format!("unknown layer tag {other}"))),
    })
}

pub fn encode_checkpoint(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    u32le(&mut out, net.layers().len());
    out.extend_from_slice(&net.rng_seed().to_le_bytes());
    u32le(&mut out, net.input_shape().len());
    for &d in net.input_shape() {
        u32le(&mut out, d);
    }
    for layer in net.layers() {
        let (t, h) = tag(&layer.kind);
        out.push(t);
        out.push(u8::from(layer.frozen) | (u8::from(layer.head) << 1));
        for v in h {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(p) = &layer.params {
            u32le(&mut out, p.weight_dims.len());
            for &d in &p.weight_dims {
                u32le(&mut out, d);
            }
            u32le(&mut out, p.bias.len());
            for &v in p.weight.iter().chain(&p.bias) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, NnError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| NnError::Checkpoint("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network, NnError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let seed = r.u64()?;
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 3 {
        return Err(NnError::Checkpoint(format!("input rank {rank}")));
    }
    let input: Vec<usize> = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_, _>>()?;

    struct Raw {
        kind: LayerKind,
        flags: u8,
        params: Option<(Vec<usize>, Vec<f64>, Vec<f64>)>,
    }
    let mut raws = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let t = r.u8()?;
        let flags = r.u8()?;
        let h = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let kind = untag(t, h)?;
        let params = if kind.has_params() {
            let wr = r.u32()? as usize;
            if wr > 4 {
                return Err(NnError::Checkpoint(format!("weight rank {wr}")));
            }
            let dims: Vec<usize> = (0..wr).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_, _>>()?;
            let bl = r.u32()? as usize;
            let wn = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let wn = wn.ok_or_else(|| NnError::Checkpoint("size overflow".into()))?;
            let w = r.f32s(wn)?;
            let b = r.f32s(bl)?;
            Some((dims, w, b))
        } else {
            None
        };
        raws.push(Raw { kind, flags, params });
    }
    if r.pos != bytes.len() {
        return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let kinds: Vec<LayerKind> = raws.iter().map(|l| l.kind).collect();
    let mut net = Network::new(&input, &kinds, seed).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut layers = net.layers().to_vec();
    for (i, (layer, raw)) in layers.iter_mut().zip(raws).enumerate() {
        layer.frozen = raw.flags & 1 != 0;
        layer.head = raw.flags & 2 != 0;
        if let (Some(p), Some((dims, w, b))) = (layer.params.as_mut(), raw.params) {
            if dims != p.weight_dims || b.len() != p.bias.len() {
                return Err(NnError::Checkpoint(format!(
                    "layer {i}: stored dims {dims:?}/{}, topology implies {:?}/{}",
                    b.len(),
                    p.weight_dims,
                    p.bias.len()
                )));
            }
            if w.iter().chain(&b).any(|v| !v.is_finite()) {
                return Err(NnError::Checkpoint(format!("layer {i}: non-finite value")));
            }
            p.weight = w;
            p.bias = b;
        }
    }
    net = Network::from_layers(input, layers, seed);
    Ok(net)
}

pub fn save_checkpoint(path: &Path, net: &Network) -> Result<(), NnError> {
    std::fs::write(path, encode_checkpoint(net)).map_err(|source| NnError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Network, NnError> {
    let bytes = std::fs::read(path).map_err(|source| NnError::Io { path: path.to_path_buf(), source })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_net() -> Network {
        let mut net = Network::new(
            &[2, 6, 6],
            &[
                LayerKind::Conv { out_channels: 3, kernel: 3, stride: 1, pad: 1 },
                LayerKind::Relu,
                LayerKind::MaxPool { kernel: 2, stride: 2 },
                LayerKind::Dropout { rate: 0.5 },
                LayerKind::Flatten,
                LayerKind::Concat { width: 7 },
                LayerKind::Dense { out_features: 3 },
                LayerKind::Softmax,
            ],
            42,
        )
        .unwrap();
        net.freeze_layers(|i, _| i == 0);
        net
    }

    #[test]
    fn round_trip_matches_f32_rounding() {
        let net = sample_net();
        let back = decode_checkpoint(&encode_checkpoint(&net)).unwrap();
        assert_eq!(back.input_shape(), net.input_shape());
        assert_eq!(back.rng_seed(), 42);
        for (a, b) in back.layers().iter().zip(net.layers()) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.frozen, b.frozen);
            if let (Some(pa), Some(pb)) = (&a.params, &b.params) {
                for (x, y) in pa.weight.iter().zip(&pb.weight) {
                    assert_eq!(*x, *y as f32 as f64);
                }
            }
        }
        // a second trip is lossless
        assert_eq!(encode_checkpoint(&back), encode_checkpoint(&net));
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&sample_net());
        assert_eq!(&bytes[..4], b"MMPN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&sample_net());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
