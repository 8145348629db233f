use super::layer::{Layer, LayerKind, ParamGrad, Params};
use super::tensor::Tensor;
use super::NnError;
use crate::rng::{derive_seed, SplitMix64};

/// A sequential network: topology, parameters, momentum state and the seed
/// that drives its initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    rng_seed: u64,
    init_counter: u64,
    version: u64,
}

/// Activations recorded by a forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Cache {
    start: usize,
    version: u64,
    batch: usize,
    /// `acts[i]` is the input to layer `start + i`; the last entry is the output.
    acts: Vec<Vec<f64>>,
    argmax: Vec<Option<Vec<u32>>>,
}

/// Per-layer parameter gradients (`None` for frozen or parameter-free layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGrad>>,
    /// Gradient with respect to the network input, when requested.
    pub input: Option<Tensor>,
}

impl Gradients {
    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|g| g.weight.iter().chain(&g.bias).all(|&v| v == 0.0))
    }
}

/// Build the layer stack for `kinds` starting at `input_shape`.
fn build_layers(input_shape: &[usize], kinds: &[LayerKind], offset: usize) -> Result<Vec<Layer>, NnError> {
    let mut shape = input_shape.to_vec();
    let mut layers = Vec::with_capacity(kinds.len());
    for (i, kind) in kinds.iter().enumerate() {
        let out = kind
            .output_shape(&shape)
            .map_err(|message| NnError::ShapeMismatch { layer: offset + i, message })?;
        let params = kind.param_dims(&shape).map(|(wd, bl, _)| Params::zeros(wd, bl));
        layers.push(Layer { kind: *kind, frozen: false, head: false, in_shape: shape, out_shape: out.clone(), params });
        shape = out;
    }
    Ok(layers)
}

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
fn init_layer(layer: &mut Layer, seed: u64) {
    if let Some((_, _, fan_in)) = layer.kind.param_dims(&layer.in_shape) {
        let p = layer.params.as_mut().expect("parameterized layer");
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = SplitMix64::new(seed);
        for w in &mut p.weight {
            *w = rng.normal() * std;
        }
        p.bias.iter_mut().for_each(|b| *b = 0.0);
        p.vel_weight.iter_mut().for_each(|v| *v = 0.0);
        p.vel_bias.iter_mut().for_each(|v| *v = 0.0);
    }
}

impl Network {
    /// Build and initialize a network. Layer `i` draws its weights from the
    /// stream `derive_seed(seed, i)`.
    pub fn new(input_shape: &[usize], kinds: &[LayerKind], seed: u64) -> Result<Self, NnError> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(NnError::InvalidConfig(format!("bad input shape {input_shape:?}")));
        }
        let mut layers = build_layers(input_shape, kinds, 0)?;
        if layers.iter().filter(|l| matches!(l.kind, LayerKind::Concat { .. })).count() > 1 {
            return Err(NnError::InvalidConfig("at most one concat layer is supported".into()));
        }
        for (i, layer) in layers.iter_mut().enumerate() {
            init_layer(layer, derive_seed(seed, i as u64));
        }
        Ok(Self { input_shape: input_shape.to_vec(), layers, rng_seed: seed, init_counter: 0, version: 0 })
    }

    /// Reference topology: conv3x3x16, relu, maxpool2, conv3x3x32, relu,
    /// maxpool2, flatten, dense64, relu, dense(classes), softmax.
    pub fn mininet(channels: usize, size: usize, num_classes: usize, seed: u64) -> Result<Self, NnError> {
        Self::new(&[channels, size, size], &mininet_layers(num_classes), seed)
    }

    pub(crate) fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>, rng_seed: u64) -> Self {
        Self { input_shape, layers, rng_seed, init_counter: 0, version: 0 }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        self.version += 1;
        &mut self.layers[i]
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().map_or(&self.input_shape, |l| &l.out_shape)
    }

    pub fn output_width(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// Width of the side input consumed by a concat layer (0 if none).
    pub fn aux_width(&self) -> usize {
        self.concat_index().map_or(0, |i| match self.layers[i].kind {
            LayerKind::Concat { width } => width,
            _ => unreachable!(),
        })
    }

    pub fn concat_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l.kind, LayerKind::Concat { .. }))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.params.as_ref()).map(Params::len).sum()
    }

    /// Number of leading layers that never need gradients: everything before
    /// the first trainable parameterized layer.
    pub fn frozen_prefix(&self) -> usize {
        self.layers.iter().position(Layer::trainable).unwrap_or(self.layers.len())
    }

    /// Flag every layer matching `predicate` as frozen. Returns how many matched.
    pub fn freeze_layers(&mut self, predicate: impl Fn(usize, &Layer) -> bool) -> usize {
        let mut count = 0;
        for (i, l) in self.layers.iter_mut().enumerate() {
            if predicate(i, l) {
                l.frozen = true;
                count += 1;
            }
        }
        self.version += 1;
        count
    }

    pub fn unfreeze_all(&mut self) {
        self.layers.iter_mut().for_each(|l| l.frozen = false);
        self.version += 1;
    }

    pub fn reset_momentum(&mut self) {
        for p in self.layers.iter_mut().filter_map(|l| l.params.as_mut()) {
            p.vel_weight.iter_mut().for_each(|v| *v = 0.0);
            p.vel_bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Drop the trailing `remove` layers (at least three) and append
    /// `new_layers`, freshly initialized and marked as head. Retained layers
    /// keep their parameters bit-for-bit.
    pub fn replace_head(&self, remove: usize, new_layers: &[LayerKind], num_classes: usize) -> Result<Network, NnError> {
        if self.layers.len() < 3 {
            return Err(NnError::Splice(format!("network has only {} layers", self.layers.len())));
        }
        if remove < 3 || remove > self.layers.len() {
            return Err(NnError::Splice(format!(
                "must remove between 3 and {} trailing layers, asked for {remove}",
                self.layers.len()
            )));
        }
        match new_layers.iter().rev().find(|k| matches!(k, LayerKind::Dense { .. })) {
            Some(LayerKind::Dense { out_features }) if *out_features == num_classes => {}
            Some(LayerKind::Dense { out_features }) => {
                return Err(NnError::Splice(format!(
                    "final dense layer has {out_features} outputs, expected {num_classes}"
                )))
            }
            _ => return Err(NnError::Splice("new head has no dense layer".into())),
        }
        let keep = self.layers.len() - remove;
        let splice_shape = if keep == 0 { self.input_shape.clone() } else { self.layers[keep - 1].out_shape.clone() };
        let mut appended = build_layers(&splice_shape, new_layers, keep).map_err(|e| match e {
            NnError::ShapeMismatch { layer, message } => NnError::Splice(format!("layer {layer}: {message}")),
            other => other,
        })?;
        let counter = self.init_counter + 1;
        for (i, l) in appended.iter_mut().enumerate() {
            l.head = true;
            init_layer(l, derive_seed(derive_seed(self.rng_seed, 0x4EAD_0000 + counter), (keep + i) as u64));
        }
        let mut layers: Vec<Layer> = self.layers[..keep].to_vec();
        layers.iter_mut().for_each(|l| l.head = false);
        layers.extend(appended);
        let net = Network {
            input_shape: self.input_shape.clone(),
            layers,
            rng_seed: self.rng_seed,
            init_counter: counter,
            version: self.version + 1,
        };
        if net.layers.iter().filter(|l| matches!(l.kind, LayerKind::Concat { .. })).count() > 1 {
            return Err(NnError::Splice("at most one concat layer is supported".into()));
        }
        if net.output_width() != num_classes {
            return Err(NnError::Splice(format!("network output is {} wide, expected {num_classes}", net.output_width())));
        }
        Ok(net)
    }

    fn check_input(&self, start: usize, input: &Tensor, aux: Option<&Tensor>) -> Result<(), NnError> {
        let expected: &[usize] = if start == 0 {
            &self.input_shape
        } else if start < self.layers.len() {
            &self.layers[start].in_shape
        } else {
            self.output_shape()
        };
        if &input.shape()[1..] != expected {
            return Err(NnError::InputShape { expected: expected.to_vec(), found: input.shape()[1..].to_vec() });
        }
        let needs_aux = self.concat_index().is_some_and(|c| c >= start);
        match (needs_aux, aux) {
            (true, Some(a)) if a.shape() == [input.batch(), self.aux_width()] => Ok(()),
            (true, Some(a)) => Err(NnError::AuxMismatch(format!(
                "side input {:?}, expected [{}, {}]",
                a.shape(),
                input.batch(),
                self.aux_width()
            ))),
            (true, None) => Err(NnError::AuxMismatch("network needs a side input".into())),
            (false, Some(_)) => Err(NnError::AuxMismatch("network takes no side input".into())),
            (false, None) => Ok(()),
        }
    }

    pub fn forward(&self, input: &Tensor, aux: Option<&Tensor>) -> Result<(Tensor, Cache), NnError> {
        self.forward_from(0, input, aux)
    }

    /// Run layers `start..` treating `input` as the input of layer `start`.
    pub fn forward_from(&self, start: usize, input: &Tensor, aux: Option<&Tensor>) -> Result<(Tensor, Cache), NnError> {
        self.check_input(start, input, aux)?;
        let n = input.batch();
        let mut acts = vec![input.data().to_vec()];
        let mut argmax = Vec::new();
        for layer in &self.layers[start.min(self.layers.len())..] {
            let f = layer.forward(acts.last().unwrap(), n, aux.map(Tensor::data));
            acts.push(f.out);
            argmax.push(f.argmax);
        }
        let out = Tensor::from_parts(
            std::iter::once(n).chain(self.output_shape().iter().copied()).collect(),
            acts.last().unwrap().clone(),
        );
        Ok((out, Cache { start, version: self.version, batch: n, acts, argmax }))
    }

    /// Run layers `range` without recording a cache.
    pub fn run_layers(
        &self,
        range: std::ops::Range<usize>,
        input: &Tensor,
        aux: Option<&Tensor>,
    ) -> Result<Tensor, NnError> {
        let (start, end) = (range.start, range.end.min(self.layers.len()));
        let expected: &[usize] = if start == 0 { &self.input_shape } else { &self.layers[start.min(self.layers.len() - 1)].in_shape };
        if &input.shape()[1..] != expected && start < self.layers.len() {
            return Err(NnError::InputShape { expected: expected.to_vec(), found: input.shape()[1..].to_vec() });
        }
        let n = input.batch();
        let mut x = input.data().to_vec();
        let mut shape = input.shape()[1..].to_vec();
        for layer in &self.layers[start..end] {
            if matches!(layer.kind, LayerKind::Concat { .. }) && aux.is_none() {
                return Err(NnError::AuxMismatch("network needs a side input".into()));
            }
            x = layer.forward(&x, n, aux.map(Tensor::data)).out;
            shape = layer.out_shape.clone();
        }
        Ok(Tensor::from_parts(std::iter::once(n).chain(shape).collect(), x))
    }

    pub fn predict(&self, input: &Tensor, aux: Option<&Tensor>) -> Result<Tensor, NnError> {
        self.check_input(0, input, aux)?;
        self.run_layers(0..self.layers.len(), input, aux)
    }

    pub fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<Gradients, NnError> {
        self.backward_with(cache, grad_out, false)
    }

    /// Backpropagate `grad_out` (gradient of the loss with respect to the
    /// network output). Frozen layers pass input gradients through but get
    /// no parameter gradients. Propagation stops below the lowest trainable
    /// layer unless `want_input` is set.
    pub fn backward_with(&self, cache: &Cache, grad_out: &Tensor, want_input: bool) -> Result<Gradients, NnError> {
        if cache.version != self.version || cache.acts.len() != self.layers.len() - cache.start.min(self.layers.len()) + 1 {
            return Err(NnError::StaleCache);
        }
        if grad_out.shape()[0] != cache.batch || grad_out.data().len() != cache.acts.last().unwrap().len() {
            return Err(NnError::InputShape {
                expected: std::iter::once(cache.batch).chain(self.output_shape().iter().copied()).collect(),
                found: grad_out.shape().to_vec(),
            });
        }
        let n = cache.batch;
        let start = cache.start;
        let lowest_trainable = self.layers[start..].iter().position(Layer::trainable).map(|p| p + start);
        let stop = if want_input { start } else { lowest_trainable.unwrap_or(self.layers.len()) };
        let mut grads: Vec<Option<ParamGrad>> = vec![None; self.layers.len()];
        let mut dy = grad_out.data().to_vec();
        let mut input_grad = None;
        for i in (stop..self.layers.len()).rev() {
            let k = i - start;
            let need_dx = i > stop || want_input;
            let (dx, pg) = self.layers[i].backward(&cache.acts[k], &cache.acts[k + 1], cache.argmax[k].as_deref(), &dy, n, need_dx);
            grads[i] = pg;
            match dx {
                Some(dx) => dy = dx,
                None => break,
            }
            if i == start && want_input {
                input_grad = Some(Tensor::from_parts(
                    std::iter::once(n).chain(self.layers[start].in_shape.iter().copied()).collect(),
                    dy.clone(),
                ));
            }
        }
        Ok(Gradients { layers: grads, input: input_grad })
    }
}

pub fn mininet_layers(num_classes: usize) -> Vec<LayerKind> {
    vec![
        LayerKind::Conv { out_channels: 16, kernel: 3, stride: 1, pad: 1 },
        LayerKind::Relu,
        LayerKind::MaxPool { kernel: 2, stride: 2 },
        LayerKind::Conv { out_channels: 32, kernel: 3, stride: 1, pad: 1 },
        LayerKind::Relu,
        LayerKind::MaxPool { kernel: 2, stride: 2 },
        LayerKind::Flatten,
        LayerKind::Dense { out_features: 64 },
        LayerKind::Relu,
        LayerKind::Dense { out_features: num_classes },
        LayerKind::Softmax,
    ]
}
