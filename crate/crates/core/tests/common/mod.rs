#![allow(dead_code)]

use mammopipe::nn::{LayerKind, Network, Tensor};
use mammopipe::rng::SplitMix64;

pub const EPS: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn random_tensor(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Loss = sum(output * r) for a fixed random `r`.
fn loss(net: &Network, x: &Tensor, aux: Option<&Tensor>, r: &[f64]) -> f64 {
    net.predict(x, aux).unwrap().data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Relu sign patterns and maxpool winners for every layer; a finite
/// difference is only meaningful if this does not change across the step.
fn kinks(net: &Network, x: &Tensor, aux: Option<&Tensor>) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        match layer.kind {
            LayerKind::Relu => {
                let input = net.run_layers(0..i, x, aux).unwrap();
                out.push(input.data().iter().map(|&v| usize::from(v > 0.0)).collect());
            }
            LayerKind::MaxPool { kernel, stride } => {
                let input = net.run_layers(0..i, x, aux).unwrap();
                let [c, h, w] = [layer.in_shape[0], layer.in_shape[1], layer.in_shape[2]];
                let [oh, ow] = [layer.out_shape[1], layer.out_shape[2]];
                let mut winners = Vec::new();
                for s in input.rows() {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = (f64::NEG_INFINITY, 0);
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let idx = (ci * h + oy * stride + ky) * w + ox * stride + kx;
                                        if s[idx] > best.0 {
                                            best = (s[idx], idx);
                                        }
                                    }
                                }
                                winners.push(best.1);
                            }
                        }
                    }
                }
                out.push(winners);
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct CheckStats {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl CheckStats {
    fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        self.worst = self.worst.max(e);
        if e >= REL_TOL {
            self.failures.push(format!("{what}: analytic {analytic:e} numeric {numeric:e} rel {e:e}"));
        }
    }

    pub fn merge(&mut self, other: CheckStats) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        self.worst = self.worst.max(other.worst);
        self.failures.extend(other.failures);
    }
}

/// Compare every parameter gradient and every input gradient against
/// central differences. Frozen layers must report no parameter gradient.
pub fn check_network(net: &Network, x: &Tensor, aux: Option<&Tensor>, rng: &mut SplitMix64) -> CheckStats {
    check_network_strided(net, x, aux, rng, usize::MAX)
}

/// As [`check_network`], visiting at most about `per_layer` evenly spaced
/// coordinates of each parameter block and of the input.
pub fn check_network_strided(
    net: &Network,
    x: &Tensor,
    aux: Option<&Tensor>,
    rng: &mut SplitMix64,
    per_layer: usize,
) -> CheckStats {
    let stride = |len: usize| len.div_ceil(per_layer.max(1)).max(1);
    let (y, cache) = net.forward(x, aux).unwrap();
    let r: Vec<f64> = (0..y.data().len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let grads = net.backward_with(&cache, &Tensor::new(y.shape().to_vec(), r.clone()).unwrap(), true).unwrap();
    let base_kinks = kinks(net, x, aux);
    let mut stats = CheckStats::default();

    for (li, layer) in net.layers().iter().enumerate() {
        let Some(p) = &layer.params else { continue };
        if layer.frozen {
            if grads.layers[li].is_some() {
                stats.failures.push(format!("layer {li} is frozen but has a gradient"));
            }
            continue;
        }
        let g = grads.layers[li].as_ref().expect("trainable layer gradient");
        let nw = p.weight.len();
        for j in (0..nw + p.bias.len()).step_by(stride(nw + p.bias.len())) {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let bump = |n: &mut Network, d: f64| {
                let q = n.layer_mut(li).params.as_mut().unwrap();
                if j < nw {
                    q.weight[j] += d;
                } else {
                    q.bias[j - nw] += d;
                }
            };
            bump(&mut plus, EPS);
            bump(&mut minus, -EPS);
            if kinks(&plus, x, aux) != base_kinks || kinks(&minus, x, aux) != base_kinks {
                stats.skipped_kinks += 1;
                continue;
            }
            let numeric = (loss(&plus, x, aux, &r) - loss(&minus, x, aux, &r)) / (2.0 * EPS);
            let analytic = if j < nw { g.weight[j] } else { g.bias[j - nw] };
            stats.record(format!("layer {li} ({}) param {j}", layer.kind.name()), analytic, numeric);
        }
    }

    let gin = grads.input.expect("input gradient requested");
    for j in (0..x.data().len()).step_by(stride(x.data().len())) {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data_mut()[j] += EPS;
        xm.data_mut()[j] -= EPS;
        if kinks(net, &xp, aux) != base_kinks || kinks(net, &xm, aux) != base_kinks {
            stats.skipped_kinks += 1;
            continue;
        }
        let numeric = (loss(net, &xp, aux, &r) - loss(net, &xm, aux, &r)) / (2.0 * EPS);
        stats.record(format!("input {j}"), gin.data()[j], numeric);
    }
    stats
}

pub const ALL_KINDS: [&str; 8] = ["conv", "relu", "maxpool", "flatten", "dense", "softmax", "dropout", "concat"];

/// A small random network exercising `kind`, with a matching input batch and
/// side input. Some parameterized layers are randomly frozen.
pub fn random_case(kind: &str, rng: &mut SplitMix64) -> (Network, Tensor, Option<Tensor>) {
    let pick = |rng: &mut SplitMix64, lo: usize, hi: usize| lo + rng.below((hi - lo + 1) as u64) as usize;
    let batch = pick(rng, 1, 3);
    let c = pick(rng, 1, 3);
    let h = pick(rng, 4, 8);
    let w = pick(rng, 4, 8);
    let conv = |rng: &mut SplitMix64| LayerKind::Conv {
        out_channels: pick(rng, 1, 3),
        kernel: pick(rng, 1, 3),
        stride: pick(rng, 1, 2),
        pad: pick(rng, 0, 1),
    };
    let dense = |rng: &mut SplitMix64| LayerKind::Dense { out_features: pick(rng, 1, 5) };
    let mut aux_width = 0;
    let kinds: Vec<LayerKind> = match kind {
        "conv" => {
            // pad 1 keeps the second conv valid however much the first one shrank
            let first = conv(rng);
            let second = match conv(rng) {
                LayerKind::Conv { out_channels, kernel, stride, .. } => LayerKind::Conv { out_channels, kernel, stride, pad: 1 },
                k => k,
            };
            vec![first, LayerKind::Relu, second]
        }
        "relu" => vec![conv(rng), LayerKind::Relu, LayerKind::Flatten, dense(rng)],
        "maxpool" => {
            let k = pick(rng, 1, 2);
            vec![
                LayerKind::Conv { out_channels: pick(rng, 1, 3), kernel: 3, stride: 1, pad: 1 },
                LayerKind::MaxPool { kernel: k, stride: pick(rng, 1, 2) },
                LayerKind::Flatten,
                dense(rng),
            ]
        }
        "flatten" => vec![conv(rng), LayerKind::Flatten, dense(rng)],
        "dense" => vec![LayerKind::Flatten, dense(rng), LayerKind::Relu, dense(rng)],
        "softmax" => vec![LayerKind::Flatten, LayerKind::Dense { out_features: pick(rng, 2, 5) }, LayerKind::Softmax],
        "dropout" => vec![conv(rng), LayerKind::Dropout { rate: 0.5 }, LayerKind::Flatten, dense(rng)],
        "concat" => {
            aux_width = pick(rng, 1, 7);
            vec![LayerKind::Flatten, dense(rng), LayerKind::Concat { width: aux_width }, dense(rng), LayerKind::Softmax]
        }
        other => panic!("unknown kind {other}"),
    };
    let mut net = Network::new(&[c, h, w], &kinds, rng.next_u64()).unwrap();
    let n_param = net.layers().iter().filter(|l| l.params.is_some()).count();
    if n_param > 1 && rng.below(3) == 0 {
        let victim = rng.below(n_param as u64) as usize;
        let idx: Vec<usize> = net.layers().iter().enumerate().filter(|(_, l)| l.params.is_some()).map(|(i, _)| i).collect();
        net.freeze_layers(|i, _| i == idx[victim]);
    }
    let x = random_tensor(rng, vec![batch, c, h, w]);
    let aux = (aux_width > 0).then(|| {
        let mut t = random_tensor(rng, vec![batch, aux_width]);
        t.data_mut().iter_mut().for_each(|v| *v = v.abs());
        t
    });
    (net, x, aux)
}

/// Run `configs` random cases per layer kind.
pub fn gradient_suite(configs: usize, seed: u64) -> Vec<(&'static str, CheckStats)> {
    let mut rng = SplitMix64::new(seed);
    ALL_KINDS
        .iter()
        .map(|&kind| {
            let mut total = CheckStats::default();
            for _ in 0..configs {
                let (net, x, aux) = random_case(kind, &mut rng);
                total.merge(check_network(&net, &x, aux.as_ref(), &mut rng));
            }
            (kind, total)
        })
        .collect()
}

/// Brute-force k-means objective for k=2 over every labelling.
pub fn brute_force_two_means(values: &[f64]) -> f64 {
    let n = values.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << n) - 1 {
        let mut obj = 0.0;
        for side in [true, false] {
            let members: Vec<f64> = (0..n).filter(|&i| ((mask >> i) & 1 == 1) == side).map(|i| values[i]).collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            obj += members.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        }
        best = best.min(obj);
    }
    best
}

/// Two-class toy images: a bright bar in the left or right half of an 8x8
/// single-channel image, and a MiniNet backbone for them.
pub fn toy_problem(count: usize, seed: u64) -> (Network, mammopipe::nn::Corpus) {
    let mut rng = SplitMix64::new(seed);
    let (mut inputs, mut labels) = (Vec::new(), Vec::new());
    for i in 0..count {
        let label = i % 2;
        let col = if label == 0 { rng.below(3) as usize } else { 5 + rng.below(3) as usize };
        for _y in 0..8 {
            for x in 0..8 {
                let v = if x == col { 0.9 } else { 0.1 };
                inputs.push(v + rng.uniform(-0.05, 0.05));
            }
        }
        labels.push(label);
    }
    let net = Network::mininet(1, 8, 2, seed).unwrap();
    (net, mammopipe::nn::Corpus::new(vec![1, 8, 8], inputs, labels).unwrap())
}

/// Replace the head, freeze everything else, train with the default
/// optimizer settings and return the first epoch whose train accuracy is 1.0.
pub fn head_only_epochs_to_fit(net: &Network, corpus: &mammopipe::nn::Corpus, budget: usize) -> Option<usize> {
    let mut head = net
        .replace_head(3, &[LayerKind::Relu, LayerKind::Dense { out_features: 2 }, LayerKind::Softmax], 2)
        .unwrap();
    head.freeze_layers(|_, l| !l.head);
    let cfg = mammopipe::nn::TrainConfig { max_epochs: budget, ..Default::default() };
    let (_, hist) = mammopipe::nn::train(&head, corpus, None, &cfg).unwrap();
    hist.epochs.iter().position(|e| e.train_acc >= 1.0).map(|p| p + 1)
}
