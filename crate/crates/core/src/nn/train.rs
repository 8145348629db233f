use super::network::Network;
use super::optim::{sgdm_step, TrainConfig};
use super::tensor::Tensor;
use super::NnError;
use crate::rng::{derive_seed, SplitMix64};

const PROB_FLOOR: f64 = 1e-12;
const EVAL_CHUNK: usize = 32;

/// Labelled training data: `inputs` holds `len()` samples of `sample_shape`
/// back to back; `aux` holds `aux_width` side-input values per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    sample_shape: Vec<usize>,
    inputs: Vec<f64>,
    aux_width: usize,
    aux: Vec<f64>,
    labels: Vec<usize>,
}

impl Corpus {
    pub fn new(sample_shape: Vec<usize>, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self, NnError> {
        let per: usize = sample_shape.iter().product();
        if sample_shape.is_empty() || per == 0 || inputs.len() != per * labels.len() {
            return Err(NnError::TensorShape {
                shape: std::iter::once(labels.len()).chain(sample_shape).collect(),
                len: inputs.len(),
            });
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("corpus inputs".into()));
        }
        Ok(Self { sample_shape, inputs, aux_width: 0, aux: Vec::new(), labels })
    }

    pub fn with_aux(mut self, width: usize, aux: Vec<f64>) -> Result<Self, NnError> {
        if aux.len() != width * self.labels.len() {
            return Err(NnError::AuxMismatch(format!("{} values for {} samples of width {width}", aux.len(), self.len())));
        }
        if aux.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("corpus side input".into()));
        }
        self.aux_width = width;
        self.aux = aux;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn aux(&self) -> Option<(usize, &[f64])> {
        (self.aux_width > 0).then_some((self.aux_width, &self.aux[..]))
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    fn gather(&self, idx: &[usize]) -> (Tensor, Option<Tensor>) {
        let per = self.sample_len();
        let mut x = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * per..(i + 1) * per]);
        }
        let shape = std::iter::once(idx.len()).chain(self.sample_shape.iter().copied()).collect();
        (Tensor::from_parts(shape, x), self.gather_aux(idx))
    }

    fn gather_aux(&self, idx: &[usize]) -> Option<Tensor> {
        (self.aux_width > 0).then(|| {
            let w = self.aux_width;
            let mut a = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                a.extend_from_slice(&self.aux[i * w..(i + 1) * w]);
            }
            Tensor::from_parts(vec![idx.len(), w], a)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.8}")).unwrap_or_default();
        let mut s = String::from("epoch,train_loss,val_loss,train_acc,val_acc\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.8},{},{:.8},{}\n",
                e.epoch,
                e.train_loss,
                opt(e.val_loss),
                e.train_acc,
                opt(e.val_acc)
            ));
        }
        s
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Mean cross-entropy of probability rows against integer labels.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> f64 {
    let losses: Vec<f64> = probs.rows().zip(labels).map(|(p, &y)| -p[y].max(PROB_FLOOR).ln()).collect();
    losses.iter().sum::<f64>() / labels.len() as f64
}

/// Gradient of the mean cross-entropy with respect to the probabilities.
pub fn cross_entropy_grad(probs: &Tensor, labels: &[usize]) -> Tensor {
    let n = labels.len() as f64;
    let c = probs.sample_len();
    let mut g = vec![0.0; probs.data().len()];
    for (i, (p, &y)) in probs.rows().zip(labels).enumerate() {
        g[i * c + y] = -1.0 / (p[y].max(PROB_FLOOR) * n);
    }
    Tensor::from_parts(probs.shape().to_vec(), g)
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = probs.rows().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    hits as f64 / labels.len() as f64
}

fn check_corpus(net: &Network, corpus: &Corpus) -> Result<(), NnError> {
    if corpus.is_empty() {
        return Err(NnError::EmptyCorpus);
    }
    if corpus.sample_shape() != net.input_shape() {
        return Err(NnError::InputShape { expected: net.input_shape().to_vec(), found: corpus.sample_shape().to_vec() });
    }
    if corpus.aux_width != net.aux_width() {
        return Err(NnError::AuxMismatch(format!(
            "corpus side input width {}, network expects {}",
            corpus.aux_width,
            net.aux_width()
        )));
    }
    let classes = net.output_width();
    if let Some(&label) = corpus.labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Class probabilities for every sample, in corpus order.
pub fn predict_proba(net: &Network, corpus: &Corpus) -> Result<Tensor, NnError> {
    if corpus.sample_shape() != net.input_shape() {
        return Err(NnError::InputShape { expected: net.input_shape().to_vec(), found: corpus.sample_shape().to_vec() });
    }
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let mut out = Vec::with_capacity(corpus.len() * net.output_width());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, a) = corpus.gather(chunk);
        out.extend(net.predict(&x, a.as_ref())?.into_data());
    }
    Ok(Tensor::from_parts(vec![corpus.len(), net.output_width()], out))
}

/// (mean cross-entropy, accuracy) on a labelled corpus.
pub fn evaluate(net: &Network, corpus: &Corpus) -> Result<(f64, f64), NnError> {
    check_corpus(net, corpus)?;
    let probs = predict_proba(net, corpus)?;
    Ok((cross_entropy(&probs, corpus.labels()), accuracy(&probs, corpus.labels())))
}

/// Output of the layers before `prefix` for every sample, as a corpus whose
/// samples are the activations entering layer `prefix`.
fn prefix_features(net: &Network, corpus: &Corpus, prefix: usize) -> Result<Corpus, NnError> {
    if prefix == 0 {
        return Ok(corpus.clone());
    }
    let shape = net.layers()[prefix - 1].out_shape.clone();
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let mut feats = Vec::with_capacity(corpus.len() * shape.iter().product::<usize>());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, a) = corpus.gather(chunk);
        feats.extend(net.run_layers(0..prefix, &x, a.as_ref())?.into_data());
    }
    // a concat inside the prefix has already consumed the side input
    let consumed = net.concat_index().is_some_and(|c| c < prefix);
    Ok(Corpus {
        sample_shape: shape,
        inputs: feats,
        aux_width: if consumed { 0 } else { corpus.aux_width },
        aux: if consumed { Vec::new() } else { corpus.aux.clone() },
        labels: corpus.labels.clone(),
    })
}

/// Mini-batch SGDM training with a seeded per-epoch shuffle. Layers ahead of
/// the first trainable one are evaluated once and their outputs reused.
/// Validation metrics, when a validation corpus is given, are computed after
/// every epoch.
pub fn train(net: &Network, train: &Corpus, val: Option<&Corpus>, cfg: &TrainConfig) -> Result<(Network, History), NnError> {
    cfg.validate()?;
    check_corpus(net, train)?;
    if let Some(v) = val {
        check_corpus(net, v)?;
    }
    let mut net = net.clone();
    let prefix = net.frozen_prefix().min(net.layers().len());
    let feats = prefix_features(&net, train, prefix)?;
    let val_feats = val.map(|v| prefix_features(&net, v, prefix)).transpose()?;
    let n = train.len();
    let c = net.output_width();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut sample_loss = vec![0.0; n];
    let mut sample_hit = vec![false; n];

    for epoch in 0..cfg.max_epochs {
        order.sort_unstable();
        SplitMix64::new(derive_seed(cfg.seed, epoch as u64)).shuffle(&mut order);
        for batch in order.chunks(cfg.mini_batch) {
            let (x, a) = feats.gather(batch);
            let (probs, cache) = net.forward_from(prefix, &x, a.as_ref())?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            for ((row, &i), &y) in probs.rows().zip(batch).zip(&labels) {
                sample_loss[i] = -row[y].max(PROB_FLOOR).ln();
                sample_hit[i] = argmax(row) == y;
            }
            if prefix < net.layers().len() {
                let grads = net.backward(&cache, &cross_entropy_grad(&probs, &labels))?;
                sgdm_step(&mut net, &grads, cfg)?;
            }
        }
        let train_loss = sample_loss.iter().sum::<f64>() / n as f64;
        if !train_loss.is_finite() {
            return Err(NnError::NonFinite(format!("training loss at epoch {}", epoch + 1)));
        }
        let train_acc = sample_hit.iter().filter(|&&h| h).count() as f64 / n as f64;
        let (val_loss, val_acc) = match &val_feats {
            Some(vf) => {
                let probs = forward_features(&net, vf, prefix, c)?;
                (Some(cross_entropy(&probs, vf.labels())), Some(accuracy(&probs, vf.labels())))
            }
            None => (None, None),
        };
        log::debug!("epoch {} loss {train_loss:.5} acc {train_acc:.3} val {val_loss:?} {val_acc:?}", epoch + 1);
        history.epochs.push(EpochStats { epoch: epoch + 1, train_loss, val_loss, train_acc, val_acc });
    }
    Ok((net, history))
}

fn forward_features(net: &Network, feats: &Corpus, prefix: usize, classes: usize) -> Result<Tensor, NnError> {
    let idx: Vec<usize> = (0..feats.len()).collect();
    let mut out = Vec::with_capacity(feats.len() * classes);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, a) = feats.gather(chunk);
        out.extend(net.run_layers(prefix..net.layers().len(), &x, a.as_ref())?.into_data());
    }
    Ok(Tensor::from_parts(vec![feats.len(), classes], out))
}
