//! Two-stage classifier: stage 1 predicts the seven abnormality classes,
//! stage 2 predicts severity from the image plus stage 1's output vector,
//! which is appended to its flattened conv features.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{derive_channels, AugmentError, AugmentedSample, ChannelConfig, CHANNEL_NAMES};
use crate::image::GrayImage;
use crate::mias::{Abnormality, Severity};
use crate::nn::{
    self, load_checkpoint, predict_proba, save_checkpoint, Corpus, History, LayerKind, Network, NnError, Tensor,
    TrainConfig,
};
use crate::rng::derive_seed;

pub const ABNORMALITY_CLASSES: usize = 7;
pub const SEVERITY_CLASSES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum CascadeError {
    #[error("stage {stage}: {source}")]
    Stage { stage: u8, source: NnError },
    #[error("channel derivation: {0}")]
    Channels(#[from] AugmentError),
    #[error("input: {0}")]
    Input(String),
    #[error("wiring: {0}")]
    Wiring(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn stage(stage: u8) -> impl Fn(NnError) -> CascadeError {
    move |source| CascadeError::Stage { stage, source }
}

/// Which channels feed the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// The raw image only.
    OriginalOnly,
    /// Raw image, segmentation and the three wavelet detail channels.
    Preprocessed,
}

impl Condition {
    pub fn channel_indices(self) -> &'static [usize] {
        match self {
            Condition::OriginalOnly => &[0],
            Condition::Preprocessed => &[0, 1, 2, 3, 4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::OriginalOnly => "original_only",
            Condition::Preprocessed => "preprocessed",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "original_only" => Ok(Condition::OriginalOnly),
            "preprocessed" => Ok(Condition::Preprocessed),
            other => Err(format!("unknown condition {other:?} (expected original_only or preprocessed)")),
        }
    }
}

/// Network input layout: selected channels, each area-resampled to
/// `size x size` and scaled to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub condition: Condition,
    pub size: usize,
}

impl InputSpec {
    pub fn channels(&self) -> usize {
        self.condition.channel_indices().len()
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.channels(), self.size, self.size]
    }

    pub fn encode(&self, channels: &[GrayImage]) -> Result<Vec<f64>, CascadeError> {
        let mut out = Vec::with_capacity(self.channels() * self.size * self.size);
        for &c in self.condition.channel_indices() {
            let img = channels
                .get(c)
                .ok_or_else(|| CascadeError::Input(format!("missing channel {}", CHANNEL_NAMES[c])))?;
            let resized = img.resample_area(self.size, self.size).map_err(|e| CascadeError::Input(e.to_string()))?;
            out.extend(resized.to_unit());
        }
        Ok(out)
    }
}

/// Network-ready samples with both label sets.
#[derive(Debug, Clone, PartialEq)]
pub struct StageData {
    pub input: InputSpec,
    pub inputs: Vec<f64>,
    pub label7: Vec<usize>,
    pub label3: Vec<usize>,
}

impl StageData {
    pub fn from_samples(samples: &[AugmentedSample], input: InputSpec) -> Result<Self, CascadeError> {
        let encoded: Result<Vec<Vec<f64>>, CascadeError> = samples.par_iter().map(|s| input.encode(&s.channels)).collect();
        Ok(Self {
            input,
            inputs: encoded?.concat(),
            label7: samples.iter().map(|s| s.record.abnormality.index()).collect(),
            label3: samples.iter().map(|s| s.record.severity.index()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.label7.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label7.is_empty()
    }

    fn corpus(&self, labels: &[usize]) -> Result<Corpus, NnError> {
        Corpus::new(self.input.shape(), self.inputs.clone(), labels.to_vec())
    }
}

/// What stage 2 receives from stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLink {
    /// The softmax probability vector.
    #[default]
    Probs,
    /// A constant 1/7 vector (ablation: no information from stage 1).
    Uniform,
    /// One-hot of the stage-1 argmax.
    HardLabel,
}

impl StageLink {
    fn apply(self, probs: &[f64]) -> Vec<f64> {
        match self {
            StageLink::Probs => probs.to_vec(),
            StageLink::Uniform => vec![1.0 / probs.len() as f64; probs.len()],
            StageLink::HardLabel => {
                let k = nn::argmax(probs);
                (0..probs.len()).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub train: TrainConfig,
    pub link: StageLink,
    /// Leading backbone layers kept frozen in both stages.
    pub frozen_layers: usize,
    pub stage2_hidden: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), link: StageLink::Probs, frozen_layers: 3, stage2_hidden: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub stage1: Network,
    pub stage2: Network,
    pub input: InputSpec,
    pub link: StageLink,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeHistory {
    pub stage1: History,
    pub stage2: History,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadePrediction {
    pub abnormality_probs: Vec<f64>,
    pub severity_probs: Vec<f64>,
    pub predicted_abnormality: Abnormality,
    pub predicted_severity: Severity,
}

impl CascadePrediction {
    fn from_probs(abnormality_probs: Vec<f64>, severity_probs: Vec<f64>) -> Self {
        let a = nn::argmax(&abnormality_probs);
        let s = nn::argmax(&severity_probs);
        Self {
            predicted_abnormality: Abnormality::from_index(a).expect("seven classes"),
            predicted_severity: Severity::from_index(s).expect("three classes"),
            abnormality_probs,
            severity_probs,
        }
    }
}

/// Stage-1 topology: the backbone minus its last three layers, plus a new
/// relu, 7-way dense and softmax.
pub fn stage1_from_backbone(backbone: &Network) -> Result<Network, NnError> {
    backbone.replace_head(
        3,
        &[LayerKind::Relu, LayerKind::Dense { out_features: ABNORMALITY_CLASSES }, LayerKind::Softmax],
        ABNORMALITY_CLASSES,
    )
}

/// Stage-2 topology: the backbone up to and including its last flatten, then
/// concat(7), dense(hidden), relu, dense(3), softmax.
pub fn stage2_from_backbone(backbone: &Network, hidden: usize) -> Result<Network, NnError> {
    let flatten = backbone
        .layers()
        .iter()
        .rposition(|l| l.kind == LayerKind::Flatten)
        .ok_or_else(|| NnError::Splice("backbone has no flatten layer".into()))?;
    backbone.replace_head(
        backbone.layers().len() - flatten - 1,
        &[
            LayerKind::Concat { width: ABNORMALITY_CLASSES },
            LayerKind::Dense { out_features: hidden },
            LayerKind::Relu,
            LayerKind::Dense { out_features: SEVERITY_CLASSES },
            LayerKind::Softmax,
        ],
        SEVERITY_CLASSES,
    )
}

fn check_model(stage1: &Network, stage2: &Network, input: &InputSpec) -> Result<(), CascadeError> {
    if stage1.output_width() != ABNORMALITY_CLASSES {
        return Err(CascadeError::Wiring(format!("stage 1 outputs {} classes", stage1.output_width())));
    }
    if stage2.output_width() != SEVERITY_CLASSES {
        return Err(CascadeError::Wiring(format!("stage 2 outputs {} classes", stage2.output_width())));
    }
    if stage2.aux_width() != ABNORMALITY_CLASSES {
        return Err(CascadeError::Wiring(format!("stage 2 side input is {} wide", stage2.aux_width())));
    }
    let shape = input.shape();
    if stage1.input_shape() != shape || stage2.input_shape() != shape {
        return Err(CascadeError::Wiring(format!(
            "input spec {shape:?} vs stage inputs {:?} / {:?}",
            stage1.input_shape(),
            stage2.input_shape()
        )));
    }
    Ok(())
}

fn link_vectors(probs: &Tensor, link: StageLink) -> Vec<f64> {
    probs.rows().flat_map(|r| link.apply(r)).collect()
}

/// Train stage 1 on the abnormality labels, fix it, then train stage 2 on
/// (image, stage-1 output) against the severity labels.
pub fn train_cascade(
    backbone: &Network,
    train: &StageData,
    val: Option<&StageData>,
    cfg: &CascadeConfig,
) -> Result<(CascadeModel, CascadeHistory), CascadeError> {
    if train.is_empty() {
        return Err(CascadeError::Stage { stage: 1, source: NnError::EmptyCorpus });
    }
    let input = train.input;
    if let Some(v) = val {
        if v.input != input {
            return Err(CascadeError::Input("validation data uses a different input spec".into()));
        }
    }
    let freeze = cfg.frozen_layers;
    let mut stage1 = stage1_from_backbone(backbone).map_err(stage(1))?;
    stage1.freeze_layers(|i, l| i < freeze && !l.head);
    let mut stage2 = stage2_from_backbone(backbone, cfg.stage2_hidden).map_err(stage(2))?;
    stage2.freeze_layers(|i, l| i < freeze && !l.head);
    check_model(&stage1, &stage2, &input)?;

    let train1 = train.corpus(&train.label7).map_err(stage(1))?;
    let val1 = val.map(|v| v.corpus(&v.label7)).transpose().map_err(stage(1))?;
    let cfg1 = TrainConfig { seed: derive_seed(cfg.train.seed, 1), ..cfg.train.clone() };
    let (mut stage1, hist1) = nn::train(&stage1, &train1, val1.as_ref(), &cfg1).map_err(stage(1))?;
    stage1.freeze_layers(|_, _| true);
    stage1.reset_momentum();

    let aux_train = link_vectors(&predict_proba(&stage1, &train1).map_err(stage(1))?, cfg.link);
    let train2 = train
        .corpus(&train.label3)
        .and_then(|c| c.with_aux(ABNORMALITY_CLASSES, aux_train))
        .map_err(stage(2))?;
    let val2 = match (val, &val1) {
        (Some(v), Some(v1)) => {
            let aux = link_vectors(&predict_proba(&stage1, v1).map_err(stage(1))?, cfg.link);
            Some(v.corpus(&v.label3).and_then(|c| c.with_aux(ABNORMALITY_CLASSES, aux)).map_err(stage(2))?)
        }
        _ => None,
    };
    let cfg2 = TrainConfig { seed: derive_seed(cfg.train.seed, 2), ..cfg.train.clone() };
    let (mut stage2, hist2) = nn::train(&stage2, &train2, val2.as_ref(), &cfg2).map_err(stage(2))?;
    stage2.reset_momentum();
    Ok((CascadeModel { stage1, stage2, input, link: cfg.link }, CascadeHistory { stage1: hist1, stage2: hist2 }))
}

impl CascadeModel {
    pub fn concat_layer_index(&self) -> usize {
        self.stage2.concat_index().expect("stage 2 has a concat layer")
    }

    /// Predictions for already-encoded inputs, in order.
    pub fn predict_encoded(&self, data: &StageData) -> Result<Vec<CascadePrediction>, CascadeError> {
        if data.input != self.input {
            return Err(CascadeError::Input("data input spec differs from the model's".into()));
        }
        let x = Corpus::new(self.input.shape(), data.inputs.clone(), vec![0; data.len()]).map_err(stage(1))?;
        let p1 = predict_proba(&self.stage1, &x).map_err(stage(1))?;
        let aux = link_vectors(&p1, self.link);
        let x2 = x.with_aux(ABNORMALITY_CLASSES, aux).map_err(stage(2))?;
        let p2 = predict_proba(&self.stage2, &x2).map_err(stage(2))?;
        Ok(p1.rows().zip(p2.rows()).map(|(a, s)| CascadePrediction::from_probs(a.to_vec(), s.to_vec())).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, CascadeError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |e: std::io::Error| CascadeError::Io { path, message: e.to_string() }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        save_checkpoint(&dir.join("stage1.ckpt"), &self.stage1).map_err(stage(1))?;
        save_checkpoint(&dir.join("stage2.ckpt"), &self.stage2).map_err(stage(2))?;
        let wiring = Wiring {
            stage1_path: "stage1.ckpt".into(),
            stage2_path: "stage2.ckpt".into(),
            concat_layer_index: self.concat_layer_index(),
            input: self.input,
            link: self.link,
        };
        let path = dir.join("cascade.json");
        let mut text = serde_json::to_string_pretty(&wiring).expect("wiring serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io(&path))?;
        Ok(path)
    }

    /// Load from a wiring descriptor; checkpoint paths resolve relative to it.
    pub fn load(wiring_path: &Path) -> Result<Self, CascadeError> {
        let text = fs::read_to_string(wiring_path)
            .map_err(|e| CascadeError::Io { path: wiring_path.to_path_buf(), message: e.to_string() })?;
        let w: Wiring = serde_json::from_str(&text)
            .map_err(|e| CascadeError::Io { path: wiring_path.to_path_buf(), message: e.to_string() })?;
        let base = wiring_path.parent().unwrap_or(Path::new("."));
        let stage1 = load_checkpoint(&base.join(&w.stage1_path)).map_err(stage(1))?;
        let stage2 = load_checkpoint(&base.join(&w.stage2_path)).map_err(stage(2))?;
        check_model(&stage1, &stage2, &w.input)?;
        if stage2.concat_index() != Some(w.concat_layer_index) {
            return Err(CascadeError::Wiring(format!(
                "descriptor says concat at layer {}, stage 2 has it at {:?}",
                w.concat_layer_index,
                stage2.concat_index()
            )));
        }
        Ok(Self { stage1, stage2, input: w.input, link: w.link })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Wiring {
    stage1_path: PathBuf,
    stage2_path: PathBuf,
    concat_layer_index: usize,
    input: InputSpec,
    #[serde(default)]
    link: StageLink,
}

/// Full pipeline for one image: channel derivation, encoding, stage 1, stage 2.
pub fn predict_cascade(model: &CascadeModel, img: &GrayImage, channels: &ChannelConfig) -> Result<CascadePrediction, CascadeError> {
    let derived = if model.input.condition == Condition::OriginalOnly {
        vec![img.clone()]
    } else {
        derive_channels(img, channels)?
    };
    let data = StageData { input: model.input, inputs: model.input.encode(&derived)?, label7: vec![0], label3: vec![0] };
    Ok(model.predict_encoded(&data)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backbone(channels: usize, size: usize) -> Network {
        Network::mininet(channels, size, 4, 5).unwrap()
    }

    #[test]
    fn stage_topologies() {
        let b = backbone(5, 16);
        let s1 = stage1_from_backbone(&b).unwrap();
        let s2 = stage2_from_backbone(&b, 32).unwrap();
        assert_eq!(s1.output_width(), 7);
        assert_eq!(s2.output_width(), 3);
        assert_eq!(s2.aux_width(), 7);
        let ci = s2.concat_index().unwrap();
        assert_eq!(s2.layers()[ci - 1].kind, LayerKind::Flatten);
        // dense after concat sees flattened features + 7
        let flat = s2.layers()[ci - 1].out_len();
        assert_eq!(s2.layers()[ci + 1].in_len(), flat + 7);
    }

    #[test]
    fn link_variants() {
        let p = [0.1, 0.6, 0.05, 0.05, 0.1, 0.05, 0.05];
        assert_eq!(StageLink::Probs.apply(&p), p.to_vec());
        assert_eq!(StageLink::HardLabel.apply(&p), vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(StageLink::Uniform.apply(&p).iter().all(|&v| v == 1.0 / 7.0));
    }

    #[test]
    fn prediction_ties_go_low() {
        let p = CascadePrediction::from_probs(vec![1.0 / 7.0; 7], vec![0.4, 0.4, 0.2]);
        assert_eq!(p.predicted_abnormality, Abnormality::ALL[0]);
        assert_eq!(p.predicted_severity, Severity::Benign);
    }

    #[test]
    fn condition_parsing() {
        assert_eq!("preprocessed".parse::<Condition>().unwrap(), Condition::Preprocessed);
        assert!("both".parse::<Condition>().is_err());
        assert_eq!(InputSpec { condition: Condition::OriginalOnly, size: 8 }.shape(), vec![1, 8, 8]);
    }
}
