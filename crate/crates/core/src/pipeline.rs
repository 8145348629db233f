//! End-to-end runs: configuration, ingest checks, training and evaluation,
//! and the artifacts each command writes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{assemble_training_set, derive_channels, AffineRanges, ChannelConfig, WaveletConfig};
use crate::cascade::{
    train_cascade, CascadeConfig, CascadeHistory, CascadeModel, CascadePrediction, Condition, InputSpec, StageData,
    StageLink,
};
use crate::eval::{auc_tables, one_vs_rest_report, roc_csv, roc_svg, OneVsRestReport, SvgCurve};
use crate::mias::{
    balance_classes, dedup_records, image_path, parse_mias_metadata, split_train_val, Dataset, ImageSource,
    IngestSummary, MiasRecord, Sample, Severity,
};
use crate::nn::{self, Corpus, Network, TrainConfig};
use crate::pgm::read_pgm;
use crate::preprocess::{FilterConfig, SegmentConfig};
use crate::rng::derive_seed;
use crate::synthetic::{proxy_images, INFO_FILE, PROXY_CLASSES};

pub const DATA_ENV: &str = "MAMMOPIPE_DATA";
/// Image width the default translation range refers to.
pub const AFFINE_REFERENCE_SIZE: usize = 1024;

#[derive(Debug, thiserror::Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

fn fail<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError { stage, message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub split: u64,
    pub augment: u64,
    pub init: u64,
    pub train: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self { split: seed, augment: seed, init: seed, train: seed }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::all(7)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub samples: usize,
    pub epochs: usize,
    pub learn_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { enabled: true, samples: 160, epochs: 8, learn_rate: 3e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    pub train_fraction: f64,
    pub balance: bool,
    pub filter: FilterConfig,
    pub segment: SegmentConfig,
    pub wavelet: WaveletConfig,
    /// Translation ranges are in pixels of a 1024-wide image and scale with
    /// the actual image width.
    pub affine: AffineRanges,
    pub copies: usize,
    pub input_size: usize,
    pub train: TrainConfig,
    pub link: StageLink,
    pub frozen_layers: usize,
    pub stage2_hidden: usize,
    pub pretrain: PretrainConfig,
    pub condition: Condition,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_path: None,
            output_dir: PathBuf::from("out"),
            seeds: Seeds::default(),
            train_fraction: 0.75,
            balance: true,
            filter: FilterConfig::default(),
            segment: SegmentConfig::default(),
            wavelet: WaveletConfig::default(),
            affine: AffineRanges::default(),
            copies: 2,
            input_size: 128,
            train: TrainConfig::default(),
            link: StageLink::Probs,
            frozen_layers: 3,
            stage2_hidden: 64,
            pretrain: PretrainConfig::default(),
            condition: Condition::Preprocessed,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError { stage: "config", message: format!("{}: {e}", path.display()) })?;
        serde_json::from_str(&text).map_err(|e| PipelineError { stage: "config", message: format!("{}: {e}", path.display()) })
    }

    pub fn channel_config(&self) -> ChannelConfig {
        ChannelConfig { filter: self.filter, segment: self.segment, wavelet: self.wavelet }
    }

    pub fn cascade_config(&self) -> CascadeConfig {
        CascadeConfig {
            train: TrainConfig { seed: self.seeds.train, ..self.train.clone() },
            link: self.link,
            frozen_layers: self.frozen_layers,
            stage2_hidden: self.stage2_hidden,
        }
    }

    pub fn input_spec(&self) -> InputSpec {
        InputSpec { condition: self.condition, size: self.input_size }
    }

    /// Dataset path from the config, else the environment fallback.
    pub fn resolved_dataset(&self) -> Result<PathBuf, PipelineError> {
        self.dataset_path
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .ok_or(PipelineError { stage: "config", message: format!("no dataset path given and {DATA_ENV} is unset") })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError { stage: "config", message: m });
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} must lie in (0, 1)", self.train_fraction));
        }
        if self.input_size < 4 {
            return bad(format!("input_size {} too small for two 2x pooling stages", self.input_size));
        }
        if self.wavelet.levels == 0 || self.wavelet.detail_level == 0 || self.wavelet.detail_level > self.wavelet.levels {
            return bad(format!("wavelet levels {} / detail level {}", self.wavelet.levels, self.wavelet.detail_level));
        }
        self.train.validate().map_err(fail("config"))?;
        Ok(())
    }
}

/// Locate the info file (mini-MIAS ships it as `Info.txt`).
pub fn find_info_file(dir: &Path) -> Option<PathBuf> {
    [INFO_FILE, "info.txt", "INFO.TXT"].iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

pub fn read_records(dir: &Path) -> Result<Vec<MiasRecord>, PipelineError> {
    if !dir.is_dir() {
        return Err(PipelineError { stage: "ingest", message: format!("dataset directory {} does not exist", dir.display()) });
    }
    let info = find_info_file(dir).ok_or_else(|| PipelineError {
        stage: "ingest",
        message: format!("missing info file: expected {}", dir.join(INFO_FILE).display()),
    })?;
    let text = fs::read_to_string(&info).map_err(|e| PipelineError { stage: "ingest", message: format!("{}: {e}", info.display()) })?;
    parse_mias_metadata(&text).map_err(fail("ingest"))
}

/// Parse the metadata, count classes, and check every image decodes.
pub fn ingest(dir: &Path) -> Result<IngestSummary, PipelineError> {
    use rayon::prelude::*;
    let records = read_records(dir)?;
    let mut summary = IngestSummary::from_records(&records);
    let unique = dedup_records(&records);
    let status: Vec<(String, Option<bool>)> = unique
        .par_iter()
        .map(|r| {
            let p = image_path(dir, &r.id);
            let state = if !p.is_file() { None } else { Some(read_pgm(&p).is_ok()) };
            (p.file_name().unwrap().to_string_lossy().into_owned(), state)
        })
        .collect();
    for (name, state) in status {
        match state {
            None => summary.missing_images.push(name),
            Some(false) => summary.corrupt_images.push(name),
            Some(true) => {}
        }
    }
    Ok(summary)
}

pub fn load_dataset(dir: &Path, seed: u64) -> Result<Dataset, PipelineError> {
    let records = dedup_records(&read_records(dir)?);
    let samples = records
        .into_iter()
        .map(|record| {
            let path = image_path(dir, &record.id);
            Sample { record, image: ImageSource::File(path), duplicate: false }
        })
        .collect();
    Dataset::new(samples, seed).map_err(fail("ingest"))
}

/// Pretrain a MiniNet backbone on the generic shape task, using the same
/// channel derivation as the main run.
pub fn pretrain_backbone(cfg: &RunConfig) -> Result<Network, PipelineError> {
    let input = cfg.input_spec();
    let net = Network::mininet(input.channels(), input.size, PROXY_CLASSES, derive_seed(cfg.seeds.init, 0xBAC0))
        .map_err(fail("pretrain"))?;
    if !cfg.pretrain.enabled {
        return Ok(net);
    }
    use rayon::prelude::*;
    let images = proxy_images(cfg.pretrain.samples, input.size, cfg.seeds.init);
    let channel_cfg = cfg.channel_config();
    let encoded: Result<Vec<Vec<f64>>, PipelineError> = images
        .par_iter()
        .map(|(img, _)| {
            let ch = if input.condition == Condition::OriginalOnly {
                vec![img.clone()]
            } else {
                derive_channels(img, &channel_cfg).map_err(fail("pretrain"))?
            };
            input.encode(&ch).map_err(fail("pretrain"))
        })
        .collect();
    let corpus = Corpus::new(input.shape(), encoded?.concat(), images.iter().map(|(_, l)| *l).collect())
        .map_err(fail("pretrain"))?;
    let tc = TrainConfig {
        max_epochs: cfg.pretrain.epochs,
        learn_rate: cfg.pretrain.learn_rate,
        head_lr_multiplier: 1.0,
        seed: derive_seed(cfg.seeds.train, 0xBAC0),
        ..cfg.train.clone()
    };
    let (net, hist) = nn::train(&net, &corpus, None, &tc).map_err(fail("pretrain"))?;
    if let Some(last) = hist.last() {
        log::info!("pretrain: loss {:.4}, accuracy {:.3}", last.train_loss, last.train_acc);
    }
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub final_train_loss: f64,
    pub final_train_acc: f64,
    pub final_val_loss: Option<f64>,
    pub final_val_acc: Option<f64>,
}

impl StageSummary {
    fn from_history(h: &nn::History) -> Self {
        let last = h.last().expect("at least one epoch");
        Self {
            final_train_loss: last.train_loss,
            final_train_acc: last.train_acc,
            final_val_loss: last.val_loss,
            final_val_acc: last.val_acc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAuc {
    pub class: String,
    pub auc: Option<f64>,
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub condition: Condition,
    pub train_images: usize,
    pub val_images: usize,
    pub train_samples: usize,
    pub stage1: StageSummary,
    pub stage2: StageSummary,
    pub val_abnormality_accuracy: f64,
    pub val_severity_accuracy: f64,
    pub auc: Vec<ClassAuc>,
    pub mean_auc: Option<f64>,
    pub config: RunConfig,
}

pub struct RunOutput {
    pub summary: RunSummary,
    pub model: CascadeModel,
    pub history: CascadeHistory,
    pub report: OneVsRestReport,
    pub predictions: Vec<(String, usize, CascadePrediction)>,
}

pub fn severity_names() -> [&'static str; 3] {
    Severity::ALL.map(Severity::name)
}

/// Split, augment, train the cascade and evaluate on the validation split.
/// Nothing is written; see [`write_run`].
pub fn run(cfg: &RunConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let dir = cfg.resolved_dataset()?;
    let dataset = load_dataset(&dir, cfg.seeds.split)?;
    let (train, val) = split_train_val(&dataset, cfg.train_fraction, cfg.seeds.split).map_err(fail("split"))?;
    log::info!("split: {} train / {} validation images", train.len(), val.len());
    let train_bal = if cfg.balance { balance_classes(&train, cfg.seeds.split).map_err(fail("balance"))? } else { train.clone() };

    let channel_cfg = cfg.channel_config();
    let width = train.samples.first().map(|s| s.image.load()).transpose().map_err(fail("augment"))?.map_or(AFFINE_REFERENCE_SIZE, |i| i.width());
    let ranges = cfg.affine.scaled_to(AFFINE_REFERENCE_SIZE, width);
    let train_samples = assemble_training_set(&train_bal, &channel_cfg, &ranges, cfg.copies, cfg.seeds.augment).map_err(fail("augment"))?;
    let val_samples = assemble_training_set(&val, &channel_cfg, &ranges, 0, cfg.seeds.augment).map_err(fail("augment"))?;
    let input = cfg.input_spec();
    let train_data = StageData::from_samples(&train_samples, input).map_err(fail("augment"))?;
    let val_data = StageData::from_samples(&val_samples, input).map_err(fail("augment"))?;
    log::info!("corpus: {} training samples, {} validation samples", train_data.len(), val_data.len());

    let backbone = pretrain_backbone(cfg)?;
    let (model, history) =
        train_cascade(&backbone, &train_data, Some(&val_data), &cfg.cascade_config()).map_err(fail("train"))?;

    let preds = model.predict_encoded(&val_data).map_err(fail("evaluate"))?;
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.severity_probs.clone()).collect();
    let report = one_vs_rest_report(&probs, &val_data.label3, &severity_names()).map_err(fail("evaluate"))?;
    let hits = |f: &dyn Fn(&CascadePrediction, usize) -> bool| {
        preds.iter().enumerate().filter(|(i, p)| f(p, *i)).count() as f64 / preds.len().max(1) as f64
    };
    let summary = RunSummary {
        condition: cfg.condition,
        train_images: train.len(),
        val_images: val.len(),
        train_samples: train_data.len(),
        stage1: StageSummary::from_history(&history.stage1),
        stage2: StageSummary::from_history(&history.stage2),
        val_abnormality_accuracy: hits(&|p, i| p.predicted_abnormality.index() == val_data.label7[i]),
        val_severity_accuracy: hits(&|p, i| p.predicted_severity.index() == val_data.label3[i]),
        auc: report.classes.iter().map(|c| ClassAuc { class: c.class.clone(), auc: c.auc(), flag: c.flag.clone() }).collect(),
        mean_auc: report.mean_auc(),
        config: cfg.clone(),
    };
    let predictions = val_samples
        .iter()
        .zip(preds)
        .map(|(s, p)| (s.record.id.clone(), s.record.severity.index(), p))
        .collect();
    Ok(RunOutput { summary, model, history, report, predictions })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(|e| PipelineError { stage: "write", message: format!("{}: {e}", path.display()) })
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn predictions_csv(preds: &[(String, usize, CascadePrediction)]) -> String {
    let names = severity_names();
    let mut s = format!("id,label,{}\n", names.map(|n| format!("p_{}", n.to_lowercase())).join(","));
    for (id, label, p) in preds {
        let probs: Vec<String> = p.severity_probs.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("{id},{},{}\n", names[*label], probs.join(",")));
    }
    s
}

/// Parse a predictions file back into severity probability rows and labels.
pub fn read_predictions_csv(text: &str) -> Result<(Vec<Vec<f64>>, Vec<usize>), PipelineError> {
    let names = severity_names();
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| PipelineError { stage: "report", message: format!("predictions line {}: {m}", n + 1) };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + names.len() {
            return Err(bad("wrong field count"));
        }
        labels.push(names.iter().position(|&c| c == fields[1]).ok_or_else(|| bad("unknown label"))?);
        probs.push(fields[2..].iter().map(|f| f.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad("bad number"))?);
    }
    Ok((probs, labels))
}

/// Write checkpoints, histories, predictions, ROC CSV, per-class SVGs and the
/// summary into `dir`. Each file is written as soon as it is available.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(fail("write"))?;
    out.model.save(&dir.join("model")).map_err(fail("write"))?;
    write(&dir.join("history_stage1.csv"), out.history.stage1.to_csv())?;
    write(&dir.join("history_stage2.csv"), out.history.stage2.to_csv())?;
    write(&dir.join("predictions.csv"), predictions_csv(&out.predictions))?;
    write(&dir.join("roc.csv"), roc_csv(&out.report))?;
    write_svgs(dir, &[(out.summary.condition, &out.report)])?;
    write(&dir.join("summary.json"), to_json(&out.summary))?;
    Ok(())
}

/// One SVG per class; original-only curves dashed, preprocessed solid.
pub fn write_svgs(dir: &Path, reports: &[(Condition, &OneVsRestReport)]) -> Result<Vec<PathBuf>, PipelineError> {
    let mut paths = Vec::new();
    for name in severity_names() {
        let curves: Vec<SvgCurve<'_>> = reports
            .iter()
            .filter_map(|(cond, r)| {
                let c = r.classes.iter().find(|c| c.class == name)?.curve.as_ref()?;
                Some(SvgCurve { label: cond.name(), curve: c, dashed: *cond == Condition::OriginalOnly })
            })
            .collect();
        if curves.is_empty() {
            continue;
        }
        let path = dir.join(format!("roc_{}.svg", name.to_lowercase()));
        write(&path, roc_svg(&format!("{name} vs rest"), &curves))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Comparison tables and overlaid curves from finished run directories.
pub fn write_report(out_dir: &Path, runs: &[(Condition, PathBuf)], model_name: &str) -> Result<Vec<PathBuf>, PipelineError> {
    let mut reports = Vec::new();
    for (cond, dir) in runs {
        let path = dir.join("predictions.csv");
        let text = fs::read_to_string(&path).map_err(|e| PipelineError { stage: "report", message: format!("{}: {e}", path.display()) })?;
        let (probs, labels) = read_predictions_csv(&text)?;
        reports.push((*cond, one_vs_rest_report(&probs, &labels, &severity_names()).map_err(fail("report"))?));
    }
    fs::create_dir_all(out_dir).map_err(fail("report"))?;
    let entries: Vec<(&str, &str, &OneVsRestReport)> = reports.iter().map(|(c, r)| (model_name, c.name(), r)).collect();
    let mut written = Vec::new();
    let mut text = String::new();
    for t in auc_tables(&entries) {
        let p = out_dir.join(format!("auc_{}.csv", t.class.to_lowercase()));
        write(&p, t.to_csv())?;
        written.push(p);
        text.push_str(&t.to_text());
        text.push('\n');
    }
    let p = out_dir.join("auc_tables.txt");
    write(&p, &text)?;
    written.push(p);
    let refs: Vec<(Condition, &OneVsRestReport)> = reports.iter().map(|(c, r)| (*c, r)).collect();
    written.extend(write_svgs(out_dir, &refs)?);
    Ok(written)
}
