use mammopipe::cascade::{
    predict_cascade, stage1_from_backbone, stage2_from_backbone, train_cascade, CascadeConfig, CascadeModel, Condition, InputSpec, StageData,
    StageLink,
};
use mammopipe::mias::{Abnormality, Severity};
use mammopipe::nn::{accuracy, predict_proba, train, Corpus, LayerKind, Network, TrainConfig};
use mammopipe::pipeline::{run, RunConfig};
use mammopipe::rng::{derive_seed, SplitMix64};
use mammopipe::synthetic::{synthetic_case, write_synthetic, SyntheticConfig};

const SIZE: usize = 8;

/// NORM -> Normal, CALC/CIRC/SPIC -> Benign, everything else -> Malignant.
fn severity_of(label7: usize) -> usize {
    match label7 {
        6 => 2,
        0..=2 => 0,
        _ => 1,
    }
}

/// Seven classes told apart by where a bright 2x2 square sits.
fn toy_data(per_class: usize, seed: u64) -> StageData {
    let spots = [(0, 0), (3, 0), (6, 0), (0, 5), (3, 5), (6, 5), (3, 3)];
    let mut rng = SplitMix64::new(seed);
    let (mut inputs, mut label7, mut label3) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..per_class * 7 {
        let c = i % 7;
        let (sx, sy) = spots[c];
        for y in 0..SIZE {
            for x in 0..SIZE {
                let on = (sx..sx + 2).contains(&x) && (sy..sy + 2).contains(&y);
                inputs.push(if on { 0.8 } else { 0.2 } + rng.uniform(-0.1, 0.1));
            }
        }
        label7.push(c);
        label3.push(severity_of(c));
    }
    StageData { input: InputSpec { condition: Condition::OriginalOnly, size: SIZE }, inputs, label7, label3 }
}

fn backbone_kinds() -> Vec<LayerKind> {
    vec![
        LayerKind::Conv { out_channels: 4, kernel: 3, stride: 1, pad: 1 },
        LayerKind::Relu,
        LayerKind::MaxPool { kernel: 2, stride: 2 },
        LayerKind::Flatten,
        LayerKind::Dense { out_features: 16 },
        LayerKind::Relu,
        LayerKind::Dense { out_features: 7 },
        LayerKind::Softmax,
    ]
}

/// A backbone already fitted to the seven-way labels, so stage 1 starts out
/// (and stays) perfect.
fn fitted_backbone(data: &StageData) -> Network {
    let net = Network::new(&[1, SIZE, SIZE], &backbone_kinds(), 21).unwrap();
    let corpus = Corpus::new(vec![1, SIZE, SIZE], data.inputs.clone(), data.label7.clone()).unwrap();
    let cfg = TrainConfig { max_epochs: 40, learn_rate: 0.02, head_lr_multiplier: 1.0, ..TrainConfig::default() };
    let (net, _) = train(&net, &corpus, None, &cfg).unwrap();
    assert_eq!(accuracy(&predict_proba(&net, &corpus).unwrap(), &data.label7), 1.0);
    net
}

/// Shrinks the conv output by `factor` and grows the first dense layer to
/// match. Relu and maxpool commute with positive scaling, so the backbone
/// computes the same function while its raw conv features become tiny.
fn quiet_conv_features(net: &mut Network, factor: f64) {
    let conv = net.layer_mut(0).params.as_mut().unwrap();
    conv.weight.iter_mut().chain(conv.bias.iter_mut()).for_each(|v| *v /= factor);
    let dense = net.layer_mut(4).params.as_mut().unwrap();
    dense.weight.iter_mut().for_each(|v| *v *= factor);
}

fn cascade_cfg(link: StageLink) -> CascadeConfig {
    CascadeConfig {
        train: TrainConfig { max_epochs: 15, learn_rate: 1e-2, seed: 3, ..TrainConfig::default() },
        link,
        frozen_layers: 5,
        stage2_hidden: 16,
    }
}

fn stage_accuracies(model: &CascadeModel, data: &StageData) -> (f64, f64) {
    let preds = model.predict_encoded(data).unwrap();
    let n = preds.len() as f64;
    let a7 = preds.iter().zip(&data.label7).filter(|(p, &l)| p.predicted_abnormality.index() == l).count() as f64 / n;
    let a3 = preds.iter().zip(&data.label3).filter(|(p, &l)| p.predicted_severity.index() == l).count() as f64 / n;
    (a7, a3)
}

#[test]
fn label_determined_severity_is_learned_and_the_wire_matters() {
    let data = toy_data(6, 1);
    let mut backbone = fitted_backbone(&data);
    quiet_conv_features(&mut backbone, 1e3);
    let corpus = Corpus::new(vec![1, SIZE, SIZE], data.inputs.clone(), data.label7.clone()).unwrap();
    assert_eq!(accuracy(&predict_proba(&backbone, &corpus).unwrap(), &data.label7), 1.0);

    let (model, hist) = train_cascade(&backbone, &data, None, &cascade_cfg(StageLink::Probs)).unwrap();
    let (a7, a3) = stage_accuracies(&model, &data);
    assert_eq!(a7, 1.0, "stage 1 must be perfect for this check");
    assert_eq!(a3, 1.0);
    assert_eq!(hist.stage2.last().unwrap().train_acc, 1.0);

    let (uniform, _) = train_cascade(&backbone, &data, None, &cascade_cfg(StageLink::Uniform)).unwrap();
    let (_, u3) = stage_accuracies(&uniform, &data);
    assert!(u3 < a3, "uniform wire {u3} vs probability wire {a3}");
}

fn bits(n: &Network) -> Vec<u64> {
    n.layers()
        .iter()
        .filter_map(|l| l.params.as_ref())
        .flat_map(|p| p.weight.iter().chain(&p.bias).map(|v| v.to_bits()))
        .collect()
}

#[test]
fn stage_one_is_untouched_by_stage_two() {
    let data = toy_data(3, 2);
    let backbone = fitted_backbone(&data);
    let cfg = cascade_cfg(StageLink::Probs);

    // stage 1 on its own, exactly as the cascade trains it
    let mut s1 = stage1_from_backbone(&backbone).unwrap();
    s1.freeze_layers(|i, l| i < cfg.frozen_layers && !l.head);
    let corpus = Corpus::new(vec![1, SIZE, SIZE], data.inputs.clone(), data.label7.clone()).unwrap();
    let tc = TrainConfig { seed: derive_seed(cfg.train.seed, 1), ..cfg.train.clone() };
    let (s1, _) = train(&s1, &corpus, None, &tc).unwrap();

    let (model, _) = train_cascade(&backbone, &data, None, &cfg).unwrap();
    assert_eq!(bits(&model.stage1), bits(&s1));
    assert!(model.stage1.layers().iter().all(|l| l.frozen));
    let untrained = stage2_from_backbone(&backbone, cfg.stage2_hidden).unwrap();
    assert_ne!(bits(&model.stage2), bits(&untrained));
}

#[test]
fn stage_two_feature_contract() {
    let net = Network::mininet(5, 16, 4, 1).unwrap();
    let s2 = stage2_from_backbone(&net, 32).unwrap();
    let c = s2.concat_index().unwrap();
    let flat = s2.layers()[c].in_shape.iter().product::<usize>();
    assert_eq!(flat, 32 * 4 * 4);
    assert_eq!(s2.layers()[c].out_shape, vec![flat + 7]);
    assert_eq!(s2.aux_width(), 7);
    assert_eq!(s2.output_width(), 3);
}

#[test]
fn trained_on_synthetic_tells_blob_from_blank() {
    let dir = tempfile::tempdir().unwrap();
    let syn = SyntheticConfig { size: 32, ..SyntheticConfig::default() };
    write_synthetic(dir.path(), &syn).unwrap();
    let cfg = RunConfig {
        dataset_path: Some(dir.path().to_path_buf()),
        input_size: 32,
        copies: 1,
        condition: Condition::Preprocessed,
        train: TrainConfig { max_epochs: 16, learn_rate: 1e-3, ..TrainConfig::default() },
        ..RunConfig::default()
    };
    let out = run(&cfg).unwrap();
    let channels = cfg.channel_config();

    // fresh images from beyond the generated range
    let (mut blank_norm, mut blob_norm, mut blob_benign, mut per_class) = (0, 0, 0, 0);
    for i in syn.count..syn.count + 24 {
        let (rec, img) = synthetic_case(&syn, i);
        let p = predict_cascade(&out.model, &img, &channels).unwrap();
        assert!((p.abnormality_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((p.severity_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        match rec.abnormality {
            Abnormality::Norm => {
                per_class += 1;
                blank_norm += usize::from(p.predicted_abnormality == Abnormality::Norm);
            }
            Abnormality::Circ => {
                blob_norm += usize::from(p.predicted_abnormality == Abnormality::Norm);
                blob_benign += usize::from(p.predicted_severity == Severity::Benign);
            }
            _ => {}
        }
    }
    assert_eq!(per_class, 8);
    assert!(blank_norm > per_class / 2, "blank images called normal: {blank_norm}/{per_class}");
    assert!(blob_norm < per_class / 2, "blob images called normal: {blob_norm}/{per_class}");
    assert!(blob_benign > per_class / 2, "blob images called benign: {blob_benign}/{per_class}");

    let (_, blob) = synthetic_case(&syn, syn.count + 1);
    let p_blob = predict_cascade(&out.model, &blob, &channels).unwrap();
    assert_eq!(predict_cascade(&out.model, &blob, &channels).unwrap(), p_blob);

    let saved = tempfile::tempdir().unwrap();
    let wiring = out.model.save(saved.path()).unwrap();
    let loaded = CascadeModel::load(&wiring).unwrap();
    let p_loaded = predict_cascade(&loaded, &blob, &channels).unwrap();
    assert_eq!(p_loaded.predicted_severity, p_blob.predicted_severity);
}
