use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use super::NnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub mini_batch: usize,
    pub learn_rate: f64,
    pub head_lr_multiplier: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_epochs: 30, mini_batch: 10, learn_rate: 3e-4, head_lr_multiplier: 10.0, momentum: 0.9, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.max_epochs == 0 || self.mini_batch == 0 {
            return Err(NnError::InvalidConfig("max_epochs and mini_batch must be positive".into()));
        }
        if !(self.learn_rate >= 0.0 && self.learn_rate.is_finite()) {
            return Err(NnError::InvalidConfig(format!("learn_rate {} must be finite and non-negative", self.learn_rate)));
        }
        if !(self.head_lr_multiplier >= 1.0 && self.head_lr_multiplier.is_finite()) {
            return Err(NnError::InvalidConfig(format!("head_lr_multiplier {} must be >= 1", self.head_lr_multiplier)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::InvalidConfig(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// One momentum step: `v <- mu*v - lr*g; w <- w + v`. Head layers use
/// `learn_rate * head_lr_multiplier`. Gradients are checked for finiteness
/// before anything is modified.
pub fn sgdm_step(net: &mut Network, grads: &Gradients, cfg: &TrainConfig) -> Result<(), NnError> {
    if grads.layers.len() != net.layers().len() {
        return Err(NnError::GradientMismatch(format!(
            "{} gradient entries for {} layers",
            grads.layers.len(),
            net.layers().len()
        )));
    }
    for (i, (layer, g)) in net.layers().iter().zip(&grads.layers).enumerate() {
        let Some(g) = g else { continue };
        let Some(p) = layer.params.as_ref().filter(|_| !layer.frozen) else {
            return Err(NnError::GradientMismatch(format!("layer {i} is not trainable but has a gradient")));
        };
        if g.weight.len() != p.weight.len() || g.bias.len() != p.bias.len() {
            return Err(NnError::GradientMismatch(format!("layer {i} gradient dims differ from its parameters")));
        }
        if g.weight.iter().chain(&g.bias).any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteGradient { layer: i, kind: layer.kind.name() });
        }
    }
    let mu = cfg.momentum;
    for (i, g) in grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        let layer = net.layer_mut(i);
        let lr = if layer.head { cfg.learn_rate * cfg.head_lr_multiplier } else { cfg.learn_rate };
        let p = layer.params.as_mut().expect("checked above");
        for ((w, v), &gw) in p.weight.iter_mut().zip(&mut p.vel_weight).zip(&g.weight) {
            *v = mu * *v - lr * gw;
            *w += *v;
        }
        for ((b, v), &gb) in p.bias.iter_mut().zip(&mut p.vel_bias).zip(&g.bias) {
            *v = mu * *v - lr * gb;
            *b += *v;
        }
    }
    net.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerKind, ParamGrad};

    fn net() -> Network {
        Network::new(&[3], &[LayerKind::Dense { out_features: 2 }, LayerKind::Relu, LayerKind::Dense { out_features: 2 }], 8).unwrap()
    }

    fn constant_grads(net: &Network, value: f64) -> Gradients {
        Gradients {
            layers: net
                .layers()
                .iter()
                .map(|l| {
                    l.params.as_ref().filter(|_| !l.frozen).map(|p| ParamGrad {
                        weight: vec![value; p.weight.len()],
                        bias: vec![value; p.bias.len()],
                    })
                })
                .collect(),
            input: None,
        }
    }

    #[test]
    fn zero_gradient_leaves_net_unchanged() {
        let mut n = net();
        let before = n.layers().to_vec();
        let g = constant_grads(&n, 0.0);
        sgdm_step(&mut n, &g, &TrainConfig::default()).unwrap();
        assert_eq!(n.layers(), &before[..]);
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut n = net();
        let before = n.layers()[0].params.clone().unwrap();
        let cfg = TrainConfig { momentum: 0.0, learn_rate: 0.1, ..TrainConfig::default() };
        let g = constant_grads(&n, 0.5);
        sgdm_step(&mut n, &g, &cfg).unwrap();
        let after = n.layers()[0].params.as_ref().unwrap();
        for (a, b) in after.weight.iter().zip(&before.weight) {
            assert_eq!(*a, b + -(0.1 * 0.5));
        }
    }

    #[test]
    fn momentum_recurrence() {
        let mut n = net();
        let w0 = n.layers()[2].params.as_ref().unwrap().weight[1];
        let cfg = TrainConfig { momentum: 0.9, learn_rate: 0.01, head_lr_multiplier: 1.0, ..TrainConfig::default() };
        let g = constant_grads(&n, 2.0);
        sgdm_step(&mut n, &g, &cfg).unwrap();
        sgdm_step(&mut n, &g, &cfg).unwrap();
        let v1 = -0.01 * 2.0;
        let v2 = 0.9 * v1 - 0.01 * 2.0;
        let p = n.layers()[2].params.as_ref().unwrap();
        assert_eq!(p.vel_weight[1], v2);
        assert_eq!(p.weight[1], (w0 + v1) + v2);
    }

    #[test]
    fn head_layers_use_boosted_rate() {
        let base = net();
        let mut n = base.replace_head(3, &[LayerKind::Dense { out_features: 2 }, LayerKind::Relu, LayerKind::Dense { out_features: 2 }], 2).unwrap();
        let w0 = n.layers()[0].params.as_ref().unwrap().weight[0];
        let cfg = TrainConfig { momentum: 0.0, learn_rate: 0.01, head_lr_multiplier: 10.0, ..TrainConfig::default() };
        let g = constant_grads(&n, 1.0);
        sgdm_step(&mut n, &g, &cfg).unwrap();
        assert!(n.layers()[0].head);
        assert_eq!(n.layers()[0].params.as_ref().unwrap().weight[0], w0 - 0.1);
    }

    #[test]
    fn non_finite_gradient_aborts_without_change() {
        let mut n = net();
        let before = n.layers().to_vec();
        let mut g = constant_grads(&n, 1.0);
        g.layers[2].as_mut().unwrap().bias[0] = f64::NAN;
        let err = sgdm_step(&mut n, &g, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, NnError::NonFiniteGradient { layer: 2, .. }));
        assert_eq!(n.layers(), &before[..]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { mini_batch: 0, ..TrainConfig::default() }.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"max_epochs": 5}"#).unwrap();
        assert_eq!(parsed.max_epochs, 5);
        assert_eq!(parsed.mini_batch, 10);
        assert_eq!(parsed.learn_rate, 3e-4);
    }
}
