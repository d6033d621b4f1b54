//! Training losses with analytic gradients.

use crate::error::{Error, Result};
use crate::metrics::{LabelMap, IGNORE};
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_sem: f64,
    pub lambda_c: f64,
    pub lambda_rs: f64,
    /// Lower clamp on probabilities inside the logarithm.
    pub prob_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_sem: 0.1,
            lambda_c: 1.0,
            lambda_rs: 0.001,
            prob_floor: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_sem, self.lambda_c, self.lambda_rs];
        if !ws.iter().all(|&w| w >= 0.0 && w.is_finite()) {
            return Err(Error::InvalidArgument(format!("loss weights must be nonnegative, got {ws:?}")));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 1.0) {
            return Err(Error::InvalidArgument(format!("prob_floor {} outside (0, 1)", self.prob_floor)));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: FeatureMap<f64>,
}

fn check_probs(gt: &LabelMap, pred: &FeatureMap<f64>) -> Result<()> {
    if (gt.height, gt.width) != (pred.height, pred.width) {
        return Err(Error::ShapeMismatch(format!(
            "labels {}x{} vs prediction {}x{}",
            gt.width, gt.height, pred.width, pred.height
        )));
    }
    gt.check_classes(pred.channels)
}

/// Mean over labelled pixels of `-ln(clamp(p_gt, floor, 1))`.
pub fn sem_ce(gt: &LabelMap, pred: &FeatureMap<f64>, prob_floor: f64) -> Result<LossValue> {
    check_probs(gt, pred)?;
    let hw = pred.height * pred.width;
    for p in 0..hw {
        let s: f64 = (0..pred.channels).map(|c| pred.data[c * hw + p]).sum();
        if s > 1.0 + 1e-6 {
            return Err(Error::InvalidArgument(format!("class probabilities at pixel {p} sum to {s}")));
        }
    }
    let n = gt.valid_count();
    if n == 0 {
        return Err(Error::EmptyReduction("cross-entropy"));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = FeatureMap::zeros(pred.channels, pred.height, pred.width);
    for (p, &l) in gt.labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        let i = l as usize * hw + p;
        let q = pred.data[i].clamp(prob_floor, 1.0);
        value -= q.ln();
        grad.data[i] = -inv_n / q;
    }
    Ok(LossValue {
        value: value * inv_n,
        grad,
    })
}

/// Mean squared error over every channel and pixel.
pub fn color_mse(gt: &FeatureMap<f64>, pred: &FeatureMap<f64>) -> Result<LossValue> {
    if (gt.channels, gt.height, gt.width) != (pred.channels, pred.height, pred.width) {
        return Err(Error::ShapeMismatch("images differ in shape".into()));
    }
    if gt.data.is_empty() {
        return Err(Error::EmptyReduction("color MSE"));
    }
    let inv = 1.0 / gt.data.len() as f64;
    let mut value = 0.0;
    let grad = gt
        .data
        .iter()
        .zip(&pred.data)
        .map(|(g, p)| {
            let d = p - g;
            value += d * d;
            2.0 * d * inv
        })
        .collect();
    Ok(LossValue {
        value: value * inv,
        grad: FeatureMap::from_vec(gt.channels, gt.height, gt.width, grad),
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum over classes `l` of absolute differences of `pred^l` between a pixel
/// and its lower and right neighbours, counted only when both pixels carry
/// ground-truth label `l`. Not normalized.
pub fn regional_smoothness(gt: &LabelMap, pred: &FeatureMap<f64>) -> Result<LossValue> {
    check_probs(gt, pred)?;
    let (h, w) = (pred.height, pred.width);
    let hw = h * w;
    let mut value = 0.0;
    let mut grad = FeatureMap::zeros(pred.channels, h, w);
    for i in 0..h {
        for j in 0..w {
            let l = gt.at(i, j);
            if l == IGNORE {
                continue;
            }
            let base = l as usize * hw;
            let here = i * w + j;
            let mut term = |other: usize| {
                let d = pred.data[base + other] - pred.data[base + here];
                value += d.abs();
                let s = sign(d);
                grad.data[base + other] += s;
                grad.data[base + here] -= s;
            };
            if i + 1 < h && gt.at(i + 1, j) == l {
                term(here + w);
            }
            if j + 1 < w && gt.at(i, j + 1) == l {
                term(here + 1);
            }
        }
    }
    Ok(LossValue { value, grad })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub sem: f64,
    pub color: f64,
    pub smooth: f64,
}

pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> f64 {
    cfg.lambda_sem * parts.sem + cfg.lambda_c * parts.color + cfg.lambda_rs * parts.smooth
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_examples() {
        let gt = LabelMap::new(1, 1, vec![1]).unwrap();
        let half = FeatureMap::from_vec(2, 1, 1, vec![0.5, 0.5]);
        let r = sem_ce(&gt, &half, 1e-8).unwrap();
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = FeatureMap::from_vec(2, 1, 1, vec![0.0, 1.0]);
        assert_eq!(sem_ce(&gt, &perfect, 1e-8).unwrap().value, 0.0);
        let over = FeatureMap::from_vec(2, 1, 1, vec![0.6, 0.6]);
        assert!(sem_ce(&gt, &over, 1e-8).is_err());
        let ignored = LabelMap::new(1, 1, vec![IGNORE]).unwrap();
        assert!(matches!(sem_ce(&ignored, &half, 1e-8), Err(Error::EmptyReduction(_))));
    }

    #[test]
    fn mse_constant_offset() {
        let gt = FeatureMap::from_vec(3, 2, 2, (0..12).map(|i| i as f64 / 20.0).collect());
        let pred = gt.map(|v| v + 0.1);
        assert!((color_mse(&gt, &pred).unwrap().value - 0.01).abs() < 1e-15);
        assert_eq!(color_mse(&gt, &gt).unwrap().value, 0.0);
        assert!(color_mse(&gt, &FeatureMap::zeros(3, 2, 1)).is_err());
    }

    #[test]
    fn smoothness_hand_example() {
        let gt = LabelMap::filled(2, 2, 0);
        let pred = FeatureMap::from_vec(1, 2, 2, vec![1.0, 0.8, 0.6, 0.6]);
        assert_eq!(regional_smoothness(&gt, &pred).unwrap().value, 0.8);
    }

    #[test]
    fn smoothness_ignores_region_boundaries() {
        let gt = LabelMap::new(2, 1, vec![0, 1]).unwrap();
        let pred = FeatureMap::from_vec(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(regional_smoothness(&gt, &pred).unwrap().value, 0.0);
    }

    #[test]
    fn total_loss_weights() {
        let cfg = LossConfig::default();
        assert_eq!((cfg.lambda_sem, cfg.lambda_c, cfg.lambda_rs), (0.1, 1.0, 0.001));
        let ones = LossParts {
            sem: 1.0,
            color: 1.0,
            smooth: 1.0,
        };
        assert!((total_loss(&ones, &cfg) - 1.101).abs() < 1e-15);
        assert_eq!(total_loss(&LossParts::default(), &cfg), 0.0);
        assert!(LossConfig {
            lambda_rs: -1.0,
            ..cfg
        }
        .validate()
        .is_err());
    }
}
