//! Gradient descent on class logits against labelled views.
//!
//! Geometry and opacity stay fixed, so each view is rasterized once and its
//! semantic blend record is reused for every step.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::geometry::CameraView;
use crate::losses::{regional_smoothness, sem_ce, LossConfig};
use crate::metrics::LabelMap;
use crate::raster::{backprop_semantic, composite_semantic, rasterize, BlendRecord, RasterConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub step_size: f64,
    pub loss: LossConfig,
    pub raster: RasterConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 200,
            step_size: 0.5,
            loss: LossConfig::default(),
            raster: RasterConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SupervisedView {
    pub camera: CameraView,
    pub labels: LabelMap,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub gaussians: GaussianSet,
    /// Objective before each step, followed by the final objective.
    pub loss_trace: Vec<f64>,
}

/// Rasterize every view once and keep its semantic record.
pub fn record_views(set: &GaussianSet, views: &[SupervisedView], cfg: &RasterConfig) -> Result<Vec<BlendRecord>> {
    views
        .par_iter()
        .map(|v| {
            if (v.labels.width, v.labels.height) != (v.camera.width(), v.camera.height()) {
                return Err(Error::ShapeMismatch("label map does not match its camera".into()));
            }
            Ok(rasterize(set, &v.camera, cfg)?.semantic_record)
        })
        .collect()
}

/// `Σ_views λ_sem·L_sem + λ_rs·L_rs` and its gradient with respect to every
/// class logit (`N×K`).
pub fn semantic_objective(
    set: &GaussianSet,
    records: &[BlendRecord],
    views: &[SupervisedView],
    loss: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    if records.len() != views.len() {
        return Err(Error::ShapeMismatch(format!("{} records for {} views", records.len(), views.len())));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; set.len() * set.classes()];
    for (rec, view) in records.iter().zip(views) {
        let (probs, _) = composite_semantic(rec, set)?;
        let ce = sem_ce(&view.labels, &probs, loss.prob_floor)?;
        let rs = regional_smoothness(&view.labels, &probs)?;
        total += loss.lambda_sem * ce.value + loss.lambda_rs * rs.value;
        let g_out = ce
            .grad
            .map(|v| v * loss.lambda_sem)
            .add(&rs.grad.map(|v| v * loss.lambda_rs));
        let g = backprop_semantic(&g_out, rec.pass_id, rec, set)?;
        for (a, b) in grad.iter_mut().zip(g.logits) {
            *a += b;
        }
    }
    Ok((total, grad))
}

pub fn fit_semantic_logits(set: &GaussianSet, views: &[SupervisedView], cfg: &FitConfig) -> Result<FitResult> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("fitting needs at least one labelled view".into()));
    }
    cfg.loss.validate()?;
    if !(cfg.step_size > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {}", cfg.step_size)));
    }
    let records = record_views(set, views, &cfg.raster)?;
    let mut current = set.clone();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (value, grad) = semantic_objective(&current, &records, views, &cfg.loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("semantic objective"));
        }
        trace.push(value);
        if step == cfg.steps {
            break;
        }
        for (l, g) in current.semantic.logits.iter_mut().zip(&grad) {
            *l -= cfg.step_size * g;
        }
    }
    Ok(FitResult {
        gaussians: current,
        loss_trace: trace,
    })
}
