//! The feed-forward pass: images and cameras to dual Gaussians, and novel
//! views rendered from them.

use rayon::prelude::*;

use crate::backbone::{self, extract_features, BackboneConfig, DOWNSAMPLE};
use crate::depth::{
    build_cost_volume, refine_volume, regress_depth, sample_candidates, unet_layout, DepthCandidates, DepthResult,
    DEFAULT_CANDIDATES, DEFAULT_FAR, DEFAULT_NEAR,
};
use crate::error::{Error, Result};
use crate::gaussian::{
    decode_color_attrs, decode_semantic_attrs, decode_shared, decoder_layout, GaussianSet, DEFAULT_CLASSES,
    DEFAULT_SH_DEGREE,
};
use crate::geometry::CameraView;
use crate::losses::LossConfig;
use crate::raster::{rasterize, RasterConfig, RenderedMaps};
use crate::tensor::{avg_pool, resize_bilinear, FeatureMap};
use crate::weights::{Layout, NetworkWeights};

/// Grid the per-pixel decoders run on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeAt {
    /// One Gaussian per input pixel; features are upsampled bilinearly.
    Pixels,
    /// One Gaussian per feature cell.
    Features,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub dim: usize,
    pub candidates: usize,
    pub near: f64,
    pub far: f64,
    pub classes: usize,
    pub sh_degree: usize,
    pub window: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub decode_at: DecodeAt,
    pub color_blocks: usize,
    pub semantic_blocks: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dim: 128,
            candidates: DEFAULT_CANDIDATES,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
            classes: DEFAULT_CLASSES,
            sh_degree: DEFAULT_SH_DEGREE,
            window: 8,
            seed: 0,
            loss: LossConfig::default(),
            decode_at: DecodeAt::Pixels,
            color_blocks: 6,
            semantic_blocks: 3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!("feature dimension {} is not a positive multiple of 8", self.dim)));
        }
        if self.candidates < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 depth candidates, got {}", self.candidates)));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid depth range {}..{}", self.near, self.far)));
        }
        if self.window == 0 {
            return Err(Error::InvalidArgument("window size must be positive".into()));
        }
        self.loss.validate()?;
        GaussianSet::new(self.sh_degree, self.classes).map(|_| ())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            dim: self.dim,
            color_blocks: self.color_blocks,
            semantic_blocks: self.semantic_blocks,
            window: self.window,
            ..BackboneConfig::default()
        }
    }

    /// Every parameter the pass reads.
    pub fn layout(&self) -> Layout {
        let mut l = backbone::layout(&self.backbone());
        l.extend(unet_layout(self.candidates, self.dim));
        l.extend(decoder_layout(self.candidates, self.dim, self.sh_degree, self.classes));
        l
    }
}

pub fn init_weights(cfg: &PipelineConfig) -> Result<NetworkWeights> {
    cfg.validate()?;
    Ok(NetworkWeights::init(cfg.seed, &cfg.layout()))
}

fn check_inputs(images: &[FeatureMap<f64>], cameras: &[CameraView]) -> Result<()> {
    if images.len() != cameras.len() {
        return Err(Error::ShapeMismatch(format!("{} images but {} cameras", images.len(), cameras.len())));
    }
    if images.len() < 2 {
        return Err(Error::InvalidArgument("the pass needs at least two views".into()));
    }
    let (h, w) = (images[0].height, images[0].width);
    for (i, (im, cam)) in images.iter().zip(cameras).enumerate() {
        if im.channels != 3 || (im.height, im.width) != (h, w) {
            return Err(Error::ShapeMismatch(format!("image {i} is not {w}x{h} RGB")));
        }
        if (cam.width(), cam.height()) != (w, h) {
            return Err(Error::ShapeMismatch(format!("camera {i} does not match its image size")));
        }
        if !im.all_finite() {
            return Err(Error::NonFinite("input image"));
        }
    }
    Ok(())
}

/// Cameras for feature maps of unpadded images of the given cameras.
pub fn feature_cameras(cameras: &[CameraView], padded: (usize, usize)) -> Vec<CameraView> {
    let (ph, pw) = padded;
    cameras
        .iter()
        .map(|c| c.padded(pw, ph).resized(pw / DOWNSAMPLE, ph / DOWNSAMPLE))
        .collect()
}

/// Cost volume, refinement and regression for every view as reference.
pub fn estimate_depths(
    features: &[FeatureMap<f64>],
    cameras: &[CameraView],
    candidates: &DepthCandidates,
    w: &NetworkWeights,
) -> Result<Vec<DepthResult>> {
    (0..features.len())
        .into_par_iter()
        .map(|i| {
            let volume = build_cost_volume(features, cameras, candidates, i)?;
            let logits = refine_volume(&volume.corr, &features[i], w)?;
            regress_depth(&logits, candidates)
        })
        .collect()
}

/// Bilinear resize of a depth distribution, followed by a fresh expectation.
fn upsample_depth(d: &DepthResult, padded: (usize, usize), size: (usize, usize), candidates: &DepthCandidates) -> DepthResult {
    let probs = resize_bilinear(&d.probs, padded.0, padded.1).crop(size.0, size.1);
    let hw = size.0 * size.1;
    let depth = (0..hw)
        .map(|p| {
            let e: f64 = candidates.values().iter().enumerate().map(|(m, v)| probs.data[m * hw + p] * v).sum();
            e.clamp(candidates.values()[0], candidates.values()[candidates.len() - 1])
        })
        .collect();
    DepthResult {
        height: size.0,
        width: size.1,
        depth,
        probs,
    }
}

fn upsample_features(maps: &[FeatureMap<f64>], padded: (usize, usize), size: (usize, usize)) -> Vec<FeatureMap<f64>> {
    maps.par_iter()
        .map(|m| resize_bilinear(m, padded.0, padded.1).crop(size.0, size.1))
        .collect()
}

/// Per-view depth at input resolution from the learned path.
pub fn predict_depths(
    images: &[FeatureMap<f64>],
    cameras: &[CameraView],
    cfg: &PipelineConfig,
    w: &NetworkWeights,
) -> Result<Vec<DepthResult>> {
    cfg.validate()?;
    check_inputs(images, cameras)?;
    let candidates = sample_candidates(cfg.near, cfg.far, cfg.candidates)?;
    let (features, _) = extract_features(images, cameras, w, &cfg.backbone())?;
    let padded = features.padded_size;
    let depths = estimate_depths(&features.color, &feature_cameras(cameras, padded), &candidates, w)?;
    let size = (images[0].height, images[0].width);
    Ok(depths.iter().map(|d| upsample_depth(d, padded, size, &candidates)).collect())
}

/// One feed-forward pass. Does not modify its inputs.
pub fn forward(
    images: &[FeatureMap<f64>],
    cameras: &[CameraView],
    cfg: &PipelineConfig,
    w: &NetworkWeights,
) -> Result<GaussianSet> {
    cfg.validate()?;
    check_inputs(images, cameras)?;
    let candidates = sample_candidates(cfg.near, cfg.far, cfg.candidates)?;
    let (features, _) = extract_features(images, cameras, w, &cfg.backbone())?;
    let padded = features.padded_size;
    let feat_cams = feature_cameras(cameras, padded);
    let depths = estimate_depths(&features.color, &feat_cams, &candidates, w)?;
    let size = (images[0].height, images[0].width);
    let (depths, grid_images, color, semantic, grid_cams) = match cfg.decode_at {
        DecodeAt::Pixels => (
            depths.iter().map(|d| upsample_depth(d, padded, size, &candidates)).collect::<Vec<_>>(),
            images.to_vec(),
            upsample_features(&features.color, padded, size),
            upsample_features(&features.semantic, padded, size),
            cameras.to_vec(),
        ),
        DecodeAt::Features => (
            depths,
            images
                .iter()
                .map(|im| avg_pool(&im.pad_edge(padded.0, padded.1), DOWNSAMPLE))
                .collect(),
            features.color,
            features.semantic,
            feat_cams,
        ),
    };
    let (shared, provenance) = decode_shared(&depths, &grid_cams, w)?;
    let color = decode_color_attrs(&grid_images, &color, w, cfg.sh_degree)?;
    let semantic = decode_semantic_attrs(&grid_images, &semantic, w, cfg.classes)?;
    let set = GaussianSet::from_parts(shared, color, semantic, provenance, cfg.sh_degree, cfg.classes)?;
    set.validate()?;
    Ok(set)
}

/// Render a Gaussian set from a target camera.
pub fn render_novel(gaussians: &GaussianSet, target: &CameraView) -> Result<RenderedMaps> {
    Ok(rasterize(gaussians, target, &RasterConfig::default())?.maps)
}
