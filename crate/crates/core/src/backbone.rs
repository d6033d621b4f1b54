//! Dual-branch multi-view feature extractor.
//!
//! A shared residual CNN (6 blocks, two stride-2 stages) turns each image
//! into `d`-channel features at quarter resolution. The color branch feeds
//! them straight into a stack of camera-aware transformer blocks; the
//! semantic branch first refines them with two more residual blocks and then
//! runs its own, shorter transformer stack.

use rayon::prelude::*;

use crate::attention::{cross_view_attention, grid_transforms, windowed_attention, TokenGrid, TokenTransform};
use crate::error::{Error, Result};
use crate::geometry::CameraView;
use crate::real::Real;
use crate::tensor::{self, conv2d, instance_norm, layer_norm_rows, leaky_relu_map, silu, FeatureMap};
use crate::weights::{conv_layout, linear_layout, param, try_param, Layout, NetworkWeights};

pub const DOWNSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub dim: usize,
    pub color_blocks: usize,
    pub semantic_blocks: usize,
    pub window: usize,
    pub ffn_expansion: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            dim: 128,
            color_blocks: 6,
            semantic_blocks: 3,
            window: 8,
            ffn_expansion: 4,
        }
    }
}

/// `(name, in, out, stride)` for the shared residual blocks.
fn shared_blocks(dim: usize) -> Vec<(String, usize, usize, usize)> {
    let mid = dim / 2;
    vec![
        ("shared.b0".into(), 3, mid, 2),
        ("shared.b1".into(), mid, mid, 1),
        ("shared.b2".into(), mid, dim, 2),
        ("shared.b3".into(), dim, dim, 1),
        ("shared.b4".into(), dim, dim, 1),
        ("shared.b5".into(), dim, dim, 1),
    ]
}

const SEMANTIC_REFINE_BLOCKS: [&str; 2] = ["semantic.res0", "semantic.res1"];

fn residual_layout(layout: &mut Layout, name: &str, inp: usize, out: usize, stride: usize) {
    conv_layout(layout, &format!("{name}.conv1"), out, inp, 3, true);
    conv_layout(layout, &format!("{name}.conv2"), out, out, 3, true);
    if inp != out || stride != 1 {
        conv_layout(layout, &format!("{name}.skip"), out, inp, 1, false);
    }
}

fn transformer_layout(layout: &mut Layout, name: &str, dim: usize, expansion: usize) {
    for part in ["self", "cross"] {
        for proj in ["q", "k", "v", "o"] {
            linear_layout(layout, &format!("{name}.{part}.{proj}"), dim, dim, false);
        }
    }
    linear_layout(layout, &format!("{name}.ffn.fc1"), dim * expansion, dim, true);
    linear_layout(layout, &format!("{name}.ffn.fc2"), dim, dim * expansion, true);
}

pub fn layout(cfg: &BackboneConfig) -> Layout {
    let mut l = Layout::new();
    for (name, inp, out, stride) in shared_blocks(cfg.dim) {
        residual_layout(&mut l, &name, inp, out, stride);
    }
    for i in 0..cfg.color_blocks {
        transformer_layout(&mut l, &format!("color.t{i}"), cfg.dim, cfg.ffn_expansion);
    }
    for name in SEMANTIC_REFINE_BLOCKS {
        residual_layout(&mut l, name, cfg.dim, cfg.dim, 1);
    }
    for i in 0..cfg.semantic_blocks {
        transformer_layout(&mut l, &format!("semantic.t{i}"), cfg.dim, cfg.ffn_expansion);
    }
    l
}

fn residual_block<T: Real>(x: &FeatureMap<T>, w: &NetworkWeights<T>, name: &str, stride: usize) -> FeatureMap<T> {
    let c1 = format!("{name}.conv1");
    let c2 = format!("{name}.conv2");
    let mut y = conv2d(x, param(w, &c1, "w"), Some(param(w, &c1, "b")), stride);
    instance_norm(&mut y);
    leaky_relu_map(&mut y);
    let mut y = conv2d(&y, param(w, &c2, "w"), Some(param(w, &c2, "b")), 1);
    instance_norm(&mut y);
    let skip = match try_param(w, name, "skip.w") {
        Some(sw) => conv2d(x, sw, None, stride),
        None => x.clone(),
    };
    let mut out = y.add(&skip);
    leaky_relu_map(&mut out);
    out
}

/// Padded extent (multiple of [`DOWNSAMPLE`]).
pub fn padded_extent(n: usize) -> usize {
    n.div_ceil(DOWNSAMPLE) * DOWNSAMPLE
}

/// Shared low-level CNN, applied to each view independently. Images whose
/// size is not a multiple of 4 are edge-padded on the bottom/right first.
pub fn shared_cnn<T: Real>(images: &[FeatureMap<T>], w: &NetworkWeights<T>, cfg: &BackboneConfig) -> Result<Vec<FeatureMap<T>>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("shared CNN needs at least one image".into()));
    }
    let blocks = shared_blocks(cfg.dim);
    images
        .par_iter()
        .map(|img| {
            if img.channels != 3 {
                return Err(Error::ShapeMismatch(format!("expected RGB input, got {} channels", img.channels)));
            }
            let padded = img.pad_edge(padded_extent(img.height), padded_extent(img.width));
            let mut x = padded;
            for (name, _, _, stride) in &blocks {
                x = residual_block(&x, w, name, *stride);
            }
            Ok(x)
        })
        .collect()
}

fn linear<T: Real>(x: &[T], rows: usize, w: &NetworkWeights<T>, name: &str) -> Vec<T> {
    let wt = param(w, name, "w");
    let (out, inp) = (wt.shape[0], wt.shape[1]);
    let wt_t = tensor::transpose(&wt.data, out, inp);
    let mut y = vec![T::zero(); rows * out];
    T::gemm(rows, inp, out, x, &wt_t, &mut y);
    if let Some(b) = try_param(w, name, "b") {
        for row in y.chunks_mut(out) {
            for (v, &bb) in row.iter_mut().zip(&b.data) {
                *v += bb;
            }
        }
    }
    y
}

pub fn features_to_tokens<T: Real>(maps: &[FeatureMap<T>]) -> Result<TokenGrid<T>> {
    let (c, h, w) = (maps[0].channels, maps[0].height, maps[0].width);
    let mut data = Vec::with_capacity(maps.len() * c * h * w);
    for m in maps {
        if (m.channels, m.height, m.width) != (c, h, w) {
            return Err(Error::ShapeMismatch("feature maps differ across views".into()));
        }
        data.extend(tensor::transpose(&m.data, c, h * w));
    }
    TokenGrid::new(maps.len(), h, w, c, data)
}

pub fn tokens_to_features<T: Real>(grid: &TokenGrid<T>) -> Vec<FeatureMap<T>> {
    let hw = grid.height * grid.width;
    grid.data
        .chunks(hw * grid.dim)
        .map(|chunk| FeatureMap::from_vec(grid.dim, grid.height, grid.width, tensor::transpose(chunk, hw, grid.dim)))
        .collect()
}

fn attention_sublayer<T: Real>(
    x: &TokenGrid<T>,
    w: &NetworkWeights<T>,
    name: &str,
    transforms: &[TokenTransform],
    window: usize,
    shift: Option<usize>,
) -> Result<Vec<T>> {
    let rows = x.views * x.tokens_per_view();
    let h = layer_norm_rows(&x.data, x.dim);
    let mk = |proj: &str| TokenGrid::new(x.views, x.height, x.width, x.dim, linear(&h, rows, w, &format!("{name}.{proj}")));
    let (q, k, v) = (mk("q")?, mk("k")?, mk("v")?);
    let attended = match shift {
        Some(s) => windowed_attention(&q, &k, &v, transforms, window, s)?,
        None => cross_view_attention(&q, &k, &v, transforms, window)?,
    };
    Ok(linear(&attended.data, rows, w, &format!("{name}.o")))
}

fn transformer_block<T: Real>(
    mut x: TokenGrid<T>,
    w: &NetworkWeights<T>,
    name: &str,
    transforms: &[TokenTransform],
    window: usize,
    shift: usize,
) -> Result<TokenGrid<T>> {
    let rows = x.views * x.tokens_per_view();
    let delta = attention_sublayer(&x, w, &format!("{name}.self"), transforms, window, Some(shift))?;
    for (a, d) in x.data.iter_mut().zip(delta) {
        *a += d;
    }
    if x.views > 1 {
        let delta = attention_sublayer(&x, w, &format!("{name}.cross"), transforms, window, None)?;
        for (a, d) in x.data.iter_mut().zip(delta) {
            *a += d;
        }
    }
    let h = layer_norm_rows(&x.data, x.dim);
    let mut hidden = linear(&h, rows, w, &format!("{name}.ffn.fc1"));
    for v in hidden.iter_mut() {
        *v = silu(*v);
    }
    let delta = linear(&hidden, rows, w, &format!("{name}.ffn.fc2"));
    for (a, d) in x.data.iter_mut().zip(delta) {
        *a += d;
    }
    Ok(x)
}

fn transformer_stack<T: Real>(
    features: &[FeatureMap<T>],
    cameras: &[CameraView],
    w: &NetworkWeights<T>,
    cfg: &BackboneConfig,
    prefix: &str,
    blocks: usize,
) -> Result<Vec<FeatureMap<T>>> {
    if cameras.len() != features.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature maps but {} cameras",
            features.len(),
            cameras.len()
        )));
    }
    let mut grid = features_to_tokens(features)?;
    let transforms = grid_transforms(cameras, grid.height, grid.width, grid.dim)?;
    let window = cfg.window.min(grid.height).min(grid.width);
    for i in 0..blocks {
        let shift = if i % 2 == 1 { window / 2 } else { 0 };
        grid = transformer_block(grid, w, &format!("{prefix}.t{i}"), &transforms, window, shift)?;
    }
    Ok(tokens_to_features(&grid))
}

/// Color features `F^c` from shared low-level features.
pub fn color_branch<T: Real>(
    low: &[FeatureMap<T>],
    cameras: &[CameraView],
    w: &NetworkWeights<T>,
    cfg: &BackboneConfig,
) -> Result<Vec<FeatureMap<T>>> {
    transformer_stack(low, cameras, w, cfg, "color", cfg.color_blocks)
}

/// The semantic branch's extra residual refinement, per view.
pub fn semantic_refine<T: Real>(low: &[FeatureMap<T>], w: &NetworkWeights<T>) -> Vec<FeatureMap<T>> {
    low.par_iter()
        .map(|f| {
            let mut x = f.clone();
            for name in SEMANTIC_REFINE_BLOCKS {
                x = residual_block(&x, w, name, 1);
            }
            x
        })
        .collect()
}

/// Semantic features `F^s` from shared low-level features.
pub fn semantic_branch<T: Real>(
    low: &[FeatureMap<T>],
    cameras: &[CameraView],
    w: &NetworkWeights<T>,
    cfg: &BackboneConfig,
) -> Result<Vec<FeatureMap<T>>> {
    let refined = semantic_refine(low, w);
    transformer_stack(&refined, cameras, w, cfg, "semantic", cfg.semantic_blocks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps<T = f64> {
    pub color: Vec<FeatureMap<T>>,
    pub semantic: Vec<FeatureMap<T>>,
    /// Image size the features were computed for, after padding.
    pub padded_size: (usize, usize),
}

/// How often each stage ran during one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    pub shared_cnn_runs: usize,
    pub color_runs: usize,
    pub semantic_runs: usize,
}

/// Full dual-branch extraction. Cameras describe the unpadded images.
pub fn extract_features<T: Real>(
    images: &[FeatureMap<T>],
    cameras: &[CameraView],
    w: &NetworkWeights<T>,
    cfg: &BackboneConfig,
) -> Result<(FeatureMaps<T>, ForwardTrace)> {
    if images.len() != cameras.len() {
        return Err(Error::ShapeMismatch(format!("{} images but {} cameras", images.len(), cameras.len())));
    }
    let mut trace = ForwardTrace::default();
    let low = shared_cnn(images, w, cfg)?;
    trace.shared_cnn_runs += 1;
    let (h, w_px) = (images[0].height, images[0].width);
    let padded_size = (padded_extent(h), padded_extent(w_px));
    let cams: Vec<CameraView> = cameras
        .iter()
        .map(|c| c.padded(padded_size.1, padded_size.0))
        .collect();
    let color = color_branch(&low, &cams, w, cfg)?;
    trace.color_runs += 1;
    let semantic = semantic_branch(&low, &cams, w, cfg)?;
    trace.semantic_runs += 1;
    Ok((
        FeatureMaps {
            color,
            semantic,
            padded_size,
        },
        trace,
    ))
}
