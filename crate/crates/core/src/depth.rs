//! Plane-sweep depth: candidate sampling, cost volumes, a small U-Net
//! refinement and soft-argmax regression.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{apply_warp, warp_taps, CameraView};
use crate::real::Real;
use crate::tensor::{conv2d, leaky_relu_map, upsample_nearest2, FeatureMap};
use crate::weights::{conv_layout, Layout, NetworkWeights};

pub const DEFAULT_NEAR: f64 = 0.5;
pub const DEFAULT_FAR: f64 = 15.0;
pub const DEFAULT_CANDIDATES: usize = 128;
pub const UNET_HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthCandidates {
    values: Vec<f64>,
    near: f64,
    far: f64,
}

impl DepthCandidates {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    pub fn far(&self) -> f64 {
        self.far
    }
}

/// `L` depths whose inverses are evenly spaced between `1/near` and `1/far`,
/// in increasing depth order.
pub fn sample_candidates(near: f64, far: f64, count: usize) -> Result<DepthCandidates> {
    if !(near > 0.0 && far > near && far.is_finite()) {
        return Err(Error::InvalidArgument(format!("depth range must satisfy 0 < near < far, got [{near}, {far}]")));
    }
    if count < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 depth candidates, got {count}")));
    }
    let (a, b) = (1.0 / near, 1.0 / far);
    let step = (b - a) / (count - 1) as f64;
    let mut values: Vec<f64> = (0..count).map(|m| 1.0 / (a + step * m as f64)).collect();
    values[0] = near;
    values[count - 1] = far;
    Ok(DepthCandidates { values, near, far })
}

/// Per-candidate correlation for one reference view, stored as an
/// `L×H'×W'` map (candidates along the channel axis).
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub corr: FeatureMap<f64>,
}

/// Plane-sweep correlation between the reference view and every other view.
pub fn build_cost_volume(
    features: &[FeatureMap<f64>],
    cameras: &[CameraView],
    candidates: &DepthCandidates,
    ref_view: usize,
) -> Result<CostVolume> {
    if features.len() != cameras.len() {
        return Err(Error::ShapeMismatch(format!("{} feature maps but {} cameras", features.len(), cameras.len())));
    }
    if features.len() < 2 {
        return Err(Error::InvalidArgument("cost volume needs at least one source view".into()));
    }
    if ref_view >= features.len() {
        return Err(Error::InvalidArgument(format!("reference view {ref_view} out of range")));
    }
    let f_ref = &features[ref_view];
    for f in features {
        if (f.channels, f.height, f.width) != (f_ref.channels, f_ref.height, f_ref.width) {
            return Err(Error::ShapeMismatch("feature maps differ in shape".into()));
        }
    }
    let (c, h, w) = (f_ref.channels, f_ref.height, f_ref.width);
    let hw = h * w;
    let sources: Vec<usize> = (0..features.len()).filter(|&j| j != ref_view).collect();
    let inv = 1.0 / (c * sources.len()) as f64;
    let planes: Vec<Vec<f64>> = candidates
        .values
        .par_iter()
        .map(|&d| {
            let mut acc = vec![0.0; hw];
            for &j in &sources {
                let taps = warp_taps(&cameras[ref_view], &cameras[j], d, h, w);
                let warped = apply_warp(&features[j], &taps);
                for ch in 0..c {
                    let a = f_ref.plane(ch);
                    let b = warped.plane(ch);
                    for p in 0..hw {
                        acc[p] += a[p] * b[p];
                    }
                }
            }
            for v in acc.iter_mut() {
                *v *= inv;
            }
            acc
        })
        .collect();
    let corr = FeatureMap::from_vec(candidates.len(), h, w, planes.concat());
    if !corr.all_finite() {
        return Err(Error::NonFinite("cost volume"));
    }
    Ok(CostVolume { corr })
}

/// Parameters of the refinement U-Net for `l` candidates and `c` feature channels.
pub fn unet_layout(l: usize, c: usize) -> Layout {
    let h = UNET_HIDDEN;
    let mut layout = Layout::new();
    conv_layout(&mut layout, "depth.unet.enc1", h, l + c, 3, true);
    conv_layout(&mut layout, "depth.unet.enc2", 2 * h, h, 3, true);
    conv_layout(&mut layout, "depth.unet.dec", h, 3 * h, 3, true);
    conv_layout(&mut layout, "depth.unet.out", l, h, 3, true);
    layout
}

/// Two-scale encoder/decoder over `[volume; features]`, added to the volume.
/// Zeroing `depth.unet.out` makes this the identity on the volume.
pub fn refine_volume<T: Real>(
    volume: &FeatureMap<T>,
    features: &FeatureMap<T>,
    w: &NetworkWeights<T>,
) -> Result<FeatureMap<T>> {
    if (volume.height, volume.width) != (features.height, features.width) {
        return Err(Error::ShapeMismatch("volume and features differ in spatial size".into()));
    }
    let l = volume.channels;
    let expected = [UNET_HIDDEN, l + features.channels, 3, 3];
    if w.get("depth.unet.enc1.w").shape != expected {
        return Err(Error::ShapeMismatch(format!("refinement weights do not fit {l} candidates")));
    }
    let conv = |x: &FeatureMap<T>, name: &str, stride: usize| {
        conv2d(
            x,
            w.get(&format!("depth.unet.{name}.w")),
            Some(w.get(&format!("depth.unet.{name}.b"))),
            stride,
        )
    };
    let input = FeatureMap::concat(&[volume, features]);
    let mut e1 = conv(&input, "enc1", 1);
    leaky_relu_map(&mut e1);
    let mut e2 = conv(&e1, "enc2", 2);
    leaky_relu_map(&mut e2);
    let up = upsample_nearest2(&e2).crop(e1.height, e1.width);
    let mut d = conv(&FeatureMap::concat(&[&up, &e1]), "dec", 1);
    leaky_relu_map(&mut d);
    let delta = conv(&d, "out", 1);
    Ok(volume.add(&delta))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthResult {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub probs: FeatureMap<f64>,
}

/// Per-pixel softmax over candidates and the resulting expected depth.
pub fn regress_depth(logits: &FeatureMap<f64>, candidates: &DepthCandidates) -> Result<DepthResult> {
    if logits.channels != candidates.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit channels for {} candidates",
            logits.channels,
            candidates.len()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("depth logits"));
    }
    let (l, hw) = (logits.channels, logits.height * logits.width);
    let mut probs = FeatureMap::zeros(l, logits.height, logits.width);
    let mut depth = vec![0.0; hw];
    let mut col = vec![0.0; l];
    for p in 0..hw {
        let mut max = f64::NEG_INFINITY;
        for m in 0..l {
            col[m] = logits.data[m * hw + p];
            max = max.max(col[m]);
        }
        let mut sum = 0.0;
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let mut d = 0.0;
        for m in 0..l {
            let pr = col[m] / sum;
            probs.data[m * hw + p] = pr;
            d += pr * candidates.values[m];
        }
        depth[p] = d.clamp(candidates.values[0], candidates.values[l - 1]);
    }
    Ok(DepthResult {
        height: logits.height,
        width: logits.width,
        depth,
        probs,
    })
}

/// Photometric patch descriptors: every channel of a `(2r+1)²` neighbourhood
/// (edge replicated), mean-removed and scaled to norm `√C`, so the channel
/// mean of a product of two descriptors is their normalized cross-correlation.
pub fn patch_features(image: &FeatureMap<f64>, radius: usize) -> FeatureMap<f64> {
    let (h, w) = (image.height, image.width);
    let side = 2 * radius + 1;
    let c = image.channels * side * side;
    let mut out = FeatureMap::zeros(c, h, w);
    let hw = h * w;
    let mut buf = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for ch in 0..image.channels {
                for dy in 0..side {
                    let yy = (y + dy).saturating_sub(radius).min(h - 1);
                    for dx in 0..side {
                        let xx = (x + dx).saturating_sub(radius).min(w - 1);
                        buf[k] = image.at(ch, yy, xx);
                        k += 1;
                    }
                }
            }
            let mean = buf.iter().sum::<f64>() / c as f64;
            let norm = buf.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>().sqrt();
            let scale = if norm > 1e-12 { (c as f64).sqrt() / norm } else { 0.0 };
            for (k, v) in buf.iter().enumerate() {
                out.data[k * hw + y * w + x] = (v - mean) * scale;
            }
        }
    }
    out
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(image: &FeatureMap<f64>, sigma: f64) -> FeatureMap<f64> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (h, w) = (image.height as isize, image.width as isize);
    let pass = |src: &FeatureMap<f64>, horizontal: bool| {
        let mut out = FeatureMap::zeros(src.channels, src.height, src.width);
        for c in 0..src.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, kv) in k.iter().enumerate() {
                        let o = i as isize - r;
                        let (yy, xx) = if horizontal {
                            (y, (x + o).clamp(0, w - 1))
                        } else {
                            ((y + o).clamp(0, h - 1), x)
                        };
                        acc += kv * src.at(c, yy as usize, xx as usize);
                    }
                    let i = out.idx(c, y as usize, x as usize);
                    out.data[i] = acc;
                }
            }
        }
        out
    };
    pass(&pass(image, true), false)
}

pub const RAW_PATCH_RADIUS: usize = 2;
pub const RAW_BLUR_SIGMA: f64 = 1.0;
pub const RAW_TEMPERATURE: f64 = 0.02;

/// Plane-sweep volume from photometric patches. Each source image is warped
/// into the reference view per candidate before descriptors are taken, so
/// every correlation is a true normalized cross-correlation.
pub fn build_patch_volume(
    images: &[FeatureMap<f64>],
    cameras: &[CameraView],
    candidates: &DepthCandidates,
    ref_view: usize,
    blur_sigma: f64,
    radius: usize,
) -> Result<CostVolume> {
    if images.len() != cameras.len() {
        return Err(Error::ShapeMismatch(format!("{} images but {} cameras", images.len(), cameras.len())));
    }
    if images.len() < 2 {
        return Err(Error::InvalidArgument("cost volume needs at least one source view".into()));
    }
    if ref_view >= images.len() {
        return Err(Error::InvalidArgument(format!("reference view {ref_view} out of range")));
    }
    let (h, w) = (images[ref_view].height, images[ref_view].width);
    if images.iter().any(|im| (im.height, im.width, im.channels) != (h, w, images[ref_view].channels)) {
        return Err(Error::ShapeMismatch("images differ in shape".into()));
    }
    let blurred: Vec<FeatureMap<f64>> = images.par_iter().map(|im| gaussian_blur(im, blur_sigma)).collect();
    let f_ref = patch_features(&blurred[ref_view], radius);
    let sources: Vec<usize> = (0..images.len()).filter(|&j| j != ref_view).collect();
    let hw = h * w;
    let c = f_ref.channels;
    let inv = 1.0 / (c * sources.len()) as f64;
    let planes: Vec<Vec<f64>> = candidates
        .values
        .par_iter()
        .map(|&d| {
            let mut acc = vec![0.0; hw];
            for &j in &sources {
                let taps = warp_taps(&cameras[ref_view], &cameras[j], d, h, w);
                let f_src = patch_features(&apply_warp(&blurred[j], &taps), radius);
                for ch in 0..c {
                    let a = f_ref.plane(ch);
                    let b = f_src.plane(ch);
                    for p in 0..hw {
                        acc[p] += a[p] * b[p];
                    }
                }
            }
            acc.iter_mut().for_each(|v| *v *= inv);
            acc
        })
        .collect();
    Ok(CostVolume {
        corr: FeatureMap::from_vec(candidates.len(), h, w, planes.concat()),
    })
}

/// Depth for one reference view from image patches alone, skipping the
/// learned backbone and refinement. Logits are correlations divided by
/// `temperature`.
pub fn estimate_depth_raw(
    images: &[FeatureMap<f64>],
    cameras: &[CameraView],
    candidates: &DepthCandidates,
    ref_view: usize,
    temperature: f64,
) -> Result<DepthResult> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let volume = build_patch_volume(images, cameras, candidates, ref_view, RAW_BLUR_SIGMA, RAW_PATCH_RADIUS)?;
    let logits = volume.corr.map(|v| v / temperature);
    regress_depth(&logits, candidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    fn cam(tx: f64) -> CameraView {
        CameraView::new(
            Matrix3::new(1.0, 0.0, 0.5, 0.0, 1.0, 0.5, 0.0, 0.0, 1.0),
            Matrix3::identity(),
            Vector3::new(-tx, 0.0, 0.0),
            16,
            16,
        )
        .unwrap()
    }

    #[test]
    fn candidates_are_inverse_uniform() {
        let c = sample_candidates(1.0, 4.0, 3).unwrap();
        let want = [1.0, 1.6, 4.0];
        for (a, b) in c.values().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(sample_candidates(1.0, 1.0, 3).is_err());
        assert!(sample_candidates(1.0, 2.0, 1).is_err());
        assert!(sample_candidates(-1.0, 2.0, 4).is_err());
    }

    #[test]
    fn identical_views_give_flat_volume() {
        let f = FeatureMap::from_vec(2, 16, 16, (0..512).map(|i| ((i * 7) % 13) as f64 * 0.1).collect());
        let cams = [cam(0.0), cam(0.0)];
        let cand = sample_candidates(1.0, 5.0, 4).unwrap();
        let v = build_cost_volume(&[f.clone(), f.clone()], &cams, &cand, 0).unwrap();
        let hw = 256;
        for p in 0..hw {
            let want = (f.data[p].powi(2) + f.data[hw + p].powi(2)) / 2.0;
            for m in 0..4 {
                assert!((v.corr.data[m * hw + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_sources_and_single_view() {
        let f = FeatureMap::from_vec(1, 16, 16, vec![1.0; 256]);
        let z = FeatureMap::zeros(1, 16, 16);
        let cand = sample_candidates(1.0, 5.0, 4).unwrap();
        let v = build_cost_volume(&[f.clone(), z], &[cam(0.0), cam(0.1)], &cand, 0).unwrap();
        assert!(v.corr.data.iter().all(|&x| x == 0.0));
        assert!(build_cost_volume(&[f], &[cam(0.0)], &cand, 0).is_err());
    }

    #[test]
    fn regression_examples() {
        let cand = sample_candidates(1.0, 4.0, 3).unwrap();
        let cand = DepthCandidates {
            values: vec![1.0, 2.0, 4.0],
            ..cand
        };
        let uniform = FeatureMap::zeros(3, 1, 1);
        let r = regress_depth(&uniform, &cand).unwrap();
        assert!((r.depth[0] - 7.0 / 3.0).abs() < 1e-12);
        let onehot = FeatureMap::from_vec(3, 1, 1, vec![0.0, 1e4, 0.0]);
        assert_eq!(regress_depth(&onehot, &cand).unwrap().depth[0], 2.0);
        let bad = FeatureMap::from_vec(3, 1, 1, vec![0.0, f64::NAN, 0.0]);
        assert!(regress_depth(&bad, &cand).is_err());
    }

    #[test]
    fn zeroed_output_conv_is_identity() {
        let l = 4;
        let mut w = NetworkWeights::init(2, &unet_layout(l, 3));
        w.zero_where(|n| n.starts_with("depth.unet.out"));
        let vol = FeatureMap::from_vec(l, 5, 7, (0..140).map(|i| (i as f64 * 0.37).sin()).collect());
        let feat = FeatureMap::from_vec(3, 5, 7, (0..105).map(|i| (i as f64 * 0.11).cos()).collect());
        let out = refine_volume(&vol, &feat, &w).unwrap();
        assert_eq!(out, vol);
    }

    #[test]
    fn patch_descriptor_self_correlation_is_one() {
        let im = FeatureMap::from_vec(1, 6, 6, (0..36).map(|i| ((i * 5) % 7) as f64).collect());
        let f = patch_features(&im, 1);
        let hw = 36;
        for p in 0..hw {
            let s: f64 = (0..f.channels).map(|c| f.data[c * hw + p].powi(2)).sum::<f64>() / f.channels as f64;
            assert!((s - 1.0).abs() < 1e-12 || s == 0.0);
        }
    }
}
