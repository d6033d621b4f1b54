//! Dual Gaussians and the per-pixel decoder heads.
//!
//! A [`GaussianSet`] stores attributes column-wise. Position and opacity live
//! in [`SharedAttrs`] and exist once per pixel; the color and semantic
//! branches each carry their own covariance and payload and borrow the shared
//! columns through [`ColorGaussian`] and [`SemanticGaussian`].

use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;

use crate::depth::DepthResult;
use crate::error::{Error, Result};
use crate::geometry::CameraView;
use crate::io::archive::Archive;
use crate::real::Real;
use crate::tensor::{conv2d, leaky_relu_map, FeatureMap};
use crate::weights::{conv_layout, Layout, NetworkWeights};

pub const SCALE_FLOOR: f64 = 1e-4;
pub const DEFAULT_SH_DEGREE: usize = 1;
pub const DEFAULT_CLASSES: usize = 20;
/// Largest class count representable next to the ignore label in 8-bit maps.
pub const MAX_CLASSES: usize = 255;
pub const HEAD_HIDDEN: usize = 32;
pub const OPACITY_HIDDEN: usize = 16;
/// Raw head channels before the branch payload: 3 scales, 4 quaternion.
const GEOM_CHANNELS: usize = 7;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

pub fn sh_basis_size(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Real SH basis up to degree 2 at a unit direction, in the sign convention
/// common to splatting renderers.
pub fn sh_basis(degree: usize, dir: &Vector3<f64>) -> Vec<f64> {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut b = vec![SH_C0];
    if degree >= 1 {
        b.extend([-SH_C1 * y, SH_C1 * z, -SH_C1 * x]);
    }
    if degree >= 2 {
        b.extend([
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * z * z - x * x - y * y),
            SH_C2[3] * x * z,
            SH_C2[4] * (x * x - y * y),
        ]);
    }
    b
}

/// RGB from `3×B` coefficients (channel-major), offset by 0.5 and clamped to [0, 1].
pub fn sh_eval(coeffs: &[f64], degree: usize, dir: &Vector3<f64>) -> [f64; 3] {
    let basis = sh_basis(degree, dir);
    let nb = basis.len();
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let s: f64 = basis.iter().zip(&coeffs[c * nb..(c + 1) * nb]).map(|(a, b)| a * b).sum();
        *out = (s + 0.5).clamp(0.0, 1.0);
    }
    rgb
}

/// Unit quaternion `(w, x, y, z)`; rejects near-zero input.
pub fn normalize_quaternion(q: [f64; 4]) -> Result<[f64; 4]> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::InvalidArgument(format!("quaternion {q:?} cannot be normalized")));
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// `R·diag(scale²)·Rᵀ` for the rotation of `rotation` (normalized first).
pub fn covariance_from(scale: &Vector3<f64>, rotation: &[f64; 4]) -> Result<Matrix3<f64>> {
    if !scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidArgument(format!("scales must be positive, got {scale:?}")));
    }
    let q = normalize_quaternion(*rotation)?;
    let r = UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix();
    let m = r.matrix() * Matrix3::from_diagonal(&scale.component_mul(scale));
    let cov = m * r.matrix().transpose();
    Ok(0.5 * (cov + cov.transpose()))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One pixel's pair of Gaussians, owned.
#[derive(Clone, Debug, PartialEq)]
pub struct DualGaussian {
    pub position: Vector3<f64>,
    pub opacity: f64,
    pub color_scale: Vector3<f64>,
    pub color_rotation: [f64; 4],
    pub sh_coeffs: Vec<f64>,
    pub sem_scale: Vector3<f64>,
    pub sem_rotation: [f64; 4],
    pub class_logits: Vec<f64>,
}

fn check_geometry(scale: &Vector3<f64>, rotation: &[f64; 4], what: &str) -> Result<()> {
    if !scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} scale not positive")));
    }
    let n = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{what} rotation has norm {n}")));
    }
    let cov = covariance_from(scale, rotation)?;
    if cov.cholesky().is_none() {
        return Err(Error::InvalidArgument(format!("{what} covariance is not positive definite")));
    }
    Ok(())
}

impl DualGaussian {
    pub fn validate(&self, sh_degree: usize, classes: usize) -> Result<()> {
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gaussian position"));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::InvalidArgument(format!("opacity {} outside [0, 1]", self.opacity)));
        }
        check_geometry(&self.color_scale, &self.color_rotation, "color")?;
        check_geometry(&self.sem_scale, &self.sem_rotation, "semantic")?;
        if self.sh_coeffs.len() != 3 * sh_basis_size(sh_degree) {
            return Err(Error::ShapeMismatch(format!("{} SH coefficients for degree {sh_degree}", self.sh_coeffs.len())));
        }
        if self.class_logits.len() != classes {
            return Err(Error::ShapeMismatch(format!("{} logits for {classes} classes", self.class_logits.len())));
        }
        if !self.sh_coeffs.iter().chain(&self.class_logits).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gaussian payload"));
        }
        Ok(())
    }
}

/// Which input view and pixel (row-major on the decode grid) produced a Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub view: usize,
    pub pixel: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SharedAttrs {
    pub positions: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColorAttrs {
    pub scales: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    /// `N×3×B`, channel-major per Gaussian.
    pub sh: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SemanticAttrs {
    pub scales: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    /// `N×K`.
    pub logits: Vec<f64>,
}

/// Color half of a dual Gaussian, borrowing the shared columns.
#[derive(Clone, Copy, Debug)]
pub struct ColorGaussian<'a> {
    pub position: &'a Vector3<f64>,
    pub opacity: &'a f64,
    pub scale: &'a Vector3<f64>,
    pub rotation: &'a [f64; 4],
    pub sh: &'a [f64],
}

/// Semantic half of a dual Gaussian, borrowing the shared columns.
#[derive(Clone, Copy, Debug)]
pub struct SemanticGaussian<'a> {
    pub position: &'a Vector3<f64>,
    pub opacity: &'a f64,
    pub scale: &'a Vector3<f64>,
    pub rotation: &'a [f64; 4],
    pub logits: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub shared: SharedAttrs,
    pub color: ColorAttrs,
    pub semantic: SemanticAttrs,
    pub provenance: Vec<Provenance>,
    sh_degree: usize,
    classes: usize,
}

impl GaussianSet {
    pub fn new(sh_degree: usize, classes: usize) -> Result<Self> {
        if sh_degree > 2 {
            return Err(Error::InvalidArgument(format!("SH degree {sh_degree} not supported (max 2)")));
        }
        if classes == 0 || classes > MAX_CLASSES {
            return Err(Error::InvalidArgument(format!("class count {classes} outside 1..={MAX_CLASSES}")));
        }
        Ok(GaussianSet {
            shared: SharedAttrs::default(),
            color: ColorAttrs::default(),
            semantic: SemanticAttrs::default(),
            provenance: Vec::new(),
            sh_degree,
            classes,
        })
    }

    pub fn from_parts(
        shared: SharedAttrs,
        color: ColorAttrs,
        semantic: SemanticAttrs,
        provenance: Vec<Provenance>,
        sh_degree: usize,
        classes: usize,
    ) -> Result<Self> {
        let mut set = Self::new(sh_degree, classes)?;
        let n = shared.positions.len();
        let nb = 3 * sh_basis_size(sh_degree);
        if shared.opacities.len() != n
            || color.scales.len() != n
            || color.rotations.len() != n
            || color.sh.len() != n * nb
            || semantic.scales.len() != n
            || semantic.rotations.len() != n
            || semantic.logits.len() != n * classes
            || provenance.len() != n
        {
            return Err(Error::ShapeMismatch("gaussian attribute columns disagree in length".into()));
        }
        set.shared = shared;
        set.color = color;
        set.semantic = semantic;
        set.provenance = provenance;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.shared.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shared.positions.is_empty()
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn sh_len(&self) -> usize {
        3 * sh_basis_size(self.sh_degree)
    }

    pub fn push(&mut self, g: DualGaussian, provenance: Provenance) -> Result<()> {
        g.validate(self.sh_degree, self.classes)?;
        self.shared.positions.push(g.position);
        self.shared.opacities.push(g.opacity);
        self.color.scales.push(g.color_scale);
        self.color.rotations.push(g.color_rotation);
        self.color.sh.extend_from_slice(&g.sh_coeffs);
        self.semantic.scales.push(g.sem_scale);
        self.semantic.rotations.push(g.sem_rotation);
        self.semantic.logits.extend_from_slice(&g.class_logits);
        self.provenance.push(provenance);
        Ok(())
    }

    pub fn sh(&self, i: usize) -> &[f64] {
        let n = self.sh_len();
        &self.color.sh[i * n..(i + 1) * n]
    }

    pub fn logits(&self, i: usize) -> &[f64] {
        &self.semantic.logits[i * self.classes..(i + 1) * self.classes]
    }

    pub fn logits_mut(&mut self, i: usize) -> &mut [f64] {
        let k = self.classes;
        &mut self.semantic.logits[i * k..(i + 1) * k]
    }

    pub fn class_probs(&self, i: usize) -> Vec<f64> {
        softmax(self.logits(i))
    }

    pub fn color_view(&self, i: usize) -> ColorGaussian<'_> {
        ColorGaussian {
            position: &self.shared.positions[i],
            opacity: &self.shared.opacities[i],
            scale: &self.color.scales[i],
            rotation: &self.color.rotations[i],
            sh: self.sh(i),
        }
    }

    pub fn semantic_view(&self, i: usize) -> SemanticGaussian<'_> {
        SemanticGaussian {
            position: &self.shared.positions[i],
            opacity: &self.shared.opacities[i],
            scale: &self.semantic.scales[i],
            rotation: &self.semantic.rotations[i],
            logits: self.logits(i),
        }
    }

    pub fn get(&self, i: usize) -> DualGaussian {
        DualGaussian {
            position: self.shared.positions[i],
            opacity: self.shared.opacities[i],
            color_scale: self.color.scales[i],
            color_rotation: self.color.rotations[i],
            sh_coeffs: self.sh(i).to_vec(),
            sem_scale: self.semantic.scales[i],
            sem_rotation: self.semantic.rotations[i],
            class_logits: self.logits(i).to_vec(),
        }
    }

    /// Check every per-Gaussian invariant.
    pub fn validate(&self) -> Result<()> {
        (0..self.len())
            .into_par_iter()
            .try_for_each(|i| self.get(i).validate(self.sh_degree, self.classes))
    }

    /// New set whose `i`-th Gaussian is `self[order[i]]`.
    pub fn permuted(&self, order: &[usize]) -> Result<GaussianSet> {
        let mut out = GaussianSet::new(self.sh_degree, self.classes)?;
        for &i in order {
            out.push(self.get(i), self.provenance[i])?;
        }
        Ok(out)
    }

    pub fn to_archive(&self) -> Archive {
        let n = self.len();
        let mut a = Archive::new("gaussians");
        a.set_meta("count", n);
        a.set_meta("sh_degree", self.sh_degree);
        a.set_meta("classes", self.classes);
        let vec3 = |v: &[Vector3<f64>]| v.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect::<Vec<_>>();
        let quat = |v: &[[f64; 4]]| v.iter().flat_map(|q| q.map(|x| x as f32)).collect::<Vec<_>>();
        a.push("positions", &[n, 3], vec3(&self.shared.positions));
        a.push("opacities", &[n], self.shared.opacities.iter().map(|&v| v as f32));
        a.push("color_scales", &[n, 3], vec3(&self.color.scales));
        a.push("color_rotations", &[n, 4], quat(&self.color.rotations));
        a.push("sh", &[n, 3, sh_basis_size(self.sh_degree)], self.color.sh.iter().map(|&v| v as f32));
        a.push("sem_scales", &[n, 3], vec3(&self.semantic.scales));
        a.push("sem_rotations", &[n, 4], quat(&self.semantic.rotations));
        a.push("logits", &[n, self.classes], self.semantic.logits.iter().map(|&v| v as f32));
        a.push(
            "provenance",
            &[n, 2],
            self.provenance.iter().flat_map(|p| [p.view as f32, p.pixel as f32]),
        );
        a
    }

    pub fn from_archive(a: &Archive) -> Result<GaussianSet> {
        let bad = |reason: String| Error::Format {
            path: Default::default(),
            reason,
        };
        if a.kind != "gaussians" {
            return Err(bad(format!("expected a gaussians archive, found '{}'", a.kind)));
        }
        let meta = |k: &str| -> Result<usize> {
            a.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("missing meta {k}")))
        };
        let (n, degree, classes) = (meta("count")?, meta("sh_degree")?, meta("classes")?);
        let col = |name: &str, width: usize| -> Result<Vec<f64>> {
            let e = a.entry(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if e.data.len() != n * width {
                return Err(bad(format!("tensor {name} has {} values, expected {}", e.data.len(), n * width)));
            }
            Ok(e.data.iter().map(|&v| v as f64).collect())
        };
        let vec3 = |v: Vec<f64>| v.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect::<Vec<_>>();
        let quat = |v: Vec<f64>| v.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect::<Vec<_>>();
        let prov = col("provenance", 2)?
            .chunks(2)
            .map(|c| Provenance {
                view: c[0] as usize,
                pixel: c[1] as usize,
            })
            .collect();
        GaussianSet::from_parts(
            SharedAttrs {
                positions: vec3(col("positions", 3)?),
                opacities: col("opacities", 1)?,
            },
            ColorAttrs {
                scales: vec3(col("color_scales", 3)?),
                rotations: quat(col("color_rotations", 4)?),
                sh: col("sh", 3 * sh_basis_size(degree))?,
            },
            SemanticAttrs {
                scales: vec3(col("sem_scales", 3)?),
                rotations: quat(col("sem_rotations", 4)?),
                logits: col("logits", classes)?,
            },
            prov,
            degree,
            classes,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<GaussianSet> {
        Self::from_archive(&Archive::load(path)?)
    }
}

pub fn opacity_layout(candidates: usize) -> Layout {
    let mut l = Layout::new();
    conv_layout(&mut l, "decode.opacity.c1", OPACITY_HIDDEN, candidates, 3, true);
    conv_layout(&mut l, "decode.opacity.c2", 1, OPACITY_HIDDEN, 1, true);
    l
}

pub fn color_head_channels(sh_degree: usize) -> usize {
    GEOM_CHANNELS + 3 * sh_basis_size(sh_degree)
}

pub fn semantic_head_channels(classes: usize) -> usize {
    GEOM_CHANNELS + classes
}

/// Opacity head plus both attribute heads. Attribute heads see
/// `[image; features]` with `feature_dim` feature channels.
pub fn decoder_layout(candidates: usize, feature_dim: usize, sh_degree: usize, classes: usize) -> Layout {
    let mut l = opacity_layout(candidates);
    for (name, out) in [
        ("decode.color", color_head_channels(sh_degree)),
        ("decode.semantic", semantic_head_channels(classes)),
    ] {
        conv_layout(&mut l, &format!("{name}.c1"), HEAD_HIDDEN, 3 + feature_dim, 3, true);
        conv_layout(&mut l, &format!("{name}.c2"), out, HEAD_HIDDEN, 1, true);
    }
    l
}

fn two_layer_head<T: Real>(input: &FeatureMap<T>, w: &NetworkWeights<T>, name: &str) -> FeatureMap<T> {
    let p = |leaf: &str| w.get(&format!("{name}.{leaf}"));
    let mut h = conv2d(input, p("c1.w"), Some(p("c1.b")), 1);
    leaky_relu_map(&mut h);
    conv2d(&h, p("c2.w"), Some(p("c2.b")), 1)
}

/// Pre-sigmoid opacity from a depth probability volume.
pub fn opacity_head<T: Real>(probs: &FeatureMap<T>, w: &NetworkWeights<T>) -> FeatureMap<T> {
    two_layer_head(probs, w, "decode.opacity")
}

/// Raw color-head output: 3 scale, 4 quaternion, then `3×B` SH channels.
pub fn color_head<T: Real>(image: &FeatureMap<T>, features: &FeatureMap<T>, w: &NetworkWeights<T>) -> FeatureMap<T> {
    two_layer_head(&FeatureMap::concat(&[image, features]), w, "decode.color")
}

/// Raw semantic-head output: 3 scale, 4 quaternion, then `K` logit channels.
pub fn semantic_head<T: Real>(image: &FeatureMap<T>, features: &FeatureMap<T>, w: &NetworkWeights<T>) -> FeatureMap<T> {
    two_layer_head(&FeatureMap::concat(&[image, features]), w, "decode.semantic")
}

fn check_grids(images: &[FeatureMap<f64>], features: &[FeatureMap<f64>]) -> Result<()> {
    if images.len() != features.len() {
        return Err(Error::ShapeMismatch(format!("{} images but {} feature maps", images.len(), features.len())));
    }
    for (im, f) in images.iter().zip(features) {
        if im.channels != 3 || (im.height, im.width) != (f.height, f.width) {
            return Err(Error::ShapeMismatch("images must be RGB on the feature grid".into()));
        }
    }
    Ok(())
}

/// Scales and rotation from the first seven raw channels at pixel `p`.
fn decode_geometry(raw: &FeatureMap<f64>, p: usize) -> Result<(Vector3<f64>, [f64; 4])> {
    let hw = raw.height * raw.width;
    let ch = |c: usize| raw.data[c * hw + p];
    let scale = Vector3::new(ch(0), ch(1), ch(2)).map(|v| v.softplus() + SCALE_FLOOR);
    let rot = normalize_quaternion([1.0 + ch(3), ch(4), ch(5), ch(6)])?;
    Ok((scale, rot))
}

/// Positions from back-projected pixel centers and opacities from the depth
/// distributions, for every pixel of every view's depth grid.
pub fn decode_shared(
    depths: &[DepthResult],
    cameras: &[CameraView],
    w: &NetworkWeights,
) -> Result<(SharedAttrs, Vec<Provenance>)> {
    if depths.len() != cameras.len() {
        return Err(Error::ShapeMismatch(format!("{} depth maps but {} cameras", depths.len(), cameras.len())));
    }
    let per_view: Vec<Result<(Vec<Vector3<f64>>, Vec<f64>)>> = depths
        .par_iter()
        .zip(cameras)
        .map(|(d, cam)| {
            let logits = opacity_head(&d.probs, w);
            let (gh, gw) = (d.height, d.width);
            let mut pos = Vec::with_capacity(gh * gw);
            for y in 0..gh {
                for x in 0..gw {
                    let z = d.depth[y * gw + x];
                    if !(z > 0.0) {
                        return Err(Error::NonPositiveDepth(z));
                    }
                    let un = (x as f64 + 0.5) / gw as f64;
                    let vn = (y as f64 + 0.5) / gh as f64;
                    pos.push(cam.camera_to_world(&cam.unproject_normalized(un, vn, z)));
                }
            }
            Ok((pos, logits.data.iter().map(|v| v.sigmoid()).collect()))
        })
        .collect();
    let mut shared = SharedAttrs::default();
    let mut prov = Vec::new();
    for (view, r) in per_view.into_iter().enumerate() {
        let (pos, op) = r?;
        prov.extend((0..pos.len()).map(|pixel| Provenance { view, pixel }));
        shared.positions.extend(pos);
        shared.opacities.extend(op);
    }
    Ok((shared, prov))
}

/// Color covariance and SH coefficients per pixel. The DC term is offset so
/// that a zero head reproduces the input pixel color.
pub fn decode_color_attrs(
    images: &[FeatureMap<f64>],
    features: &[FeatureMap<f64>],
    w: &NetworkWeights,
    sh_degree: usize,
) -> Result<ColorAttrs> {
    check_grids(images, features)?;
    let nb = sh_basis_size(sh_degree);
    if w.get("decode.color.c2.w").shape[0] != color_head_channels(sh_degree) {
        return Err(Error::ShapeMismatch(format!("color head not built for SH degree {sh_degree}")));
    }
    let per_view: Vec<Result<ColorAttrs>> = images
        .par_iter()
        .zip(features)
        .map(|(im, f)| {
            let raw = color_head(im, f, w);
            let hw = raw.height * raw.width;
            let mut out = ColorAttrs::default();
            for p in 0..hw {
                let (s, r) = decode_geometry(&raw, p)?;
                out.scales.push(s);
                out.rotations.push(r);
                for c in 0..3 {
                    for k in 0..nb {
                        let mut v = raw.data[(GEOM_CHANNELS + c * nb + k) * hw + p];
                        if k == 0 {
                            v += (im.data[c * hw + p] - 0.5) / SH_C0;
                        }
                        out.sh.push(v);
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = ColorAttrs::default();
    for r in per_view {
        let r = r?;
        all.scales.extend(r.scales);
        all.rotations.extend(r.rotations);
        all.sh.extend(r.sh);
    }
    Ok(all)
}

/// Semantic covariance and class logits per pixel.
pub fn decode_semantic_attrs(
    images: &[FeatureMap<f64>],
    features: &[FeatureMap<f64>],
    w: &NetworkWeights,
    classes: usize,
) -> Result<SemanticAttrs> {
    check_grids(images, features)?;
    if w.get("decode.semantic.c2.w").shape[0] != semantic_head_channels(classes) {
        return Err(Error::ShapeMismatch(format!("semantic head not built for {classes} classes")));
    }
    let per_view: Vec<Result<SemanticAttrs>> = images
        .par_iter()
        .zip(features)
        .map(|(im, f)| {
            let raw = semantic_head(im, f, w);
            let hw = raw.height * raw.width;
            let mut out = SemanticAttrs::default();
            for p in 0..hw {
                let (s, r) = decode_geometry(&raw, p)?;
                out.scales.push(s);
                out.rotations.push(r);
                out.logits.extend((0..classes).map(|k| raw.data[(GEOM_CHANNELS + k) * hw + p]));
            }
            if !out.logits.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("class logits"));
            }
            Ok(out)
        })
        .collect();
    let mut all = SemanticAttrs::default();
    for r in per_view {
        let r = r?;
        all.scales.extend(r.scales);
        all.rotations.extend(r.rotations);
        all.logits.extend(r.logits);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth::{regress_depth, sample_candidates};

    fn unit_cam(n: usize) -> CameraView {
        CameraView::new(
            Matrix3::new(1.0, 0.0, 0.5, 0.0, 1.0, 0.5, 0.0, 0.0, 1.0),
            Matrix3::identity(),
            Vector3::zeros(),
            n,
            n,
        )
        .unwrap()
    }

    #[test]
    fn covariance_examples() {
        let id = covariance_from(&Vector3::new(1.0, 1.0, 1.0), &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((id - Matrix3::identity()).abs().max() < 1e-15);
        let h = std::f64::consts::FRAC_PI_4;
        let c = covariance_from(&Vector3::new(2.0, 1.0, 1.0), &[h.cos(), 0.0, 0.0, h.sin()]).unwrap();
        assert!((c - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0))).abs().max() < 1e-12);
        assert!(covariance_from(&Vector3::new(1.0, 1.0, 1.0), &[0.0; 4]).is_err());
    }

    #[test]
    fn zero_heads_give_documented_defaults() {
        let layout = decoder_layout(4, 5, 1, 3);
        let mut w = NetworkWeights::init(1, &layout);
        w.zero_where(|_| true);
        let im = FeatureMap::from_vec(3, 2, 2, (0..12).map(|i| i as f64 / 12.0).collect());
        let f = FeatureMap::from_vec(5, 2, 2, (0..20).map(|i| (i as f64).sin()).collect());
        let color = decode_color_attrs(std::slice::from_ref(&im), std::slice::from_ref(&f), &w, 1).unwrap();
        let sem = decode_semantic_attrs(std::slice::from_ref(&im), &[f], &w, 3).unwrap();
        let s0 = 2f64.ln() + SCALE_FLOOR;
        for p in 0..4 {
            assert!(color.scales[p].iter().all(|&s| (s - s0).abs() < 1e-15));
            assert_eq!(color.rotations[p], [1.0, 0.0, 0.0, 0.0]);
            let rgb = sh_eval(&color.sh[p * 12..(p + 1) * 12], 1, &Vector3::z());
            for c in 0..3 {
                assert!((rgb[c] - im.data[c * 4 + p]).abs() < 1e-12);
            }
            let probs = softmax(&sem.logits[p * 3..(p + 1) * 3]);
            assert!(probs.iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-15));
        }
        let cand = sample_candidates(1.0, 3.0, 4).unwrap();
        let d = regress_depth(&FeatureMap::zeros(4, 2, 2), &cand).unwrap();
        let (shared, prov) = decode_shared(&[d], &[unit_cam(2)], &w).unwrap();
        assert!(shared.opacities.iter().all(|&a| a == 0.5));
        assert_eq!(prov.len(), 4);
    }

    #[test]
    fn planar_depth_back_projects_onto_plane() {
        let layout = decoder_layout(8, 1, 0, 2);
        let w = NetworkWeights::init(3, &layout);
        let cand = sample_candidates(1.0, 4.0, 8).unwrap();
        let mut logits = FeatureMap::zeros(8, 6, 6);
        for p in 0..36 {
            logits.data[3 * 36 + p] = 1e4;
        }
        let d = regress_depth(&logits, &cand).unwrap();
        let z = cand.values()[3];
        let (shared, _) = decode_shared(&[d], &[unit_cam(6)], &w).unwrap();
        assert!(shared.positions.iter().all(|p| (p.z - z).abs() < 1e-9));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut set = GaussianSet::new(1, 3).unwrap();
        for i in 0..5 {
            let q = normalize_quaternion([1.0, 0.1 * i as f64, 0.0, 0.2]).unwrap();
            set.push(
                DualGaussian {
                    position: Vector3::new(i as f64, 0.5, 2.0),
                    opacity: 0.25,
                    color_scale: Vector3::new(0.5, 0.25, 0.125),
                    color_rotation: q,
                    sh_coeffs: vec![0.5; 12],
                    sem_scale: Vector3::new(0.5, 0.5, 0.5),
                    sem_rotation: [1.0, 0.0, 0.0, 0.0],
                    class_logits: vec![1.0, 2.0, 0.5],
                },
                Provenance { view: 0, pixel: i },
            )
            .unwrap();
        }
        let back = GaussianSet::from_archive(&set.to_archive()).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.provenance, set.provenance);
        for i in 0..5 {
            assert!((back.shared.positions[i] - set.shared.positions[i]).norm() < 1e-6);
            assert_eq!(back.logits(i), set.logits(i));
        }
    }

    #[test]
    fn views_share_position_and_opacity_storage() {
        let mut set = GaussianSet::new(0, 2).unwrap();
        set.push(
            DualGaussian {
                position: Vector3::new(0.0, 0.0, 1.0),
                opacity: 0.5,
                color_scale: Vector3::new(0.1, 0.1, 0.1),
                color_rotation: [1.0, 0.0, 0.0, 0.0],
                sh_coeffs: vec![0.0; 3],
                sem_scale: Vector3::new(0.2, 0.2, 0.2),
                sem_rotation: [1.0, 0.0, 0.0, 0.0],
                class_logits: vec![0.0, 0.0],
            },
            Provenance { view: 0, pixel: 0 },
        )
        .unwrap();
        let (c, s) = (set.color_view(0), set.semantic_view(0));
        assert!(std::ptr::eq(c.position, s.position));
        assert!(std::ptr::eq(c.opacity, s.opacity));
    }
}
