//! Runtime numerical checks behind the `gradcheck` and `selftest` commands:
//! central-difference gradient suites and a property suite over the whole
//! toolkit. Each check reports a measured value against a limit.

use std::time::Instant;

use nalgebra::{Isometry3, Matrix3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{build_token_transform, grid_transforms, gta_attention, TokenTransform};
use crate::backbone::{self, extract_features, BackboneConfig};
use crate::depth::{estimate_depth_raw, refine_volume, sample_candidates, unet_layout, RAW_TEMPERATURE};
use crate::error::Result;
use crate::fit::{fit_semantic_logits, FitConfig, SupervisedView};
use crate::gaussian::{DualGaussian, GaussianSet, Provenance};
use crate::geometry::{build_projective, CameraView, ProjectiveMatrix};
use crate::losses::{color_mse, regional_smoothness, sem_ce, LossConfig};
use crate::metrics::{segmentation_metrics, LabelMap, IGNORE};
use crate::pipeline::{forward, init_weights, PipelineConfig};
use crate::raster::{backprop_color, backprop_semantic, rasterize, RasterConfig};
use crate::real::Real;
use crate::synth::{generate_room, textured_plane_pair};
use crate::tensor::FeatureMap;
use crate::weights::NetworkWeights;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    /// `true` when `value` must not exceed `limit`, `false` when it must reach it.
    pub upper: bool,
    pub seconds: f64,
}

impl Check {
    pub fn at_most(name: &str, value: f64, limit: f64) -> Check {
        Check {
            name: name.into(),
            value,
            limit,
            upper: true,
            seconds: 0.0,
        }
    }

    pub fn at_least(name: &str, value: f64, limit: f64) -> Check {
        Check {
            upper: false,
            ..Check::at_most(name, value, limit)
        }
    }

    pub fn passed(&self) -> bool {
        if self.upper {
            self.value <= self.limit
        } else {
            self.value >= self.limit
        }
    }

    pub fn line(&self) -> String {
        let op = if self.upper { "<=" } else { ">=" };
        format!(
            "{} {} value={:.3e} limit{}{:.3e} time={:.2}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            op,
            self.limit,
            self.seconds
        )
    }
}

fn timed(f: impl FnOnce() -> Result<Check>) -> Result<Check> {
    let t = Instant::now();
    let mut c = f()?;
    c.seconds = t.elapsed().as_secs_f64();
    Ok(c)
}

/// `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn random_probs(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> FeatureMap<f64> {
    let hw = h * w;
    let mut m = FeatureMap::zeros(k, h, w);
    for p in 0..hw {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum::<f64>() / 0.95;
        for c in 0..k {
            m.data[c * hw + p] = raw[c] / s;
        }
    }
    m
}

fn random_labels(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize, ignore: f64) -> LabelMap {
    let labels = (0..h * w)
        .map(|_| if rng.random_bool(ignore) { IGNORE } else { rng.random_range(0..k as u8) })
        .collect();
    LabelMap {
        width: w,
        height: h,
        labels,
    }
}

/// Max relative error between an analytic gradient and central differences
/// of `f` over the entries of `x` selected by `keep`.
fn fd_max_error(x: &[f64], grad: &[f64], h: f64, keep: impl Fn(usize) -> bool, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        if !keep(i) {
            continue;
        }
        let fd = central_difference(
            |v| {
                buf[i] = v;
                let r = f(&buf);
                buf[i] = x[i];
                r
            },
            x[i],
            h,
        );
        worst = worst.max(relative_error(grad[i], fd));
    }
    worst
}

pub fn check_ce_gradient(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = random_labels(&mut rng, 3, 5, 4, 0.2);
    let pred = random_probs(&mut rng, 3, 5, 4);
    let g = sem_ce(&gt, &pred, 1e-8)?.grad;
    let err = fd_max_error(&pred.data, &g.data, 1e-6, |_| true, |x| {
        sem_ce(&gt, &FeatureMap::from_vec(3, 5, 4, x.to_vec()), 1e-8).map(|v| v.value).unwrap_or(f64::NAN)
    });
    Ok(Check::at_most("grad.sem_ce", err, 1e-6))
}

pub fn check_mse_gradient(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = FeatureMap::from_vec(3, 4, 5, (0..60).map(|_| rng.random_range(0.0..1.0)).collect());
    let pred = FeatureMap::from_vec(3, 4, 5, (0..60).map(|_| rng.random_range(0.0..1.0)).collect());
    let g = color_mse(&gt, &pred)?.grad;
    let err = fd_max_error(&pred.data, &g.data, 1e-6, |_| true, |x| {
        color_mse(&gt, &FeatureMap::from_vec(3, 4, 5, x.to_vec())).map(|v| v.value).unwrap_or(f64::NAN)
    });
    Ok(Check::at_most("grad.color_mse", err, 1e-6))
}

pub fn check_smoothness_gradient(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, h, w) = (3, 6, 5);
    let gt = random_labels(&mut rng, k, h, w, 0.1);
    let pred = random_probs(&mut rng, k, h, w);
    let g = regional_smoothness(&gt, &pred)?.grad;
    let hw = h * w;
    let step = 1e-3;
    // The loss is piecewise linear; skip entries within two steps of a kink.
    let near_tie = |i: usize| {
        let (c, p) = (i / hw, i % hw);
        let (y, x) = (p / w, p % w);
        let neighbours = [
            (y > 0).then(|| p - w),
            (y + 1 < h).then(|| p + w),
            (x > 0).then(|| p - 1),
            (x + 1 < w).then(|| p + 1),
        ];
        neighbours.into_iter().flatten().any(|q| {
            gt.labels[q] == gt.labels[p] && (pred.data[c * hw + q] - pred.data[i]).abs() < 2.0 * step
        })
    };
    let err = fd_max_error(&pred.data, &g.data, step, |i| !near_tie(i), |x| {
        regional_smoothness(&gt, &FeatureMap::from_vec(k, h, w, x.to_vec())).map(|v| v.value).unwrap_or(f64::NAN)
    });
    Ok(Check::at_most("grad.regional_smoothness", err, 1e-4))
}

fn front_camera(n: usize) -> CameraView {
    CameraView::new(
        Matrix3::new(1.0, 0.0, 0.5, 0.0, 1.0, 0.5, 0.0, 0.0, 1.0),
        Matrix3::identity(),
        Vector3::zeros(),
        n,
        n,
    )
    .expect("valid camera")
}

/// Three overlapping Gaussians in front of [`front_camera`].
pub fn three_gaussian_scene(seed: u64, classes: usize) -> Result<GaussianSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = GaussianSet::new(1, classes)?;
    for i in 0..3 {
        let s = rng.random_range(0.15..0.3);
        let sem = rng.random_range(0.15..0.3);
        let g = DualGaussian {
            position: Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 2.0 + 0.5 * i as f64),
            opacity: rng.random_range(0.5..0.9),
            color_scale: Vector3::new(s, s * 1.2, s),
            color_rotation: [1.0, 0.0, 0.0, 0.0],
            sh_coeffs: (0..12).map(|_| rng.random_range(-0.3..0.3)).collect(),
            sem_scale: Vector3::new(sem, sem, sem * 0.8),
            sem_rotation: [1.0, 0.0, 0.0, 0.0],
            class_logits: (0..classes).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        set.push(g, Provenance { view: 0, pixel: i })?;
    }
    Ok(set)
}

pub fn check_semantic_backprop(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = three_gaussian_scene(seed, 4)?;
    let cam = front_camera(12);
    let cfg = RasterConfig::default();
    let r = rasterize(&set, &cam, &cfg)?;
    let probe = FeatureMap::from_vec(4, 12, 12, (0..4 * 144).map(|_| rng.random_range(-1.0..1.0)).collect());
    let g = backprop_semantic(&probe, r.maps.pass_id, &r.semantic_record, &set)?;
    let err = fd_max_error(&set.semantic.logits, &g.logits, 1e-5, |_| true, |x| {
        let mut s = set.clone();
        s.semantic.logits.copy_from_slice(x);
        let m = rasterize(&s, &cam, &cfg).expect("render").maps;
        m.sem_probs.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
    });
    Ok(Check::at_most("grad.backprop_semantic", err, 1e-4))
}

pub fn check_color_backprop(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = three_gaussian_scene(seed, 2)?;
    let cam = front_camera(12);
    let cfg = RasterConfig::default();
    let r = rasterize(&set, &cam, &cfg)?;
    let probe = FeatureMap::from_vec(3, 12, 12, (0..3 * 144).map(|_| rng.random_range(-1.0..1.0)).collect());
    let g = backprop_color(&probe, r.maps.pass_id, &r.color_record, &set, &cam)?;
    let err = fd_max_error(&set.color.sh, &g.sh, 1e-5, |_| true, |x| {
        let mut s = set.clone();
        s.color.sh.copy_from_slice(x);
        let m = rasterize(&s, &cam, &cfg).expect("render").maps;
        m.rgb.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
    });
    Ok(Check::at_most("grad.backprop_color", err, 1e-4))
}

/// Descent objective gradient on 10 random logits of a small room.
pub fn check_objective_gradient(seed: u64) -> Result<Check> {
    let scene = generate_room(seed, 3, 2, 32)?;
    let mut set = scene.gaussians.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in set.semantic.logits.iter_mut() {
        *l = rng.random_range(-1.0..1.0);
    }
    let views: Vec<SupervisedView> = (0..2)
        .map(|i| SupervisedView {
            camera: scene.cameras[i].clone(),
            labels: scene.gt[i].labels.clone(),
        })
        .collect();
    let loss = LossConfig::default();
    let raster = RasterConfig::default();
    let records = crate::fit::record_views(&set, &views, &raster)?;
    let (_, grad) = crate::fit::semantic_objective(&set, &records, &views, &loss)?;
    let objective = |s: &GaussianSet| -> f64 {
        views
            .iter()
            .map(|v| {
                let m = rasterize(s, &v.camera, &raster).expect("render").maps;
                loss.lambda_sem * sem_ce(&v.labels, &m.sem_probs, loss.prob_floor).expect("ce").value
                    + loss.lambda_rs * regional_smoothness(&v.labels, &m.sem_probs).expect("rs").value
            })
            .sum()
    };
    // Logits of Gaussians that are actually seen carry nonzero gradient.
    let visible: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-8).collect();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let i = visible[rng.random_range(0..visible.len())];
        let fd = central_difference(
            |v| {
                let mut s = set.clone();
                s.semantic.logits[i] = v;
                objective(&s)
            },
            set.semantic.logits[i],
            1e-5,
        );
        worst = worst.max(relative_error(grad[i], fd));
    }
    Ok(Check::at_most("grad.semantic_objective", worst, 1e-4))
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        dim: 16,
        color_blocks: 1,
        semantic_blocks: 1,
        window: 2,
        ffn_expansion: 2,
    }
}

fn probe_images(seed: u64) -> Vec<FeatureMap<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|_| FeatureMap::from_vec(3, 16, 16, (0..768).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect()
}

fn probe_cameras() -> Vec<CameraView> {
    let k = Matrix3::new(1.0, 0.0, 0.5, 0.0, 1.0, 0.5, 0.0, 0.0, 1.0);
    (0..2)
        .map(|i| CameraView::new(k, Matrix3::identity(), Vector3::new(-0.2 * i as f64, 0.0, 0.0), 16, 16).expect("camera"))
        .collect()
}

fn backbone_sum<T: Real>(images: &[FeatureMap<T>], cams: &[CameraView], w: &NetworkWeights<T>, cfg: &BackboneConfig) -> T {
    let (f, _) = extract_features(images, cams, w, cfg).expect("features");
    let mut s = T::zero();
    for m in f.color.iter().chain(&f.semantic) {
        for &v in &m.data {
            s += v;
        }
    }
    s
}

/// Forward-mode derivative of a scalar probe versus central differences,
/// for one element of each named conv weight.
fn weight_derivative_error<F, G>(w: &NetworkWeights, params: &[(&str, usize)], eval: F, eval_dual: G) -> Result<f64>
where
    F: Fn(&NetworkWeights) -> f64,
    G: Fn(&NetworkWeights<crate::real::Dual>) -> crate::real::Dual,
{
    let mut worst = 0.0f64;
    for &(name, elem) in params {
        let exact = eval_dual(&w.seeded_dual(name, elem)?).d;
        let x0 = w.get(name).data[elem];
        let fd = central_difference(
            |v| {
                let mut p = w.clone();
                p.get_mut(name).expect("parameter").data[elem] = v;
                eval(&p)
            },
            x0,
            1e-5,
        );
        worst = worst.max(relative_error(exact, fd));
    }
    Ok(worst)
}

pub fn check_backbone_gradient(seed: u64) -> Result<Check> {
    let cfg = tiny_backbone();
    let w = NetworkWeights::init(seed, &backbone::layout(&cfg));
    let images = probe_images(seed);
    let dual_images: Vec<FeatureMap<crate::real::Dual>> = images.iter().map(|m| m.map(crate::real::Dual::constant)).collect();
    let cams = probe_cameras();
    let params = [("shared.b1.conv1.w", 5), ("semantic.res0.conv2.w", 11), ("color.t0.ffn.fc1.w", 3)];
    let err = weight_derivative_error(
        &w,
        &params,
        |p| backbone_sum(&images, &cams, p, &cfg),
        |p| backbone_sum(&dual_images, &cams, p, &cfg),
    )?;
    Ok(Check::at_most("grad.backbone_weight", err, 1e-3))
}

pub fn check_unet_gradient(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, c) = (6, 4);
    let w = NetworkWeights::init(seed, &unet_layout(l, c));
    let vol = FeatureMap::from_vec(l, 6, 5, (0..l * 30).map(|_| rng.random_range(-1.0..1.0)).collect());
    let feat = FeatureMap::from_vec(c, 6, 5, (0..c * 30).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (dv, df) = (vol.map(crate::real::Dual::constant), feat.map(crate::real::Dual::constant));
    fn total<T: Real>(m: FeatureMap<T>) -> T {
        m.data.into_iter().fold(T::zero(), |a, b| a + b)
    }
    let params = [("depth.unet.enc1.w", 7), ("depth.unet.dec.w", 100), ("depth.unet.out.w", 2)];
    let err = weight_derivative_error(
        &w,
        &params,
        |p| total(refine_volume(&vol, &feat, p).expect("refine")),
        |p| total(refine_volume(&dv, &df, p).expect("refine")),
    )?;
    Ok(Check::at_most("grad.unet_weight", err, 1e-3))
}

/// Every finite-difference suite.
pub fn gradcheck(seed: u64) -> Result<Vec<Check>> {
    let suites: [fn(u64) -> Result<Check>; 9] = [
        check_ce_gradient,
        check_mse_gradient,
        check_smoothness_gradient,
        check_semantic_backprop,
        check_color_backprop,
        check_objective_gradient,
        check_backbone_gradient,
        check_unet_gradient,
        check_attention_gradient,
    ];
    suites.iter().map(|f| timed(|| f(seed))).collect()
}

fn random_camera(rng: &mut ChaCha8Rng) -> CameraView {
    let k = Matrix3::new(
        rng.random_range(0.8..1.4),
        0.0,
        rng.random_range(0.4..0.6),
        0.0,
        rng.random_range(0.8..1.4),
        rng.random_range(0.4..0.6),
        0.0,
        0.0,
        1.0,
    );
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let r = UnitQuaternion::from_scaled_axis(axis * 0.5).to_rotation_matrix().into_inner();
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    CameraView::new(k, r, t, 8, 8).expect("camera")
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Attention weights over a two-view 2×2 token grid.
fn pair_weights(cams: &[CameraView], q: &[f64], k: &[f64], v: &[f64], dim: usize) -> Result<Vec<f64>> {
    let tf = grid_transforms(cams, 2, 2, dim)?;
    let refs: Vec<&TokenTransform> = tf.iter().collect();
    Ok(gta_attention(q, k, v, &refs, dim)?.weights)
}

pub fn check_attention_gradient(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let cams = [random_camera(&mut rng), random_camera(&mut rng)];
    let tf = grid_transforms(&cams, 2, 2, dim)?;
    let refs: Vec<&TokenTransform> = tf.iter().collect();
    let n = 8 * dim;
    let q = random_tokens(&mut rng, n, 0.5);
    let k = random_tokens(&mut rng, n, 0.5);
    let v = random_tokens(&mut rng, n, 0.5);
    let mut worst = 0.0f64;
    for i in [0, 13, 40, 63] {
        let dq: Vec<crate::real::Dual> = q
            .iter()
            .enumerate()
            .map(|(j, &x)| crate::real::Dual::new(x, if j == i { 1.0 } else { 0.0 }))
            .collect();
        let dk: Vec<_> = k.iter().map(|&x| crate::real::Dual::constant(x)).collect();
        let dv: Vec<_> = v.iter().map(|&x| crate::real::Dual::constant(x)).collect();
        let exact: f64 = gta_attention(&dq, &dk, &dv, &refs, dim)?.output.iter().map(|o| o.d).sum();
        let fd = central_difference(
            |x| {
                let mut qq = q.clone();
                qq[i] = x;
                gta_attention(&qq, &k, &v, &refs, dim).expect("attention").output.iter().sum()
            },
            q[i],
            1e-6,
        );
        worst = worst.max(relative_error(exact, fd));
    }
    Ok(Check::at_most("grad.attention_query", worst, 1e-4))
}

/// Attention weights before and after a common rigid change of world frame.
pub fn check_pose_invariance(seed: u64, pairs: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 16;
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let cams = [random_camera(&mut rng), random_camera(&mut rng)];
        let axis = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let shift = Translation3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let world = Isometry3::from_parts(shift, UnitQuaternion::from_scaled_axis(axis));
        let moved = [cams[0].rebased(&world), cams[1].rebased(&world)];
        let n = 8 * dim;
        let (q, k, v) = (random_tokens(&mut rng, n, 0.3), random_tokens(&mut rng, n, 0.3), random_tokens(&mut rng, n, 0.3));
        let a = pair_weights(&cams, &q, &k, &v, dim)?;
        let b = pair_weights(&moved, &q, &k, &v, dim)?;
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(Check::at_most("attention.pose_invariance", worst, 1e-6))
}

/// Literal evaluation with materialized `G` matrices.
fn dense_attention(q: &[f64], k: &[f64], v: &[f64], tf: &[TokenTransform], dim: usize) -> Vec<f64> {
    let n = tf.len();
    let g: Vec<_> = tf.iter().map(|t| t.dense()).collect();
    let ginv: Vec<_> = g.iter().map(|m| m.clone().try_inverse().expect("invertible")).collect();
    let vec = |s: &[f64], t: usize| nalgebra::DVector::from_column_slice(&s[t * dim..(t + 1) * dim]);
    let mut out = vec![0.0; n * dim];
    for t in 0..n {
        let qt = g[t].transpose() * vec(q, t);
        let scores: Vec<f64> = (0..n).map(|u| qt.dot(&(&ginv[u] * vec(k, u))) / (dim as f64).sqrt()).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for u in 0..n {
            let vu = &ginv[u] * vec(v, u);
            for c in 0..dim {
                out[t * dim + c] += e[u] / z * vu[c];
            }
        }
    }
    out
}

pub fn check_dense_oracle(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for &(tokens, dim) in &[(2usize, 8usize), (8, 16)] {
        let cams: Vec<CameraView> = (0..tokens).map(|_| random_camera(&mut rng)).collect();
        let tf: Vec<TokenTransform> = cams
            .iter()
            .enumerate()
            .map(|(i, c)| build_token_transform(((i % 3) as f64, (i / 3) as f64), &build_projective(c), dim))
            .collect::<Result<_>>()?;
        let refs: Vec<&TokenTransform> = tf.iter().collect();
        let n = tokens * dim;
        let (q, k, v) = (random_tokens(&mut rng, n, 0.5), random_tokens(&mut rng, n, 0.5), random_tokens(&mut rng, n, 0.5));
        let fast = gta_attention(&q, &k, &v, &refs, dim)?.output;
        let slow = dense_attention(&q, &k, &v, &tf, dim);
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(Check::at_most("attention.dense_oracle", worst, 1e-9))
}

pub fn check_degenerate_cameras(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 16;
    let n = 6;
    let tf = build_token_transform((0.0, 0.0), &ProjectiveMatrix::identity(), dim)?;
    let refs = vec![&tf; n];
    let (q, k, v) = (random_tokens(&mut rng, n * dim, 1.0), random_tokens(&mut rng, n * dim, 1.0), random_tokens(&mut rng, n * dim, 1.0));
    let got = gta_attention(&q, &k, &v, &refs, dim)?.output;
    let mut worst = 0.0f64;
    for t in 0..n {
        let s: Vec<f64> = (0..n)
            .map(|u| (0..dim).map(|c| q[t * dim + c] * k[u * dim + c]).sum::<f64>() / (dim as f64).sqrt())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        for c in 0..dim {
            let want: f64 = (0..n).map(|u| (s[u] - m).exp() / z * v[u * dim + c]).sum();
            worst = worst.max((got[t * dim + c] - want).abs());
        }
    }
    Ok(Check::at_most("attention.degenerate_cameras", worst, 1e-9))
}

/// Fraction of interior pixels within 2% of the plane depth.
pub fn check_plane_sweep() -> Result<Check> {
    let pair = textured_plane_pair(3.0, 0.3, 64)?;
    let cand = sample_candidates(0.5, 15.0, 64)?;
    let d = estimate_depth_raw(&pair.images, &pair.cameras, &cand, 0, RAW_TEMPERATURE)?;
    let margin = 10;
    let mut good = 0usize;
    let mut total = 0usize;
    for y in margin..64 - margin {
        for x in margin..64 - margin {
            total += 1;
            if ((d.depth[y * 64 + x] - 3.0) / 3.0).abs() <= 0.02 {
                good += 1;
            }
        }
    }
    Ok(Check::at_least("depth.plane_sweep_within_2pct", good as f64 / total as f64, 0.9))
}

pub fn check_single_splat() -> Result<Check> {
    let mut set = GaussianSet::new(0, 2)?;
    let cam = front_camera(16);
    // The center of pixel (8, 8) lies on the optical axis shifted by half a pixel.
    let z = 4.0;
    let off = 0.5 / 16.0 * z;
    set.push(
        DualGaussian {
            position: Vector3::new(off, off, z),
            opacity: 0.8,
            color_scale: Vector3::new(0.2, 0.2, 0.2),
            color_rotation: [1.0, 0.0, 0.0, 0.0],
            sh_coeffs: vec![0.0; 3],
            sem_scale: Vector3::new(0.2, 0.2, 0.2),
            sem_rotation: [1.0, 0.0, 0.0, 0.0],
            class_logits: vec![0.0, 1.0],
        },
        Provenance { view: 0, pixel: 0 },
    )?;
    let r = rasterize(&set, &cam, &RasterConfig::default())?;
    let w = r.semantic_record.alpha_at(8 * 16 + 8);
    Ok(Check::at_most("raster.single_splat_weight", (w - 0.8).abs(), 1e-6))
}

pub fn check_permutation(seed: u64) -> Result<Check> {
    let scene = generate_room(seed, 4, 2, 32)?;
    let mut order: Vec<usize> = (0..scene.gaussians.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let shuffled = scene.gaussians.permuted(&order)?;
    let cfg = RasterConfig::default();
    let a = rasterize(&scene.gaussians, &scene.cameras[1], &cfg)?.maps;
    let b = rasterize(&shuffled, &scene.cameras[1], &cfg)?.maps;
    let worst = a
        .rgb
        .data
        .iter()
        .zip(&b.rgb.data)
        .chain(a.sem_probs.data.iter().zip(&b.sem_probs.data))
        .chain(a.depth.iter().zip(&b.depth))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(Check::at_most("raster.permutation_invariance", worst, 1e-9))
}

pub fn check_serial_parallel(seed: u64) -> Result<Check> {
    let scene = generate_room(seed, 6, 4, 64)?;
    let par = RasterConfig::default();
    let ser = RasterConfig { parallel: false, ..par.clone() };
    let a = rasterize(&scene.gaussians, &scene.cameras[0], &par)?.maps;
    let b = rasterize(&scene.gaussians, &scene.cameras[0], &ser)?.maps;
    let same = a.rgb.data == b.rgb.data && a.sem_probs.data == b.sem_probs.data && a.depth == b.depth && a.alpha_acc == b.alpha_acc;
    Ok(Check::at_least("raster.serial_parallel_bitwise", if same { 1.0 } else { 0.0 }, 1.0))
}

/// gt Gaussians rendered from a held-out camera against that camera's labels.
pub fn check_round_trip(seed: u64) -> Result<(Check, Check)> {
    let t = Instant::now();
    let scene = generate_room(seed, 6, 4, 64)?;
    let target = scene.cameras.len() / 2;
    let inputs: Vec<usize> = (0..scene.cameras.len()).filter(|&i| i != target).collect();
    scene.split(&inputs, target)?;
    let maps = crate::pipeline::render_novel(&scene.gaussians, &scene.cameras[target])?;
    let m = segmentation_metrics(&scene.gt[target].labels, &maps.labels, 6)?;
    let seconds = t.elapsed().as_secs_f64();
    Ok((
        Check {
            seconds,
            ..Check::at_least("synth.round_trip_miou", m.miou, 0.95)
        },
        Check::at_least("synth.round_trip_acc", m.acc, 0.97),
    ))
}

pub fn check_loss_examples() -> Result<Check> {
    let gt = LabelMap::filled(2, 2, 0);
    let pred = FeatureMap::from_vec(1, 2, 2, vec![1.0, 0.8, 0.6, 0.6]);
    let rs = regional_smoothness(&gt, &pred)?.value;
    let one = LabelMap::new(1, 1, vec![1])?;
    let ce = sem_ce(&one, &FeatureMap::from_vec(2, 1, 1, vec![0.5, 0.5]), 1e-8)?.value;
    let err = (rs - 0.8).abs().max((ce + 0.5f64.ln()).abs());
    Ok(Check::at_most("losses.hand_examples", err, 1e-9))
}

/// Metrics against a direct count on random label maps.
pub fn check_metrics(seed: u64, pairs: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let k = rng.random_range(2..7usize);
        let gt = random_labels(&mut rng, k, 7, 9, 0.1);
        let pred = random_labels(&mut rng, k, 7, 9, 0.05);
        let m = segmentation_metrics(&gt, &pred, k)?;
        let mut ious = Vec::new();
        for c in 0..k as u8 {
            let both = gt.labels.iter().zip(&pred.labels).filter(|&(&g, _)| g != IGNORE);
            let (mut tp, mut fp, mut fnn) = (0, 0, 0);
            for (&g, &p) in both {
                match (g == c, p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fnn += 1,
                    _ => {}
                }
            }
            if tp + fp + fnn > 0 {
                ious.push(tp as f64 / (tp + fp + fnn) as f64);
            }
        }
        ious.sort_by(f64::total_cmp);
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        let valid = gt.labels.iter().filter(|&&g| g != IGNORE).count();
        let hits = gt.labels.iter().zip(&pred.labels).filter(|&(&g, &p)| g != IGNORE && g == p).count();
        worst = worst.max((m.miou - miou).abs()).max((m.acc - hits as f64 / valid as f64).abs());
    }
    Ok(Check::at_most("metrics.counting_oracle", worst, 0.0))
}

/// Toy descent from uniform logits; returns final mIoU and the worst
/// step-to-step loss ratio.
pub fn check_descent(seed: u64) -> Result<(Check, Check)> {
    let t = Instant::now();
    let scene = generate_room(seed, 3, 2, 64)?;
    let mut set = scene.gaussians.clone();
    set.semantic.logits.iter_mut().for_each(|l| *l = 0.0);
    let views: Vec<SupervisedView> = scene
        .cameras
        .iter()
        .zip(&scene.gt)
        .map(|(c, g)| SupervisedView {
            camera: c.clone(),
            labels: g.labels.clone(),
        })
        .collect();
    let fit = fit_semantic_logits(&set, &views, &FitConfig::default())?;
    let worst_ratio = fit.loss_trace.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
    let mut miou = f64::INFINITY;
    for v in &views {
        let m = crate::pipeline::render_novel(&fit.gaussians, &v.camera)?;
        miou = miou.min(segmentation_metrics(&v.labels, &m.labels, 3)?.miou);
    }
    Ok((
        Check {
            seconds: t.elapsed().as_secs_f64(),
            ..Check::at_least("fit.final_miou", miou, 0.99)
        },
        Check::at_most("fit.max_step_ratio", worst_ratio, 1.1),
    ))
}

pub fn pipeline_images(seed: u64) -> Result<(Vec<FeatureMap<f64>>, Vec<CameraView>)> {
    let scene = generate_room(seed, 6, 4, 64)?;
    Ok((vec![scene.gt[0].rgb.clone(), scene.gt[1].rgb.clone()], scene.cameras[..2].to_vec()))
}

pub fn check_pipeline_contract(seed: u64) -> Result<Check> {
    let (images, cams) = pipeline_images(seed)?;
    let cfg = PipelineConfig {
        candidates: 32,
        classes: 6,
        ..PipelineConfig::default()
    };
    let w = init_weights(&cfg)?;
    let a = forward(&images, &cams, &cfg, &w)?;
    let b = forward(&images, &cams, &cfg, &w)?;
    let ok = a.len() == 8192 && a.validate().is_ok() && a.to_archive() == b.to_archive();
    Ok(Check::at_least("pipeline.contract", if ok { 1.0 } else { 0.0 }, 1.0))
}

/// Single-thread feed-forward pass plus one render at N=2, 64×64, L=32.
pub fn check_latency(seed: u64) -> Result<Check> {
    let (images, cams) = pipeline_images(seed)?;
    let cfg = PipelineConfig {
        candidates: 32,
        classes: 6,
        ..PipelineConfig::default()
    };
    let w = init_weights(&cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    let t = Instant::now();
    pool.install(|| -> Result<()> {
        let set = forward(&images, &cams, &cfg, &w)?;
        crate::pipeline::render_novel(&set, &cams[0])?;
        Ok(())
    })?;
    let secs = t.elapsed().as_secs_f64();
    Ok(Check {
        seconds: secs,
        ..Check::at_most("pipeline.single_core_seconds", secs, 5.0)
    })
}

/// The full property suite, optionally with the latency check.
pub fn selftest(seed: u64, timing: bool) -> Result<Vec<Check>> {
    let mut out = vec![
        timed(|| check_pose_invariance(seed, 20))?,
        timed(|| check_dense_oracle(seed))?,
        timed(|| check_degenerate_cameras(seed))?,
        timed(check_plane_sweep)?,
        timed(check_single_splat)?,
        timed(|| check_permutation(seed))?,
        timed(|| check_serial_parallel(seed))?,
    ];
    let (a, b) = check_round_trip(7)?;
    out.extend([a, b]);
    out.push(timed(check_loss_examples)?);
    out.push(timed(|| check_metrics(seed, 100))?);
    let (a, b) = check_descent(7)?;
    out.extend([a, b]);
    out.push(timed(|| check_pipeline_contract(seed))?);
    out.extend(gradcheck(seed)?);
    if timing {
        out.push(check_latency(seed)?);
    }
    Ok(out)
}
