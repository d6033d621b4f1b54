//! Tile-based front-to-back splatting of dual Gaussians.
//!
//! Color and semantic Gaussians have different covariances, so each is
//! composited in its own pass over the same depth order. The color pass
//! yields RGB and depth; the semantic pass yields class probabilities, the
//! accumulated alpha and labels. Both passes log per-pixel blend weights in a
//! [`BlendRecord`] for the attribute gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Matrix2, Matrix3, Point2, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{covariance_from, sh_basis, sh_eval, softmax, DualGaussian, GaussianSet};
use crate::geometry::{project_camera_normalized, CameraView};
use crate::metrics::{LabelMap, IGNORE};
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Footprint radius in standard deviations.
    pub sigma_cutoff: f64,
    /// Minimum eigenvalue of a projected covariance, in px².
    pub cov_floor: f64,
    /// Gaussians whose center is closer than this camera depth are culled.
    pub near_clip: f64,
    pub alpha_clamp: f64,
    /// Compositing stops once transmittance falls below this.
    pub min_transmittance: f64,
    /// Pixels with less accumulated alpha count as background.
    pub alpha_threshold: f64,
    pub parallel: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            sigma_cutoff: 3.0,
            cov_floor: 0.3,
            near_clip: 0.2,
            alpha_clamp: 0.999,
            min_transmittance: 1e-4,
            alpha_threshold: 1e-4,
            parallel: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Color,
    Semantic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    /// Pixel coordinates.
    pub mean: Point2<f64>,
    /// Screen-space covariance in px², floored.
    pub cov: Matrix2<f64>,
    /// Camera-frame depth.
    pub depth: f64,
}

/// EWA projection of a world-space Gaussian. `None` when the center is
/// closer than `near_clip` or behind the camera. The Jacobian is evaluated
/// with the center clamped to 1.3 times the view frustum, which keeps
/// off-screen splats bounded.
pub fn project_covariance(
    position: &Vector3<f64>,
    cov3: &Matrix3<f64>,
    cam: &CameraView,
    cov_floor: f64,
    near_clip: f64,
) -> Option<ProjectedGaussian> {
    let pc = cam.world_to_camera(position);
    if !(pc.z >= near_clip) {
        return None;
    }
    let (un, vn) = project_camera_normalized(&pc, cam).ok()?;
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    let k = cam.intrinsics();
    let (a, b, e) = (k[(0, 0)] * w, k[(0, 1)] * w, k[(1, 1)] * h);
    let z = pc.z;
    // Normalized-plane bounds of the image, widened by 30%.
    let y_lo = -k[(1, 2)] / k[(1, 1)];
    let y_hi = (1.0 - k[(1, 2)]) / k[(1, 1)];
    let ty = (pc.y / z).clamp(y_lo - 0.3 * (y_hi - y_lo), y_hi + 0.3 * (y_hi - y_lo));
    let x_at = |u: f64| (u - k[(0, 2)] - k[(0, 1)] * ty) / k[(0, 0)];
    let (x_lo, x_hi) = (x_at(0.0), x_at(1.0));
    let tx = (pc.x / z).clamp(x_lo - 0.3 * (x_hi - x_lo), x_hi + 0.3 * (x_hi - x_lo));
    let (x, y) = (tx * z, ty * z);
    let j = nalgebra::Matrix2x3::new(
        a / z,
        b / z,
        -(a * x + b * y) / (z * z),
        0.0,
        e / z,
        -e * y / (z * z),
    );
    let jw = j * cam.rotation();
    let cov = jw * cov3 * jw.transpose();
    let cov = 0.5 * (cov + cov.transpose());
    let eig = SymmetricEigen::new(cov);
    let vals = eig.eigenvalues.map(|v| v.max(cov_floor));
    let cov = eig.eigenvectors * Matrix2::from_diagonal(&vals) * eig.eigenvectors.transpose();
    Some(ProjectedGaussian {
        mean: Point2::new(un * w, vn * h),
        cov: 0.5 * (cov + cov.transpose()),
        depth: z,
    })
}

/// Project one branch of a dual Gaussian.
pub fn project_gaussian(g: &DualGaussian, cam: &CameraView, branch: Branch, cfg: &RasterConfig) -> Result<Option<ProjectedGaussian>> {
    let cov3 = match branch {
        Branch::Color => covariance_from(&g.color_scale, &g.color_rotation)?,
        Branch::Semantic => covariance_from(&g.sem_scale, &g.sem_rotation)?,
    };
    Ok(project_covariance(&g.position, &cov3, cam, cfg.cov_floor, cfg.near_clip))
}

static NEXT_PASS: AtomicU64 = AtomicU64::new(1);

/// Per-pixel `(gaussian id, weight)` lists in compositing order, stored
/// compressed by pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendRecord {
    pub pass_id: u64,
    pub branch: Branch,
    pub width: usize,
    pub height: usize,
    /// Size of the Gaussian set the record was made from.
    pub gaussians: usize,
    offsets: Vec<usize>,
    ids: Vec<u32>,
    weights: Vec<f64>,
}

impl BlendRecord {
    pub fn pixel(&self, p: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[p]..self.offsets[p + 1];
        self.ids[r.clone()].iter().map(|&i| i as usize).zip(self.weights[r].iter().copied())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn entries(&self) -> usize {
        self.ids.len()
    }

    pub fn alpha_at(&self, p: usize) -> f64 {
        self.pixel(p).map(|(_, w)| w).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedMaps {
    pub width: usize,
    pub height: usize,
    pub rgb: FeatureMap<f64>,
    pub sem_probs: FeatureMap<f64>,
    pub labels: LabelMap,
    pub depth: Vec<f64>,
    /// Accumulated alpha of the semantic pass.
    pub alpha_acc: Vec<f64>,
    /// Accumulated alpha of the color pass.
    pub color_alpha: Vec<f64>,
    pub pass_id: u64,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub maps: RenderedMaps,
    pub color_record: BlendRecord,
    pub semantic_record: BlendRecord,
}

struct Splat {
    id: usize,
    mean: Point2<f64>,
    conic: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    /// Inclusive pixel bounds `x0, x1, y0, y1`.
    bounds: (usize, usize, usize, usize),
}

fn make_splats(
    set: &GaussianSet,
    cam: &CameraView,
    branch: Branch,
    cfg: &RasterConfig,
) -> Result<Vec<Splat>> {
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    let projected: Vec<Result<Option<Splat>>> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let (scale, rot) = match branch {
                Branch::Color => (&set.color.scales[i], &set.color.rotations[i]),
                Branch::Semantic => (&set.semantic.scales[i], &set.semantic.rotations[i]),
            };
            let cov3 = covariance_from(scale, rot)?;
            let Some(p) = project_covariance(&set.shared.positions[i], &cov3, cam, cfg.cov_floor, cfg.near_clip) else {
                return Ok(None);
            };
            let det = p.cov.determinant();
            if !(det > 0.0) || !p.mean.x.is_finite() || !p.mean.y.is_finite() {
                return Ok(None);
            }
            let conic = Matrix2::new(p.cov[(1, 1)], -p.cov[(0, 1)], -p.cov[(1, 0)], p.cov[(0, 0)]) / det;
            let lmax = SymmetricEigen::new(p.cov).eigenvalues.max();
            let r = cfg.sigma_cutoff * lmax.sqrt();
            let lo_x = (p.mean.x - r - 0.5).ceil().max(0.0);
            let hi_x = (p.mean.x + r - 0.5).floor().min(w - 1.0);
            let lo_y = (p.mean.y - r - 0.5).ceil().max(0.0);
            let hi_y = (p.mean.y + r - 0.5).floor().min(h - 1.0);
            if lo_x > hi_x || lo_y > hi_y {
                return Ok(None);
            }
            Ok(Some(Splat {
                id: i,
                mean: p.mean,
                conic,
                depth: p.depth,
                opacity: set.shared.opacities[i],
                bounds: (lo_x as usize, hi_x as usize, lo_y as usize, hi_y as usize),
            }))
        })
        .collect();
    let mut splats = Vec::new();
    for s in projected {
        if let Some(s) = s? {
            splats.push(s);
        }
    }
    // Stable order: depth, then index.
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));
    Ok(splats)
}

struct PassOutput {
    /// `dim×H×W` blended payload.
    accum: Vec<f64>,
    alpha: Vec<f64>,
    depth_sum: Vec<f64>,
    record: BlendRecord,
}

struct TileOutput {
    pixels: Vec<usize>,
    accum: Vec<f64>,
    alpha: Vec<f64>,
    depth_sum: Vec<f64>,
    blends: Vec<Vec<(u32, f64)>>,
}

/// Composite one pass. `payload[id * dim..]` is what Gaussian `id` contributes.
fn composite_pass(
    splats: &[Splat],
    payload: &[f64],
    dim: usize,
    width: usize,
    height: usize,
    gaussians: usize,
    branch: Branch,
    pass_id: u64,
    cfg: &RasterConfig,
) -> PassOutput {
    let ts = cfg.tile_size.max(1);
    let (tx, ty) = (width.div_ceil(ts), height.div_ceil(ts));
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tx * ty];
    for (k, s) in splats.iter().enumerate() {
        let (x0, x1, y0, y1) = s.bounds;
        for ty_i in y0 / ts..=y1 / ts {
            for tx_i in x0 / ts..=x1 / ts {
                tiles[ty_i * tx + tx_i].push(k as u32);
            }
        }
    }
    let cutoff2 = cfg.sigma_cutoff * cfg.sigma_cutoff;
    let render_tile = |t: usize| -> TileOutput {
        let (bx, by) = ((t % tx) * ts, (t / tx) * ts);
        let (ex, ey) = ((bx + ts).min(width), (by + ts).min(height));
        let n = (ex - bx) * (ey - by);
        let mut out = TileOutput {
            pixels: Vec::with_capacity(n),
            accum: vec![0.0; n * dim],
            alpha: vec![0.0; n],
            depth_sum: vec![0.0; n],
            blends: Vec::with_capacity(n),
        };
        let list = &tiles[t];
        for y in by..ey {
            for x in bx..ex {
                let q = out.pixels.len();
                out.pixels.push(y * width + x);
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut transmittance = 1.0;
                let mut blends = Vec::new();
                for &k in list {
                    let s = &splats[k as usize];
                    let (dx, dy) = (px - s.mean.x, py - s.mean.y);
                    let maha = s.conic[(0, 0)] * dx * dx + 2.0 * s.conic[(0, 1)] * dx * dy + s.conic[(1, 1)] * dy * dy;
                    if maha > cutoff2 {
                        continue;
                    }
                    let a = (s.opacity * (-0.5 * maha).exp()).clamp(0.0, cfg.alpha_clamp);
                    if a <= 0.0 {
                        continue;
                    }
                    let wgt = a * transmittance;
                    let src = &payload[s.id * dim..(s.id + 1) * dim];
                    for (o, v) in out.accum[q * dim..(q + 1) * dim].iter_mut().zip(src) {
                        *o += wgt * v;
                    }
                    out.alpha[q] += wgt;
                    out.depth_sum[q] += wgt * s.depth;
                    blends.push((s.id as u32, wgt));
                    transmittance *= 1.0 - a;
                    if transmittance < cfg.min_transmittance {
                        break;
                    }
                }
                out.blends.push(blends);
            }
        }
        out
    };
    let outputs: Vec<TileOutput> = if cfg.parallel {
        (0..tx * ty).into_par_iter().map(render_tile).collect()
    } else {
        (0..tx * ty).map(render_tile).collect()
    };

    let hw = width * height;
    let mut accum = vec![0.0; dim * hw];
    let mut alpha = vec![0.0; hw];
    let mut depth_sum = vec![0.0; hw];
    let mut per_pixel: Vec<Vec<(u32, f64)>> = vec![Vec::new(); hw];
    for t in outputs {
        for (q, &p) in t.pixels.iter().enumerate() {
            for c in 0..dim {
                accum[c * hw + p] = t.accum[q * dim + c];
            }
            alpha[p] = t.alpha[q];
            depth_sum[p] = t.depth_sum[q];
        }
        for (&p, b) in t.pixels.iter().zip(t.blends) {
            per_pixel[p] = b;
        }
    }
    let mut offsets = Vec::with_capacity(hw + 1);
    let (mut ids, mut weights) = (Vec::new(), Vec::new());
    offsets.push(0);
    for b in per_pixel {
        for (i, w) in b {
            ids.push(i);
            weights.push(w);
        }
        offsets.push(ids.len());
    }
    PassOutput {
        accum,
        alpha,
        depth_sum,
        record: BlendRecord {
            pass_id,
            branch,
            width,
            height,
            gaussians,
            offsets,
            ids,
            weights,
        },
    }
}

/// Render all maps for `cam` at the camera's image size.
pub fn rasterize(set: &GaussianSet, cam: &CameraView, cfg: &RasterConfig) -> Result<RenderOutput> {
    let (w, h) = (cam.width(), cam.height());
    let k = set.classes();
    let pass_id = NEXT_PASS.fetch_add(1, Ordering::Relaxed);
    let center = cam.center();
    let colors: Vec<f64> = (0..set.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let d = set.shared.positions[i] - center;
            let n = d.norm();
            let dir = if n > 0.0 { d / n } else { Vector3::z() };
            sh_eval(set.sh(i), set.sh_degree(), &dir)
        })
        .collect();
    let probs: Vec<f64> = (0..set.len())
        .into_par_iter()
        .flat_map_iter(|i| set.class_probs(i))
        .collect();

    let color_splats = make_splats(set, cam, Branch::Color, cfg)?;
    let sem_splats = make_splats(set, cam, Branch::Semantic, cfg)?;
    let color = composite_pass(&color_splats, &colors, 3, w, h, set.len(), Branch::Color, pass_id, cfg);
    let sem = composite_pass(&sem_splats, &probs, k, w, h, set.len(), Branch::Semantic, pass_id, cfg);

    let depth = color
        .alpha
        .iter()
        .zip(&color.depth_sum)
        .map(|(&a, &d)| if a > cfg.alpha_threshold { d / a } else { 0.0 })
        .collect();
    let sem_probs = FeatureMap::from_vec(k, h, w, sem.accum);
    let labels = render_label_map(&sem_probs, &sem.alpha, cfg.alpha_threshold)?;
    Ok(RenderOutput {
        maps: RenderedMaps {
            width: w,
            height: h,
            rgb: FeatureMap::from_vec(3, h, w, color.accum),
            sem_probs,
            labels,
            depth,
            alpha_acc: sem.alpha,
            color_alpha: color.alpha,
            pass_id,
        },
        color_record: color.record,
        semantic_record: sem.record,
    })
}

/// Argmax class per pixel, lowest index on ties; background pixels are ignored.
pub fn render_label_map(sem_probs: &FeatureMap<f64>, alpha_acc: &[f64], alpha_threshold: f64) -> Result<LabelMap> {
    let hw = sem_probs.height * sem_probs.width;
    if alpha_acc.len() != hw {
        return Err(Error::ShapeMismatch(format!("{} alpha values for {hw} pixels", alpha_acc.len())));
    }
    if sem_probs.channels > crate::gaussian::MAX_CLASSES {
        return Err(Error::InvalidArgument(format!("{} classes do not fit 8-bit labels", sem_probs.channels)));
    }
    let labels = (0..hw)
        .map(|p| {
            if alpha_acc[p] <= alpha_threshold {
                return IGNORE;
            }
            let mut best = 0;
            for c in 1..sem_probs.channels {
                if sem_probs.data[c * hw + p] > sem_probs.data[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(sem_probs.width, sem_probs.height, labels)
}

/// Class probabilities and alpha recomputed from a semantic record and the
/// set's current logits. Valid while geometry and opacity are unchanged.
pub fn composite_semantic(record: &BlendRecord, set: &GaussianSet) -> Result<(FeatureMap<f64>, Vec<f64>)> {
    check_record(record, set, Branch::Semantic)?;
    let k = set.classes();
    let hw = record.pixel_count();
    let probs: Vec<Vec<f64>> = (0..set.len()).into_par_iter().map(|i| set.class_probs(i)).collect();
    let mut out = FeatureMap::zeros(k, record.height, record.width);
    let mut alpha = vec![0.0; hw];
    for (p, a) in alpha.iter_mut().enumerate() {
        for (id, w) in record.pixel(p) {
            for c in 0..k {
                out.data[c * hw + p] += w * probs[id][c];
            }
            *a += w;
        }
    }
    Ok((out, alpha))
}

fn check_record(record: &BlendRecord, set: &GaussianSet, branch: Branch) -> Result<()> {
    if record.branch != branch {
        return Err(Error::InvalidArgument(format!("gradient needs the {branch:?} pass record")));
    }
    if record.gaussians != set.len() {
        return Err(Error::InvalidArgument(format!(
            "record covers {} gaussians, set has {}",
            record.gaussians,
            set.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGrads {
    /// `N×K` gradient with respect to each Gaussian's class distribution.
    pub probs: Vec<f64>,
    /// `N×K` gradient with respect to each Gaussian's class logits.
    pub logits: Vec<f64>,
}

const GRAD_STRIP_ROWS: usize = 16;

fn check_pass(maps_pass: u64, record: &BlendRecord) -> Result<()> {
    if maps_pass != record.pass_id {
        return Err(Error::StaleRecord {
            record: record.pass_id,
            maps: maps_pass,
        });
    }
    Ok(())
}

/// `Σ_pixels w_j · grad_out(pixel)` per Gaussian, `N×dim`. Pixel rows are
/// summed in strips whose partials are merged in strip order.
fn pull_back(grad_out: &FeatureMap<f64>, record: &BlendRecord, n: usize) -> Vec<f64> {
    let dim = grad_out.channels;
    let hw = record.pixel_count();
    let strips: Vec<usize> = (0..record.height.div_ceil(GRAD_STRIP_ROWS)).collect();
    let partials: Vec<Vec<f64>> = strips
        .par_iter()
        .map(|&s| {
            let mut g = vec![0.0; n * dim];
            let rows = s * GRAD_STRIP_ROWS..((s + 1) * GRAD_STRIP_ROWS).min(record.height);
            for p in rows.start * record.width..rows.end * record.width {
                for (id, w) in record.pixel(p) {
                    for c in 0..dim {
                        g[id * dim + c] += w * grad_out.data[c * hw + p];
                    }
                }
            }
            g
        })
        .collect();
    let mut total = vec![0.0; n * dim];
    for part in partials {
        for (a, b) in total.iter_mut().zip(part) {
            *a += b;
        }
    }
    total
}

/// Pull a `K×H×W` gradient on the rendered class probabilities back to the
/// Gaussians. `maps_pass` identifies the render `grad_out` was computed from
/// and must match the record.
pub fn backprop_semantic(
    grad_out: &FeatureMap<f64>,
    maps_pass: u64,
    record: &BlendRecord,
    set: &GaussianSet,
) -> Result<SemanticGrads> {
    check_pass(maps_pass, record)?;
    check_record(record, set, Branch::Semantic)?;
    let k = set.classes();
    if (grad_out.channels, grad_out.height, grad_out.width) != (k, record.height, record.width) {
        return Err(Error::ShapeMismatch("gradient does not match the rendered maps".into()));
    }
    let n = set.len();
    let gp = pull_back(grad_out, record, n);
    let gl: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let p = set.class_probs(i);
            let g = &gp[i * k..(i + 1) * k];
            let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            (0..k).map(move |c| p[c] * (g[c] - dot)).collect::<Vec<_>>()
        })
        .collect();
    Ok(SemanticGrads { probs: gp, logits: gl })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColorGrads {
    /// `N×3` gradient with respect to each Gaussian's view-dependent color.
    pub colors: Vec<f64>,
    /// `N×3B` gradient with respect to the SH coefficients (zero where the
    /// color is clamped).
    pub sh: Vec<f64>,
}

/// Pull a `3×H×W` gradient on the rendered RGB back to the Gaussians of a
/// render from `cam`.
pub fn backprop_color(
    grad_out: &FeatureMap<f64>,
    maps_pass: u64,
    record: &BlendRecord,
    set: &GaussianSet,
    cam: &CameraView,
) -> Result<ColorGrads> {
    check_pass(maps_pass, record)?;
    check_record(record, set, Branch::Color)?;
    if (grad_out.channels, grad_out.height, grad_out.width) != (3, record.height, record.width) {
        return Err(Error::ShapeMismatch("gradient does not match the rendered maps".into()));
    }
    let n = set.len();
    let gc = pull_back(grad_out, record, n);
    let center = cam.center();
    let degree = set.sh_degree();
    let sh: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let d = set.shared.positions[i] - center;
            let norm = d.norm();
            let dir = if norm > 0.0 { d / norm } else { Vector3::z() };
            let basis = sh_basis(degree, &dir);
            let nb = basis.len();
            let coeffs = set.sh(i);
            let mut out = vec![0.0; 3 * nb];
            for c in 0..3 {
                let s: f64 = basis.iter().zip(&coeffs[c * nb..(c + 1) * nb]).map(|(a, b)| a * b).sum::<f64>() + 0.5;
                if s > 0.0 && s < 1.0 {
                    for (k, b) in basis.iter().enumerate() {
                        out[c * nb + k] = gc[i * 3 + c] * b;
                    }
                }
            }
            out
        })
        .collect();
    Ok(ColorGrads { colors: gc, sh })
}

/// Softmax of each Gaussian's logits, `N×K`.
pub fn class_distributions(set: &GaussianSet) -> Vec<f64> {
    (0..set.len()).flat_map(|i| softmax(set.logits(i))).collect()
}
