//! Procedural scenes with exact ground truth.
//!
//! A room is an open box (floor, back wall, two side walls) holding a few
//! boxes and ellipsoids. Every surface is tiled with flat disc Gaussians and
//! the supervision maps are renders of that Gaussian set. The analytic
//! surfaces stay available for ray casting.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{DualGaussian, GaussianSet, Provenance, SH_C0};
use crate::geometry::CameraView;
use crate::metrics::{LabelMap, IGNORE};
use crate::raster::{rasterize, RasterConfig};
use crate::tensor::FeatureMap;

pub const FLOOR_CLASS: u8 = 0;
pub const WALL_CLASS: u8 = 1;
/// Room extent: floor at `y = FLOOR_Y` (y points down), walls up to `y = TOP_Y`.
pub const FLOOR_Y: f64 = 1.0;
pub const TOP_Y: f64 = -3.0;
pub const ROOM_HALF_WIDTH: f64 = 2.5;
pub const ROOM_FRONT_Z: f64 = -1.5;
pub const ROOM_BACK_Z: f64 = 5.0;
/// Target spacing between neighbouring surface Gaussians.
pub const SURFACE_SPACING: f64 = 0.08;
const DISC_SIGMA: f64 = 0.6;
const DISC_THICKNESS: f64 = 0.1;
const SURFACE_OPACITY: f64 = 0.95;
const GT_LOGIT: f64 = 12.0;
const PLACEMENT_RETRIES: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Axis-aligned box.
    Box { center: Vector3<f64>, half: Vector3<f64> },
    /// Axis-aligned ellipsoid.
    Ellipsoid { center: Vector3<f64>, radii: Vector3<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub class: u8,
}

/// Ground-truth maps for one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct GtView {
    pub rgb: FeatureMap<f64>,
    pub labels: LabelMap,
    pub depth: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoomConfig {
    pub seed: u64,
    pub classes: usize,
    pub objects: usize,
    pub resolution: usize,
    pub cameras: usize,
    /// Upper bound on the distance between neighbouring surface Gaussians.
    pub spacing: f64,
}

impl Default for RoomConfig {
    fn default() -> Self {
        RoomConfig {
            seed: 0,
            classes: 6,
            objects: 4,
            resolution: 64,
            cameras: 6,
            spacing: SURFACE_SPACING,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub gaussians: GaussianSet,
    pub cameras: Vec<CameraView>,
    pub gt: Vec<GtView>,
    pub class_names: Vec<String>,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

fn class_color(class: u8) -> Vector3<f64> {
    const PALETTE: [[f64; 3]; 8] = [
        [0.55, 0.45, 0.35],
        [0.80, 0.80, 0.72],
        [0.75, 0.20, 0.20],
        [0.20, 0.55, 0.25],
        [0.20, 0.30, 0.75],
        [0.85, 0.70, 0.15],
        [0.55, 0.25, 0.65],
        [0.15, 0.65, 0.70],
    ];
    let c = PALETTE[class as usize % PALETTE.len()];
    Vector3::new(c[0], c[1], c[2])
}

fn surface_color(class: u8, p: &Vector3<f64>) -> Vector3<f64> {
    let t = 0.5 + 0.25 * (7.0 * p.x + 3.0 * p.z).sin() * (5.0 * p.y - 2.0 * p.z).cos() + 0.25 * (11.0 * p.x - 9.0 * p.y + 4.0 * p.z).sin();
    (class_color(class) * (0.7 + 0.3 * t)).map(|v| v.clamp(0.0, 1.0))
}

fn disc_rotation(normal: &Vector3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::rotation_between(&Vector3::z(), normal)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
    [q.w, q.i, q.j, q.k]
}

struct SurfaceBuilder {
    set: GaussianSet,
    classes: usize,
    spacing: f64,
}

impl SurfaceBuilder {
    fn disc(&mut self, pos: Vector3<f64>, normal: Vector3<f64>, spacing: f64, class: u8) -> Result<()> {
        let sigma = DISC_SIGMA * spacing;
        let scale = Vector3::new(sigma, sigma, DISC_THICKNESS * sigma);
        let rot = disc_rotation(&normal.normalize());
        let color = surface_color(class, &pos);
        let mut sh = vec![0.0; 3 * crate::gaussian::sh_basis_size(self.set.sh_degree())];
        let nb = sh.len() / 3;
        for c in 0..3 {
            sh[c * nb] = (color[c] - 0.5) / SH_C0;
        }
        let mut logits = vec![0.0; self.classes];
        logits[class as usize] = GT_LOGIT;
        let id = self.set.len();
        self.set.push(
            DualGaussian {
                position: pos,
                opacity: SURFACE_OPACITY,
                color_scale: scale,
                color_rotation: rot,
                sh_coeffs: sh,
                sem_scale: scale,
                sem_rotation: rot,
                class_logits: logits,
            },
            Provenance { view: 0, pixel: id },
        )
    }

    /// Splats reach about one sigma past their centers before their alpha
    /// drops below the surface behind, so centers are kept that far inside
    /// silhouettes.
    fn inset(&self) -> f64 {
        DISC_SIGMA * self.spacing
    }

    /// Tile the parallelogram `origin + s·u + t·v`, `s, t ∈ [0, 1]`, keeping
    /// disc centers one disc sigma inside its edges.
    fn rect(&mut self, origin: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, normal: Vector3<f64>, class: u8) -> Result<()> {
        let (lu, lv) = (u.norm(), v.norm());
        let inset = self.inset();
        let (mu, mv) = (inset.min(0.25 * lu), inset.min(0.25 * lv));
        let nu = ((lu - 2.0 * mu) / self.spacing).ceil().max(1.0) as usize;
        let nv = ((lv - 2.0 * mv) / self.spacing).ceil().max(1.0) as usize;
        let spacing = ((lu - 2.0 * mu) / nu as f64).max((lv - 2.0 * mv) / nv as f64);
        let at = |k: usize, n: usize, len: f64, m: f64| (m + (len - 2.0 * m) * k as f64 / (n - 1).max(1) as f64) / len;
        for i in 0..=nu {
            for j in 0..=nv {
                let p = origin + u * at(i, nu + 1, lu, mu) + v * at(j, nv + 1, lv, mv);
                self.disc(p, normal, spacing, class)?;
            }
        }
        Ok(())
    }

    fn object(&mut self, obj: &SceneObject) -> Result<()> {
        match &obj.shape {
            Shape::Box { center: c, half: h } => {
                let (x, y, z) = (Vector3::x() * 2.0 * h.x, Vector3::y() * 2.0 * h.y, Vector3::z() * 2.0 * h.z);
                let lo = c - h;
                // Top, front, back, left, right; the bottom rests on the floor.
                self.rect(lo, x, z, -Vector3::y(), obj.class)?;
                self.rect(lo, x, y, -Vector3::z(), obj.class)?;
                self.rect(lo + z, x, y, Vector3::z(), obj.class)?;
                self.rect(lo, z, y, -Vector3::x(), obj.class)?;
                self.rect(lo + x, z, y, Vector3::x(), obj.class)?;
            }
            Shape::Ellipsoid { center: c, radii: r } => {
                let r = r.map(|v| v - self.inset());
                let rmax = r.max();
                let n_theta = (std::f64::consts::PI * rmax / self.spacing).ceil() as usize;
                for i in 0..n_theta {
                    let theta = std::f64::consts::PI * (i as f64 + 0.5) / n_theta as f64;
                    let ring = (std::f64::consts::TAU * rmax * theta.sin() / self.spacing).ceil().max(3.0) as usize;
                    for j in 0..ring {
                        let phi = std::f64::consts::TAU * (j as f64 + 0.5 * (i % 2) as f64) / ring as f64;
                        let unit = Vector3::new(theta.sin() * phi.cos(), -theta.cos(), theta.sin() * phi.sin());
                        let p = c + unit.component_mul(&r);
                        let n = (p - c).component_div(&r.component_mul(&r));
                        self.disc(p, n, self.spacing, obj.class)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn footprint(shape: &Shape) -> (f64, f64, f64) {
    match shape {
        Shape::Box { center, half } => (center.x, center.z, half.x.hypot(half.z)),
        Shape::Ellipsoid { center, radii } => (center.x, center.z, radii.x.max(radii.z)),
    }
}

fn place_objects(rng: &mut ChaCha8Rng, count: usize, classes: usize) -> Result<Vec<SceneObject>> {
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for i in 0..count {
        let class = if classes > 2 { 2 + (i % (classes - 2)) } else { WALL_CLASS as usize } as u8;
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let size = Vector3::new(rng.random_range(0.2..0.45), rng.random_range(0.2..0.6), rng.random_range(0.2..0.45));
            let cx = rng.random_range(-1.8..1.8);
            let cz = rng.random_range(2.0..4.4);
            let center = Vector3::new(cx, FLOOR_Y - size.y, cz);
            let shape = if i % 2 == 0 {
                Shape::Box { center, half: size }
            } else {
                Shape::Ellipsoid { center, radii: size }
            };
            let (x, z, r) = footprint(&shape);
            let inside = x.abs() + r < ROOM_HALF_WIDTH - 0.1 && z + r < ROOM_BACK_Z - 0.1;
            let clear = objects.iter().all(|o| {
                let (ox, oz, or) = footprint(&o.shape);
                (x - ox).hypot(z - oz) > r + or + 0.1
            });
            if inside && clear {
                objects.push(SceneObject { shape, class });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasiblePlacement(i));
        }
    }
    Ok(objects)
}

/// Cameras on an arc facing the back of the room.
fn arc_cameras(count: usize, resolution: usize) -> Result<Vec<CameraView>> {
    let target = Vector3::new(0.0, 0.3, 3.2);
    let spread = 35f64.to_radians();
    (0..count)
        .map(|i| {
            let a = if count > 1 {
                -spread + 2.0 * spread * i as f64 / (count - 1) as f64
            } else {
                0.0
            };
            let eye = target + Vector3::new(3.0 * a.sin(), -0.9, -3.0 * a.cos());
            CameraView::look_at(eye, target, -Vector3::y(), 60f64.to_radians(), resolution, resolution)
        })
        .collect()
}

/// Default room with the given seed, class count, object count and square resolution.
pub fn generate_room(seed: u64, classes: usize, objects: usize, resolution: usize) -> Result<SyntheticScene> {
    generate_room_with(&RoomConfig {
        seed,
        classes,
        objects,
        resolution,
        ..RoomConfig::default()
    })
}

pub fn generate_room_with(cfg: &RoomConfig) -> Result<SyntheticScene> {
    if cfg.classes < 2 || cfg.classes > crate::gaussian::MAX_CLASSES {
        return Err(Error::InvalidArgument(format!("class count {} outside 2..=255", cfg.classes)));
    }
    if cfg.resolution < 32 {
        return Err(Error::InvalidArgument(format!("resolution {} below 32", cfg.resolution)));
    }
    if !(cfg.spacing >= 0.01 && cfg.spacing <= 0.2) {
        return Err(Error::InvalidArgument(format!("surface spacing {} outside [0.01, 0.2]", cfg.spacing)));
    }
    if cfg.cameras < 3 {
        return Err(Error::InvalidArgument("a scene needs at least 3 cameras".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let objects = place_objects(&mut rng, cfg.objects, cfg.classes)?;
    let mut b = SurfaceBuilder {
        set: GaussianSet::new(1, cfg.classes)?,
        classes: cfg.classes,
        spacing: cfg.spacing,
    };
    let (w, f, bk) = (ROOM_HALF_WIDTH, ROOM_FRONT_Z, ROOM_BACK_Z);
    let height = FLOOR_Y - TOP_Y;
    b.rect(Vector3::new(-w, FLOOR_Y, f), Vector3::x() * 2.0 * w, Vector3::z() * (bk - f), -Vector3::y(), FLOOR_CLASS)?;
    b.rect(Vector3::new(-w, TOP_Y, bk), Vector3::x() * 2.0 * w, Vector3::y() * height, -Vector3::z(), WALL_CLASS)?;
    b.rect(Vector3::new(-w, TOP_Y, f), Vector3::z() * (bk - f), Vector3::y() * height, Vector3::x(), WALL_CLASS)?;
    b.rect(Vector3::new(w, TOP_Y, f), Vector3::z() * (bk - f), Vector3::y() * height, -Vector3::x(), WALL_CLASS)?;
    for o in &objects {
        b.object(o)?;
    }
    let cameras = arc_cameras(cfg.cameras, cfg.resolution)?;
    let raster = RasterConfig::default();
    let gt = cameras
        .par_iter()
        .map(|cam| {
            let m = rasterize(&b.set, cam, &raster)?.maps;
            Ok(GtView {
                rgb: m.rgb,
                labels: m.labels,
                depth: m.depth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut class_names = vec!["floor".to_string(), "wall".to_string()];
    class_names.extend((2..cfg.classes).map(|k| format!("object{k}")));
    Ok(SyntheticScene {
        gaussians: b.set,
        cameras,
        gt,
        class_names,
        objects,
        seed: cfg.seed,
    })
}

fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, h: &Vector3<f64>) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if (o[a] - c[a]).abs() > h[a] {
                return None;
            }
            continue;
        }
        let ta = (c[a] - h[a] - o[a]) / d[a];
        let tb = (c[a] + h[a] - o[a]) / d[a];
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

fn ray_ellipsoid(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: &Vector3<f64>) -> Option<f64> {
    let oc = (o - c).component_div(r);
    let dd = d.component_div(r);
    let (a, b, cc) = (dd.dot(&dd), 2.0 * oc.dot(&dd), oc.dot(&oc) - 1.0);
    let disc = b * b - 4.0 * a * cc;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    (t > 0.0).then_some(t)
}

impl SyntheticScene {
    /// Nearest analytic surface along the ray through pixel center
    /// `(x + 0.5, y + 0.5)`: camera-frame depth and class.
    pub fn raycast(&self, cam: &CameraView, x: usize, y: usize) -> Option<(f64, u8)> {
        let un = (x as f64 + 0.5) / cam.width() as f64;
        let vn = (y as f64 + 0.5) / cam.height() as f64;
        let o = cam.center();
        let d = cam.camera_to_world(&cam.unproject_normalized(un, vn, 1.0)) - o;
        let mut best: Option<(f64, u8)> = None;
        let mut consider = |t: f64, class: u8| {
            if t > 0.0 && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, class));
            }
        };
        let eps = 1e-9;
        let within = |p: Vector3<f64>| {
            p.x.abs() <= ROOM_HALF_WIDTH + eps
                && p.y <= FLOOR_Y + eps
                && p.y >= TOP_Y - eps
                && p.z >= ROOM_FRONT_Z - eps
                && p.z <= ROOM_BACK_Z + eps
        };
        let planes = [
            (1, FLOOR_Y, FLOOR_CLASS),
            (2, ROOM_BACK_Z, WALL_CLASS),
            (0, -ROOM_HALF_WIDTH, WALL_CLASS),
            (0, ROOM_HALF_WIDTH, WALL_CLASS),
        ];
        for (axis, value, class) in planes {
            if d[axis].abs() > 1e-15 {
                let t = (value - o[axis]) / d[axis];
                if within(o + d * t) {
                    consider(t, class);
                }
            }
        }
        for obj in &self.objects {
            let t = match &obj.shape {
                Shape::Box { center, half } => ray_box(&o, &d, center, half),
                Shape::Ellipsoid { center, radii } => ray_ellipsoid(&o, &d, center, radii),
            };
            if let Some(t) = t {
                consider(t, obj.class);
            }
        }
        // `d` has unit camera-frame depth, so the ray parameter is the depth.
        best
    }

    /// Analytic label map for a camera; rays that miss every surface are ignored.
    pub fn analytic_labels(&self, cam: &CameraView) -> LabelMap {
        let (w, h) = (cam.width(), cam.height());
        let labels = (0..h * w)
            .into_par_iter()
            .map(|p| self.raycast(cam, p % w, p / w).map_or(IGNORE, |(_, c)| c))
            .collect();
        LabelMap {
            width: w,
            height: h,
            labels,
        }
    }

    /// Check that `inputs` and `target` name distinct cameras of this scene.
    pub fn split(&self, inputs: &[usize], target: usize) -> Result<()> {
        let n = self.cameras.len();
        if target >= n || inputs.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument(format!("camera index out of range (scene has {n})")));
        }
        if inputs.contains(&target) {
            return Err(Error::InvalidArgument(format!("target view {target} is also an input")));
        }
        Ok(())
    }
}

/// Two views of a fronto-parallel textured plane.
#[derive(Clone, Debug)]
pub struct PlanePair {
    pub images: [FeatureMap<f64>; 2],
    pub cameras: [CameraView; 2],
    pub depth: f64,
    pub baseline: f64,
}

impl PlanePair {
    /// Horizontal pixel shift of a plane point between the two views.
    pub fn disparity_px(&self) -> f64 {
        self.cameras[0].focal_pixels().0 * self.baseline / self.depth
    }
}

/// `(wavelength in reference pixels, direction angle, amplitude)` of each texture component.
const PLANE_WAVES: [(f64, f64, f64); 5] = [
    (6.5, 0.3, 0.10),
    (9.0, 1.9, 0.10),
    (13.0, 0.9, 0.08),
    (19.0, 2.6, 0.07),
    (27.0, 1.4, 0.06),
];

fn plane_texture(x: f64, y: f64, world_per_px: f64, channel: usize) -> f64 {
    let mut v = 0.5;
    for (i, &(lambda, angle, amp)) in PLANE_WAVES.iter().enumerate() {
        let k = std::f64::consts::TAU / (lambda * world_per_px);
        let phase = 0.7 * (i as f64 + 1.0) * (channel as f64 + 1.0);
        v += amp * (k * (x * angle.cos() + y * angle.sin()) + phase).sin();
    }
    v
}

/// Plane `z = depth` seen by a camera at the origin and one moved `baseline`
/// along +x, both with normalized focal length 1 and the principal point
/// at the image center. The texture is evaluated analytically at each ray hit.
pub fn textured_plane_pair(depth: f64, baseline: f64, resolution: usize) -> Result<PlanePair> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::InvalidArgument(format!("plane depth must be positive, got {depth}")));
    }
    if !(baseline >= 0.0 && baseline < depth) {
        return Err(Error::InvalidArgument(format!("baseline must lie in [0, depth), got {baseline}")));
    }
    if resolution < 8 {
        return Err(Error::InvalidArgument(format!("resolution {resolution} too small")));
    }
    let k = Matrix3::new(1.0, 0.0, 0.5, 0.0, 1.0, 0.5, 0.0, 0.0, 1.0);
    let make = |cx: f64| CameraView::new(k, Matrix3::identity(), Vector3::new(-cx, 0.0, 0.0), resolution, resolution);
    let cameras = [make(0.0)?, make(baseline)?];
    let world_per_px = depth / cameras[0].focal_pixels().0;
    let render = |cam: &CameraView| {
        let mut im = FeatureMap::zeros(3, resolution, resolution);
        for y in 0..resolution {
            for x in 0..resolution {
                let un = (x as f64 + 0.5) / resolution as f64;
                let vn = (y as f64 + 0.5) / resolution as f64;
                let p = cam.camera_to_world(&cam.unproject_normalized(un, vn, depth));
                for c in 0..3 {
                    let i = im.idx(c, y, x);
                    im.data[i] = plane_texture(p.x, p.y, world_per_px, c);
                }
            }
        }
        im
    };
    let images = [render(&cameras[0]), render(&cameras[1])];
    Ok(PlanePair {
        images,
        cameras,
        depth,
        baseline,
    })
}
