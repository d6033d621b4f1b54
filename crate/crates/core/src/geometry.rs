//! Pinhole cameras, projective matrices, and plane-induced feature warping.
//!
//! Conventions: x right, y down, z forward. Pixel `(i, j)` has its center at
//! `(i + 0.5, j + 0.5)`. Intrinsics are resolution-normalized: a pixel
//! coordinate `u` corresponds to the normalized coordinate `u / width`, so the
//! same camera can be applied to an image and to any downsampled feature map
//! of it.

use nalgebra::{Isometry3, Matrix3, Matrix4, Point2, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

const ORTHO_TOL: f64 = 1e-9;
/// Minimum camera-frame depth for a point to count as visible.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    width: usize,
    height: usize,
}

impl CameraView {
    /// Validating constructor. `intrinsics` must already be resolution-normalized.
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        let k = &intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidCamera(
                "intrinsics must be upper triangular with bottom row (0,0,1)".into(),
            ));
        }
        let gram = rotation.transpose() * rotation;
        if (gram - Matrix3::identity()).abs().max() > ORTHO_TOL
            || (rotation.determinant() - 1.0).abs() > ORTHO_TOL
        {
            return Err(Error::InvalidCamera("rotation is not a proper rotation".into()));
        }
        if !(intrinsics.iter().chain(rotation.iter()).chain(translation.iter()))
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidCamera("non-finite parameters".into()));
        }
        Ok(CameraView {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Build from pixel-unit focal lengths and principal point.
    #[allow(clippy::too_many_arguments)]
    pub fn from_pixels(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let (w, h) = (width as f64, height as f64);
        let k = Matrix3::new(fx / w, 0.0, cx / w, 0.0, fy / h, cy / h, 0.0, 0.0, 1.0);
        Self::new(k, rotation, translation, width, height)
    }

    /// Camera at `eye` looking at `target`, with the given vertical field of
    /// view and a centered principal point. `up` points towards -y in the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // Rows of the world-to-camera rotation are the camera axes in world coordinates.
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rot = Rotation3::from_matrix(&rot).into_inner();
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self::from_pixels(
            f,
            f,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
            rot,
            -(rot * eye),
        )
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }

    /// Focal lengths in pixels.
    pub fn focal_pixels(&self) -> (f64, f64) {
        (
            self.intrinsics[(0, 0)] * self.width as f64,
            self.intrinsics[(1, 1)] * self.height as f64,
        )
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn rotation_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// The same camera expressed after the world frame is moved by `world`
    /// (new world coordinates = `world * old`).
    pub fn rebased(&self, world: &Isometry3<f64>) -> CameraView {
        let rm = world.rotation.to_rotation_matrix().into_inner();
        let rotation = self.rotation * rm.transpose();
        let translation = self.translation - rotation * world.translation.vector;
        CameraView {
            rotation,
            translation,
            ..self.clone()
        }
    }

    /// Same pixel intrinsics, but a larger canvas (padding on the bottom/right).
    pub fn padded(&self, width: usize, height: usize) -> CameraView {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut k = self.intrinsics;
        k[(0, 0)] *= sx;
        k[(0, 1)] *= sx;
        k[(0, 2)] *= sx;
        k[(1, 1)] *= sy;
        k[(1, 2)] *= sy;
        CameraView {
            intrinsics: k,
            width,
            height,
            ..self.clone()
        }
    }

    /// Same camera for a resampled image of a different size.
    pub fn resized(&self, width: usize, height: usize) -> CameraView {
        CameraView {
            width,
            height,
            ..self.clone()
        }
    }

    fn intrinsics_inverse(&self) -> Matrix3<f64> {
        let k = &self.intrinsics;
        let (fx, s, cx, fy, cy) = (k[(0, 0)], k[(0, 1)], k[(0, 2)], k[(1, 1)], k[(1, 2)]);
        Matrix3::new(
            1.0 / fx,
            -s / (fx * fy),
            (s * cy - cx * fy) / (fx * fy),
            0.0,
            1.0 / fy,
            -cy / fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Camera-frame point at the given depth along the ray through a normalized image point.
    pub fn unproject_normalized(&self, un: f64, vn: f64, depth: f64) -> Vector3<f64> {
        self.intrinsics_inverse() * Vector3::new(un, vn, 1.0) * depth
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// 4×4 projective matrix with bottom row `(0, 0, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectiveMatrix {
    m: Matrix4<f64>,
}

impl ProjectiveMatrix {
    pub fn new(m: Matrix4<f64>) -> Result<Self> {
        let bottom = m.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(Error::InvalidArgument(
                "projective matrix bottom row must be (0,0,0,1)".into(),
            ));
        }
        if m.fixed_view::<3, 3>(0, 0).determinant().abs() <= 1e-12 {
            return Err(Error::DegenerateCamera);
        }
        Ok(ProjectiveMatrix { m })
    }

    pub fn identity() -> Self {
        ProjectiveMatrix {
            m: Matrix4::identity(),
        }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    /// Inverse through the affine block structure `[A b; 0 1]⁻¹ = [A⁻¹ −A⁻¹b; 0 1]`.
    pub fn inverse(&self) -> Result<ProjectiveMatrix> {
        let a = self.m.fixed_view::<3, 3>(0, 0).into_owned();
        if a.determinant().abs() <= 1e-12 {
            return Err(Error::DegenerateCamera);
        }
        let a_inv = a.try_inverse().ok_or(Error::DegenerateCamera)?;
        let b = self.m.fixed_view::<3, 1>(0, 3).into_owned();
        Ok(ProjectiveMatrix {
            m: affine(&a_inv, &(-(a_inv * b))),
        })
    }
}

fn affine(a: &Matrix3<f64>, b: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(a);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(b);
    m
}

/// `[K·R  K·t; 0ᵀ 1]` for the camera.
pub fn build_projective(cam: &CameraView) -> ProjectiveMatrix {
    let k = cam.intrinsics();
    ProjectiveMatrix {
        m: affine(&(k * cam.rotation()), &(k * cam.translation())),
    }
}

/// Closed-form inverse of [`build_projective`]: `[Rᵀ·K⁻¹  −Rᵀ·t; 0ᵀ 1]`.
pub fn build_projective_inverse(cam: &CameraView) -> ProjectiveMatrix {
    let rt = cam.rotation().transpose();
    ProjectiveMatrix {
        m: affine(&(rt * cam.intrinsics_inverse()), &(-(rt * cam.translation()))),
    }
}

/// `p_i · p_j⁻¹`.
pub fn relative_transform(p_i: &ProjectiveMatrix, p_j: &ProjectiveMatrix) -> Result<ProjectiveMatrix> {
    let inv = p_j.inverse()?;
    Ok(ProjectiveMatrix {
        m: p_i.m * inv.m,
    })
}

/// Recover `(K, R, t)` from a matrix produced by [`build_projective`] via an
/// RQ factorization of its upper-left block.
pub fn decompose_projective(p: &ProjectiveMatrix) -> Result<(Matrix3<f64>, Matrix3<f64>, Vector3<f64>)> {
    let m = p.m.fixed_view::<3, 3>(0, 0).into_owned();
    // RQ of M from QR of the row-reversed transpose.
    let flip = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let qr = (flip * m).transpose().qr();
    let (q, r) = (qr.q(), qr.r());
    let mut k = flip * r.transpose() * flip;
    let mut rot = flip * q.transpose();
    // Force a positive diagonal on K.
    for i in 0..3 {
        if k[(i, i)] < 0.0 {
            for row in 0..3 {
                k[(row, i)] = -k[(row, i)];
            }
            for col in 0..3 {
                rot[(i, col)] = -rot[(i, col)];
            }
        }
    }
    if rot.determinant() < 0.0 {
        return Err(Error::InvalidArgument("decomposed rotation is improper".into()));
    }
    let scale = k[(2, 2)];
    let k = k / scale;
    let kt = p.m.fixed_view::<3, 1>(0, 3).into_owned();
    let k_inv = k.try_inverse().ok_or(Error::DegenerateCamera)?;
    let t = k_inv * kt / scale;
    Ok((k, rot, t))
}

/// World point seen at pixel `(u, v)` at camera-frame depth `depth`.
pub fn back_project(pixel: (f64, f64), depth: f64, cam: &CameraView) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    let (un, vn) = (pixel.0 / cam.width as f64, pixel.1 / cam.height as f64);
    Ok(cam.camera_to_world(&cam.unproject_normalized(un, vn, depth)))
}

/// Pixel coordinates and camera-frame depth of a world point.
pub fn project(point: &Vector3<f64>, cam: &CameraView) -> Result<(Point2<f64>, f64)> {
    let pc = cam.world_to_camera(point);
    let (un, vn) = project_camera_normalized(&pc, cam)?;
    Ok((
        Point2::new(un * cam.width as f64, vn * cam.height as f64),
        pc.z,
    ))
}

/// Normalized image coordinates of a camera-frame point.
pub fn project_camera_normalized(pc: &Vector3<f64>, cam: &CameraView) -> Result<(f64, f64)> {
    if !(pc.z > MIN_DEPTH) {
        return Err(Error::BehindCamera(pc.z));
    }
    let h = cam.intrinsics() * pc;
    Ok((h.x / h.z, h.y / h.z))
}

/// Bilinear sample at continuous pixel position `(sx, sy)` (pixel centers at +0.5).
/// Positions outside the image rectangle read as zero.
#[inline]
pub fn sample_bilinear(plane: &[f64], width: usize, height: usize, sx: f64, sy: f64) -> f64 {
    match bilinear_taps(width, height, sx, sy) {
        Some(t) => t.apply(plane),
        None => 0.0,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BilinearTaps {
    idx: [usize; 4],
    w: [f64; 4],
}

impl BilinearTaps {
    #[inline]
    pub fn apply(&self, plane: &[f64]) -> f64 {
        plane[self.idx[0]] * self.w[0]
            + plane[self.idx[1]] * self.w[1]
            + plane[self.idx[2]] * self.w[2]
            + plane[self.idx[3]] * self.w[3]
    }
}

pub fn bilinear_taps(width: usize, height: usize, sx: f64, sy: f64) -> Option<BilinearTaps> {
    if !(sx >= 0.0 && sy >= 0.0 && sx <= width as f64 && sy <= height as f64) {
        return None;
    }
    let fx = (sx - 0.5).clamp(0.0, (width - 1) as f64);
    let fy = (sy - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    Some(BilinearTaps {
        idx: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
        w: [
            (1.0 - ax) * (1.0 - ay),
            ax * (1.0 - ay),
            (1.0 - ax) * ay,
            ax * ay,
        ],
    })
}

/// For every pixel of an `h×w` grid in the reference view, where the point at
/// `depth` lands in the source view's `h×w` grid. `None` marks points outside
/// the source image or behind the source camera.
pub fn warp_taps(
    cam_ref: &CameraView,
    cam_src: &CameraView,
    depth: f64,
    height: usize,
    width: usize,
) -> Vec<Option<BilinearTaps>> {
    let rel_r = cam_src.rotation() * cam_ref.rotation().transpose();
    let rel_t = cam_src.translation() - rel_r * cam_ref.translation();
    let k_ref_inv = cam_ref.intrinsics_inverse();
    let k_src = cam_src.intrinsics();
    let mut taps = Vec::with_capacity(height * width);
    for y in 0..height {
        let vn = (y as f64 + 0.5) / height as f64;
        for x in 0..width {
            let un = (x as f64 + 0.5) / width as f64;
            let pr = k_ref_inv * Vector3::new(un, vn, 1.0) * depth;
            let ps = rel_r * pr + rel_t;
            if !(ps.z > MIN_DEPTH) {
                taps.push(None);
                continue;
            }
            let h = k_src * ps;
            let sx = h.x / h.z * width as f64;
            let sy = h.y / h.z * height as f64;
            taps.push(bilinear_taps(width, height, sx, sy));
        }
    }
    taps
}

/// Resample a source-view feature map into the reference view, assuming every
/// reference pixel lies at camera-frame depth `depth`.
pub fn warp_feature(
    source: &FeatureMap<f64>,
    cam_ref: &CameraView,
    cam_src: &CameraView,
    depth: f64,
) -> Result<FeatureMap<f64>> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    let taps = warp_taps(cam_ref, cam_src, depth, source.height, source.width);
    Ok(apply_warp(source, &taps))
}

pub fn apply_warp(source: &FeatureMap<f64>, taps: &[Option<BilinearTaps>]) -> FeatureMap<f64> {
    let mut out = FeatureMap::zeros(source.channels, source.height, source.width);
    let hw = source.height * source.width;
    for c in 0..source.channels {
        let plane = source.plane(c);
        let dst = &mut out.data[c * hw..(c + 1) * hw];
        for (o, tap) in dst.iter_mut().zip(taps) {
            if let Some(t) = tap {
                *o = t.apply(plane);
            }
        }
    }
    out
}
