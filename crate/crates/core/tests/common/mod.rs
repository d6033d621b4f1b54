#![allow(dead_code)]

use nalgebra::{Isometry3, Matrix3, Translation3, UnitQuaternion, Vector3};
use proptest::prelude::*;
use semsplat::geometry::CameraView;

pub fn intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix3<f64> {
    Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
}

pub fn rotation(axis: [f64; 3]) -> Matrix3<f64> {
    UnitQuaternion::from_scaled_axis(Vector3::from(axis)).to_rotation_matrix().into_inner()
}

prop_compose! {
    pub fn camera(size: usize)(
        f in (0.7f64..1.5, 0.7f64..1.5),
        c in (0.4f64..0.6, 0.4f64..0.6),
        axis in prop::array::uniform3(-0.6f64..0.6),
        t in prop::array::uniform3(-1.0f64..1.0),
    ) -> CameraView {
        CameraView::new(intrinsics(f.0, f.1, c.0, c.1), rotation(axis), Vector3::from(t), size, size).unwrap()
    }
}

prop_compose! {
    pub fn rigid()(
        axis in prop::array::uniform3(-3.0f64..3.0),
        t in prop::array::uniform3(-5.0f64..5.0),
    ) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::new(t[0], t[1], t[2]), UnitQuaternion::from_scaled_axis(Vector3::from(axis)))
    }
}

pub fn front_camera(size: usize) -> CameraView {
    CameraView::new(intrinsics(1.0, 1.0, 0.5, 0.5), Matrix3::identity(), Vector3::zeros(), size, size).unwrap()
}
