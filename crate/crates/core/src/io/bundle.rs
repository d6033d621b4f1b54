//! Scene bundle: a directory with a JSON manifest (`scene.json`) and one
//! PPM image, optional PGM label map and optional 16-bit PGM depth map per
//! view.
//!
//! Camera intrinsics in the manifest are resolution-normalized (row-major
//! 3×3), rotations are `[w, x, y, z]` world-to-camera quaternions.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraView;
use crate::io::pnm::{read_labels, write_labels, DepthImage, RgbImage};
use crate::metrics::LabelMap;
use crate::synth::SyntheticScene;

pub const MANIFEST: &str = "scene.json";
const QUATERNION_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub width: usize,
    pub height: usize,
    pub intrinsics: [[f64; 3]; 3],
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl CameraRecord {
    pub fn from_camera(cam: &CameraView) -> CameraRecord {
        let k = cam.intrinsics();
        let q = cam.rotation_quaternion();
        let t = cam.translation();
        CameraRecord {
            width: cam.width(),
            height: cam.height(),
            intrinsics: [0, 1, 2].map(|r| [0, 1, 2].map(|c| k[(r, c)])),
            rotation: [q.w, q.i, q.j, q.k],
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn to_camera(&self, index: usize) -> Result<CameraView> {
        let [w, x, y, z] = self.rotation;
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !((norm - 1.0).abs() <= QUATERNION_TOL) {
            return Err(Error::NonUnitQuaternion { camera: index, norm });
        }
        let r = UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)).to_rotation_matrix().into_inner();
        let k = Matrix3::from_fn(|r, c| self.intrinsics[r][c]);
        let t = Vector3::from(self.translation);
        CameraView::new(k, r, t, self.width, self.height)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub camera: CameraRecord,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub near: f64,
    pub far: f64,
    pub views: Vec<ViewRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BundleView {
    pub camera: CameraView,
    pub image: RgbImage,
    pub labels: Option<LabelMap>,
    pub depth: Option<DepthImage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub class_names: Vec<String>,
    pub near: f64,
    pub far: f64,
    pub views: Vec<BundleView>,
}

impl SceneBundle {
    /// Quantized copy of a synthetic scene's cameras and ground-truth maps.
    pub fn from_scene(scene: &SyntheticScene, near: f64, far: f64) -> Result<SceneBundle> {
        let views = scene
            .cameras
            .iter()
            .zip(&scene.gt)
            .map(|(cam, gt)| {
                Ok(BundleView {
                    camera: cam.clone(),
                    image: RgbImage::from_feature_map(&gt.rgb)?,
                    labels: Some(gt.labels.clone()),
                    depth: Some(DepthImage::from_depths(cam.width(), cam.height(), &gt.depth)?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(SceneBundle {
            class_names: scene.class_names.clone(),
            near,
            far,
            views,
        })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn view(&self, id: usize) -> Result<&BundleView> {
        self.views
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("view {id} not in bundle of {} views", self.views.len())))
    }

    /// Check every view against its camera and the class list.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidArgument(format!("invalid depth range {}..{}", self.near, self.far)));
        }
        for (i, v) in self.views.iter().enumerate() {
            let expected = format!("{}x{}", v.camera.width(), v.camera.height());
            let check = |kind: &str, w: usize, h: usize| {
                if (w, h) != (v.camera.width(), v.camera.height()) {
                    return Err(Error::DimensionMismatch {
                        path: dir.join(format!("view {i} {kind}")),
                        expected: expected.clone(),
                        found: format!("{w}x{h}"),
                    });
                }
                Ok(())
            };
            check("image", v.image.width, v.image.height)?;
            if let Some(l) = &v.labels {
                check("labels", l.width, l.height)?;
                if let Some(max) = l.max_label() {
                    if max as usize >= self.classes() {
                        return Err(Error::LabelOutOfRange {
                            path: dir.join(format!("view {i} labels")),
                            label: max,
                            classes: self.classes(),
                        });
                    }
                }
            }
            if let Some(d) = &v.depth {
                check("depth", d.width, d.height)?;
            }
        }
        Ok(())
    }
}

fn file_names(i: usize) -> (String, String, String) {
    (format!("view_{i:03}_rgb.ppm"), format!("view_{i:03}_labels.pgm"), format!("view_{i:03}_depth.pgm"))
}

pub fn save_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    bundle.validate(dir)?;
    std::fs::create_dir_all(dir)?;
    let mut views = Vec::with_capacity(bundle.views.len());
    for (i, v) in bundle.views.iter().enumerate() {
        let (rgb, labels, depth) = file_names(i);
        v.image.write(&dir.join(&rgb))?;
        if let Some(l) = &v.labels {
            write_labels(l, &dir.join(&labels))?;
        }
        if let Some(d) = &v.depth {
            d.write(&dir.join(&depth))?;
        }
        views.push(ViewRecord {
            camera: CameraRecord::from_camera(&v.camera),
            image: rgb,
            labels: v.labels.as_ref().map(|_| labels),
            depth: v.depth.as_ref().map(|_| depth),
        });
    }
    let manifest = Manifest {
        class_names: bundle.class_names.clone(),
        near: bundle.near,
        far: bundle.far,
        views,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

fn resolve(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Load and validate a bundle directory (or the path of its manifest).
pub fn load_bundle(path: &Path) -> Result<SceneBundle> {
    let (dir, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    if !manifest_path.is_file() {
        return Err(Error::MissingFile(manifest_path));
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    let views = manifest
        .views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            Ok(BundleView {
                camera: v.camera.to_camera(i)?,
                image: RgbImage::read(&resolve(&dir, &v.image))?,
                labels: v.labels.as_ref().map(|p| read_labels(&resolve(&dir, p))).transpose()?,
                depth: v.depth.as_ref().map(|p| DepthImage::read(&resolve(&dir, p))).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bundle = SceneBundle {
        class_names: manifest.class_names,
        near: manifest.near,
        far: manifest.far,
        views,
    };
    bundle.validate(&dir)?;
    Ok(bundle)
}
