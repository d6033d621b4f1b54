//! Command-line front end. Exit codes: 0 success, 1 bad input or usage,
//! 2 internal failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::depth::{estimate_depth_raw, sample_candidates, RAW_TEMPERATURE};
use crate::error::{Error, Result};
use crate::io::archive::Archive;
use crate::io::bundle::{load_bundle, save_bundle, SceneBundle};
use crate::io::pnm::{read_labels, write_labels, DepthImage, RgbImage};
use crate::metrics::segmentation_metrics;
use crate::pipeline::{forward, init_weights, predict_depths, render_novel, DecodeAt, PipelineConfig};
use crate::synth::{generate_room_with, RoomConfig};
use crate::verify::{self, Check};

pub const THREADS_VAR: &str = "SEMSPLAT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "semsplat", version, about = "Feed-forward semantic Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Grid {
    Pixels,
    Features,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic room and write it as a scene bundle.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        objects: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 6)]
        cameras: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the feed-forward pass on input views and render a target view.
    Render {
        #[arg(long)]
        bundle: PathBuf,
        /// Input view ids, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<usize>,
        /// Target view id.
        #[arg(long, conflicts_with = "pose", required_unless_present = "pose")]
        target: Option<usize>,
        /// Target pose `qw,qx,qy,qz,tx,ty,tz` (world to camera), with the
        /// intrinsics of the first input view.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        pose: Option<Vec<f64>>,
        /// Output path prefix.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        candidates: usize,
        /// Weight initialization seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Grid::Pixels)]
        decode_at: Grid,
    },
    /// Estimate per-view depth maps.
    Depth {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        views: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        candidates: usize,
        /// Defaults to the bundle's range.
        #[arg(long)]
        near: Option<f64>,
        #[arg(long)]
        far: Option<f64>,
        /// Match image patches directly instead of learned features.
        #[arg(long)]
        raw_features: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted label map with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        classes: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Property suite.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also measure single-core feed-forward latency.
        #[arg(long)]
        timing: bool,
    },
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads(std::env::var(THREADS_VAR).ok().as_deref()) {
        eprintln!("error: {e}");
        return 1;
    }
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn configure_threads(value: Option<&str>) -> Result<()> {
    let threads = match value.map(str::trim) {
        None | Some("") => return Ok(()),
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| Error::InvalidArgument(format!("{THREADS_VAR} must be a non-negative integer, got {v:?}")))?,
    };
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth {
            seed,
            classes,
            objects,
            resolution,
            cameras,
            out,
        } => {
            let cfg = RoomConfig {
                seed,
                classes,
                objects,
                resolution,
                cameras,
                ..RoomConfig::default()
            };
            let scene = generate_room_with(&cfg)?;
            let defaults = PipelineConfig::default();
            save_bundle(&SceneBundle::from_scene(&scene, defaults.near, defaults.far)?, &out)?;
            println!("views={} gaussians={} classes={}", scene.cameras.len(), scene.gaussians.len(), classes);
            Ok(0)
        }
        Command::Render {
            bundle,
            inputs,
            target,
            pose,
            out,
            candidates,
            seed,
            decode_at,
        } => {
            let b = load_bundle(&bundle)?;
            let (images, cameras) = gather(&b, &inputs)?;
            let cam = match (target, pose) {
                (Some(t), _) => b.view(t)?.camera.clone(),
                (None, Some(p)) => {
                    if p.len() != 7 {
                        return Err(Error::InvalidArgument(format!("--pose needs 7 values, got {}", p.len())));
                    }
                    let q = Quaternion::new(p[0], p[1], p[2], p[3]);
                    let norm = q.norm();
                    if !((norm - 1.0).abs() <= 1e-6) {
                        return Err(Error::NonUnitQuaternion { camera: 0, norm });
                    }
                    let r = UnitQuaternion::new_unchecked(q).to_rotation_matrix().into_inner();
                    let c = &cameras[0];
                    crate::geometry::CameraView::new(*c.intrinsics(), r, Vector3::new(p[4], p[5], p[6]), c.width(), c.height())?
                }
                (None, None) => return Err(Error::InvalidArgument("need --target or --pose".into())),
            };
            let cfg = PipelineConfig {
                candidates,
                near: b.near,
                far: b.far,
                classes: b.classes(),
                seed,
                decode_at: match decode_at {
                    Grid::Pixels => DecodeAt::Pixels,
                    Grid::Features => DecodeAt::Features,
                },
                ..PipelineConfig::default()
            };
            let w = init_weights(&cfg)?;
            let set = forward(&images, &cameras, &cfg, &w)?;
            let maps = render_novel(&set, &cam)?;
            RgbImage::from_feature_map(&maps.rgb)?.write(&suffixed(&out, "_rgb.ppm"))?;
            write_labels(&maps.labels, &suffixed(&out, "_labels.pgm"))?;
            DepthImage::from_depths(maps.width, maps.height, &maps.depth)?.write(&suffixed(&out, "_depth.pgm"))?;
            let mut probs = Archive::new("class_probabilities");
            probs.set_meta("classes", b.classes());
            let p = &maps.sem_probs;
            probs.push("probs", &[p.channels, p.height, p.width], p.data.iter().map(|&v| v as f32));
            probs.save(&suffixed(&out, "_probs.archive"))?;
            println!(
                "gaussians={} inputs={} size={}x{} candidates={}",
                set.len(),
                inputs.len(),
                maps.width,
                maps.height,
                candidates
            );
            Ok(0)
        }
        Command::Depth {
            bundle,
            views,
            candidates,
            near,
            far,
            raw_features,
            seed,
            out,
        } => {
            let b = load_bundle(&bundle)?;
            let (images, cameras) = gather(&b, &views)?;
            let (near, far) = (near.unwrap_or(b.near), far.unwrap_or(b.far));
            let depths: Vec<Vec<f64>> = if raw_features {
                let cand = sample_candidates(near, far, candidates)?;
                (0..views.len())
                    .map(|r| estimate_depth_raw(&images, &cameras, &cand, r, RAW_TEMPERATURE).map(|d| d.depth))
                    .collect::<Result<_>>()?
            } else {
                let cfg = PipelineConfig {
                    candidates,
                    near,
                    far,
                    classes: b.classes(),
                    seed,
                    ..PipelineConfig::default()
                };
                let w = init_weights(&cfg)?;
                predict_depths(&images, &cameras, &cfg, &w)?.into_iter().map(|d| d.depth).collect()
            };
            std::fs::create_dir_all(&out)?;
            for (&v, d) in views.iter().zip(&depths) {
                let c = &cameras[views.iter().position(|&x| x == v).unwrap_or(0)];
                DepthImage::from_depths(c.width(), c.height(), d)?.write(&out.join(format!("depth_{v:03}.pgm")))?;
            }
            println!("views={} candidates={candidates} near={near} far={far} raw={raw_features}", views.len());
            Ok(0)
        }
        Command::Eval { pred, gt, classes } => {
            let m = segmentation_metrics(&read_labels(&gt)?, &read_labels(&pred)?, classes)?;
            println!("miou={} acc={} class_acc={}", m.miou, m.acc, m.class_acc);
            Ok(0)
        }
        Command::Gradcheck { seed } => report(&verify::gradcheck(seed)?),
        Command::Selftest { seed, timing } => report(&verify::selftest(seed, timing)?),
    }
}

fn gather(
    b: &SceneBundle,
    ids: &[usize],
) -> Result<(Vec<crate::tensor::FeatureMap<f64>>, Vec<crate::geometry::CameraView>)> {
    let mut images = Vec::with_capacity(ids.len());
    let mut cameras = Vec::with_capacity(ids.len());
    for &i in ids {
        let v = b.view(i)?;
        images.push(v.image.to_feature_map());
        cameras.push(v.camera.clone());
    }
    Ok((images, cameras))
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn report(checks: &[Check]) -> Result<i32> {
    for c in checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} passed, {} failed", checks.len() - failed, failed);
    Ok(if failed == 0 { 0 } else { 2 })
}
