//! Synthetic scene, trajectory, and correspondence generation — the
//! oracle source for every end-to-end test — plus dataset IO: PNG images,
//! ASCII PLY point clouds, TUM-format trajectories, and the dataset
//! meta.json.
//!
//! Ground-truth views are rendered with the naive reference blender from
//! [`crate::render`], so the dataset generator and the rasterizer oracle
//! share one definition of the blending semantics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraPose, PinholeCamera};
use crate::decoders::GaussianPrimitive;
use crate::geometry::{reproject, BAProblem, Observation};
use crate::img::ImageBuf;
use crate::render::{project, rasterize_naive, Splat2D};
use crate::scene::PointCloud;

#[derive(Debug, Error)]
pub enum DatakitError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("image error on {path}: {0}", path = .1.display())]
    Image(image::ImageError, PathBuf),
    #[error("invalid scene spec: {0}")]
    BadSpec(String),
    #[error("could not place {0} points inside every frustum")]
    InfeasibleFrustum(usize),
}

fn io_err(path: &Path, source: std::io::Error) -> DatakitError {
    DatakitError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Standard normal sample via Box-Muller.
pub fn sample_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One soft blob of the synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobSpec {
    pub center: [f64; 3],
    pub sigma: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
}

/// Cameras on a ring around the working volume, all looking at `look_at`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRingSpec {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub look_at: [f64; 3],
}

/// Per-view brightness gain as a smooth function of the camera heading:
/// gain(i) = 1 + amplitude * sin(frequency * heading_i + phase).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppearanceSpec {
    pub amplitude: f64,
    pub phase: f64,
    #[serde(default = "default_appearance_frequency")]
    pub frequency: f64,
}

fn default_appearance_frequency() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CloudSpec {
    pub points_per_blob: usize,
    /// Radial jitter of the surface samples, in blob sigmas.
    pub surface_noise: f64,
}

/// Full synthetic scene description; generation is a pure function of
/// (spec, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub blobs: Vec<BlobSpec>,
    pub cameras: CameraRingSpec,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub cloud: CloudSpec,
    #[serde(default)]
    pub appearance: Option<AppearanceSpec>,
    /// Frame indices held out as the test split; everything else is a
    /// keyframe.
    #[serde(default)]
    pub test_views: Vec<usize>,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<(), DatakitError> {
        if self.cameras.count < 2 {
            return Err(DatakitError::BadSpec("need at least 2 cameras".into()));
        }
        if self.blobs.is_empty() {
            return Err(DatakitError::BadSpec("need at least one blob".into()));
        }
        for (i, b) in self.blobs.iter().enumerate() {
            if b.center.iter().any(|c| c.abs() > 0.5) {
                return Err(DatakitError::BadSpec(format!(
                    "blob {i} center outside the unit working volume"
                )));
            }
            if b.sigma.iter().any(|s| *s <= 0.0) {
                return Err(DatakitError::BadSpec(format!("blob {i} has non-positive sigma")));
            }
        }
        for &t in &self.test_views {
            if t >= self.cameras.count {
                return Err(DatakitError::BadSpec(format!("test view {t} out of range")));
            }
        }
        Ok(())
    }

    pub fn camera(&self) -> PinholeCamera {
        PinholeCamera::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
    }

    pub fn pose(&self, index: usize) -> CameraPose {
        let heading = self.heading(index);
        let eye = Vector3::new(
            self.cameras.radius * heading.cos(),
            self.cameras.radius * heading.sin(),
            self.cameras.height,
        );
        let target = Vector3::new(
            self.cameras.look_at[0],
            self.cameras.look_at[1],
            self.cameras.look_at[2],
        );
        CameraPose::look_at(&eye, &target, &Vector3::new(0.0, 0.0, 1.0))
    }

    pub fn heading(&self, index: usize) -> f64 {
        2.0 * std::f64::consts::PI * index as f64 / self.cameras.count as f64
    }

    pub fn gain(&self, index: usize) -> f64 {
        match &self.appearance {
            Some(a) => 1.0 + a.amplitude * (a.frequency * self.heading(index) + a.phase).sin(),
            None => 1.0,
        }
    }

    fn blob_gaussians(&self) -> Vec<GaussianPrimitive> {
        self.blobs
            .iter()
            .map(|b| GaussianPrimitive {
                position: Vector3::new(b.center[0], b.center[1], b.center[2]),
                opacity: b.opacity,
                color: b.color,
                rotation: [1.0, 0.0, 0.0, 0.0],
                scale: Vector3::new(b.sigma[0], b.sigma[1], b.sigma[2]),
            })
            .collect()
    }

    /// Ground-truth render of one view through the reference blender,
    /// including the per-view appearance gain.
    pub fn render_view(&self, index: usize) -> ImageBuf {
        let cam = self.camera();
        let pose = self.pose(index);
        let splats: Vec<Splat2D> = self
            .blob_gaussians()
            .iter()
            .filter_map(|g| project(g, &pose, &cam))
            .collect();
        let (image, _) = rasterize_naive(&splats, &cam).expect("finite blob splats");
        let gain = self.gain(index);
        if gain != 1.0 {
            image.scaled(gain)
        } else {
            image
        }
    }

    /// Default small scene: a score of blobs in the unit volume viewed
    /// from a 10-camera ring, 8 keyframes + 2 held-out views.
    pub fn smoke_preset() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_B10B);
        let blobs = (0..20)
            .map(|_| {
                let sigma = rng.gen_range(0.04..0.10);
                BlobSpec {
                    center: [
                        rng.gen_range(-0.35..0.35),
                        rng.gen_range(-0.35..0.35),
                        rng.gen_range(-0.25..0.25),
                    ],
                    sigma: [
                        sigma * rng.gen_range(0.7..1.4),
                        sigma * rng.gen_range(0.7..1.4),
                        sigma * rng.gen_range(0.7..1.4),
                    ],
                    color: [
                        rng.gen_range(0.15..0.75),
                        rng.gen_range(0.15..0.75),
                        rng.gen_range(0.15..0.75),
                    ],
                    opacity: rng.gen_range(0.55..0.9),
                }
            })
            .collect();
        SyntheticScene {
            blobs,
            cameras: CameraRingSpec {
                count: 10,
                radius: 1.7,
                height: 0.6,
                look_at: [0.0, 0.0, 0.0],
            },
            width: 64,
            height: 64,
            focal: 70.0,
            cloud: CloudSpec {
                points_per_blob: 150,
                surface_noise: 0.08,
            },
            appearance: None,
            test_views: vec![3, 8],
        }
    }

    /// Smoke preset with a +/-20% per-view brightness modulation.
    pub fn smoke_appearance_preset() -> Self {
        let mut scene = Self::smoke_preset();
        scene.appearance = Some(AppearanceSpec {
            amplitude: 0.2,
            phase: 0.6,
            frequency: 2.0,
        });
        scene
    }
}

/// One generated frame.
#[derive(Debug, Clone)]
pub struct Frame {
    pub image: ImageBuf,
    pub pose: CameraPose,
    pub gain: f64,
    pub is_keyframe: bool,
}

/// A dataset in memory, as produced by [`generate`] or [`Dataset::load`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub camera: PinholeCamera,
    pub frames: Vec<Frame>,
    pub cloud: PointCloud,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaFile {
    version: u32,
    camera: PinholeCamera,
    frame_count: usize,
    keyframe_flags: Vec<bool>,
    appearance_gains: Vec<f64>,
    seed: u64,
}

/// Sample the scene's point cloud: surface-ish samples of every blob.
fn sample_cloud(scene: &SyntheticScene, rng: &mut ChaCha8Rng) -> PointCloud {
    let mut points = Vec::new();
    for b in &scene.blobs {
        for _ in 0..scene.cloud.points_per_blob {
            let dir = Vector3::new(
                sample_normal(rng),
                sample_normal(rng),
                sample_normal(rng),
            )
            .normalize();
            let radial = 1.0 + scene.cloud.surface_noise * sample_normal(rng);
            points.push(Vector3::new(
                b.center[0] + b.sigma[0] * dir.x * radial,
                b.center[1] + b.sigma[1] * dir.y * radial,
                b.center[2] + b.sigma[2] * dir.z * radial,
            ));
        }
    }
    PointCloud::new(points)
}

/// Generate the full dataset in memory. Pure in (scene, seed): images are
/// deterministic renders and the cloud comes from the seeded sampler.
pub fn generate(scene: &SyntheticScene, seed: u64) -> Result<Dataset, DatakitError> {
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = sample_cloud(scene, &mut rng);
    let test: BTreeSet<usize> = scene.test_views.iter().copied().collect();
    let frames = (0..scene.cameras.count)
        .map(|i| Frame {
            image: scene.render_view(i),
            pose: scene.pose(i),
            gain: scene.gain(i),
            is_keyframe: !test.contains(&i),
        })
        .collect();
    Ok(Dataset {
        camera: scene.camera(),
        frames,
        cloud,
    })
}

/// Generate and write a dataset directory: images/NNNN.png, poses.txt
/// (TUM format, camera-to-world), cloud.ply, meta.json.
pub fn generate_to_dir(
    scene: &SyntheticScene,
    seed: u64,
    dir: &Path,
) -> Result<Dataset, DatakitError> {
    let dataset = generate(scene, seed)?;
    dataset.save(dir, seed)?;
    Ok(dataset)
}

impl Dataset {
    pub fn keyframes(&self) -> impl Iterator<Item = (usize, &Frame)> {
        self.frames.iter().enumerate().filter(|(_, f)| f.is_keyframe)
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<(), DatakitError> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
        for (i, frame) in self.frames.iter().enumerate() {
            save_png(&frame.image, &images.join(format!("{i:04}.png")))?;
        }
        let stamped: Vec<(f64, CameraPose)> = self
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| (i as f64, f.pose))
            .collect();
        write_tum(&stamped, &dir.join("poses.txt"))?;
        write_ply(&self.cloud, &dir.join("cloud.ply"))?;
        let meta = MetaFile {
            version: 1,
            camera: self.camera,
            frame_count: self.frames.len(),
            keyframe_flags: self.frames.iter().map(|f| f.is_keyframe).collect(),
            appearance_gains: self.frames.iter().map(|f| f.gain).collect(),
            seed,
        };
        let path = dir.join("meta.json");
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&path, json).map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, DatakitError> {
        let meta_path = dir.join("meta.json");
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
        let meta: MetaFile = serde_json::from_str(&meta_text).map_err(|e| DatakitError::Parse {
            path: meta_path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let poses = read_tum(&dir.join("poses.txt"))?;
        if poses.len() != meta.frame_count {
            return Err(DatakitError::Parse {
                path: dir.join("poses.txt"),
                line: 0,
                msg: format!(
                    "pose count {} disagrees with meta frame_count {}",
                    poses.len(),
                    meta.frame_count
                ),
            });
        }
        let cloud = read_ply(&dir.join("cloud.ply"))?;
        let mut frames = Vec::with_capacity(meta.frame_count);
        for i in 0..meta.frame_count {
            let image = load_png(&dir.join("images").join(format!("{i:04}.png")))?;
            frames.push(Frame {
                image,
                pose: poses[i].1,
                gain: meta.appearance_gains.get(i).copied().unwrap_or(1.0),
                is_keyframe: meta.keyframe_flags.get(i).copied().unwrap_or(true),
            });
        }
        Ok(Dataset {
            camera: meta.camera,
            frames,
            cloud,
        })
    }
}

/// Indices of cloud points visible from a pose (positive depth, pixel in
/// bounds).
pub fn visible_indices(cloud: &PointCloud, pose: &CameraPose, cam: &PinholeCamera) -> Vec<usize> {
    cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            if let Ok(px) = reproject(pose, p, cam) {
                px.x >= 0.0 && px.x < cam.width as f64 && px.y >= 0.0 && px.y < cam.height as f64
            } else {
                false
            }
        })
        .map(|(i, _)| i)
        .collect()
}

/// Ground truth retained alongside a generated adjustment problem.
#[derive(Debug, Clone)]
pub struct BaGroundTruth {
    pub poses: Vec<CameraPose>,
    pub points: Vec<Vector3<f64>>,
    /// Flags aligned with the problem's observation list.
    pub outlier_flags: Vec<bool>,
}

/// Synthetic adjustment instance: poses on a smooth arc, points inside
/// every frustum, observations with Gaussian noise and a flagged outlier
/// fraction.
pub fn make_ba_instance(
    n_keyframes: usize,
    n_points: usize,
    noise_sigma: f64,
    outlier_fraction: f64,
    seed: u64,
) -> Result<(BAProblem, BaGroundTruth), DatakitError> {
    assert!(n_points >= 10, "need at least 10 points");
    assert!(n_keyframes >= 1);
    assert!((0.0..=1.0).contains(&outlier_fraction));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = PinholeCamera::new(100.0, 100.0, 50.0, 50.0, 100, 100);

    let mut poses = BTreeMap::new();
    let mut truth_poses = Vec::new();
    for k in 0..n_keyframes {
        let a = 0.25 * k as f64;
        let eye = Vector3::new(2.2 * a.cos(), 2.2 * a.sin(), 0.4 + 0.05 * a.sin());
        let pose = CameraPose::look_at(&eye, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0));
        poses.insert(k, pose);
        truth_poses.push(pose);
    }

    let in_all_frustums = |p: &Vector3<f64>| {
        truth_poses.iter().all(|pose| {
            matches!(reproject(pose, p, &camera), Ok(px)
                if px.x >= 5.0 && px.x < 95.0 && px.y >= 5.0 && px.y < 95.0)
        })
    };
    let mut points = BTreeMap::new();
    let mut truth_points = Vec::new();
    for i in 0..n_points {
        let mut placed = false;
        for _ in 0..10_000 {
            let p = Vector3::new(
                rng.gen_range(-0.45..0.45),
                rng.gen_range(-0.45..0.45),
                rng.gen_range(-0.45..0.45),
            );
            if in_all_frustums(&p) {
                points.insert(i, p);
                truth_points.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DatakitError::InfeasibleFrustum(n_points));
        }
    }

    let robust = crate::geometry::RobustConfig::default();
    let mut observations = Vec::new();
    for k in 0..n_keyframes {
        for i in 0..n_points {
            let level = rng.gen_range(0..4u32);
            let sigma = noise_sigma * robust.level_factor.powi(level as i32);
            let pixel = reproject(&truth_poses[k], &truth_points[i], &camera).unwrap()
                + Vector2::new(sigma * sample_normal(&mut rng), sigma * sample_normal(&mut rng));
            observations.push(Observation {
                pose_id: k,
                point_id: i,
                pixel,
                level,
            });
        }
    }

    // Exactly floor(fraction * n) outliers, chosen by a seeded shuffle.
    let n_out = (outlier_fraction * observations.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..observations.len()).collect();
    order.shuffle(&mut rng);
    let mut outlier_flags = vec![false; observations.len()];
    for &idx in order.iter().take(n_out) {
        outlier_flags[idx] = true;
        let dx = rng.gen_range(30.0..80.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let dy = rng.gen_range(30.0..80.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        observations[idx].pixel += Vector2::new(dx, dy);
    }

    Ok((
        BAProblem {
            poses,
            points,
            observations,
            camera,
            fixed_pose_ids: BTreeSet::new(),
        },
        BaGroundTruth {
            poses: truth_poses,
            points: truth_points,
            outlier_flags,
        },
    ))
}

// ---------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------

/// Save an RGB float image as 8-bit PNG (the documented lossy step:
/// values are clamped to [0,1] and quantized).
pub fn save_png(img: &ImageBuf, path: &Path) -> Result<(), DatakitError> {
    let mut out = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(x, y);
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, image::Rgb([q(p[0]), q(p[1]), q(p[2])]));
        }
    }
    out.save(path)
        .map_err(|e| DatakitError::Image(e, path.to_path_buf()))
}

pub fn load_png(path: &Path) -> Result<ImageBuf, DatakitError> {
    let img = image::open(path)
        .map_err(|e| DatakitError::Image(e, path.to_path_buf()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageBuf::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            out.set_pixel(
                x,
                y,
                [
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                ],
            );
        }
    }
    Ok(out)
}

/// Write an ASCII PLY point cloud (x y z as double properties).
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<(), DatakitError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut text = String::new();
    text.push_str("ply\nformat ascii 1.0\n");
    text.push_str(&format!("element vertex {}\n", cloud.len()));
    text.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in &cloud.points {
        text.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

/// Write anchors as an ASCII PLY with per-axis scale properties, for
/// inspection in external viewers.
pub fn write_anchor_ply(anchors: &[crate::scene::Anchor], path: &Path) -> Result<(), DatakitError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut text = String::new();
    text.push_str("ply\nformat ascii 1.0\ncomment anchor centers with per-axis scales\n");
    text.push_str(&format!("element vertex {}\n", anchors.len()));
    text.push_str("property double x\nproperty double y\nproperty double z\n");
    text.push_str("property double sx\nproperty double sy\nproperty double sz\nend_header\n");
    for a in anchors {
        text.push_str(&format!(
            "{} {} {} {} {} {}\n",
            a.center.x, a.center.y, a.center.z, a.scale.x, a.scale.y, a.scale.z
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

/// Read an ASCII PLY point cloud; the first three double/float vertex
/// properties are taken as x y z.
pub fn read_ply(path: &Path) -> Result<PointCloud, DatakitError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, msg: String| DatakitError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate();

    let mut vertex_count: Option<usize> = None;
    let mut in_header = true;
    let mut header_lines = 0;
    let mut saw_magic = false;
    for (idx, line) in lines.by_ref() {
        let line = line.map_err(|e| io_err(path, e))?;
        let lineno = idx + 1;
        header_lines = lineno;
        let trimmed = line.trim();
        if lineno == 1 {
            if trimmed != "ply" {
                return Err(parse_err(lineno, "missing ply magic".into()));
            }
            saw_magic = true;
            continue;
        }
        if trimmed.starts_with("element vertex") {
            let count = trimmed
                .split_whitespace()
                .nth(2)
                .ok_or_else(|| parse_err(lineno, "element vertex without count".into()))?;
            vertex_count = Some(
                count
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad vertex count '{count}'")))?,
            );
        } else if trimmed == "end_header" {
            in_header = false;
            break;
        }
    }
    if !saw_magic || in_header {
        return Err(parse_err(header_lines, "truncated header".into()));
    }
    let expected =
        vertex_count.ok_or_else(|| parse_err(header_lines, "no element vertex line".into()))?;

    let mut points = Vec::with_capacity(expected);
    for (idx, line) in lines {
        if points.len() == expected {
            break;
        }
        let line = line.map_err(|e| io_err(path, e))?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut it = trimmed.split_whitespace();
        let mut coord = [0.0; 3];
        for (c, slot) in coord.iter_mut().enumerate() {
            let tok = it
                .next()
                .ok_or_else(|| parse_err(lineno, format!("vertex needs 3 coords, got {c}")))?;
            *slot = tok
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad coordinate '{tok}'")))?;
        }
        points.push(Vector3::new(coord[0], coord[1], coord[2]));
    }
    if points.len() != expected {
        return Err(parse_err(
            0,
            format!("expected {expected} vertices, found {}", points.len()),
        ));
    }
    Ok(PointCloud::new(points))
}

/// Write a trajectory in TUM format: `timestamp tx ty tz qx qy qz qw`,
/// camera-to-world convention, shortest-round-trip float formatting.
pub fn write_tum(stamped: &[(f64, CameraPose)], path: &Path) -> Result<(), DatakitError> {
    let mut text = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (ts, pose) in stamped {
        let (c, q) = pose.to_cam_to_world();
        text.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            ts, c.x, c.y, c.z, q[0], q[1], q[2], q[3]
        ));
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Read a TUM-format trajectory. `#` lines are comments; parse errors
/// carry the line number.
pub fn read_tum(path: &Path) -> Result<Vec<(f64, CameraPose)>, DatakitError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(DatakitError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 8];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f.parse().map_err(|_| DatakitError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("bad number '{f}'"),
            })?;
        }
        let center = Vector3::new(vals[1], vals[2], vals[3]);
        let q = [vals[4], vals[5], vals[6], vals[7]];
        out.push((vals[0], CameraPose::from_cam_to_world(&center, &q)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn smoke_preset_is_valid_and_deterministic() {
        let scene = SyntheticScene::smoke_preset();
        scene.validate().unwrap();
        let a = generate(&scene, 7).unwrap();
        let b = generate(&scene, 7).unwrap();
        assert_eq!(a.frames.len(), 10);
        assert_eq!(a.keyframes().count(), 8);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.image.data, fb.image.data);
        }
        assert_eq!(a.cloud.points, b.cloud.points);
        // Different seed moves the cloud but not the renders.
        let c = generate(&scene, 8).unwrap();
        assert_ne!(a.cloud.points, c.cloud.points);
        assert_eq!(a.frames[0].image.data, c.frames[0].image.data);
    }

    #[test]
    fn appearance_gains_match_formula() {
        let scene = SyntheticScene::smoke_appearance_preset();
        let data = generate(&scene, 1).unwrap();
        let spec = scene.appearance.as_ref().unwrap();
        for (i, frame) in data.frames.iter().enumerate() {
            let want =
                1.0 + spec.amplitude * (spec.frequency * scene.heading(i) + spec.phase).sin();
            assert_eq!(frame.gain, want);
        }
        // The stored image is the unmodulated render times the gain.
        let plain = SyntheticScene {
            appearance: None,
            ..scene.clone()
        };
        let base = plain.render_view(0);
        for (a, b) in data.frames[0].image.data.iter().zip(&base.data) {
            assert!((a - b * data.frames[0].gain).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_round_trip_bitwise() {
        let scene = SyntheticScene::smoke_preset();
        let dir = tempdir().unwrap();
        let a = generate_to_dir(&scene, 3, dir.path()).unwrap();
        let b = Dataset::load(dir.path()).unwrap();
        assert_eq!(a.frames.len(), b.frames.len());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            // Saved images are 8-bit quantized; the loaded values are the
            // quantized ones.
            for (va, vb) in fa.image.data.iter().zip(&fb.image.data) {
                assert!((va - vb).abs() <= 0.5 / 255.0 + 1e-12);
            }
            assert!((fa.pose.rotation - fb.pose.rotation).norm() < 1e-12);
            assert!((fa.pose.translation - fb.pose.translation).norm() < 1e-12);
            assert_eq!(fa.is_keyframe, fb.is_keyframe);
            assert_eq!(fa.gain, fb.gain);
        }
        assert_eq!(a.cloud.points, b.cloud.points);

        // Regeneration writes bitwise-identical files.
        let dir2 = tempdir().unwrap();
        generate_to_dir(&scene, 3, dir2.path()).unwrap();
        for name in ["poses.txt", "cloud.ply", "meta.json", "images/0000.png"] {
            let x = fs::read(dir.path().join(name)).unwrap();
            let y = fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs between runs");
        }
    }

    #[test]
    fn png_round_trip_exact_at_quantization() {
        let dir = tempdir().unwrap();
        let mut img = ImageBuf::zeros(9, 5);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 7) % 256) as f64 / 255.0;
        }
        let path = dir.path().join("t.png");
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(img.data, back.data);
    }

    #[test]
    fn ply_round_trip_and_empty() {
        let dir = tempdir().unwrap();
        let cloud = PointCloud::new(vec![
            Vector3::new(0.125, -3.5, 1e-9),
            Vector3::new(1.0 / 3.0, 2.0, -7.25),
        ]);
        let path = dir.path().join("c.ply");
        write_ply(&cloud, &path).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(cloud.points, back.points);

        let empty = dir.path().join("e.ply");
        write_ply(&PointCloud::default(), &empty).unwrap();
        assert!(read_ply(&empty).unwrap().is_empty());
    }

    #[test]
    fn ply_parse_error_carries_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nend_header\n0.0 oops 1.0\n",
        )
        .unwrap();
        match read_ply(&path) {
            Err(DatakitError::Parse { line, .. }) => assert_eq!(line, 8),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn tum_round_trip_exact() {
        let dir = tempdir().unwrap();
        let scene = SyntheticScene::smoke_preset();
        let stamped: Vec<(f64, CameraPose)> =
            (0..6).map(|i| (i as f64 * 0.1, scene.pose(i))).collect();
        let path = dir.path().join("traj.txt");
        write_tum(&stamped, &path).unwrap();
        let back = read_tum(&path).unwrap();
        assert_eq!(back.len(), stamped.len());
        for ((t0, p0), (t1, p1)) in stamped.iter().zip(&back) {
            assert_eq!(t0, t1);
            assert!((p0.rotation - p1.rotation).norm() < 1e-12);
            assert!((p0.translation - p1.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn tum_parse_error_carries_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        fs::write(&path, "# header\n0.0 1 2 3 0 0 0 1\n0.1 1 2 3 0 0\n").unwrap();
        match read_tum(&path) {
            Err(DatakitError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ba_instance_truth_is_consistent() {
        let (problem, truth) = make_ba_instance(4, 30, 0.0, 0.0, 11).unwrap();
        problem.validate().unwrap();
        assert!(truth.outlier_flags.iter().all(|f| !f));
        for obs in &problem.observations {
            let pred = reproject(
                &truth.poses[obs.pose_id],
                &truth.points[obs.point_id],
                &problem.camera,
            )
            .unwrap();
            assert_eq!(pred, obs.pixel, "noiseless residual must be exactly zero");
        }
    }

    #[test]
    fn ba_instance_outlier_count_exact() {
        let (problem, truth) = make_ba_instance(2, 50, 0.5, 0.2, 5).unwrap();
        assert_eq!(problem.observations.len(), 100);
        assert_eq!(truth.outlier_flags.iter().filter(|f| **f).count(), 20);
    }

    #[test]
    fn visible_indices_sane() {
        let scene = SyntheticScene::smoke_preset();
        let data = generate(&scene, 2).unwrap();
        let vis = visible_indices(&data.cloud, &data.frames[0].pose, &data.camera);
        assert!(!vis.is_empty());
        assert!(vis.len() <= data.cloud.len());
    }
}
