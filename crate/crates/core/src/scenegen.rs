//! Synthetic multi-view scenes.
//!
//! A scene is a coloured point cloud (a few gaussian blobs over a textured
//! ground slab) seen by `T` cameras interpolated between two endpoint views.
//! Frames are splats of the clean cloud, so re-rendering reproduces them.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    interpolate_pose, pixel_of, project_point_cloud, CameraIntrinsics, CameraPose, ConfidentPointCloud, GeometryError,
};
use crate::latentcodec::Video;
use crate::rng::{derive_seed, stream};

pub const MAX_ATTEMPTS: usize = 16;
pub const MIN_CORRESPONDENCES: usize = 8;
const NUM_TRACKS: usize = 64;
const FOV_X: f64 = 50.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("no valid trajectory after {0} attempts")]
    GenerationFailed(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_points: usize,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub depth_noise_sigma: f64,
    pub conf_sharpness: f64,
    pub trajectory_spread: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            num_points: 8000,
            height: 32,
            width: 32,
            num_frames: 9,
            depth_noise_sigma: 0.05,
            conf_sharpness: 1.0,
            trajectory_spread: 0.6,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.num_frames < 3 || self.num_frames % 2 == 0 {
            return Err(SceneError::Spec(format!("num_frames must be odd and >= 3, got {}", self.num_frames)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(SceneError::Spec(format!("resolution must be at least 8x8, got {}x{}", self.height, self.width)));
        }
        if !(self.depth_noise_sigma >= 0.0 && self.depth_noise_sigma.is_finite()) {
            return Err(SceneError::Spec("depth_noise_sigma must be finite and >= 0".into()));
        }
        if !(self.conf_sharpness > 0.0 && self.conf_sharpness.is_finite()) {
            return Err(SceneError::Spec("conf_sharpness must be positive".into()));
        }
        if !(self.trajectory_spread >= 0.0 && self.trajectory_spread < std::f64::consts::PI) {
            return Err(SceneError::Spec("trajectory_spread must lie in [0, pi)".into()));
        }
        if self.num_points == 0 {
            return Err(SceneError::Spec("num_points must be positive".into()));
        }
        Ok(())
    }
}

/// A world point and where it appears in each frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub point: [f64; 3],
    pub pixels: Vec<Option<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub spec: SceneSpec,
    pub frames: Video,
    pub poses: Vec<CameraPose>,
    pub intrinsics: CameraIntrinsics,
    pub clean_cloud: ConfidentPointCloud,
    pub noisy_cloud: ConfidentPointCloud,
    pub correspondences: Vec<Correspondence>,
}

/// Nearest 8-bit level, kept out of `(0, 0.25)` where the codec is lossy.
pub fn quantize_color(x: f64) -> f32 {
    (x.clamp(0.25, 1.0) * 255.0).round() as f32 / 255.0
}

fn round_f32(p: Vector3<f64>) -> Vector3<f64> {
    p.map(|v| v as f32 as f64)
}

fn uniform3(rng: &mut impl Rng, lo: f64, hi: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi))
}

fn sample_cloud(seed: u64, n: usize) -> ConfidentPointCloud {
    let mut rng = stream(seed, "points");
    let num_blobs = rng.random_range(3..=5);
    let blobs: Vec<(Vector3<f64>, f64, Vector3<f64>)> = (0..num_blobs)
        .map(|_| {
            let mut c = uniform3(&mut rng, -0.7, 0.7);
            c.y = rng.random_range(-0.25..0.45);
            (c, rng.random_range(0.12..0.3), uniform3(&mut rng, 0.3, 1.0))
        })
        .collect();
    let ground = [uniform3(&mut rng, 0.3, 0.7), uniform3(&mut rng, 0.6, 1.0)];
    let n_ground = n * 2 / 5;
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for i in 0..n {
        let (p, c) = if i < n_ground {
            let p: Vector3<f64> = Vector3::new(rng.random_range(-1.1..1.1), rng.random_range(-0.62..-0.55), rng.random_range(-1.1..1.1));
            let cell = ((p.x / 0.35).floor() + (p.z / 0.35).floor()) as i64;
            (p, ground[cell.rem_euclid(2) as usize])
        } else {
            let (center, radius, color) = &blobs[rng.random_range(0..blobs.len())];
            let g: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            let shade = 0.75 + 0.25 * (g.y / 2.0).tanh();
            (center + g * *radius, color * shade)
        };
        let jitter = rng.random_range(-0.04..0.04);
        positions.push(round_f32(p));
        colors.push([0, 1, 2].map(|k| quantize_color(c[k] + jitter)));
    }
    let conf = vec![1.0; n];
    ConfidentPointCloud::new(positions, colors, conf).expect("generated cloud is valid")
}

fn sample_endpoints(seed: u64, spec: &SceneSpec, target: Vector3<f64>) -> Result<(CameraPose, CameraPose), SceneError> {
    let mut rng = stream(seed, "cameras");
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let elevation = rng.random_range(0.3..0.6);
    let dist = rng.random_range(3.0..3.5);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let delta = sign * spec.trajectory_spread * rng.random_range(0.6..1.0);
    let elevation2 = elevation + rng.random_range(-0.1..0.1);
    let dist2 = dist + rng.random_range(-0.2..0.2);
    let eye = |a: f64, e: f64, d: f64| target + Vector3::new(a.cos() * e.cos(), e.sin(), a.sin() * e.cos()) * d;
    let up = Vector3::y();
    Ok((
        CameraPose::look_at(eye(azimuth, elevation, dist), target, up)?,
        CameraPose::look_at(eye(azimuth + delta, elevation2, dist2), target, up)?,
    ))
}

/// Ray-aligned gaussian depth noise with `conf = exp(−sharpness·‖Δ‖/σ)`.
pub fn corrupt_cloud(
    clean: &ConfidentPointCloud,
    sigma: f64,
    sharpness: f64,
    seed: u64,
    origin: &Vector3<f64>,
) -> ConfidentPointCloud {
    if sigma == 0.0 {
        let conf = vec![1.0; clean.len()];
        return ConfidentPointCloud::new(clean.positions().to_vec(), clean.colors().to_vec(), conf).expect("valid cloud");
    }
    let mut rng = stream(seed, "depth-noise");
    let mut positions = Vec::with_capacity(clean.len());
    let mut conf = Vec::with_capacity(clean.len());
    for p in clean.positions() {
        let n: f64 = StandardNormal.sample(&mut rng);
        let ray = (p - origin).try_normalize(1e-12).unwrap_or_else(Vector3::z);
        let delta = ray * (sigma * n);
        positions.push(round_f32(p + delta));
        conf.push((-sharpness * delta.norm() / sigma).exp() as f32);
    }
    ConfidentPointCloud::new(positions, clean.colors().to_vec(), conf).expect("valid cloud")
}

fn in_frustum_fraction(cloud: &ConfidentPointCloud, poses: &[CameraPose], intr: &CameraIntrinsics) -> f64 {
    let inside = cloud
        .positions()
        .iter()
        .filter(|p| poses.iter().all(|pose| pixel_of(intr, &pose.apply(p)).is_some()))
        .count();
    inside as f64 / cloud.len() as f64
}

pub fn render(cloud: &ConfidentPointCloud, poses: &[CameraPose], intr: &CameraIntrinsics) -> Video {
    let mut video = Video::zeros(poses.len(), intr.height, intr.width);
    for (t, pose) in poses.iter().enumerate() {
        let frame = project_point_cloud(cloud, pose, intr);
        for (dst, rgb) in video.frame_mut(t).chunks_mut(3).zip(&frame.rgb) {
            dst.copy_from_slice(rgb);
        }
    }
    video
}

fn track_points(seed: u64, cloud: &ConfidentPointCloud, poses: &[CameraPose], intr: &CameraIntrinsics) -> Vec<Correspondence> {
    let mut rng = stream(seed, "tracks");
    (0..NUM_TRACKS)
        .map(|_| {
            let p = cloud.positions()[rng.random_range(0..cloud.len())];
            let pixels = poses
                .iter()
                .map(|pose| {
                    let q = pose.apply(&p);
                    pixel_of(intr, &q).map(|_| {
                        let (u, v) = intr.project(&q);
                        [u, v]
                    })
                })
                .collect();
            Correspondence { point: [p.x, p.y, p.z], pixels }
        })
        .collect()
}

pub fn make_scene(spec: &SceneSpec) -> Result<SceneSample, SceneError> {
    spec.validate()?;
    let intr = CameraIntrinsics::from_fov(spec.width, spec.height, FOV_X)?;
    let t_count = spec.num_frames;
    for attempt in 0..MAX_ATTEMPTS {
        let sub = if attempt == 0 { spec.seed } else { derive_seed(spec.seed, &format!("retry/{attempt}")) };
        let clean = sample_cloud(sub, spec.num_points);
        let centroid = clean.positions().iter().sum::<Vector3<f64>>() / clean.len() as f64;
        let (first, last) = sample_endpoints(sub, spec, centroid)?;
        let poses: Vec<CameraPose> = (0..t_count)
            .map(|t| interpolate_pose(&first, &last, t as f64 / (t_count - 1) as f64))
            .collect();
        if in_frustum_fraction(&clean, &poses, &intr) < 0.5 {
            continue;
        }
        let correspondences = track_points(sub, &clean, &poses, &intr);
        let enough = (0..t_count).all(|t| correspondences.iter().filter(|c| c.pixels[t].is_some()).count() >= MIN_CORRESPONDENCES);
        if !enough {
            continue;
        }
        let noisy = corrupt_cloud(&clean, spec.depth_noise_sigma, spec.conf_sharpness, sub, &first.center());
        return Ok(SceneSample {
            spec: spec.clone(),
            frames: render(&clean, &poses, &intr),
            poses,
            intrinsics: intr,
            clean_cloud: clean,
            noisy_cloud: noisy,
            correspondences,
        });
    }
    Err(SceneError::GenerationFailed(MAX_ATTEMPTS))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SceneSpec {
        SceneSpec { seed, num_points: 1500, height: 16, width: 16, num_frames: 5, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        let a = make_scene(&small(3)).unwrap();
        let b = make_scene(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.frames, make_scene(&small(4)).unwrap().frames);
    }

    #[test]
    fn zero_noise_keeps_clean_cloud() {
        let s = make_scene(&SceneSpec { depth_noise_sigma: 0.0, ..small(5) }).unwrap();
        assert_eq!(s.noisy_cloud, s.clean_cloud);
        assert!(s.clean_cloud.confidence().iter().all(|&c| c == 1.0));
    }

    #[test]
    fn middle_pose_is_half_way() {
        let s = make_scene(&small(6)).unwrap();
        let t = s.poses.len();
        assert_eq!(s.poses[(t - 1) / 2], interpolate_pose(&s.poses[0], &s.poses[t - 1], 0.5));
    }

    #[test]
    fn frames_match_rerender_and_codec_domain() {
        let s = make_scene(&small(7)).unwrap();
        assert_eq!(render(&s.clean_cloud, &s.poses, &s.intrinsics), s.frames);
        assert!(s.frames.data.iter().all(|&x| x == 0.0 || (0.25..=1.0).contains(&x)));
    }

    #[test]
    fn enough_correspondences_per_frame() {
        let s = make_scene(&small(8)).unwrap();
        for t in 0..s.poses.len() {
            let n = s.correspondences.iter().filter(|c| c.pixels[t].is_some()).count();
            assert!(n >= MIN_CORRESPONDENCES);
        }
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(make_scene(&SceneSpec { num_frames: 4, ..small(0) }).is_err());
        assert!(make_scene(&SceneSpec { height: 4, ..small(0) }).is_err());
        assert!(make_scene(&SceneSpec { depth_noise_sigma: -1.0, ..small(0) }).is_err());
    }

    #[test]
    fn zero_perturbation_has_full_confidence() {
        let clean = ConfidentPointCloud::new(vec![Vector3::new(0.0, 0.0, 1.0)], vec![[1.0; 3]], vec![1.0]).unwrap();
        let same = corrupt_cloud(&clean, 0.0, 2.0, 1, &Vector3::zeros());
        assert_eq!(same, clean);
        // a positive sigma still maps a zero offset to exp(0) = 1
        assert_eq!((-2.0f64 * 0.0 / 0.1).exp() as f32, 1.0);
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }

    #[test]
    fn confidence_tracks_error() {
        let n = 10_000;
        let mut rng = stream(11, "cloud");
        let pos: Vec<_> = (0..n).map(|_| uniform3(&mut rng, -1.0, 1.0) + Vector3::new(0.0, 0.0, 4.0)).collect();
        let clean = ConfidentPointCloud::new(pos, vec![[0.5; 3]; n], vec![1.0; n]).unwrap();
        let noisy = corrupt_cloud(&clean, 0.1, 1.0, 12, &Vector3::zeros());
        let err: Vec<f64> = clean.positions().iter().zip(noisy.positions()).map(|(a, b)| (a - b).norm()).collect();
        let conf: Vec<f64> = noisy.confidence().iter().map(|&c| c as f64).collect();
        let (re, rc) = (ranks(&err), ranks(&conf));
        let mean = (n as f64 - 1.0) / 2.0;
        let cov: f64 = re.iter().zip(&rc).map(|(a, b)| (a - mean) * (b - mean)).sum();
        let var: f64 = re.iter().map(|a| (a - mean).powi(2)).sum();
        assert!(cov / var < -0.9, "spearman {}", cov / var);
    }
}
