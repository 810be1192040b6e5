//! Image metrics, trajectory recovery and camera-error metrics.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{interpolate_pose, pixel_of, rotation_angle, CameraIntrinsics, CameraPose, ConfidentPointCloud};
use crate::latentcodec::Video;
use crate::scenegen::SceneSample;

pub const PSNR_CAP: f64 = 99.0;
/// Frames whose best fit leaves a larger mean squared error are flagged.
pub const RESIDUAL_THRESHOLD: f64 = 0.03;
const COARSE_STEPS: usize = 64;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("trajectory lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty trajectory")]
    Empty,
    #[error("video shape {0:?} does not match scene {1:?}")]
    Shape([usize; 3], [usize; 3]),
}

/// `10·log10(1/MSE)`, capped.
pub fn psnr(pred: &[f32], gt: &[f32]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "psnr: length mismatch");
    let mse = pred.iter().zip(gt).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / pred.len().max(1) as f64;
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Mean SSIM over 8×8 stride-1 uniform windows and the three channels of
/// an `H×W×3` image. Images smaller than 8 use a single full-size window.
pub fn ssim(pred: &[f32], gt: &[f32], height: usize, width: usize) -> f64 {
    assert_eq!(pred.len(), height * width * 3, "ssim: pred size");
    assert_eq!(gt.len(), pred.len(), "ssim: gt size");
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let (wh, ww) = (height.min(8), width.min(8));
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        for y0 in 0..=height - wh {
            for x0 in 0..=width - ww {
                let (mut sx, mut sy) = (0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let i = (y * width + x) * 3 + ch;
                        sx += pred[i] as f64;
                        sy += gt[i] as f64;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let i = (y * width + x) * 3 + ch;
                        let (dx, dy) = (pred[i] as f64 - mx, gt[i] as f64 - my);
                        vx += dx * dx;
                        vy += dy * dy;
                        cxy += dx * dy;
                    }
                }
                let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
                total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Poses relative to the first camera: `P_i ∘ P_0⁻¹`.
pub fn relative_to_first(poses: &[CameraPose]) -> Vec<CameraPose> {
    match poses.first() {
        None => vec![],
        Some(first) => {
            let inv = first.inverse();
            poses.iter().map(|p| p.compose(&inv)).collect()
        }
    }
}

fn check_lengths(pred: &[CameraPose], gt: &[CameraPose]) -> Result<(), EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::Length(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn translation_errors(pred: &[CameraPose], gt: &[CameraPose]) -> Result<Vec<f64>, EvalError> {
    check_lengths(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(a, b)| (a.translation() - b.translation()).norm()).collect())
}

pub fn rotation_errors(pred: &[CameraPose], gt: &[CameraPose]) -> Result<Vec<f64>, EvalError> {
    check_lengths(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(a, b)| rotation_angle(a.rotation(), b.rotation())).collect())
}

/// `E_t = (1/N)·Σ‖t_pred − t_gt‖`.
pub fn translation_error(pred: &[CameraPose], gt: &[CameraPose]) -> Result<f64, EvalError> {
    let e = translation_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// `E_r = (1/N)·Σ arccos((tr(R_pred·R_gtᵀ) − 1)/2)`, argument clamped.
pub fn rotation_error(pred: &[CameraPose], gt: &[CameraPose]) -> Result<f64, EvalError> {
    let e = rotation_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Splats only colours, with the same z-buffer rule as the projector.
fn render_rgb(cloud: &ConfidentPointCloud, pose: &CameraPose, intr: &CameraIntrinsics, rgb: &mut [f32], depth: &mut [f64]) {
    rgb.fill(0.0);
    depth.fill(f64::INFINITY);
    for (p, c) in cloud.positions().iter().zip(cloud.colors()) {
        let q = pose.apply(p);
        if let Some((x, y)) = pixel_of(intr, &q) {
            let k = y * intr.width + x;
            if q.z < depth[k] {
                depth[k] = q.z;
                rgb[3 * k..3 * k + 3].copy_from_slice(c);
            }
        }
    }
}

/// `[1 2 1]/4` separable blur with clamped borders.
fn blur(img: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut tmp = vec![0.0f32; img.len()];
    let mut out = vec![0.0f32; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (l, r) = (x.saturating_sub(1), (x + 1).min(w - 1));
            for c in 0..3 {
                tmp[(y * w + x) * 3 + c] =
                    0.25 * img[(y * w + l) * 3 + c] + 0.5 * img[(y * w + x) * 3 + c] + 0.25 * img[(y * w + r) * 3 + c];
            }
        }
    }
    for y in 0..h {
        let (u, d) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            for c in 0..3 {
                out[(y * w + x) * 3 + c] =
                    0.25 * tmp[(u * w + x) * 3 + c] + 0.5 * tmp[(y * w + x) * 3 + c] + 0.25 * tmp[(d * w + x) * 3 + c];
            }
        }
    }
    out
}

struct Fitter<'a> {
    cloud: &'a ConfidentPointCloud,
    intr: &'a CameraIntrinsics,
    target: Vec<f32>,
    rgb: Vec<f32>,
    depth: Vec<f64>,
}

impl Fitter<'_> {
    fn cost(&mut self, pose: &CameraPose) -> f64 {
        render_rgb(self.cloud, pose, self.intr, &mut self.rgb, &mut self.depth);
        let b = blur(&self.rgb, self.intr.height, self.intr.width);
        b.iter().zip(&self.target).map(|(&a, &t)| (a as f64 - t as f64).powi(2)).sum::<f64>() / b.len() as f64
    }
}

fn perturb(base: &CameraPose, delta: &[f64; 6]) -> CameraPose {
    let axis = Vector3::new(delta[0], delta[1], delta[2]);
    let angle = axis.norm();
    let dr = if angle > 0.0 {
        CameraPose::from_axis_angle(&axis, angle, Vector3::new(delta[3], delta[4], delta[5]))
    } else {
        CameraPose::from_axis_angle(&Vector3::z(), 0.0, Vector3::new(delta[3], delta[4], delta[5]))
    };
    dr.compose(base)
}

/// Recovered camera for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFit {
    pub pose: CameraPose,
    /// Interpolation parameter of the coarse match.
    pub s: f64,
    /// Mean squared photometric error of the final pose, unblurred.
    pub residual: f64,
    pub unreliable: bool,
}

/// Photometric pose fit of every frame against renders of the clean cloud.
///
/// A coarse search over `s ∈ {k/64}` along the endpoint interpolation (ties
/// go to the smaller `s`) is followed by coordinate descent over a 6-DoF
/// perturbation in the camera frame. Costs compare blurred images.
pub fn recover_trajectory(frames: &Video, scene: &SceneSample) -> Result<Vec<FrameFit>, EvalError> {
    let intr = &scene.intrinsics;
    let got = [frames.frames, frames.height, frames.width];
    let want = [scene.poses.len(), intr.height, intr.width];
    if got != want {
        return Err(EvalError::Shape(got, want));
    }
    let (first, last) = (scene.poses[0], scene.poses[scene.poses.len() - 1]);
    let n = intr.width * intr.height;
    let mut fits = Vec::with_capacity(frames.frames);
    for t in 0..frames.frames {
        let frame = frames.frame(t);
        let mut fit = Fitter {
            cloud: &scene.clean_cloud,
            intr,
            target: blur(frame, intr.height, intr.width),
            rgb: vec![0.0; 3 * n],
            depth: vec![0.0; n],
        };
        let (mut best_s, mut best_pose, mut best) = (0.0, first, f64::INFINITY);
        for k in 0..=COARSE_STEPS {
            let s = k as f64 / COARSE_STEPS as f64;
            let pose = interpolate_pose(&first, &last, s);
            let c = fit.cost(&pose);
            if c < best {
                (best_s, best_pose, best) = (s, pose, c);
            }
        }
        let mut delta = [0.0f64; 6];
        let mut steps = [0.02, 0.02, 0.02, 0.05, 0.05, 0.05];
        for _ in 0..6 {
            let mut improved = true;
            let mut sweeps = 0;
            while improved && sweeps < 40 && best > 0.0 {
                improved = false;
                sweeps += 1;
                for i in 0..6 {
                    for sign in [1.0, -1.0] {
                        let mut d = delta;
                        d[i] += sign * steps[i];
                        let c = fit.cost(&perturb(&best_pose, &d));
                        if c < best {
                            best = c;
                            delta = d;
                            improved = true;
                            break;
                        }
                    }
                }
            }
            steps.iter_mut().for_each(|s| *s *= 0.5);
        }
        let pose = perturb(&best_pose, &delta);
        render_rgb(&scene.clean_cloud, &pose, intr, &mut fit.rgb, &mut fit.depth);
        let residual = fit.rgb.iter().zip(frame).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / (3 * n) as f64;
        let lit = frame.iter().filter(|&&v| v > 0.0).count() as f64 / frame.len() as f64;
        fits.push(FrameFit { pose, s: best_s, residual, unreliable: residual > RESIDUAL_THRESHOLD || lit < 0.01 });
    }
    Ok(fits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePoseError {
    pub frame: usize,
    pub translation: f64,
    pub rotation: f64,
    pub residual: f64,
    pub unreliable: bool,
}

/// Metrics for one generated video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scene: String,
    pub psnr: Vec<f64>,
    pub psnr_mean: f64,
    /// Mean over frames strictly between the endpoints.
    pub psnr_intermediate: f64,
    pub ssim: Vec<f64>,
    pub ssim_mean: f64,
    pub ssim_intermediate: f64,
    pub e_t: f64,
    pub e_r: f64,
    pub per_frame_pose_errors: Vec<FramePoseError>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn evaluate_video(name: &str, video: &Video, scene: &SceneSample) -> Result<EvalReport, EvalError> {
    let gt = &scene.frames;
    if [video.frames, video.height, video.width] != [gt.frames, gt.height, gt.width] {
        return Err(EvalError::Shape([video.frames, video.height, video.width], [gt.frames, gt.height, gt.width]));
    }
    let t = gt.frames;
    let psnrs: Vec<f64> = (0..t).map(|i| psnr(video.frame(i), gt.frame(i))).collect();
    let ssims: Vec<f64> = (0..t).map(|i| ssim(video.frame(i), gt.frame(i), gt.height, gt.width)).collect();
    let fits = recover_trajectory(video, scene)?;
    let pred: Vec<CameraPose> = fits.iter().map(|f| f.pose).collect();
    let (pred_rel, gt_rel) = (relative_to_first(&pred), relative_to_first(&scene.poses));
    let te = translation_errors(&pred_rel, &gt_rel)?;
    let re = rotation_errors(&pred_rel, &gt_rel)?;
    let per_frame = (0..t)
        .map(|i| FramePoseError { frame: i, translation: te[i], rotation: re[i], residual: fits[i].residual, unreliable: fits[i].unreliable })
        .collect();
    let inner = 1..t.saturating_sub(1).max(1);
    Ok(EvalReport {
        scene: name.to_string(),
        psnr_mean: mean(&psnrs),
        psnr_intermediate: mean(&psnrs[inner.clone()]),
        ssim_mean: mean(&ssims),
        ssim_intermediate: mean(&ssims[inner]),
        psnr: psnrs,
        ssim: ssims,
        e_t: mean(&te),
        e_r: mean(&re),
        per_frame_pose_errors: per_frame,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub num_scenes: usize,
    pub psnr_mean: f64,
    pub psnr_intermediate: f64,
    pub ssim_mean: f64,
    pub ssim_intermediate: f64,
    pub e_t: f64,
    pub e_r: f64,
}

impl Aggregate {
    pub fn of(reports: &[EvalReport]) -> Self {
        let pick = |f: fn(&EvalReport) -> f64| mean(&reports.iter().map(f).collect::<Vec<_>>());
        Aggregate {
            num_scenes: reports.len(),
            psnr_mean: pick(|r| r.psnr_mean),
            psnr_intermediate: pick(|r| r.psnr_intermediate),
            ssim_mean: pick(|r| r.ssim_mean),
            ssim_intermediate: pick(|r| r.ssim_intermediate),
            e_t: pick(|r| r.e_t),
            e_r: pick(|r| r.e_r),
        }
    }
}

/// Per-frame translation and rotation error curves of several reports.
pub fn error_curves_svg(reports: &[EvalReport]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let frames = reports.iter().map(|r| r.per_frame_pose_errors.len()).max().unwrap_or(0).max(2);
    let ymax = reports
        .iter()
        .flat_map(|r| r.per_frame_pose_errors.iter().flat_map(|e| [e.translation, e.rotation]))
        .filter(|v| v.is_finite())
        .fold(1e-6f64, f64::max);
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (frames - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v / ymax).clamp(0.0, 1.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{pad}\" y=\"{t}\" font-size=\"12\">max {ymax:.4}</text>\n\
         <text x=\"{r}\" y=\"{bl}\" font-size=\"12\" text-anchor=\"end\">frame</text>\n",
        b = h - pad,
        r = w - pad,
        t = pad - 8.0,
        bl = h - pad + 20.0,
    );
    for (k, rep) in reports.iter().enumerate() {
        let hue = (k * 67) % 360;
        for (dash, get) in [("", (|e: &FramePoseError| e.translation) as fn(&FramePoseError) -> f64), ("4 3", |e| e.rotation)] {
            let pts: Vec<String> = rep
                .per_frame_pose_errors
                .iter()
                .map(|e| format!("{:.2},{:.2}", x(e.frame), y(get(e))))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"hsl({hue},70%,40%)\" stroke-dasharray=\"{dash}\" points=\"{}\"><title>{}</title></polyline>\n",
                pts.join(" "),
                rep.scene
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}
