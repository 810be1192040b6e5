//! Rectified-flow training and sampling.

use std::time::Instant;

use autograd::{Graph, NodeId, Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Conditioning, KalmanDit, ModelError, ModelInput, ParamStore};
use crate::geometry::{plucker_embedding, project_point_cloud};
use crate::latentcodec::{encode, resize_latent, CodecError, LatentVideo, Video};
use crate::optim::Adam;
use crate::rng::stream;
use crate::scenegen::SceneSample;

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at step {step} (rf {rf}, grad {grad})")]
    NonFiniteLoss { step: u64, rf: f64, grad: f64 },
    #[error("non-finite velocity at t = {0}")]
    NonFiniteVelocity(f64),
    #[error("invalid flow config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_grad: f64,
    pub sample_steps: usize,
    pub learning_rate: f64,
    pub train_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight the prior by projected confidence; off means `w ≡ 1`.
    pub confidence_weighting: bool,
    /// Divide `z_0` by `sqrt(λ₁² + λ₂²)`.
    pub renormalize_init: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda_grad: 0.05,
            sample_steps: 50,
            learning_rate: 1e-4,
            train_steps: 1000,
            batch_size: 1,
            seed: 0,
            confidence_weighting: true,
            renormalize_init: false,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda_grad >= 0.0) {
            return Err(FlowError::Config("lambda1, lambda2 and lambda_grad must be >= 0".into()));
        }
        if self.sample_steps == 0 {
            return Err(FlowError::Config("sample_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(FlowError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(FlowError::Config("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Everything the flow needs from one scene, in latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    /// Clean latent `z_1`.
    pub z1: LatentVideo,
    /// Projected noisy point cloud `ẑ_pc`.
    pub z_pc: LatentVideo,
    /// Projected confidence on the latent grid, one channel.
    pub w: LatentVideo,
    pub cond: Conditioning,
}

impl TrainingExample {
    pub fn from_scene(scene: &SceneSample, patch: usize) -> Result<Self, FlowError> {
        let (t, h, w) = (scene.frames.frames, scene.frames.height, scene.frames.width);
        let z1 = encode(&scene.frames, patch)?;
        let mut prior = Video::zeros(t, h, w);
        let mut conf = LatentVideo::zeros(t, 1, h, w, 1);
        for (i, pose) in scene.poses.iter().enumerate() {
            let frame = project_point_cloud(&scene.noisy_cloud, pose, &scene.intrinsics);
            for (dst, rgb) in prior.frame_mut(i).chunks_mut(3).zip(&frame.rgb) {
                dst.copy_from_slice(rgb);
            }
            conf.frame_mut(i).copy_from_slice(&frame.conf);
        }
        let z_pc = encode(&prior, patch)?;
        let mut w_lat = resize_latent(&conf, t, z1.height, z1.width);
        w_lat.patch = patch;
        w_lat.source = z1.source;
        let plucker: Vec<_> = scene.poses.iter().map(|p| plucker_embedding(p, &scene.intrinsics)).collect();
        let cond = Conditioning::new(z1.clone(), z_pc.clone(), &plucker);
        Ok(TrainingExample { z1, z_pc, w: w_lat, cond })
    }
}

pub fn gaussian_like(z: &LatentVideo, seed: u64, tag: &str) -> LatentVideo {
    let mut rng = stream(seed, tag);
    z.with_data((0..z.data.len()).map(|_| StandardNormal.sample(&mut rng)).collect())
}

/// `z_0 = λ₁·(w ⊙ ẑ_pc) + λ₂·ε`, with `w` broadcast over channels.
pub fn confidence_init(z_pc: &LatentVideo, w: &LatentVideo, noise: &LatentVideo, cfg: &FlowConfig) -> Result<LatentVideo, FlowError> {
    z_pc.same_shape(noise).map_err(|e| FlowError::Shape(format!("noise: {e}")))?;
    let [t, c, h, wd] = z_pc.shape();
    if w.frames != t || w.height != h || w.width != wd || (w.channels != 1 && w.channels != c) {
        return Err(FlowError::Shape(format!("confidence {:?} vs latent {:?}", w.shape(), z_pc.shape())));
    }
    let (l1, l2) = (cfg.lambda1 as f32, cfg.lambda2 as f32);
    let norm = (cfg.lambda1.powi(2) + cfg.lambda2.powi(2)).sqrt() as f32;
    let renormalize = cfg.renormalize_init && norm > 0.0;
    let plane = h * wd;
    let mut out = z_pc.clone();
    for (i, o) in out.data.iter_mut().enumerate() {
        let wi = if !cfg.confidence_weighting {
            1.0
        } else if w.channels == 1 {
            let (f, k) = (i / (c * plane), i % plane);
            w.data[f * plane + k]
        } else {
            w.data[i]
        };
        let z = l1 * (wi * z_pc.data[i]) + l2 * noise.data[i];
        *o = if renormalize { z / norm } else { z };
    }
    Ok(out)
}

/// `z_t = (1 − t)·z_0 + t·z_1`.
pub fn rf_interpolate(z0: &LatentVideo, z1: &LatentVideo, t: f64) -> Result<LatentVideo, FlowError> {
    z0.same_shape(z1).map_err(|e| FlowError::Shape(e.to_string()))?;
    let t = t as f32;
    Ok(z0.with_data(z0.data.iter().zip(&z1.data).map(|(&a, &b)| (1.0 - t) * a + t * b).collect()))
}

fn check_same(a: &LatentVideo, b: &LatentVideo) -> Result<(), FlowError> {
    a.same_shape(b).map_err(|e| FlowError::Shape(e.to_string()))
}

/// `mean((v − (z_1 − z_0))²)`.
pub fn rf_loss(v: &LatentVideo, z0: &LatentVideo, z1: &LatentVideo) -> Result<f64, FlowError> {
    check_same(v, z0)?;
    check_same(v, z1)?;
    let total: f64 = v.data.iter().zip(&z0.data).zip(&z1.data).map(|((&v, &a), &b)| {
        let e = v as f64 - (b - a) as f64;
        e * e
    }).sum();
    Ok(total / v.data.len() as f64)
}

/// Mean absolute mismatch of forward differences along width and height.
pub fn grad_reg_loss(v: &LatentVideo, target: &LatentVideo) -> Result<f64, FlowError> {
    check_same(v, target)?;
    let (h, w) = (v.height, v.width);
    let planes = v.frames * v.channels;
    let (mut gx, mut gy) = (0.0f64, 0.0f64);
    for p in 0..planes {
        let a = &v.data[p * h * w..(p + 1) * h * w];
        let b = &target.data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    gx += ((a[i + 1] as f64 - a[i] as f64) - (b[i + 1] as f64 - b[i] as f64)).abs();
                }
                if y + 1 < h {
                    gy += ((a[i + w] as f64 - a[i] as f64) - (b[i + w] as f64 - b[i] as f64)).abs();
                }
            }
        }
    }
    let nx = (planes * h * w.saturating_sub(1)).max(1) as f64;
    let ny = (planes * h.saturating_sub(1) * w).max(1) as f64;
    Ok(gx / nx + gy / ny)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rf: f64,
    pub grad: f64,
    pub total: f64,
}

/// `rf + λ_grad·grad` against the target `z_1 − z_0`.
pub fn total_loss(v: &LatentVideo, z0: &LatentVideo, z1: &LatentVideo, cfg: &FlowConfig) -> Result<LossParts, FlowError> {
    let rf = rf_loss(v, z0, z1)?;
    let target = z0.with_data(z0.data.iter().zip(&z1.data).map(|(&a, &b)| b - a).collect());
    let grad = grad_reg_loss(v, &target)?;
    Ok(LossParts { rf, grad, total: rf + cfg.lambda_grad * grad })
}

/// One element of a training batch.
#[derive(Clone, Debug)]
pub struct TrainItem<'a> {
    pub example: &'a TrainingExample,
    pub t: f64,
    pub noise: LatentVideo,
}

/// Batch for `step`: examples, times and noise all keyed by `(seed, step)`.
pub fn draw_batch<'a>(examples: &'a [TrainingExample], cfg: &FlowConfig, step: u64) -> Vec<TrainItem<'a>> {
    let mut rng = stream(cfg.seed, &format!("batch/{step}"));
    (0..cfg.batch_size)
        .map(|i| {
            let example = &examples[rng.random_range(0..examples.len())];
            let t = rng.random_range(0.0..=1.0);
            let noise = gaussian_like(&example.z1, cfg.seed, &format!("noise/{step}/{i}"));
            TrainItem { example, t, noise }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub rf: NodeId,
    pub grad: NodeId,
    pub total: NodeId,
}

/// Builds `L_total` for a batch on `g`.
pub fn build_loss<F: Real>(
    model: &KalmanDit,
    g: &mut Graph<F>,
    params: &ParamStore<F>,
    items: &[TrainItem],
    cfg: &FlowConfig,
) -> Result<LossNodes, FlowError> {
    let mut z0s = Vec::with_capacity(items.len());
    let mut zts = Vec::with_capacity(items.len());
    for item in items {
        let ex = item.example;
        let z0 = confidence_init(&ex.z_pc, &ex.w, &item.noise, cfg)?;
        zts.push(rf_interpolate(&z0, &ex.z1, item.t)?);
        z0s.push(z0);
    }
    let inputs: Vec<ModelInput> = items
        .iter()
        .zip(&zts)
        .map(|(item, z_t)| ModelInput { z_t, t: item.t, cond: &item.example.cond })
        .collect();
    let v = model.forward_graph(g, params, &inputs)?;
    let shape = g.shape(v).to_vec();
    let target: Vec<f32> = items
        .iter()
        .zip(&z0s)
        .flat_map(|(item, z0)| item.example.z1.data.iter().zip(&z0.data).map(|(&b, &a)| b - a).collect::<Vec<_>>())
        .collect();
    let target = g.constant(Tensor::<f32>::new(&shape, target).cast());
    let diff = g.sub(v, target);
    let sq = g.sqr(diff);
    let rf = g.mean(sq);
    let dx = g.diff_w(diff);
    let dy = g.diff_h(diff);
    let (dx, dy) = (g.abs(dx), g.abs(dy));
    let (mx, my) = (g.mean(dx), g.mean(dy));
    let grad = g.add(mx, my);
    let total = if cfg.lambda_grad == 0.0 {
        rf
    } else {
        let scaled = g.scale(grad, cfg.lambda_grad);
        g.add(rf, scaled)
    };
    Ok(LossNodes { rf, grad, total })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub rf_loss: f64,
    pub grad_loss: f64,
    pub total: f64,
    pub wall_ms: f64,
}

/// One Adam step on `L_total`. `step` is the index of this step.
pub fn train_step(
    model: &KalmanDit,
    params: &mut ParamStore<f32>,
    opt: &mut Adam,
    items: &[TrainItem],
    cfg: &FlowConfig,
    step: u64,
) -> Result<StepRecord, FlowError> {
    let start = Instant::now();
    let mut g = Graph::new();
    let nodes = build_loss(model, &mut g, params, items, cfg)?;
    let rf = g.value(nodes.rf).item() as f64;
    let grad = g.value(nodes.grad).item() as f64;
    let total = g.value(nodes.total).item() as f64;
    if !total.is_finite() {
        return Err(FlowError::NonFiniteLoss { step, rf, grad });
    }
    let grads = g.backward(nodes.total);
    opt.lr = cfg.learning_rate;
    opt.update(params, &grads);
    Ok(StepRecord { step, rf_loss: rf, grad_loss: grad, total, wall_ms: start.elapsed().as_secs_f64() * 1e3 })
}

pub trait VelocityField {
    fn velocity(&self, z: &LatentVideo, t: f64) -> Result<LatentVideo, FlowError>;
}

impl<F: Fn(&LatentVideo, f64) -> LatentVideo> VelocityField for F {
    fn velocity(&self, z: &LatentVideo, t: f64) -> Result<LatentVideo, FlowError> {
        Ok(self(z, t))
    }
}

/// The network with its conditioning bound.
pub struct ModelField<'a> {
    pub model: &'a KalmanDit,
    pub params: &'a ParamStore<f32>,
    pub cond: &'a Conditioning,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, z: &LatentVideo, t: f64) -> Result<LatentVideo, FlowError> {
        Ok(self.model.forward(self.params, z, t, self.cond)?)
    }
}

/// Frames pinned to the straight path from `start` to `target`.
#[derive(Clone, Debug)]
pub struct EndpointConstraint<'a> {
    pub frames: Vec<usize>,
    pub target: &'a LatentVideo,
}

/// Explicit Euler from `t = 0` to `1` in `steps` uniform steps.
///
/// The displacement `Σ dt·v` is accumulated in f64 and added to `z_0` once
/// per step, so a constant field lands on `z_0 + c` without drift.
pub fn sample(
    field: &impl VelocityField,
    z0: &LatentVideo,
    steps: usize,
    constraint: Option<&EndpointConstraint>,
) -> Result<LatentVideo, FlowError> {
    if steps == 0 {
        return Err(FlowError::Config("sample needs at least one step".into()));
    }
    if let Some(c) = constraint {
        check_same(z0, c.target)?;
    }
    let plane = z0.frame_len();
    let mut displacement = vec![0.0f64; z0.data.len()];
    let mut z = z0.clone();
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = field.velocity(&z, t)?;
        check_same(&v, z0)?;
        if !v.all_finite() {
            return Err(FlowError::NonFiniteVelocity(t));
        }
        for (d, &vi) in displacement.iter_mut().zip(&v.data) {
            *d += dt * vi as f64;
        }
        for ((o, &a), &d) in z.data.iter_mut().zip(&z0.data).zip(&displacement) {
            *o = a + d as f32;
        }
        if let Some(c) = constraint {
            let s = (k + 1) as f64 / steps as f64;
            for &f in &c.frames {
                let range = f * plane..(f + 1) * plane;
                let (a, b) = (&z0.data[range.clone()], &c.target.data[range.clone()]);
                for (i, o) in z.data[range].iter_mut().enumerate() {
                    *o = ((1.0 - s) * a[i] as f64 + s * b[i] as f64) as f32;
                }
            }
        }
    }
    Ok(z)
}

/// Draws `z_0` for an example and integrates the trained field, pinning the
/// conditioned frames.
pub fn sample_example(
    model: &KalmanDit,
    params: &ParamStore<f32>,
    example: &TrainingExample,
    cfg: &FlowConfig,
    steps: usize,
    seed: u64,
) -> Result<LatentVideo, FlowError> {
    let noise = gaussian_like(&example.z1, seed, "sample-noise");
    let z0 = confidence_init(&example.z_pc, &example.w, &noise, cfg)?;
    let field = ModelField { model, params, cond: &example.cond };
    let constraint = EndpointConstraint { frames: model.config().conditioned_frames(), target: &example.z1 };
    sample(&field, &z0, steps, Some(&constraint))
}
