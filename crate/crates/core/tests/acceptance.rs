//! Acceptance suite: one check per criterion, each printing a PASS/FAIL line.
//!
//! Runs with a custom harness so the lines show up in plain `cargo test`
//! output. `ACCEPTANCE_ONLY=3,5` restricts the run to a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use autograd::Graph;
use confflow::backbone::{Conditioning, Init, KalmanDit, ModelConfig, ParamSpec, ParamStore};
use confflow::eval::{relative_to_first, rotation_error, translation_error};
use confflow::flow::{
    build_loss, confidence_init, gaussian_like, grad_reg_loss, rf_interpolate, rf_loss, sample, total_loss, EndpointConstraint, FlowConfig,
    TrainItem, TrainingExample,
};
use confflow::geometry::{
    kabsch_align, plucker_embedding, project_point_cloud, rotation_angle, CameraIntrinsics, CameraPose, ConfidentPointCloud, NEAR_PLANE,
};
use confflow::latentcodec::LatentVideo;
use confflow::pipeline::{self, examples_of, run_seed, run_variant, sample_scenes, train_loop, RunConfig, TrainState, Variant};
use confflow::rng::{derive_seed, stream};
use confflow::scenegen::{make_scene, SceneSample, SceneSpec};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_latent(rng: &mut ChaCha8Rng, t: usize, c: usize, h: usize, w: usize, patch: usize) -> LatentVideo {
    let mut z = LatentVideo::zeros(t, c, h, w, patch);
    z.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    z
}

fn random_conditioning(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Conditioning {
    let (t, c, h, w, p) = (cfg.frames, cfg.latent_channels, cfg.latent_height, cfg.latent_width, cfg.patch_size);
    Conditioning {
        endpoints: random_latent(rng, t, c, h, w, p),
        point_cloud: random_latent(rng, t, c, h, w, p),
        rays: random_latent(rng, t, 6, h * p, w * p, 1),
    }
}

fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    CameraPose::from_axis_angle(&axis, rng.random_range(-3.0..3.0), t)
}

/// Fresh Kalman blocks inside a randomized backbone leave its output unchanged.
fn crit_1() -> Outcome {
    let start = Instant::now();
    let with_k = ModelConfig::default();
    let without = ModelConfig { num_kalman_blocks: 0, ..with_k.clone() };
    let (mk, m0) = (KalmanDit::new(with_k.clone()).unwrap(), KalmanDit::new(without).unwrap());
    let fresh = mk.init_params::<f32>(1);
    // every non-Kalman tensor redrawn so the backbone is far from identity
    let backbone_specs: Vec<ParamSpec> =
        m0.param_specs().into_iter().map(|s| ParamSpec { init: Init::Normal(0.2), ..s }).collect();
    let backbone = ParamStore::<f32>::init(&backbone_specs, 2);
    let mut full = fresh.clone();
    for (name, t) in backbone.iter() {
        full.insert(name, t.clone());
    }
    let mut rng = stream(3, "crit1");
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for _ in 0..20 {
        let cond = random_conditioning(&mut rng, &with_k);
        let z = random_latent(&mut rng, with_k.frames, with_k.latent_channels, with_k.latent_height, with_k.latent_width, with_k.patch_size);
        let t = rng.random_range(0.0..=1.0);
        let a = mk.forward(&full, &z, t, &cond).unwrap();
        let b = m0.forward(&backbone, &z, t, &cond).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            worst = worst.max((x - y).abs() as f64);
            scale = scale.max(y.abs() as f64);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-6 && secs < 10.0 && scale > 1e-3,
        format!("max |diff| = {worst:.3e} (< 1e-6), output scale {scale:.3}, {secs:.1}s (< 10s)"),
    )
}

/// Analytic gradients of the total loss against central differences at 64 bits.
fn crit_2() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        embed_dim: 16,
        num_heads: 2,
        num_backbone_blocks: 2,
        num_kalman_blocks: 1,
        ..ModelConfig::for_video(2, 8, 8, 2)
    };
    let model = KalmanDit::new(cfg.clone()).unwrap();
    let specs: Vec<ParamSpec> = model.param_specs().into_iter().map(|s| ParamSpec { init: Init::Normal(0.3), ..s }).collect();
    let params = ParamStore::<f64>::init(&specs, 5);
    let mut rng = stream(6, "crit2");
    let (t, c, h, w, p) = (cfg.frames, cfg.latent_channels, cfg.latent_height, cfg.latent_width, cfg.patch_size);
    let mut conf = LatentVideo::zeros(t, 1, h, w, p);
    conf.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    let example = TrainingExample {
        z1: random_latent(&mut rng, t, c, h, w, p),
        z_pc: random_latent(&mut rng, t, c, h, w, p),
        w: conf,
        cond: random_conditioning(&mut rng, &cfg),
    };
    let flow = FlowConfig::default();
    let items = vec![
        TrainItem { example: &example, t: 0.37, noise: gaussian_like(&example.z1, 7, "n0") },
        TrainItem { example: &example, t: 0.81, noise: gaussian_like(&example.z1, 7, "n1") },
    ];
    let loss = |ps: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        let n = build_loss(&model, &mut g, ps, &items, &flow).unwrap();
        g.value(n.total).item()
    };
    let mut g = Graph::new();
    let nodes = build_loss(&model, &mut g, &params, &items, &flow).unwrap();
    let grads = g.backward(nodes.total);
    let eps = 1e-6;
    let mut worst = (0.0f64, String::new());
    let mut tensors = 0;
    let mut entries = 0;
    let mut zero = Vec::new();
    let mut zero_ok = true;
    for (name, tensor) in params.iter() {
        let analytic = grads.param(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let n = tensor.numel();
        let picks: Vec<usize> = if n <= 48 { (0..n).collect() } else { (0..48).map(|_| rng.random_range(0..n)).collect() };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &i in &picks {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= eps;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        // key biases shift every logit of a query equally, so their exact
        // gradient is zero and only rounding is left on both sides
        if a2.sqrt() < 1e-12 {
            zero.push(name.clone());
            zero_ok &= n2.sqrt() < 1e-7;
        } else {
            let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt());
            if rel > worst.0 {
                worst = (rel, name.clone());
            }
        }
        tensors += 1;
        entries += picks.len();
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-4 && zero_ok && secs < 300.0,
        format!(
            "{tensors} tensors, {entries} entries; worst relative error {:.2e} ({}) (< 1e-4); exactly-zero gradients matched by differences below 1e-7: {zero_ok} ({}); {secs:.0}s (< 300s)",
            worst.0,
            worst.1,
            zero.join(", ")
        ),
    )
}

/// Degenerate settings of the confidence-aware initialisation.
fn crit_3() -> Outcome {
    let mut rng = stream(8, "crit3");
    let (t, c, h, w) = (3, 12, 8, 8);
    let z_pc = random_latent(&mut rng, t, c, h, w, 2);
    let mut conf = LatentVideo::zeros(t, 1, h, w, 2);
    conf.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    let noise = gaussian_like(&z_pc, 9, "eps");
    let pure = FlowConfig { lambda1: 0.0, lambda2: 1.0, ..Default::default() };
    let a = confidence_init(&z_pc, &conf, &noise, &pure).unwrap() == noise;
    let ones = conf.with_data(vec![1.0; conf.data.len()]);
    let b = confidence_init(&z_pc, &ones, &noise, &FlowConfig { lambda1: 1.0, lambda2: 0.0, ..Default::default() }).unwrap() == z_pc;
    let big = LatentVideo::zeros(1, 1, 250, 400, 1);
    let big_w = big.with_data(vec![0.7; big.data.len()]);
    let big_pc = big.with_data(vec![3.0; big.data.len()]);
    let z0 = confidence_init(&big_pc, &big_w, &gaussian_like(&big, 10, "eps"), &pure).unwrap();
    let n = z0.data.len() as f64;
    let mean = z0.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = z0.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    outcome(
        a && b && mean.abs() < 0.02 && (var - 1.0).abs() < 0.02 && z0.data.len() == 100_000,
        format!("λ1=0 gives noise: {a}; λ1=1,λ2=0,w=1 gives z_pc: {b}; 1e5 samples mean {mean:.4}, var {var:.4}"),
    )
}

fn filled(t: usize, c: usize, h: usize, w: usize, v: f32) -> LatentVideo {
    let z = LatentVideo::zeros(t, c, h, w, 1);
    z.with_data(vec![v; z.data.len()])
}

/// Worked examples of the initialisation, interpolation and the losses.
fn crit_4() -> Outcome {
    let mut fails: Vec<&str> = Vec::new();
    let mut check = |ok: bool, what: &'static str| {
        if !ok {
            fails.push(what);
        }
    };
    let one = FlowConfig::default();
    check(one.lambda_grad == 0.05, "default λ_grad = 0.05");
    check(one.lambda1 == 1.0 && one.lambda2 == 1.0, "default λ1 = λ2 = 1");

    let z0 = confidence_init(&filled(2, 3, 4, 4, 2.0), &filled(2, 1, 4, 4, 0.5), &filled(2, 3, 4, 4, 0.0), &one).unwrap();
    check(z0.data.iter().all(|&v| v == 1.0), "w=0.5, z_pc=2, ε=0 → 1");

    let mut rng = stream(11, "crit4");
    let a = random_latent(&mut rng, 2, 3, 4, 4, 1);
    let b = random_latent(&mut rng, 2, 3, 4, 4, 1);
    check(rf_interpolate(&a, &b, 0.0).unwrap() == a, "z_t at t=0");
    check(rf_interpolate(&a, &b, 1.0).unwrap() == b, "z_t at t=1");
    check(rf_interpolate(&filled(1, 1, 2, 2, 0.0), &filled(1, 1, 2, 2, 4.0), 0.25).unwrap().data.iter().all(|&v| v == 1.0), "0→4 at 0.25");
    let (q1, mid, q3) = (rf_interpolate(&a, &b, 0.25).unwrap(), rf_interpolate(&a, &b, 0.5).unwrap(), rf_interpolate(&a, &b, 0.75).unwrap());
    check(mid.data.iter().zip(q1.data.iter().zip(&q3.data)).all(|(&m, (&x, &y))| (m - (x + y) / 2.0).abs() < 1e-7), "affine in t");

    let target = a.with_data(a.data.iter().zip(&b.data).map(|(&x, &y)| y - x).collect());
    check(rf_loss(&target, &a, &b).unwrap() == 0.0, "rf loss of exact velocity");
    check(rf_loss(&filled(1, 1, 1, 1, 1.0), &filled(1, 1, 1, 1, 0.0), &filled(1, 1, 1, 1, 2.0)).unwrap() == 1.0, "rf scalar example");
    let v = random_latent(&mut rng, 2, 3, 4, 4, 1);
    let base = rf_loss(&v, &a, &b).unwrap();
    let cst = 0.3f32;
    let shifted = rf_loss(&v.with_data(v.data.iter().map(|x| x + cst).collect()), &a, &b).unwrap();
    let resid_mean = v.data.iter().zip(&target.data).map(|(&x, &y)| x as f64 - y as f64).sum::<f64>() / v.data.len() as f64;
    let predicted = base + (cst as f64).powi(2) + 2.0 * cst as f64 * resid_mean;
    check((shifted - predicted).abs() < 1e-6, "rf loss under a constant shift");

    check(grad_reg_loss(&filled(1, 2, 3, 3, 0.7), &filled(1, 2, 3, 3, -0.2)).unwrap() == 0.0, "constant fields");
    check(grad_reg_loss(&v.with_data(target.data.iter().map(|x| x + 0.25).collect()), &target).unwrap() == 0.0, "target + constant");
    let hand = filled(1, 1, 2, 2, 0.0).with_data(vec![0.0, 1.0, 0.0, 1.0]);
    check(grad_reg_loss(&hand, &filled(1, 1, 2, 2, 0.0)).unwrap() == 1.0, "2×2 hand example");
    let g0 = grad_reg_loss(&v, &target).unwrap();
    let both = grad_reg_loss(&v.with_data(v.data.iter().map(|x| x + 0.4).collect()), &target.with_data(target.data.iter().map(|x| x + 0.4).collect())).unwrap();
    check((both - g0).abs() < 1e-6, "grad loss ignores a shared constant");

    let no_grad = FlowConfig { lambda_grad: 0.0, ..Default::default() };
    let parts = total_loss(&v, &a, &b, &no_grad).unwrap();
    check(parts.total == rf_loss(&v, &a, &b).unwrap(), "λ_grad = 0 gives rf");
    check(total_loss(&target, &a, &b, &one).unwrap().total == 0.0, "exact velocity gives 0");
    check((1.0 + one.lambda_grad * 2.0 - 1.1f64).abs() < 1e-15, "1 + 0.05·2 = 1.1");
    let parts = total_loss(&v, &a, &b, &one).unwrap();
    check(parts.total == parts.rf + 0.05 * parts.grad, "total = rf + 0.05·grad");
    let n = fails.len();
    outcome(n == 0, if n == 0 { "all worked examples exact".to_string() } else { format!("failed: {fails:?}") })
}

/// Independent z-buffer: every pixel scans all points.
fn oracle_projection(cloud: &ConfidentPointCloud, pose: &CameraPose, k: &CameraIntrinsics) -> Vec<Option<(f64, [f32; 3], f32)>> {
    let mut out = vec![None; k.width * k.height];
    for (py, row) in out.chunks_mut(k.width).enumerate() {
        for (px, cell) in row.iter_mut().enumerate() {
            let mut best: Option<(f64, usize)> = None;
            for (i, p) in cloud.positions().iter().enumerate() {
                let q = pose.rotation() * p + pose.translation();
                if q.z <= NEAR_PLANE {
                    continue;
                }
                let u = (k.fx * q.x / q.z + k.cx).floor();
                let v = (k.fy * q.y / q.z + k.cy).floor();
                if u == px as f64 && v == py as f64 && best.is_none_or(|(d, _)| q.z < d) {
                    best = Some((q.z, i));
                }
            }
            *cell = best.map(|(d, i)| (d, cloud.colors()[i], cloud.confidence()[i]));
        }
    }
    out
}

fn crit_5() -> Outcome {
    let mut rng = stream(12, "crit5");
    let mut mismatched = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..300);
        let pos: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..3.0)))
            .collect();
        // a few exact depth ties exercise the first-wins rule
        let pos: Vec<Vector3<f64>> = pos.iter().enumerate().map(|(i, p)| if i % 7 == 3 { pos[i - 1] } else { *p }).collect();
        let col = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let conf = (0..n).map(|_| rng.random()).collect();
        let cloud = ConfidentPointCloud::new(pos, col, conf).unwrap();
        let k = CameraIntrinsics::new(rng.random_range(5.0..20.0), rng.random_range(5.0..20.0), 6.0, 5.0, 12, 10).unwrap();
        let pose = CameraPose::from_axis_angle(&Vector3::new(0.1, 1.0, 0.2), rng.random_range(-0.4..0.4), Vector3::new(0.0, 0.0, 1.0));
        let got = project_point_cloud(&cloud, &pose, &k);
        let want = oracle_projection(&cloud, &pose, &k);
        for (i, w) in want.iter().enumerate() {
            let ok = match w {
                None => !got.mask[i] && got.rgb[i] == [0.0; 3] && got.conf[i] == 0.0 && got.depth[i] == f64::INFINITY,
                Some((d, c, f)) => got.mask[i] && got.depth[i] == *d && got.rgb[i] == *c && got.conf[i] == *f,
            };
            mismatched += usize::from(!ok);
        }
    }
    let mut plucker_worst = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let pose = random_pose(&mut rng);
        let k = CameraIntrinsics::new(rng.random_range(2.0..50.0), rng.random_range(2.0..50.0), rng.random_range(0.0..6.0), rng.random_range(0.0..5.0), 6, 5).unwrap();
        let img = plucker_embedding(&pose, &k);
        for (d, m) in img.directions.iter().zip(&img.moments) {
            plucker_worst.0 = plucker_worst.0.max(d.dot(m).abs());
            plucker_worst.1 = plucker_worst.1.max((d.norm() - 1.0).abs());
        }
    }
    let mut kabsch_worst = 0.0f64;
    for _ in 0..200 {
        let motion = random_pose(&mut rng);
        let n = rng.random_range(3..40);
        let src: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
        let dst: Vec<Vector3<f64>> = src.iter().map(|p| motion.apply(p)).collect();
        let est = kabsch_align(&src, &dst).unwrap();
        kabsch_worst = kabsch_worst
            .max((est.rotation() - motion.rotation()).abs().max())
            .max((est.translation() - motion.translation()).abs().max());
    }
    outcome(
        mismatched == 0 && plucker_worst.0 < 1e-9 && plucker_worst.1 < 1e-9 && kabsch_worst < 1e-6,
        format!(
            "z-buffer mismatches {mismatched}/100 clouds; Plücker max |d·m| {:.1e}, max |‖d‖−1| {:.1e} (< 1e-9); Kabsch max error {kabsch_worst:.1e} (< 1e-6)",
            plucker_worst.0, plucker_worst.1
        ),
    )
}

fn crit_6() -> Outcome {
    let mut rng = stream(13, "crit6");
    let traj: Vec<CameraPose> = (0..5).map(|_| random_pose(&mut rng)).collect();
    let e_id = (translation_error(&traj, &traj).unwrap(), rotation_error(&traj, &traj).unwrap());
    let quarter = CameraPose::from_axis_angle(&Vector3::new(0.3, -1.0, 0.5), std::f64::consts::FRAC_PI_2, Vector3::zeros());
    let e_90 = rotation_error(&[quarter], &[CameraPose::identity()]).unwrap();
    let shifted = [
        CameraPose::from_axis_angle(&Vector3::z(), 0.0, Vector3::new(0.6, 0.8, 0.0)),
        CameraPose::from_axis_angle(&Vector3::z(), 0.0, Vector3::new(0.0, 0.0, 3.0)),
    ];
    let e_t = translation_error(&shifted, &[CameraPose::identity(); 2]).unwrap();
    // trace(A·Bᵀ) = −1 − 1e-9, just past the arccos domain
    let a = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0 - 5e-10, -1.0 - 5e-10));
    let clamped = rotation_angle(&a, &Matrix3::identity());
    let rel = relative_to_first(&traj);
    let first_ok = rel[0].rotation().iter().zip(Matrix3::<f64>::identity().iter()).all(|(x, y)| (x - y).abs() < 1e-12);
    let pass = e_id == (0.0, 0.0)
        && (e_90 - std::f64::consts::FRAC_PI_2).abs() < 1e-9
        && (e_t - 2.0).abs() < 1e-9
        && (clamped - std::f64::consts::PI).abs() < 1e-9
        && first_ok;
    outcome(
        pass,
        format!(
            "identity ({}, {}); 90° → {e_90:.12}; mean of norms 1,3 → {e_t:.12}; trace −1−1e-9 → {clamped:.12}",
            e_id.0, e_id.1
        ),
    )
}

fn crit_7() -> Outcome {
    let mut rng = stream(14, "crit7");
    let z0 = random_latent(&mut rng, 3, 4, 5, 5, 1);
    let zero = |z: &LatentVideo, _t: f64| z.with_data(vec![0.0; z.data.len()]);
    let zero_ok = [1, 2, 7, 50].iter().all(|&s| sample(&zero, &z0, s, None).unwrap() == z0);
    let mut const_ok = true;
    for trial in 0..4 {
        let c: f32 = rng.random_range(-2.0..2.0) * if trial == 0 { 1.0 } else { 0.37 };
        let field = move |z: &LatentVideo, _t: f64| z.with_data(vec![c; z.data.len()]);
        let want = z0.with_data(z0.data.iter().map(|&x| x + c).collect());
        for steps in 1..=64 {
            const_ok &= sample(&field, &z0, steps, None).unwrap() == want;
        }
    }
    let decay = |z: &LatentVideo, _t: f64| z.with_data(z.data.iter().map(|&x| -x).collect());
    let err = |steps: usize| {
        let z = sample(&decay, &z0, steps, None).unwrap();
        z.data.iter().zip(&z0.data).map(|(&a, &b)| (a as f64 - b as f64 * (-1.0f64).exp()).abs()).fold(0.0, f64::max)
    };
    let ratios: Vec<f64> = [(25, 50), (50, 100), (100, 200)].iter().map(|&(a, b)| err(a) / err(b)).collect();
    let ratio_ok = ratios.iter().all(|r| (1.8..=2.2).contains(r));
    let target = random_latent(&mut rng, 3, 4, 5, 5, 1);
    let pinned = sample(&decay, &z0, 10, Some(&EndpointConstraint { frames: vec![0, 2], target: &target })).unwrap();
    let pin_ok = pinned.frame(0) == target.frame(0) && pinned.frame(2) == target.frame(2);
    outcome(
        zero_ok && const_ok && ratio_ok && pin_ok,
        format!("zero field identity {zero_ok}; constant field exact for 1..=64 steps {const_ok}; error ratios {ratios:.3?} (in [1.8, 2.2]); endpoints pinned {pin_ok}"),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Overfits the default model on four scenes.
fn crit_8() -> Outcome {
    let start = Instant::now();
    const STEPS: u64 = 3000;
    let scenes: Vec<_> =
        (0..4).map(|s| (pipeline::scene_name(s as usize), make_scene(&SceneSpec { seed: s, ..Default::default() }).unwrap())).collect();
    let cfg = RunConfig { flow: FlowConfig { learning_rate: 1e-3, ..Default::default() }, ..Default::default() };
    let (model_cfg, flow) = cfg.resolve(9, 32, 32).unwrap();
    assert_eq!((model_cfg.num_kalman_blocks, model_cfg.frames), (2, 9));
    let model = KalmanDit::new(model_cfg.clone()).unwrap();
    let examples = examples_of(&scenes, model_cfg.patch_size).unwrap();
    let mut state = TrainState::fresh(&model, &flow);
    let mut losses = Vec::with_capacity(STEPS as usize);
    train_loop(&model, &flow, &examples, &mut state, STEPS, |rec, _| {
        losses.push(rec.rf_loss);
        Ok(())
    })
    .unwrap();
    let early = mean(&losses[..10]);
    let late = mean(&losses[losses.len() - 100..]);
    let videos = sample_scenes(&model, &state.params, &flow, &scenes, flow.sample_steps, 1).unwrap();
    let mut psnrs = Vec::new();
    let mut endpoints_exact = true;
    for ((_, v), (_, s)) in videos.iter().zip(&scenes) {
        let t = s.frames.frames;
        for f in 1..t - 1 {
            psnrs.push(confflow::eval::psnr(v.frame(f), s.frames.frame(f)));
        }
        endpoints_exact &= v.frame(0) == s.frames.frame(0) && v.frame(t - 1) == s.frames.frame(t - 1);
    }
    let psnr = mean(&psnrs);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        late <= 0.2 * early && psnr >= 22.0 && endpoints_exact && secs <= 900.0,
        format!(
            "rf loss {early:.4} (first 10 steps) → {late:.4} (last 100), ratio {:.3} (≤ 0.2); intermediate PSNR {psnr:.2} dB (≥ 22); endpoints exact {endpoints_exact}; {secs:.0}s (≤ 900s)",
            late / early
        ),
    )
}

const SWEEP_SEEDS: usize = 5;
const SWEEP_STEPS: u64 = 2000;
const SWEEP_SAMPLE_STEPS: usize = 20;

/// Small benchmark shared by the ablation ordering and the noise sweep.
fn easy_config() -> RunConfig {
    RunConfig {
        model: ModelConfig { embed_dim: 64, num_heads: 4, num_backbone_blocks: 4, num_kalman_blocks: 2, ..Default::default() },
        flow: FlowConfig { learning_rate: 1e-3, seed: 11, ..Default::default() },
        ..Default::default()
    }
}

fn easy_scenes(seed: u64, sigma: f64) -> Vec<(String, SceneSample)> {
    let spec = SceneSpec { height: 16, width: 16, num_frames: 5, num_points: 2048, depth_noise_sigma: sigma, ..Default::default() };
    (0..4)
        .map(|i| (format!("train{i}"), make_scene(&SceneSpec { seed: derive_seed(seed, &format!("train/{i}")), ..spec.clone() }).unwrap()))
        .collect()
}

fn stat(v: &[f64]) -> String {
    let s = pipeline::Stat::of(v);
    format!("{:.4}±{:.4}", s.mean, s.std)
}

fn crit_9() -> Outcome {
    let cfg = easy_config();
    let variants = [Variant::Full, Variant::C, Variant::D];
    let mut e_t = vec![Vec::new(); 3];
    let mut e_r = vec![Vec::new(); 3];
    for k in 0..SWEEP_SEEDS {
        let seed = run_seed(cfg.flow.seed, k);
        let scenes = easy_scenes(seed, 0.02);
        let mut line = format!("    seed {seed:>20}:");
        for (j, &v) in variants.iter().enumerate() {
            let (r, _) = run_variant(&cfg, v, seed, SWEEP_STEPS, SWEEP_SAMPLE_STEPS, &scenes, &scenes).unwrap();
            e_t[j].push(r.aggregate.e_t);
            e_r[j].push(r.aggregate.e_r);
            line += &format!("  {v}: E_t {:.4} E_r {:.4} PSNR {:.2}", r.aggregate.e_t, r.aggregate.e_r, r.aggregate.psnr_intermediate);
        }
        println!("{line}");
    }
    let (mt, mr): (Vec<f64>, Vec<f64>) = (e_t.iter().map(|v| mean(v)).collect(), e_r.iter().map(|v| mean(v)).collect());
    let pass = mt[0] < mt[1] && mt[0] < mt[2] && mr[0] < mr[1] && mr[0] < mr[2];
    outcome(
        pass,
        format!(
            "{SWEEP_SEEDS} seeds; E_t full {} c {} d {}; E_r full {} c {} d {}",
            stat(&e_t[0]),
            stat(&e_t[1]),
            stat(&e_t[2]),
            stat(&e_r[0]),
            stat(&e_r[1]),
            stat(&e_r[2])
        ),
    )
}

fn crit_10() -> Outcome {
    let cfg = easy_config();
    let sigmas = [0.0, 0.05, 0.15];
    let mut psnr = vec![Vec::new(); sigmas.len()];
    for k in 0..SWEEP_SEEDS {
        let seed = run_seed(cfg.flow.seed, k);
        let mut line = format!("    seed {seed:>20}:");
        for (j, &sigma) in sigmas.iter().enumerate() {
            let scenes = easy_scenes(seed, sigma);
            let (r, _) = run_variant(&cfg, Variant::Full, seed, SWEEP_STEPS, SWEEP_SAMPLE_STEPS, &scenes, &scenes).unwrap();
            psnr[j].push(r.aggregate.psnr_intermediate);
            line += &format!("  σ={sigma}: PSNR {:.2}", r.aggregate.psnr_intermediate);
        }
        println!("{line}");
    }
    let m: Vec<f64> = psnr.iter().map(|v| mean(v)).collect();
    let pass = m.windows(2).all(|w| w[0] >= w[1]);
    outcome(
        pass,
        format!("mean intermediate PSNR over {SWEEP_SEEDS} seeds: σ=0 {}, σ=0.05 {}, σ=0.15 {} (non-increasing)", stat(&psnr[0]), stat(&psnr[1]), stat(&psnr[2])),
    )
}

fn tree_bytes(dir: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "train_log.jsonl") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// gen → train → sample → eval twice, with every artifact compared.
fn crit_11() -> Outcome {
    let run = |root: &std::path::Path| {
        let cfg = RunConfig {
            scene: SceneSpec { seed: 41, height: 16, width: 16, num_frames: 5, num_points: 2048, ..Default::default() },
            model: ModelConfig { embed_dim: 32, num_heads: 2, num_backbone_blocks: 2, num_kalman_blocks: 2, ..Default::default() },
            flow: FlowConfig { learning_rate: 1e-3, seed: 41, ..Default::default() },
            variant: Variant::Full,
            paths: pipeline::Paths { data_dir: root.join("data"), checkpoint: root.join("run/ck.safetensors"), report_dir: root.join("report") },
        };
        pipeline::gen_scenes(&cfg.paths.data_dir, &cfg.scene, 3, false, true).unwrap();
        pipeline::train(&cfg, &pipeline::TrainOptions { steps: 60, save_every: 20, resume: false, quiet: true }).unwrap();
        let gen = root.join("gen");
        pipeline::sample(&cfg, &pipeline::SampleOptions { steps: 10, seed: 41, out: gen.clone(), quiet: true }).unwrap();
        pipeline::evaluate(&cfg.paths.data_dir, &gen, &cfg.paths.report_dir).unwrap();
    };
    // same directory both times: resolved configs record absolute paths
    let dir = tempfile::tempdir().unwrap();
    run(dir.path());
    let ta = tree_bytes(dir.path());
    for e in std::fs::read_dir(dir.path()).unwrap() {
        std::fs::remove_dir_all(e.unwrap().path()).unwrap();
    }
    run(dir.path());
    let tb = tree_bytes(dir.path());
    let files = ta.len();
    let differing: Vec<String> =
        ta.iter().zip(&tb).filter(|(x, y)| x != y).map(|(x, _)| x.0.display().to_string()).collect();
    let report = ta.iter().any(|(p, _)| p.ends_with("report.json"));
    outcome(
        ta.len() == tb.len() && differing.is_empty() && report && files > 10,
        format!("{files} artifacts compared byte-for-byte (dataset, checkpoint, frames, latents, report); differing: {differing:?}"),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "zero-init transparency", crit_1),
        (2, "gradient oracle", crit_2),
        (3, "initialisation degenerations", crit_3),
        (4, "loss and interpolation exactness", crit_4),
        (5, "geometry oracles", crit_5),
        (6, "pose metrics", crit_6),
        (7, "sampler", crit_7),
        (8, "overfit smoke test", crit_8),
        (9, "ablation ordering", crit_9),
        (10, "noise-sweep monotonicity", crit_10),
        (11, "end-to-end determinism", crit_11),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // `cargo test -- --list` and friends
    if std::env::args().any(|a| a == "--list") {
        for (id, name, _) in &criteria {
            println!("criterion_{id:02}: test ({name})");
        }
        return;
    }
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let tag = if res.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {id:>2} {name}: {} [{:.1}s]", res.detail, start.elapsed().as_secs_f64());
        if !res.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
